import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfcf import autodiff as ad
from nfcf.autodiff import Tape, Tensor
from nfcf.errors import ContractError, DegenerateDirectionError
from nfcf.fairness import (
    bias_vector,
    debias,
    df_penalty,
    epsilon_item,
    epsilon_mean,
    fairness_report,
    group_mean,
    huber_uabs_penalty,
    u_abs,
)

from oracles import brute_epsilon_item, brute_epsilon_mean, brute_u_abs, fd_gradient


class TestGroupMean:
    def test_mean_of_two(self):
        table = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(group_mean(table, ["f", "f"], "f"), [0.5, 0.5])

    def test_singleton(self):
        table = np.array([[2.0, 3.0], [9.0, 9.0]])
        assert np.allclose(group_mean(table, ["f", "m"], "f"), [2.0, 3.0])

    def test_three_vectors(self):
        table = np.array([[1.0, 2.0], [3.0, 5.0], [-1.0, 0.0], [100.0, 100.0]])
        got = group_mean(table, ["m", "m", "m", "f"], "m")
        assert np.allclose(got, [1.0, 7.0 / 3.0])

    def test_empty_group(self):
        with pytest.raises(ContractError):
            group_mean(np.zeros((2, 2)), ["m", "m"], "f")


class TestBiasVector:
    def test_normalized_difference(self):
        table = np.array([[1.0, 0.0], [0.0, 1.0]])
        v = bias_vector(table, ["f", "m"])
        assert np.allclose(v, np.array([1.0, -1.0]) / math.sqrt(2.0))

    def test_axis_case(self):
        table = np.array([[2.0, 0.0], [0.0, 0.0]])
        assert np.allclose(bias_vector(table, ["f", "m"]), [1.0, 0.0])

    def test_identical_means_degenerate(self):
        table = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(DegenerateDirectionError):
            bias_vector(table, ["f", "m"])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        table = rng.normal(size=(8, 5))
        genders = np.array(["m", "f"] * 4)
        v = bias_vector(table, genders)
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-9


class TestDebias:
    def test_orthogonal_input_unchanged(self):
        v = np.array([1.0, -1.0]) / math.sqrt(2.0)
        p = np.array([1.0, 1.0])
        assert np.allclose(debias(p, v), p)

    def test_projection_arithmetic(self):
        v = np.array([1.0, -1.0]) / math.sqrt(2.0)
        assert np.allclose(debias(np.array([1.0, 0.0]), v), [0.5, 0.5])

    def test_matrix_rows(self):
        v = np.array([0.0, 1.0])
        rows = np.array([[3.0, 4.0], [1.0, -2.0]])
        assert np.allclose(debias(rows, v), [[3.0, 0.0], [1.0, 0.0]])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_idempotent_and_orthogonal(self, seed):
        rng = np.random.default_rng(seed)
        table = rng.normal(size=(6, 4))
        v = rng.normal(size=4)
        v /= np.linalg.norm(v)
        once = debias(table, v)
        assert np.max(np.abs(once @ v)) <= 1e-9
        assert np.allclose(debias(once, v), once, atol=1e-12)

    def test_group_mean_difference_vanishes_after_debias(self):
        rng = np.random.default_rng(3)
        table = rng.normal(size=(50, 8)) + np.where(np.arange(50)[:, None] % 2 == 0, 0.5, -0.5)
        genders = np.array(["m", "f"] * 25)
        v = bias_vector(table, genders)
        debiased = debias(table, v)
        diff = group_mean(debiased, genders, "f") - group_mean(debiased, genders, "m")
        assert abs(float(diff @ v)) <= 1e-9
        # the direction is the normalized difference, so the whole difference dies
        assert np.linalg.norm(diff) <= 1e-9

    def test_non_unit_direction_rejected(self):
        with pytest.raises(ContractError):
            debias(np.ones(3), np.array([1.0, 1.0, 1.0]))


class TestEpsilonItem:
    def test_symmetric_counts_zero(self):
        scores = np.array([0.4, 0.4, 0.7, 0.7])
        assert epsilon_item(scores, ["m", "f", "m", "f"], alpha=1.0) == pytest.approx(0.0, abs=1e-15)

    def test_two_by_two_hand_case(self):
        scores = np.array([1.0, 1.0, 0.0, 0.0])
        genders = ["m", "m", "f", "f"]
        assert epsilon_item(scores, genders, alpha=1.0) == pytest.approx(math.log(3.0), abs=1e-12)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.random(10)
        genders = np.array(["m"] * 4 + ["f"] * 6)
        flipped = np.where(genders == "m", "f", "m")
        a = epsilon_item(scores, genders, alpha=0.7)
        b = epsilon_item(scores, flipped, alpha=0.7)
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            genders = rng.choice(["m", "f"], size=n)
            if not {"m", "f"} <= set(genders):
                continue
            scores = rng.random(n)
            alpha = float(rng.uniform(0.2, 3.0))
            mine = epsilon_item(scores, genders, alpha)
            brute = brute_epsilon_item(scores.tolist(), genders.tolist(), alpha)
            assert mine == pytest.approx(brute, abs=1e-12)

    @given(
        st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6),
        st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6),
    )
    @settings(max_examples=60, deadline=None)
    def test_alpha_monotone_for_equal_group_sizes(self, male_scores, female_scores):
        n = min(len(male_scores), len(female_scores))
        scores = np.array(male_scores[:n] + female_scores[:n])
        genders = ["m"] * n + ["f"] * n
        values = [epsilon_item(scores, genders, alpha) for alpha in (0.25, 0.5, 1.0, 2.0, 4.0)]
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-12

    def test_positive_ratio_scale_invariance_in_small_alpha_limit(self):
        # with equal group sizes the (N + 2a) factors cancel; as alpha -> 0 the
        # positive-outcome ratio approaches S_m / S_f, which scaling cannot move
        base = np.array([0.8, 0.6, 0.2, 0.1])
        genders = ["m", "m", "f", "f"]
        alpha = 1e-9

        def pos_ratio(scale):
            s = base * scale
            s_m, s_f = s[0] + s[1], s[2] + s[3]
            return (s_m + alpha) / (s_f + alpha)

        assert pos_ratio(1.0) == pytest.approx(pos_ratio(0.5), rel=1e-6)

    def test_absent_group_rejected(self):
        with pytest.raises(ContractError):
            epsilon_item(np.array([0.5]), ["m"], alpha=1.0)

    def test_scores_must_be_probabilities(self):
        with pytest.raises(ContractError):
            epsilon_item(np.array([1.5, 0.2]), ["m", "f"], alpha=1.0)


class TestEpsilonMean:
    def test_examples(self):
        assert epsilon_mean([0.1, 0.3]) == pytest.approx(0.2, abs=1e-15)
        assert epsilon_mean([0.0, 0.0, 0.0]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            epsilon_mean([])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        values = rng.random(17).tolist()
        assert epsilon_mean(values) == pytest.approx(brute_epsilon_mean(values), abs=1e-12)


class TestUAbs:
    def test_identical_error_magnitudes(self):
        assert u_abs([0.6], [0.3], [0.1], [0.4]) == pytest.approx(0.0, abs=1e-15)

    def test_single_item_hand_case(self):
        # disadvantaged error 0.3, advantaged error 0.1
        assert u_abs([0.8], [0.5], [0.6], [0.5]) == pytest.approx(0.2, abs=1e-15)

    def test_nan_items_skipped(self):
        got = u_abs([0.8, np.nan], [0.5, np.nan], [0.6, 0.2], [0.5, 0.1])
        assert got == pytest.approx(0.2, abs=1e-15)

    def test_no_common_items(self):
        with pytest.raises(ContractError):
            u_abs([np.nan], [np.nan], [0.1], [0.1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n_u, n_i = int(rng.integers(2, 7)), int(rng.integers(1, 7))
            genders = rng.choice(["m", "f"], size=n_u)
            if not {"m", "f"} <= set(genders):
                continue
            scores = rng.random((n_u, n_i))
            observed = (rng.random((n_u, n_i)) < 0.4).astype(float)
            male, female = genders == "m", genders == "f"
            mine = u_abs(
                scores[female].mean(axis=0),
                observed[female].mean(axis=0),
                scores[male].mean(axis=0),
                observed[male].mean(axis=0),
            )
            brute = brute_u_abs(scores.tolist(), observed.tolist(), genders.tolist())
            assert mine == pytest.approx(brute, abs=1e-12)


class TestDfPenalty:
    def test_balanced_batch_no_penalty(self):
        scores = Tensor(np.array([0.5, 0.5, 0.9, 0.9]))
        out = df_penalty(scores, ["m", "f", "m", "f"], [0, 0, 1, 1], alpha=1.0)
        assert out.item() == pytest.approx(0.0, abs=1e-15)

    def test_hinge_identity_matches_brute_epsilon(self):
        rng = np.random.default_rng(2)
        scores_np = rng.random(12)
        genders = np.array(["m", "f"] * 6)
        items = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2])
        expected = brute_epsilon_mean(
            [
                brute_epsilon_item(
                    scores_np[items == j].tolist(), genders[items == j].tolist(), 1.0
                )
                for j in (0, 1, 2)
            ]
        )
        out = df_penalty(Tensor(scores_np), genders, items, alpha=1.0, eps0=0.0)
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_hinge_threshold(self):
        rng = np.random.default_rng(2)
        scores = Tensor(rng.random(8))
        genders = ["m", "f"] * 4
        items = [0] * 8
        active = df_penalty(scores, genders, items, alpha=1.0, eps0=0.0).item()
        assert df_penalty(scores, genders, items, alpha=1.0, eps0=active + 1.0).item() == 0.0

    def test_single_gender_item_contributes_nothing(self):
        scores = Tensor(np.array([0.9, 0.1, 0.9, 0.1]))
        only_male = df_penalty(scores, ["m", "m", "m", "m"], [0, 0, 1, 1], alpha=1.0)
        assert only_male.item() == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        base = rng.uniform(0.05, 0.95, size=10)
        genders = np.array(["m", "f"] * 5)
        items = np.array([0, 0, 1, 1, 0, 1, 0, 1, 0, 1])
        t = Tensor(base.copy(), requires_grad=True)

        def loss():
            return df_penalty(t, genders, items, alpha=0.8, eps0=0.0)

        with Tape() as tape:
            grads = tape.backward(loss(), [t])
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            fd = fd_gradient(lambda: loss().item(), flat, j)
            assert abs(fd - grads[t][j]) <= 1e-4 * max(abs(fd), abs(grads[t][j]), 1e-6)

    def test_empty_batch(self):
        assert df_penalty(Tensor(np.zeros(0)), [], [], alpha=1.0).item() == 0.0


class TestHuberPenalty:
    def test_zero_discrepancy(self):
        scores = Tensor(np.array([0.5, 0.5]))
        out = huber_uabs_penalty(scores, [0.5, 0.5], ["m", "f"], [0, 0], delta=1.0)
        assert out.item() == pytest.approx(0.0, abs=1e-15)

    def test_quadratic_region_closed_form(self):
        # female error 1.0 (huber -> 0.5 at delta=1), male error 0: outer 0.5^2/2
        scores = Tensor(np.array([1.0, 0.5]))
        out = huber_uabs_penalty(scores, [0.0, 0.5], ["f", "m"], [0, 0], delta=1.0)
        assert out.item() == pytest.approx(0.125, abs=1e-12)

    def test_smooth_at_delta_boundary(self):
        delta = 1.0
        genders = ["f", "m"]
        items = [0, 0]

        def value(err):
            scores = Tensor(np.array([err, 0.0]))
            return huber_uabs_penalty(scores, [0.0, 0.0], genders, items, delta).item()

        h = 1e-7
        left = (value(delta) - value(delta - h)) / h
        right = (value(delta + h) - value(delta)) / h
        assert abs(left - right) <= 1e-5

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        t = Tensor(rng.uniform(0.1, 0.9, size=8), requires_grad=True)
        targets = (rng.random(8) < 0.5).astype(float)
        genders = np.array(["m", "f"] * 4)
        items = np.array([0, 0, 1, 1, 0, 0, 1, 1])

        def loss():
            return huber_uabs_penalty(t, targets, genders, items, delta=0.4)

        with Tape() as tape:
            grads = tape.backward(loss(), [t])
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            fd = fd_gradient(lambda: loss().item(), flat, j)
            assert abs(fd - grads[t][j]) <= 1e-4 * max(abs(fd), abs(grads[t][j]), 1e-6)


class TestFairnessReport:
    def test_report_structure_and_json(self, tmp_path):
        rng = np.random.default_rng(0)
        scores = rng.random((6, 3))
        observed = (rng.random((6, 3)) < 0.3).astype(float)
        genders = ["m", "f", "m", "f", "m", "f"]
        report = fairness_report(scores, observed, genders, ["a", "b", "c"], alpha=1.0)
        assert set(report.epsilon_per_item) == {"a", "b", "c"}
        assert report.epsilon_mean == pytest.approx(
            brute_epsilon_mean(list(report.epsilon_per_item.values())), abs=1e-12
        )
        report.save(tmp_path / "fairness.json")
        payload = json.loads((tmp_path / "fairness.json").read_text())
        assert set(payload) == {"alpha", "epsilon_per_item", "epsilon_mean", "u_abs", "skipped_items"}

    def test_unlabeled_users_ignored(self):
        scores = np.array([[0.9], [0.1], [0.5]])
        observed = np.zeros((3, 1))
        with_unknown = fairness_report(scores, observed, ["m", "f", "u"], ["x"], alpha=1.0)
        without = fairness_report(scores[:2], observed[:2], ["m", "f"], ["x"], alpha=1.0)
        assert with_unknown.epsilon_per_item["x"] == pytest.approx(
            without.epsilon_per_item["x"], abs=1e-12
        )
