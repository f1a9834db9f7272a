import math

import numpy as np
import pytest

from nfcf.errors import CheckpointError, ConfigError, ContractError
from nfcf.models import (
    init_mf,
    init_ncf,
    init_params,
    load_params,
    mf_score,
    ncf_forward,
    save_params,
    transfer_for_finetune,
    transfer_mf_for_finetune,
)


class TestInit:
    def test_paper_scale_architecture(self):
        p = init_params("ncf", 30, 20, 128, tower=(256, 64, 32, 16), seed=0)
        assert p.user_emb.shape == (30, 128)
        assert [w.shape for w in p.weights] == [(256, 64), (64, 32), (32, 16)]
        assert p.out_weights.shape == (16, 1)

    def test_small_shape_arithmetic(self):
        p = init_ncf(4, 3, 2, (4, 2), seed=0)
        assert p.weights[0].shape == (4, 2)

    def test_same_seed_identical(self):
        a = init_ncf(5, 4, 3, (6, 2), seed=9)
        b = init_ncf(5, 4, 3, (6, 2), seed=9)
        for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert np.array_equal(ta.data, tb.data)

    def test_tower_must_open_at_twice_the_factors(self):
        with pytest.raises(ConfigError):
            init_ncf(4, 3, 2, (6, 2), seed=0)

    def test_tower_must_strictly_decrease(self):
        with pytest.raises(ConfigError):
            init_ncf(4, 3, 2, (4, 4), seed=0)

    def test_embedding_scale(self):
        p = init_ncf(400, 400, 16, (32, 8), seed=1)
        assert abs(float(p.user_emb.data.std()) - 0.01) < 0.002

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            init_params("gbm", 3, 3, 2)


class TestMFScore:
    def test_zero_model_scores_half(self):
        p = init_mf(3, 3, 2, seed=0)
        for _, t in p.named_tensors():
            t.data[...] = 0.0
        assert mf_score(p, 0, 0) == 0.5

    def test_unit_inner_product(self):
        p = init_mf(1, 1, 2, seed=0)
        p.user_emb.data[0] = [1.0, 0.0]
        p.item_emb.data[0] = [1.0, 0.0]
        p.user_bias.data[...] = 0.0
        p.item_bias.data[...] = 0.0
        p.mu.data[...] = 0.0
        assert mf_score(p, 0, 0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)

    def test_monotone_in_inner_product(self):
        p = init_mf(1, 3, 2, seed=0)
        p.user_emb.data[0] = [1.0, 0.5]
        p.item_emb.data[0] = [0.1, 0.1]
        p.item_emb.data[1] = [0.5, 0.5]
        p.item_emb.data[2] = [1.0, 1.0]
        p.user_bias.data[...] = 0.0
        p.item_bias.data[...] = 0.0
        scores = [mf_score(p, 0, i) for i in range(3)]
        assert scores[0] < scores[1] < scores[2]

    def test_index_out_of_range(self):
        p = init_mf(2, 2, 2, seed=0)
        with pytest.raises(ContractError):
            mf_score(p, 2, 0)


class TestNCFForward:
    def test_zero_weights_give_half(self):
        p = init_ncf(3, 3, 2, (4, 2), seed=0)
        for _, t in p.named_tensors():
            t.data[...] = 0.0
        out = ncf_forward(p, [0, 1, 2], [0, 1, 2])
        assert np.all(out.data == 0.5)

    def test_hand_forward_single_pair(self):
        p = init_ncf(1, 1, 1, (2, 1), seed=0)
        p.user_emb.data[0] = [0.3]
        p.item_emb.data[0] = [0.2]
        p.weights[0].data[:] = [[0.5], [1.5]]
        p.biases[0].data[:] = [0.1]
        p.out_weights.data[:] = [[2.0]]
        hidden = max(0.0, 0.3 * 0.5 + 0.2 * 1.5 + 0.1)
        expected = 1.0 / (1.0 + math.exp(-2.0 * hidden))
        assert ncf_forward(p, [0], [0]).data[0] == pytest.approx(expected, abs=1e-12)

    def test_batch_matches_single_pair(self):
        p = init_ncf(6, 5, 3, (6, 2), seed=4)
        p.out_weights.data[:] = 0.3  # zero output weights would make this vacuous
        users = np.array([0, 3, 5, 1])
        items = np.array([2, 2, 0, 4])
        batch = ncf_forward(p, users, items).data
        for k in range(4):
            single = ncf_forward(p, [users[k]], [items[k]]).data[0]
            assert batch[k] == single

    def test_scores_strictly_inside_unit_interval(self):
        p = init_ncf(10, 10, 2, (4, 2), seed=2)
        out = ncf_forward(p, np.arange(10), np.arange(10)).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_batch_shape_mismatch(self):
        p = init_ncf(3, 3, 2, (4, 2), seed=0)
        with pytest.raises(ContractError):
            ncf_forward(p, [0, 1], [0])


class TestTransfer:
    def test_fresh_item_table_and_frozen_users(self):
        pre = init_ncf(5, 7, 3, (6, 2), seed=1)
        table = pre.user_emb.data + 1.0
        fine = transfer_for_finetune(pre, table, n_sensitive=4, seed=2)
        assert fine.item_emb.shape == (4, 3)
        assert fine.user_emb.requires_grad is False
        assert np.array_equal(fine.user_emb.data, table)
        assert fine.user_emb is not pre.user_emb

    def test_pretrained_never_mutated(self):
        pre = init_ncf(5, 7, 3, (6, 2), seed=1)
        snapshot = [t.data.copy() for _, t in pre.named_tensors()]
        fine = transfer_for_finetune(pre, pre.user_emb.data, n_sensitive=4, seed=2)
        fine.weights[0].data[...] = 99.0
        fine.user_emb.data[...] = -1.0
        for (_, t), before in zip(pre.named_tensors(), snapshot):
            assert np.array_equal(t.data, before)

    def test_transfer_copies_tower_exactly(self):
        pre = init_ncf(5, 7, 3, (6, 2), seed=1)
        fine = transfer_for_finetune(pre, pre.user_emb.data, n_sensitive=4, seed=2)
        for wa, wb in zip(pre.weights, fine.weights):
            assert np.array_equal(wa.data, wb.data)
        assert np.array_equal(pre.out_weights.data, fine.out_weights.data)

    def test_output_weights_optional(self):
        pre = init_ncf(5, 7, 3, (6, 2), seed=1)
        pre.out_weights.data[:] = 7.0
        fine = transfer_for_finetune(pre, pre.user_emb.data, 4, seed=2, transfer_output=False)
        assert not np.array_equal(fine.out_weights.data, pre.out_weights.data)

    def test_dimension_mismatch(self):
        pre = init_ncf(5, 7, 3, (6, 2), seed=1)
        with pytest.raises(ContractError):
            transfer_for_finetune(pre, np.zeros((5, 4)), n_sensitive=4)

    def test_mf_transfer_keeps_user_bias_and_mu(self):
        pre = init_mf(5, 7, 3, seed=1)
        pre.user_bias.data[:] = 0.25
        pre.mu.data[...] = -0.5
        fine = transfer_mf_for_finetune(pre, pre.user_emb.data, n_sensitive=4, seed=2)
        assert np.array_equal(fine.user_bias.data, pre.user_bias.data)
        assert fine.user_bias.requires_grad  # fine-tuned, unlike the user table
        assert float(fine.mu.data) == -0.5
        assert fine.item_bias.shape == (4,)
        assert fine.user_emb.requires_grad is False


class TestCheckpointIO:
    def test_round_trip_is_bitwise(self, tmp_path):
        for params in (init_ncf(4, 5, 2, (4, 2), seed=3), init_mf(4, 5, 2, seed=3)):
            params.user_emb.data[0, 0] = 1.0 / 3.0
            path = tmp_path / "model.ckpt"
            save_params(params, path, extra={"note": "x"})
            loaded = load_params(path)
            assert type(loaded) is type(params)
            for (na, ta), (nb, tb) in zip(params.named_tensors(), loaded.named_tensors()):
                assert na == nb
                assert ta.data.tobytes() == tb.data.tobytes()
                assert ta.requires_grad == tb.requires_grad

    def test_frozen_flag_round_trips(self, tmp_path):
        pre = init_ncf(3, 3, 2, (4, 2), seed=0)
        fine = transfer_for_finetune(pre, pre.user_emb.data, 2, seed=1)
        save_params(fine, tmp_path / "f.ckpt")
        loaded = load_params(tmp_path / "f.ckpt")
        assert loaded.user_emb.requires_grad is False
        assert loaded.tower == fine.tower

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated_payload_rejected(self, tmp_path):
        params = init_ncf(4, 5, 2, (4, 2), seed=3)
        path = tmp_path / "model.ckpt"
        save_params(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "absent.ckpt")
