"""Brute-force reference implementations used to cross-check the package.

Everything here is written with plain Python loops and math.* calls, on
purpose: these are the independent oracles, so they must not share code
paths with the implementations they verify.
"""

import math


def fd_gradient(loss_fn, flat_view, index, h=1e-5):
    """Central finite difference of a scalar function w.r.t. one coordinate."""
    orig = flat_view[index]
    flat_view[index] = orig + h
    up = loss_fn()
    flat_view[index] = orig - h
    down = loss_fn()
    flat_view[index] = orig
    return (up - down) / (2.0 * h)


def brute_epsilon_item(scores, genders, alpha):
    """Directly evaluate both smoothed outcome-ratio bounds for one item."""
    s_m = s_f = 0.0
    n_m = n_f = 0
    for score, g in zip(scores, genders):
        if g == "m":
            s_m += score
            n_m += 1
        elif g == "f":
            s_f += score
            n_f += 1
    pos_m = (s_m + alpha) / (n_m + 2 * alpha)
    pos_f = (s_f + alpha) / (n_f + 2 * alpha)
    neg_m = (n_m - s_m + alpha) / (n_m + 2 * alpha)
    neg_f = (n_f - s_f + alpha) / (n_f + 2 * alpha)
    return max(abs(math.log(pos_m / pos_f)), abs(math.log(neg_m / neg_f)))


def brute_epsilon_mean(values):
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def brute_u_abs(scores, observed, genders):
    """Mean over items of the gap between group absolute errors.

    ``scores`` and ``observed`` are (users x items) nested lists; items where
    either group has no users are skipped.
    """
    n_users = len(scores)
    n_items = len(scores[0])
    total, used = 0.0, 0
    for j in range(n_items):
        sum_f = sum_m = obs_f = obs_m = 0.0
        n_f = n_m = 0
        for u in range(n_users):
            if genders[u] == "f":
                sum_f += scores[u][j]
                obs_f += observed[u][j]
                n_f += 1
            elif genders[u] == "m":
                sum_m += scores[u][j]
                obs_m += observed[u][j]
                n_m += 1
        if n_f == 0 or n_m == 0:
            continue
        err_f = abs(sum_f / n_f - obs_f / n_f)
        err_m = abs(sum_m / n_m - obs_m / n_m)
        total += abs(err_f - err_m)
        used += 1
    if used == 0:
        raise ValueError("no items with both groups")
    return total / used


def brute_rank(score_of_test, candidate_scores):
    """1-based rank assuming no ties."""
    rank = 1
    for s in candidate_scores:
        if s > score_of_test:
            rank += 1
    return rank


def brute_hr_ndcg(rank, k):
    if rank <= k:
        return 1.0, 1.0 / math.log2(rank + 1.0)
    return 0.0, 0.0
