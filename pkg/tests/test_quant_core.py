import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gptqt import quant_core as qc


# ----------------------------------------------------------------------- oracles


def subset_oracle(n, m):
    """Level sets of size 2**m in 0..2**n-1 expressible as a + subset sums of m deltas.

    Brute force over every 2**m-subset of the grid: a set qualifies when some
    choice of m positive deltas reproduces it exactly.
    """
    top = 2**n - 1
    found = set()
    for subset in itertools.combinations(range(top + 1), 2**m):
        a = subset[0]
        diffs = [v - a for v in subset[1:]]
        for ds in itertools.combinations_with_replacement(sorted(set(diffs)), m):
            sums = sorted(sum(c) for r in range(m + 1) for c in itertools.combinations(ds, r))
            if [a + s for s in sums] == list(subset):
                found.add(subset)
                break
    return found


def brute_best(row, h, p, m):
    best, best_err = None, np.inf
    for cb in qc.enumerate_codebooks(p.n, m):
        lv = p.S * np.array(cb.levels, float) + p.z
        d = np.array([min(lv, key=lambda v: abs(v - w)) for w in row]) - row
        err = float(np.sum(d * d * h))
        if err < best_err - 1e-12:
            best, best_err = cb, err
    return best, best_err


# ----------------------------------------------------------------------- linear


def test_fit_linear_exact_grid():
    p = qc.fit_linear([0, 1, 2, 3], 2)
    assert (p.S, p.z) == (1.0, 0.0)


def test_fit_linear_constant():
    p = qc.fit_linear([-1, -1, -1], 3)
    assert (p.S, p.z) == (0.0, -1.0)


def test_fit_linear_formula():
    p = qc.fit_linear([-3.1, 3.1], 5)
    assert p.S == pytest.approx(0.2, rel=1e-12)
    assert p.z == -3.1


@pytest.mark.parametrize("n", [1, 9])
def test_fit_linear_bits_guard(n):
    with pytest.raises(ValueError):
        qc.fit_linear([0.0, 1.0], n)


@pytest.mark.parametrize(
    "row, expect",
    [([0, 1, 2, 3], [0, 1, 2, 3]), ([0.49, 0.51], [0, 1]), ([10.0], [3]), ([-5.0], [0])],
)
def test_quantize_linear(row, expect):
    assert qc.quantize_linear(row, qc.LinearParams(2, 1.0, 0.0)).tolist() == expect


def test_quantize_linear_half_away():
    p = qc.LinearParams(3, 1.0, 0.0)
    assert qc.quantize_linear([0.5, 1.5, 2.5], p).tolist() == [1, 2, 3]


def test_quantize_linear_zero_scale():
    assert qc.quantize_linear([4.0, 4.0], qc.LinearParams(3, 0.0, 4.0)).tolist() == [0, 0]


# ----------------------------------------------------------------------- binary coding


def test_greedy_exact_sign_structure():
    a, b = qc.greedy_bc([1, -1, 1, 1], 1)
    assert a.tolist() == [1.0]
    assert b.tolist() == [[1, -1, 1, 1]]
    assert np.array_equal(qc.bc_dequant(a, b), [1, -1, 1, 1])


def test_greedy_half():
    a, b = qc.greedy_bc([0.5, -0.5], 1)
    assert a.tolist() == [0.5]
    assert np.array_equal(qc.bc_dequant(a, b), [0.5, -0.5])


def test_greedy_two_bits_hand_executed():
    a, b = qc.greedy_bc([3, 1], 2)
    assert a.tolist() == [2.0, 1.0]
    assert b.tolist() == [[1, 1], [1, -1]]
    assert np.array_equal(qc.bc_dequant(a, b), [3, 1])


def test_greedy_sign_of_zero_is_plus():
    _, b = qc.greedy_bc([0.0, -1.0, 2.0], 1)
    assert b[0].tolist() == [1, -1, 1]


def test_greedy_one_bit_alpha_optimal_for_fixed_signs():
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.standard_normal(33)
        a, b = qc.greedy_bc(w, 1)
        assert a[0] == pytest.approx(np.mean(np.abs(w)), abs=1e-15)
        grid = np.linspace(0, 2 * np.abs(w).max(), 10_000)
        mse = ((w[None, :] - grid[:, None] * b[0][None, :]) ** 2).mean(axis=1)
        assert np.mean((w - a[0] * b[0]) ** 2) <= mse.min() + 1e-9


def test_bcq_fixed_bits_solve():
    # B = [[+1,+1],[+1,-1]] and w = [3,1] give alphas (2, 1)
    a, b = qc.bcq_als([3, 1], 2, iters=1)
    assert np.allclose(a, [2.0, 1.0])
    assert np.array_equal(qc.bc_dequant(a, b), [3, 1])


def test_bcq_zero_iters_is_greedy():
    w = np.random.default_rng(5).standard_normal(17)
    a0, b0 = qc.greedy_bc(w, 3)
    a, b = qc.bcq_als(w, 3, iters=0)
    assert np.array_equal(a, a0) and np.array_equal(b, b0)


def test_bcq_monotone():
    rng = np.random.default_rng(9)
    for _ in range(50):
        w = rng.standard_normal(32)
        mses = [np.mean((w - qc.bc_dequant(a, b)) ** 2) for a, b in qc.bcq_als_steps(w, 2, 10)]
        assert all(y <= x * (1 + 1e-12) + 1e-15 for x, y in zip(mses, mses[1:]))


def test_bcq_singular_stops():
    # constant row: every iteration assigns one codeword, B^T B is singular
    a, b = qc.bcq_als(np.full(6, 0.3), 2, iters=5)
    assert np.allclose(qc.bc_dequant(a, b), 0.3)


# ----------------------------------------------------------------------- codebooks


def test_enumerate_2_1():
    sets = {cb.levels for cb in qc.enumerate_codebooks(2, 1)}
    assert sets == {(0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3)}


def test_enumerate_3_2_against_subset_oracle():
    books = qc.enumerate_codebooks(3, 2)
    sets = [cb.levels for cb in books]
    assert len(sets) == len(set(sets)) == 22
    assert set(sets) == subset_oracle(3, 2)
    assert (0, 1, 6, 7) in sets
    cb = books[sets.index((0, 1, 6, 7))]
    assert (cb.a, cb.deltas) == (0, (1, 6))


@pytest.mark.parametrize("n,m", [(4, 1), (4, 2), (4, 3), (3, 1)])
def test_enumerate_small_against_subset_oracle(n, m):
    assert {cb.levels for cb in qc.enumerate_codebooks(n, m)} == subset_oracle(n, m)


@pytest.mark.parametrize("n,m", [(3, 1), (4, 2), (5, 3), (6, 2)])
def test_enumerate_structure(n, m):
    books = qc.enumerate_codebooks(n, m)
    seen = set()
    for cb in books:
        lv = cb.levels
        assert len(lv) == 2**m and len(set(lv)) == 2**m
        assert lv[0] >= 0 and lv[-1] <= 2**n - 1
        assert list(cb.deltas) == sorted(cb.deltas)
        seen.add(lv)
    assert len(seen) == len(books)
    uniform = tuple(2 ** (n - m) * k for k in range(2**m))
    assert uniform in seen


@pytest.mark.parametrize("n,m", [(2, 2), (3, 0), (7, 3), (3, 4)])
def test_enumerate_guard(n, m):
    with pytest.raises(ValueError):
        qc.enumerate_codebooks(n, m)


def test_codebook_rejects_colliding_sums():
    with pytest.raises(ValueError):
        qc.Codebook(0, (1, 1))
    with pytest.raises(ValueError):
        qc.Codebook(0, (1, 2, 3))


def test_codebook_masks():
    cb = qc.Codebook(0, (1, 6))
    assert cb.levels == (0, 1, 6, 7)
    assert cb.level_masks == (0b00, 0b01, 0b10, 0b11)


def test_round_to_codebook_golden():
    out = qc.round_to_codebook([0, 2, 3, 1, 1, 6, 5], qc.Codebook(0, (1, 6)))
    assert out.tolist() == [0, 1, 1, 1, 1, 6, 6]


def test_round_to_codebook_idempotent():
    cb = qc.Codebook(2, (3, 5))
    assert qc.round_to_codebook(cb.levels, cb).tolist() == list(cb.levels)


def test_round_to_codebook_tie_smaller():
    assert qc.round_to_codebook([3], [1, 5]).tolist() == [1]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=40), st.integers(0, 4360))
def test_round_to_codebook_optimal(values, which):
    cb = qc.enumerate_codebooks(5, 3)[which]
    lv = np.array(cb.levels)
    out = qc.round_to_codebook(values, cb)
    v = np.array(values)
    assert np.all(np.abs(out - v) == np.abs(lv[None, :] - v[:, None]).min(axis=1))
    assert np.array_equal(qc.round_to_codebook(out, cb), out)


# ----------------------------------------------------------------------- proxy error


def test_proxy_error_zero_on_levels():
    assert qc.row_proxy_error([0.5, 1.5], [0.5, 1.5, 3.0], [1.0, 2.0]) == 0.0


def test_proxy_error_unweighted():
    assert qc.row_proxy_error([0.0, 1.2], [0.0, 1.0], [1.0, 1.0]) == pytest.approx(0.04)


def test_proxy_error_formula():
    assert qc.row_proxy_error([0.0, 1.0], [0.0], [1.0, 4.0]) == 4.0


# ----------------------------------------------------------------------- search


def test_search_perfect_fit():
    # levels {0, 4, 11, 15} span the whole 4-bit grid, so fit_linear recovers S=0.5, z=-1
    cb_true = qc.Codebook(0, (4, 11))
    row = 0.5 * np.repeat(np.array(cb_true.levels, float), 3) - 1.0
    p = qc.fit_linear(row, 4)
    assert (p.S, p.z) == (0.5, -1.0)
    cb = qc.search_codebook(row, np.ones(row.size), p, 2)
    assert cb.levels == cb_true.levels
    assert qc.row_proxy_error(row, p.S * np.array(cb.levels, float) + p.z, np.ones(row.size)) == 0.0


def test_search_zero_error_when_representable():
    row = np.array([0.0, 1.0, 6.0, 7.0, 1.0, 6.0])
    p = qc.fit_linear(row, 3)
    cb = qc.search_codebook(row, np.ones(6), p, 2)
    assert cb.levels == (0, 1, 6, 7)


def test_search_bimodal_extremes():
    rng = np.random.default_rng(4)
    row = np.concatenate([rng.uniform(0, 0.2, 20), rng.uniform(6.8, 7.0, 20), [0.0, 7.0]])
    h = np.ones(row.size)
    p = qc.fit_linear(row, 3)
    best, _ = brute_best(row, h, p, 1)
    assert best.levels == (0, 7)
    assert qc.search_codebook(row, h, p, 1).levels == (0, 7)


@pytest.mark.parametrize("n,m", [(3, 2), (4, 2), (4, 3), (5, 3)])
def test_search_is_argmin(n, m):
    rng = np.random.default_rng(n * 10 + m)
    for _ in range(5):
        row = rng.uniform(-1, 1, 24)
        h = rng.uniform(0.1, 3.0, 24)
        p = qc.fit_linear(row, n)
        cb = qc.search_codebook(row, h, p, m)
        _, best_err = brute_best(row, h, p, m)
        got = qc.row_proxy_error(row, p.S * np.array(cb.levels, float) + p.z, h)
        assert got <= best_err * (1 + 1e-9) + 1e-12


def test_search_full_objective_matches_brute_force():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((6, 40))
    X[1] += 0.8 * X[0]
    H = 2 * X @ X.T
    row = rng.standard_normal(6)
    p = qc.fit_linear(row, 4)
    cb = qc.search_codebook(row, np.diag(H), p, 2, objective="full", H=H)
    errs = [
        qc.full_proxy_error(row, p.S * np.array(c.levels, float) + p.z, H)
        for c in qc.enumerate_codebooks(4, 2)
    ]
    assert qc.full_proxy_error(row, p.S * np.array(cb.levels, float) + p.z, H) <= min(errs) + 1e-12


def test_search_rejects_m_ge_n():
    with pytest.raises(ValueError):
        qc.search_codebook([0, 1], [1, 1], qc.fit_linear([0, 1], 3), 3)


# ----------------------------------------------------------------------- re-exploration


def test_reexplore_disabled():
    row = np.linspace(-1, 1, 9)
    p = qc.fit_linear(row, 5)
    cb = qc.enumerate_codebooks(5, 3)[100]
    assert qc.reexplore_scale(row, np.ones(9), cb, p, 0, 64) == p.S


def test_reexplore_interval_formula():
    lo, hi = qc.reexplore_interval(6.2, 5, 1)
    assert lo == pytest.approx(6.2 / 63) and hi == pytest.approx(6.2 / 15)
    lo, hi = qc.reexplore_interval(6.2, 5, 2)
    assert lo == pytest.approx(6.2 / 127) and hi == pytest.approx(6.2 / 7)


def test_reexplore_interval_coarse_cap():
    assert qc.reexplore_interval(3.0, 3, 2)[1] == pytest.approx(3.0)
    assert qc.reexplore_interval(3.0, 3, 5)[1] == pytest.approx(3.0)


def test_reexplore_result_inside_interval_and_dominates():
    rng = np.random.default_rng(12)
    for _ in range(40):
        row = rng.standard_normal(64)
        h = rng.uniform(0.5, 2.0, 64)
        p = qc.fit_linear(row, 5)
        cb = qc.search_codebook(row, h, p, 3)
        s = qc.reexplore_scale(row, h, cb, p, 1, 64)
        lo, hi = qc.reexplore_interval(row.max() - row.min(), 5, 1)
        assert s == p.S or lo - 1e-15 <= s <= hi + 1e-15
        lv = np.array(cb.levels, float)
        assert qc.row_proxy_error(row, s * lv + p.z, h) <= qc.row_proxy_error(row, p.S * lv + p.z, h)


def test_reexplore_grid_one_point():
    row = np.random.default_rng(0).standard_normal(20)
    p = qc.fit_linear(row, 4)
    cb = qc.search_codebook(row, np.ones(20), p, 2)
    s = qc.reexplore_scale(row, np.ones(20), cb, p, 1, 1)
    assert s in (p.S, pytest.approx((row.max() - row.min()) / 31))


# ----------------------------------------------------------------------- plans


def test_row_plan_structure():
    row = np.random.default_rng(1).standard_normal(128)
    plan = qc.build_row_plan(row, np.ones(128), qc.PlanConfig(n=5, m=3, range_bits=1))
    assert plan.float_levels.shape == (8,)
    assert np.all(np.diff(plan.float_levels) > 0)
    assert not plan.degenerate
    assert plan.codebook.fits(5)


def test_row_plan_range_dominance():
    rng = np.random.default_rng(2)
    for _ in range(10):
        row = rng.standard_normal(96)
        h = rng.uniform(0.2, 2.0, 96)
        e0 = qc.plan_proxy_error(row, qc.build_row_plan(row, h, qc.PlanConfig(range_bits=0)), h)
        e1 = qc.plan_proxy_error(row, qc.build_row_plan(row, h, qc.PlanConfig(range_bits=1)), h)
        assert e1 <= e0


def test_row_plan_bimodal_picks_0167():
    row = np.array([0.0, 0.1, 0.9, 1.0])
    h = np.ones(4)
    cfg = qc.PlanConfig(n=3, m=2, range_bits=0)
    p = qc.fit_linear(row, 3)
    best, _ = brute_best(row, h, p, 2)
    assert best.levels == (0, 1, 6, 7)
    assert qc.build_row_plan(row, h, cfg).codebook.levels == (0, 1, 6, 7)


def test_row_plan_constant_row_degenerate():
    plan = qc.build_row_plan(np.full(10, 0.25), np.ones(10))
    assert plan.degenerate
    assert plan.codebook is None
    assert np.all(plan.float_levels == 0.25)


def test_layer_plans_match_row_plans():
    rng = np.random.default_rng(6)
    W = rng.standard_normal((5, 40))
    h = rng.uniform(0.5, 1.5, 40)
    cfg = qc.PlanConfig(n=4, m=2)
    for row, plan in zip(W, qc.build_layer_plans(W, h, cfg)):
        assert plan == qc.build_row_plan(row, h, cfg)


def test_joint_search_not_worse_than_sequential():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((6, 48))
    h = rng.uniform(0.5, 1.5, 48)
    seq = qc.build_layer_plans(W, h, qc.PlanConfig(n=4, m=2))
    joint = qc.build_layer_plans(W, h, qc.PlanConfig(n=4, m=2, joint=True))
    for row, a, b in zip(W, seq, joint):
        assert qc.plan_proxy_error(row, b, h) <= qc.plan_proxy_error(row, a, h) * (1 + 1e-9)


def test_share_codebook():
    rng = np.random.default_rng(8)
    W = rng.standard_normal((5, 32))
    plans = qc.build_layer_plans(W, np.ones(32), qc.PlanConfig(n=4, m=2, share_codebook=True))
    assert len({p.codebook.levels for p in plans}) == 1


def test_full_objective_plans():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((8, 30))
    H = 2 * X @ X.T + 0.1 * np.eye(8)
    W = rng.standard_normal((3, 8))
    plans = qc.build_layer_plans(W, np.diag(H), qc.PlanConfig(n=4, m=2, objective="full"), H=H)
    for row, plan in zip(W, plans):
        base = qc.fit_linear(row, 4)
        errs = [
            qc.full_proxy_error(row, base.S * np.array(c.levels, float) + base.z, H)
            for c in qc.enumerate_codebooks(4, 2)
        ]
        assert qc.full_proxy_error(row, plan.float_levels, H) <= min(errs) + 1e-9


def test_plan_config_validation():
    with pytest.raises(ValueError):
        qc.PlanConfig(n=4, m=4).validate()
    with pytest.raises(ValueError):
        qc.PlanConfig(n=7, m=3).validate()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([(3, 1), (3, 2), (4, 2), (5, 3)]))
def test_search_deterministic(seed, nm):
    n, m = nm
    row = np.random.default_rng(seed).standard_normal(20)
    h = np.ones(20)
    cfg = qc.PlanConfig(n=n, m=m)
    assert qc.build_row_plan(row, h, cfg) == qc.build_row_plan(row, h, cfg)
