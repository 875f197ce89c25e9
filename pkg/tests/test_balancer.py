import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osborne.balancer import (NotBalanceableError, StructuralError, VariantConfig, VARIANTS,
                              block_round, init_state, is_eps_balanced, make_selector,
                              osborne_update, run, GreedySelector, _Fenwick)
from osborne.diagnostics import potential, predicted_decrease
from osborne.graph import Coloring, SupportGraph, greedy_coloring, diameter
from osborne.logmat import from_dense, from_triplets, stats
from osborne.quantized import default_quant

import oracles
from conftest import er, random_dense

CYCLE3 = from_triplets(3, [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)])


def coloring_for(M):
    return greedy_coloring(SupportGraph.from_matrix(M))


def cfg_for(M, variant, eps=0.05, **kw):
    col = coloring_for(M) if variant.startswith("block-") else None
    return VariantConfig(variant, eps, coloring=col, **kw)


# -- init_state -------------------------------------------------------------

@pytest.mark.parametrize("tracked", [False, True])
def test_init_state_e1(E1, tracked):
    S = init_state(E1, tracked=tracked)
    lr, lc = S.log_marginals()
    assert np.allclose(np.exp(lr), [4, 1]) and np.allclose(np.exp(lc), [1, 4])
    assert S.log_total == pytest.approx(math.log(5), abs=1e-15)
    assert S.log_total == pytest.approx(stats(E1).log_sum, abs=1e-15)
    assert np.all(S.x == 0)


def test_init_state_trivial():
    S = init_state(CYCLE3, tracked=True)
    lr, lc = S.log_marginals()
    assert np.allclose(lr, 0) and np.allclose(lc, 0)
    assert is_eps_balanced(S, 1e-12)
    S = init_state(from_triplets(1, [(0, 0, 7.0)]), tracked=True)
    lr, lc = S.log_marginals()
    assert np.exp(lr[0]) == pytest.approx(7) and np.exp(lc[0]) == pytest.approx(7)
    assert is_eps_balanced(S, 1e-12)


# -- osborne_update ---------------------------------------------------------

@pytest.mark.parametrize("tracked", [False, True])
def test_update_e1(E1, tracked):
    S = init_state(E1, tracked=tracked)
    d = osborne_update(S, 0)
    assert d == pytest.approx(-math.log(2), abs=1e-15)
    lr, lc = S.log_marginals()
    assert np.allclose(np.exp(lr), [2, 2], rtol=1e-14) and np.allclose(np.exp(lc), [2, 2], rtol=1e-14)
    assert S.op_count == 2
    A = oracles.scaled(E1.to_dense(), S.x)
    assert A[0, 1] == pytest.approx(2) and A[1, 0] == pytest.approx(2)


def test_update_balanced_and_singleton():
    S = init_state(CYCLE3, tracked=True)
    x0 = S.x.copy()
    assert osborne_update(S, 1) == 0.0
    assert np.array_equal(S.x, x0)
    S = init_state(from_triplets(1, [(0, 0, 7.0)]))
    assert osborne_update(S, 0) == 0.0 and S.x[0] == 0.0
    S = init_state(from_triplets(1, []))
    assert osborne_update(S, 0) == 0.0


def test_update_structural_error():
    M = from_triplets(3, [(0, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0)])
    S = init_state(M)
    with pytest.raises(StructuralError):
        osborne_update(S, 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1), st.booleans())
def test_update_matches_dense_oracle(n, seed, tracked):
    rng = np.random.default_rng(seed)
    K = random_dense(rng, n, density=0.5, diag=True)
    M = from_dense(K)
    S = init_state(M, tracked=tracked)
    x = np.zeros(n)
    for k in rng.integers(0, n, size=3 * n):
        k = int(k)
        pred = predicted_decrease(S, k)
        phi0 = oracles.potential(K, S.x)
        osborne_update(S, k)
        x = oracles.osborne_step(K, x, k)
        assert np.allclose(S.x, x, atol=1e-10)
        A = oracles.scaled(K, S.x)
        # diagonal entries included: the full row and column sums agree
        assert A[k].sum() == pytest.approx(A[:, k].sum(), rel=1e-9)
        assert phi0 - oracles.potential(K, S.x) == pytest.approx(pred, abs=1e-9)
        assert S.log_total == pytest.approx(oracles.potential(K, S.x), abs=1e-9)
        S.check_integrity()


# -- selection ----------------------------------------------------------------

def test_greedy_selection_ties(E1):
    S = init_state(E1, tracked=True)
    assert GreedySelector().select(S) == 0
    S = init_state(CYCLE3, tracked=True)
    assert GreedySelector().select(S) == 0


def test_greedy_block_selection_tie(E1):
    cfg = VariantConfig("block-greedy", 0.1, coloring=Coloring.from_blocks([[0], [1]]))
    S = init_state(E1, tracked=True)
    assert make_selector(cfg, 2, np.random.default_rng(0)).select(S) == 0


def test_single_block_always_zero():
    M = from_triplets(3, [(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0)])
    col = coloring_for(M)
    assert col.p == 1
    for v in ("block-random", "block-cyclic", "block-greedy"):
        cfg = VariantConfig(v, 0.1, coloring=col)
        sel = make_selector(cfg, 3, np.random.Generator(np.random.PCG64(5)))
        S = init_state(M, tracked=True)
        assert all(sel.select(S) == 0 for _ in range(20))


def test_random_uniform_frequency():
    n, N = 7, 10**5
    cfg = VariantConfig("random", 0.1, seed=11)
    sel = make_selector(cfg, n, np.random.Generator(np.random.PCG64(11)))
    draws = np.array([sel.select(None) for _ in range(N)])
    counts = np.bincount(draws, minlength=n)
    sigma = math.sqrt(N * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - N / n) <= 3 * sigma)
    sel2 = make_selector(cfg, n, np.random.Generator(np.random.PCG64(11)))
    assert [sel2.select(None) for _ in range(N)] == draws.tolist()


def test_cyclic_permutations():
    n = 9
    sel = make_selector(VariantConfig("cyclic", 0.1), n, np.random.Generator(np.random.PCG64(2)))
    seq = [sel.select(None) for _ in range(5 * n)]
    cycles = [seq[i * n:(i + 1) * n] for i in range(5)]
    assert all(sorted(c) == list(range(n)) for c in cycles)
    assert len({tuple(c) for c in cycles}) > 1


def test_weighted_frequency():
    M = er(12, 0.4, seed=3)
    S = init_state(M, tracked=True)
    sel = make_selector(VariantConfig("weighted", 0.1), M.n, np.random.Generator(np.random.PCG64(4)))
    N = 40000
    counts = np.bincount([sel.select(S) for _ in range(N)], minlength=M.n)
    lr, lc = S.log_marginals()
    p = (np.exp(lr) + np.exp(lc)) / (2 * math.exp(S.log_total))
    assert p.sum() == pytest.approx(1)
    sigma = np.sqrt(N * p * (1 - p))
    assert np.all(np.abs(counts - N * p) <= 4 * sigma)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0, 1, exclude_max=True))
def test_fenwick_inversion(w, u):
    t = _Fenwick(w)
    total = sum(w)
    if total == 0:
        return
    idx = t.find(u * t.total())
    cum = np.cumsum(w)
    target = u * t.total()
    expect = int(np.searchsorted(cum, target, side="right"))
    assert abs(idx - min(expect, len(w) - 1)) <= 1 or math.isclose(cum[min(idx, len(w) - 1)], target)
    t.set(0, w[0] + 1.0)
    assert t.total() == pytest.approx(total + 1.0)


# -- blocks -------------------------------------------------------------------------

def test_singleton_block_equals_update():
    M = er(15, 0.3, seed=1)
    a, b = init_state(M, tracked=True), init_state(M, tracked=True)
    for k in [3, 7, 0, 3, 14]:
        osborne_update(a, k)
        block_round(b, [k])
    assert np.array_equal(a.x, b.x)


def test_four_cycle_block_order_independence():
    M = from_triplets(4, [(0, 1, 3.0), (1, 2, 0.5), (2, 3, 2.0), (3, 0, 1.5)])
    col = coloring_for(M)
    assert sorted(col.blocks) == [(0, 2), (1, 3)]
    blk = init_state(M, tracked=True)
    block_round(blk, [0, 2])
    for order in ([0, 2], [2, 0]):
        seq = init_state(M, tracked=True)
        for k in order:
            osborne_update(seq, k)
        assert np.allclose(seq.x, blk.x, atol=1e-12, rtol=0)
        assert seq.log_total == pytest.approx(blk.log_total, abs=1e-12)


def test_positive_2x2_blocks_are_single_updates():
    M = from_dense(np.array([[1.0, 3.0], [2.0, 5.0]]))
    col = coloring_for(M)
    assert col.blocks == ((0,), (1,))
    a, b = init_state(M), init_state(M)
    block_round(a, [0])
    block_round(a, [1])
    osborne_update(b, 0)
    osborne_update(b, 1)
    assert np.array_equal(a.x, b.x)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 50), st.integers(0, 2**32 - 1))
def test_block_order_independence_property(n, seed):
    rng = np.random.default_rng(seed)
    M = from_dense(random_dense(rng, n, density=min(1.0, 3.0 / n)))
    col = coloring_for(M)
    base = init_state(M, tracked=True)
    for k in rng.integers(0, n, size=n):
        osborne_update(base, int(k))
    blk = max(col.blocks, key=len)
    ref = init_state(M, tracked=True)
    ref.x[:] = base.x
    ref.refresh()
    block_round(ref, blk)
    for _ in range(3):
        seq = init_state(M, tracked=True)
        seq.x[:] = base.x
        seq.refresh()
        for k in rng.permutation(blk):
            osborne_update(seq, int(k))
        assert np.allclose(seq.x, ref.x, atol=1e-12, rtol=0)
        pr, pc = seq.normalized_offdiag()
        qr, qc = ref.normalized_offdiag()
        assert np.allclose(pr, qr, atol=1e-12) and np.allclose(pc, qc, atol=1e-12)


def test_block_threads_identical():
    M = er(120, 0.05, seed=9)
    col = coloring_for(M)
    for v in ("block-random", "block-greedy", "block-cyclic"):
        r1 = run(M, VariantConfig(v, 0.05, seed=1, coloring=col, threads=1, trace_stride=7))
        r8 = run(M, VariantConfig(v, 0.05, seed=1, coloring=col, threads=8, trace_stride=7))
        assert np.array_equal(r1.x, r8.x)
        assert r1.trace == r8.trace and r1.op_count == r8.op_count


def test_block_adjacent_debug_assertion(monkeypatch):
    monkeypatch.setenv("BALANCE_LOG", "debug")
    S = init_state(CYCLE3, tracked=True)
    with pytest.raises(AssertionError, match="adjacent"):
        block_round(S, [0, 1])


# -- eps balance / run --------------------------------------------------------

@pytest.mark.parametrize("tracked", [False, True])
def test_is_eps_balanced_e1(E1, tracked):
    S = init_state(E1, tracked=tracked)
    assert not is_eps_balanced(S, 1.0)
    assert is_eps_balanced(S, 1.3)


def test_run_e1_greedy(E1):
    r = run(E1, VariantConfig("greedy", 0.01))
    assert r.iterations == 1 and r.converged
    assert np.allclose(r.x, [0, math.log(2)], atol=1e-15)
    assert r.final_l1 <= 0.01


@pytest.mark.parametrize("seed", range(5))
def test_run_e1_random_one_iteration(E1, seed):
    r = run(E1, VariantConfig("random", 0.01, seed=seed))
    assert r.iterations == 1 and r.converged and r.final_l1 < 1e-14


@pytest.mark.parametrize("variant", VARIANTS)
def test_balanced_zero_iterations(variant):
    r = run(CYCLE3, cfg_for(CYCLE3, variant))
    assert r.iterations == 0 and r.rounds == 0 and r.converged
    r = run(from_triplets(1, []), cfg_for(from_triplets(1, []), variant))
    assert r.iterations == 0 and r.converged


def test_run_rejects_reducible(E2):
    with pytest.raises(NotBalanceableError, match="4 strongly connected"):
        run(E2, VariantConfig("random", 0.1))


def test_run_rejects_bad_coloring():
    with pytest.raises(ValueError, match="adjacent"):
        run(CYCLE3, VariantConfig("block-random", 0.1, coloring=Coloring.from_blocks([[0, 1], [2]])))


def test_config_validation():
    with pytest.raises(ValueError):
        VariantConfig("random", 0.0)
    with pytest.raises(ValueError):
        VariantConfig("random", 2.5)
    with pytest.raises(ValueError):
        VariantConfig("sideways", 0.1)
    with pytest.raises(ValueError, match="coloring"):
        VariantConfig("block-random", 0.1)
    with pytest.raises(ValueError, match="exact"):
        VariantConfig("greedy", 0.1, quant=default_quant(3, 0.1))
    with pytest.raises(ValueError):
        VariantConfig("random", 0.1, seed=-1)
    VariantConfig("random", 2.0)


def test_max_ops_cap():
    M = er(80, 0.06, seed=2, lo=-6, hi=6)
    r = run(M, VariantConfig("random", 1e-6, max_ops=500, trace_stride=0))
    assert not r.converged
    assert 500 <= r.op_count < 500 + 4 * M.m


@pytest.mark.parametrize("variant", VARIANTS)
def test_run_converges_and_is_deterministic(variant):
    M = er(60, 0.08, seed=4, lo=-4, hi=4)
    a = run(M, cfg_for(M, variant, 0.02, seed=3))
    b = run(M, cfg_for(M, variant, 0.02, seed=3))
    assert a.converged and a.final_l1 <= 0.02
    assert np.array_equal(a.x, b.x) and a.trace == b.trace
    assert a.x.min() == 0.0
    phis = [t.phi for t in a.trace]
    assert all(q <= p + 1e-12 for p, q in zip(phis, phis[1:]))
    # final state agrees with the dense oracle
    assert oracles.l1_imbalance(M.to_dense(), a.x) == pytest.approx(a.final_l1, abs=1e-12)


@pytest.mark.parametrize("variant", ["random", "cyclic", "weighted", "block-random", "block-cyclic"])
def test_run_lowbit(variant):
    M = er(40, 0.1, seed=6)
    cfg = cfg_for(M, variant, 0.1, quant=default_quant(M.n, 0.1))
    r = run(M, cfg)
    assert r.converged
    tau = cfg.quant.tau
    assert np.allclose(r.x / tau, np.rint(r.x / tau), atol=1e-6)
    assert set(r.bit_widths) == {"log_entries", "iterates", "log_sum_exp"}


def test_cache_integrity_every_1000_updates():
    M = er(150, 0.04, seed=8, lo=-10, hi=10)

    class Check:
        def before_update(self, S, k):
            pass

        def after_update(self, S, k, delta):
            if S.updates % 1000 == 0:
                S.check_integrity()
                self.hits = getattr(self, "hits", 0) + 1

    for v in ("greedy", "weighted", "block-greedy", "random"):
        obs = Check()
        run(M, cfg_for(M, v, 1e-3, trace_stride=0, max_ops=40 * M.m), observer=obs)
        assert obs.hits >= 1


def test_debug_mode_runs(monkeypatch):
    monkeypatch.setenv("BALANCE_LOG", "debug")
    M = er(30, 0.15, seed=1, lo=-30, hi=30)
    for v in VARIANTS:
        assert run(M, cfg_for(M, v, 0.05)).converged


def test_extreme_weights_stay_consistent():
    M = er(40, 0.1, seed=2, lo=-400, hi=400)
    for v in ("greedy", "weighted", "random", "block-greedy"):
        r = run(M, cfg_for(M, v, 0.1, trace_stride=0))
        assert r.converged
        assert np.isfinite(r.x).all()


def test_random_op_count_mean():
    M = er(100, 0.05, seed=12)
    S = init_state(M)
    sel = make_selector(VariantConfig("random", 0.1), M.n, np.random.Generator(np.random.PCG64(2)))
    N = 10**4
    for _ in range(N):
        osborne_update(S, sel.select(S))
    per = S.op_count / N
    touches = (M.row_nnz + M.col_nnz).astype(float)
    sigma = touches.std() / math.sqrt(N)
    assert touches.mean() == pytest.approx(2 * M.m / M.n)
    assert abs(per - 2 * M.m / M.n) <= 3 * sigma
