"""Osborne's algorithm for matrix balancing, in the log domain.

A run keeps the balancing vector ``x`` and repeatedly applies an Osborne
update to one coordinate (or, for block variants, to every coordinate of one
color class), until ``diag(e^x) K diag(e^-x)`` is epsilon-balanced in l1.

Greedy, weighted and block-greedy runs cache all off-diagonal row and column
sums as ``val * exp(log)`` pairs, patched per touched entry. Random and
cyclic runs cache nothing but the log of the total mass, and compute the
two sums of the updated coordinate on demand.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .diagnostics import TraceRecord, imbalance_from_logs, metrics, offdiag_log_sums
from .graph import Coloring, SupportGraph, scc_decompose, validate_coloring
from .logmat import LogSparseMatrix
from .quantized import QuantConfig, _lse_lowbit, bit_width, drop_threshold, quantize_logs

log = logging.getLogger(__name__)

VARIANTS = ("random", "greedy", "cyclic", "weighted",
            "block-random", "block-greedy", "block-cyclic")
BLOCK_VARIANTS = frozenset({"block-random", "block-greedy", "block-cyclic"})
TRACKED_VARIANTS = frozenset({"greedy", "weighted", "block-greedy"})
GREEDY_VARIANTS = frozenset({"greedy", "block-greedy"})

_ZERO = np.zeros(1, dtype=np.intp)
# cached sums are kept inside this range by re-anchoring
_LO, _HI = 1e-100, 1e100
# an incremental patch that shrinks a sum below this fraction is redone from scratch
_SHRINK_GUARD = 1e-2
# shifts larger than this are applied by recomputing touched sums
_BIG_SHIFT = 300.0
# log_total is rebuilt when one update removes more than this fraction of the mass
_MASS_GUARD = 1e-3


class StructuralError(ValueError):
    """A coordinate has a zero row or column sum: ``K`` is not irreducible."""


class NotBalanceableError(ValueError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        sizes = sorted((len(c) for c in components), reverse=True)
        super().__init__(
            f"matrix is not balanceable: support graph has {len(components)} strongly "
            f"connected components (sizes {sizes}); balance each irreducible block separately"
        )


def debug_enabled() -> bool:
    return os.environ.get("BALANCE_LOG", "").lower() == "debug"


def _lse1(z: np.ndarray) -> float:
    """Exact log-sum-exp of one coordinate's entries (``-inf`` when empty)."""
    if z.size == 0:
        return -math.inf
    mx = float(z.max())
    return mx + math.log(float(np.add.reduceat(np.exp(z - mx), _ZERO)[0]))


@dataclass
class VariantConfig:
    variant: str
    epsilon: float
    seed: int = 0
    quant: QuantConfig | None = None
    max_ops: int | None = None
    coloring: Coloring | None = None
    trace_stride: int = 1
    threads: int = 1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.epsilon <= 2:
            raise ValueError(f"epsilon must lie in (0, 2], got {self.epsilon!r}")
        if self.is_block and self.coloring is None:
            raise ValueError(f"variant {self.variant!r} requires a coloring")
        if self.quant is not None and self.variant in GREEDY_VARIANTS:
            raise ValueError("greedy variants run in exact mode only")
        if self.trace_stride < 0:
            raise ValueError("trace_stride must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def is_block(self) -> bool:
        return self.variant in BLOCK_VARIANTS

    @property
    def mode(self) -> str:
        return "exact" if self.quant is None else "lowbit"


class ScalingState:
    """Balancing vector ``x`` plus the cached quantities an update needs.

    ``log_total`` is ``log sum_ij A_ij`` for ``A = diag(e^x) K diag(e^-x)``.
    When ``tracked``, the off-diagonal row sum ``r_i`` is
    ``r_val[i] * exp(r_log[i])`` and likewise for columns.
    """

    def __init__(self, M: LogSparseMatrix, tracked: bool = False):
        self.matrix = M
        self.n = M.n
        self.x = np.zeros(M.n)
        self.tracked = tracked
        self.op_count = 0
        self.updates = 0
        self.version = 0
        self.fresh_l1: float | None = None
        self.fresh_version = -1
        self.since_refresh = 0
        self.touched: list[np.ndarray] | None = None
        self._ro_ptr = M.ro_ptr.tolist()
        self._co_ptr = M.co_ptr.tolist()
        self._ops = (M.row_nnz + M.col_nnz).tolist()
        self._diag_lin = np.where(M.has_diag, np.exp(M.diag_logv), 0.0)
        self._diag_logs = M.diag_logv[M.has_diag]
        self.r_val = self.r_log = self.c_val = self.c_log = None
        self.log_total = -math.inf
        self.refresh()

    # -- from-scratch recomputation ------------------------------------------

    def refresh(self) -> float:
        """Recompute every cached quantity from ``x``; return the l1 imbalance."""
        lr, lc = offdiag_log_sums(self.matrix, self.x)
        self.log_total = _total(lr, self._diag_logs)
        if self.tracked:
            fr, fc = np.isfinite(lr), np.isfinite(lc)
            self.r_val, self.r_log = fr.astype(float), np.where(fr, lr, 0.0)
            self.c_val, self.c_log = fc.astype(float), np.where(fc, lc, 0.0)
        self.since_refresh = 0
        self.fresh_l1 = imbalance_from_logs(lr, lc, self.log_total)
        self.fresh_version = self.version
        return self.fresh_l1

    def maybe_refresh(self) -> None:
        if self.since_refresh >= self.n:
            self.refresh()

    def _refresh_rows(self, idx: np.ndarray) -> None:
        M, x = self.matrix, self.x
        for i in idx.tolist():
            a, b = self._ro_ptr[i], self._ro_ptr[i + 1]
            self.r_log[i] = _lse1(x[i] - x[M.ro_nbr[a:b]] + M.ro_logv[a:b])
            self.r_val[i] = 1.0

    def _refresh_cols(self, idx: np.ndarray) -> None:
        M, x = self.matrix, self.x
        for j in idx.tolist():
            a, b = self._co_ptr[j], self._co_ptr[j + 1]
            self.c_log[j] = _lse1(x[M.co_nbr[a:b]] - x[j] + M.co_logv[a:b])
            self.c_val[j] = 1.0

    # -- cached views ----------------------------------------------------------

    def coordinate_entries(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Log-entries of row ``k`` and column ``k`` of ``A``, diagonal excluded."""
        M, x = self.matrix, self.x
        a, b = self._ro_ptr[k], self._ro_ptr[k + 1]
        zr = x[k] - x[M.ro_nbr[a:b]] + M.ro_logv[a:b]
        a, b = self._co_ptr[k], self._co_ptr[k + 1]
        zc = x[M.co_nbr[a:b]] - x[k] + M.co_logv[a:b]
        return zr, zc

    def coordinate_logs(self, k: int) -> tuple[float, float]:
        """``(log r_k, log c_k)`` of the off-diagonal part, computed on demand."""
        zr, zc = self.coordinate_entries(k)
        return _lse1(zr), _lse1(zc)

    def normalized_offdiag(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached off-diagonal sums divided by the total mass."""
        if not self.tracked:
            raise RuntimeError("state does not track marginal sums")
        lT = self.log_total
        if not math.isfinite(lT):
            return np.zeros(self.n), np.zeros(self.n)
        with np.errstate(under="ignore"):
            pr = self.r_val * np.exp(self.r_log - lT)
            pc = self.c_val * np.exp(self.c_log - lT)
        return pr, pc

    def log_marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """Log row and column sums of ``A`` including the diagonal.

        Read from the caches when tracked, recomputed otherwise.
        """
        if self.tracked:
            with np.errstate(divide="ignore"):
                lr = np.log(self.r_val) + self.r_log
                lc = np.log(self.c_val) + self.c_log
        else:
            lr, lc = offdiag_log_sums(self.matrix, self.x)
        d = np.where(self.matrix.has_diag, self.matrix.diag_logv, -np.inf)
        return np.logaddexp(lr, d), np.logaddexp(lc, d)

    def total_from_cache(self) -> float:
        """``log_total`` rebuilt as a reduction over the cached row sums."""
        pos = self.r_val > 0
        lr = np.full(self.n, -np.inf)
        lr[pos] = np.log(self.r_val[pos]) + self.r_log[pos]
        return _total(lr, self._diag_logs)

    def cached_l1(self) -> float:
        pr, pc = self.normalized_offdiag()
        return float(np.abs(pr - pc).sum())

    def check_integrity(self, rtol: float = 1e-9) -> None:
        """Raise ``AssertionError`` if caches drifted from a full recomputation."""
        lr, lc = offdiag_log_sums(self.matrix, self.x)
        lT = _total(lr, self._diag_logs)
        if math.isfinite(lT) and abs(self.log_total - lT) > rtol * max(1.0, abs(lT)):
            raise AssertionError(f"log_total drifted: cached {self.log_total}, exact {lT}")
        if self.tracked:
            for name, val, lg, exact in (("row", self.r_val, self.r_log, lr),
                                         ("col", self.c_val, self.c_log, lc)):
                fin = np.isfinite(exact)
                got = val[fin] * np.exp(lg[fin] - exact[fin])
                bad = np.flatnonzero(np.abs(got - 1.0) > rtol)
                if bad.size:
                    i = np.flatnonzero(fin)[bad[0]]
                    raise AssertionError(f"cached {name} sum {i} drifted by {got[bad[0]] - 1.0:.3e}")


def _total(lr: np.ndarray, diag_logs: np.ndarray) -> float:
    vals = np.concatenate([lr[np.isfinite(lr)], diag_logs])
    if vals.size == 0:
        return -math.inf
    mx = vals.max()
    return float(mx + math.log(np.exp(vals - mx).sum()))


def init_state(M: LogSparseMatrix, tracked: bool = False) -> ScalingState:
    return ScalingState(M, tracked=tracked)


# -- the Osborne update ---------------------------------------------------------

def _target(S: ScalingState, k: int, quant: QuantConfig | None) -> tuple[float, float, float]:
    """``(log r_k, log c_k, new x_k)`` for an Osborne update of coordinate ``k``."""
    zr, zc = S.coordinate_entries(k)
    lr, lc = _lse1(zr), _lse1(zc)
    xk = float(S.x[k])
    if lr == -math.inf or lc == -math.inf:
        if lr == lc:
            return lr, lc, xk
        raise StructuralError(f"coordinate {k} has a zero off-diagonal "
                              f"{'row' if lr == -math.inf else 'column'} sum")
    if quant is None:
        return lr, lc, xk + 0.5 * (lc - lr)
    shift = 0.5 * (_lse_lowbit(zc, quant.tau) - _lse_lowbit(zr, quant.tau))
    return lr, lc, float(np.rint((xk + shift) / quant.tau) * quant.tau)


def _apply(S: ScalingState, k: int, lr: float, lc: float, xk_new: float) -> float:
    x = S.x
    xk = float(x[k])
    delta = xk_new - xk
    S.op_count += S._ops[k]
    S.updates += 1
    S.since_refresh += 1
    S.version += 1
    if delta == 0.0:
        return 0.0
    M = S.matrix
    lT = S.log_total
    if abs(delta) < 1.0:
        g = math.exp(lr - lT) * math.expm1(delta) + math.exp(lc - lT) * math.expm1(-delta)
    else:
        g = (math.exp(lr + delta - lT) - math.exp(lr - lT)) + \
            (math.exp(lc - delta - lT) - math.exp(lc - lT))
    # a large relative drop in mass loses digits to cancellation; rebuild instead
    redo_total = g <= -1.0 + _MASS_GUARD
    if not redo_total:
        S.log_total = lT + math.log1p(g)

    if not S.tracked:
        x[k] = xk_new
        if redo_total:
            S.refresh()
        return delta

    ca, cb = S._co_ptr[k], S._co_ptr[k + 1]
    ra, rb = S._ro_ptr[k], S._ro_ptr[k + 1]
    rows_i = M.co_nbr[ca:cb]
    cols_j = M.ro_nbr[ra:rb]
    big = abs(delta) > _BIG_SHIFT
    if not big:
        # A_ik scales by e^-delta, A_kj by e^delta
        old = S.r_val[rows_i]
        new = old + np.exp(x[rows_i] - xk + M.co_logv[ca:cb] - S.r_log[rows_i]) * math.expm1(-delta)
        S.r_val[rows_i] = new
        bad_r = rows_i[new < _SHRINK_GUARD * old]
        old = S.c_val[cols_j]
        new = old + np.exp(xk - x[cols_j] + M.ro_logv[ra:rb] - S.c_log[cols_j]) * math.expm1(delta)
        S.c_val[cols_j] = new
        bad_c = cols_j[new < _SHRINK_GUARD * old]
    x[k] = xk_new
    S.r_val[k] = S.c_val[k] = 1.0
    S.r_log[k] = lr + delta
    S.c_log[k] = lc - delta
    if big:
        S._refresh_rows(rows_i)
        S._refresh_cols(cols_j)
    else:
        if bad_r.size:
            S._refresh_rows(bad_r)
        if bad_c.size:
            S._refresh_cols(bad_c)
        _reanchor(S.r_val, S.r_log, rows_i)
        _reanchor(S.c_val, S.c_log, cols_j)
    if S.touched is not None:
        S.touched.append(np.concatenate(([k], rows_i, cols_j)))
    if redo_total:
        S.log_total = S.total_from_cache()
    return delta


def _reanchor(val: np.ndarray, lg: np.ndarray, idx: np.ndarray) -> None:
    v = val[idx]
    out = (v < _LO) | (v > _HI)
    if out.any():
        j = idx[out]
        lg[j] += np.log(val[j])
        val[j] = 1.0


class UpdateObserver(Protocol):
    def before_update(self, state: ScalingState, k: int) -> None: ...
    def after_update(self, state: ScalingState, k: int, delta: float) -> None: ...


def osborne_update(S: ScalingState, k: int, quant: QuantConfig | None = None,
                   observer: UpdateObserver | None = None) -> float:
    """Balance row ``k`` against column ``k``; return the shift applied to ``x_k``.

    Diagonal entries are invariant under the scaling and are left out of the
    shift, so after an exact update the full row and column sums agree.
    """
    if observer is not None:
        observer.before_update(S, k)
    lr, lc, xk_new = _target(S, k, quant)
    delta = _apply(S, k, lr, lc, xk_new)
    S.maybe_refresh()
    if debug_enabled():
        S.check_integrity()
    if observer is not None:
        observer.after_update(S, k, delta)
    return delta


def _assert_independent(S: ScalingState, block: Sequence[int]) -> None:
    M = S.matrix
    members = set(block)
    for k in block:
        a, b = S._ro_ptr[k], S._ro_ptr[k + 1]
        c, d = S._co_ptr[k], S._co_ptr[k + 1]
        nb = set(M.ro_nbr[a:b].tolist()) | set(M.co_nbr[c:d].tolist())
        clash = nb & members
        assert not clash, f"block contains adjacent coordinates {k} and {min(clash)}"


def block_round(S: ScalingState, block: Sequence[int], quant: QuantConfig | None = None,
                executor: ThreadPoolExecutor | None = None,
                observer: UpdateObserver | None = None) -> int:
    """Osborne updates on every coordinate of one color class.

    Targets are computed from the same ``x`` (possibly across worker threads)
    and then applied in block order; since no two members are adjacent, a
    member's target does not depend on the others' updates.
    """
    ks = [int(k) for k in block]
    if debug_enabled():
        _assert_independent(S, ks)
    if executor is not None and len(ks) > 1:
        workers = getattr(executor, "_max_workers", 1)
        size = max(1, -(-len(ks) // workers))
        chunks = [ks[i:i + size] for i in range(0, len(ks), size)]
        targets = [t for part in executor.map(lambda c: [_target(S, k, quant) for k in c], chunks)
                   for t in part]
    else:
        targets = [_target(S, k, quant) for k in ks]
    for k, (lr, lc, xk_new) in zip(ks, targets):
        if observer is not None:
            observer.before_update(S, k)
        delta = _apply(S, k, lr, lc, xk_new)
        if observer is not None:
            observer.after_update(S, k, delta)
    if S.tracked:
        S.log_total = S.total_from_cache()
    S.maybe_refresh()
    if debug_enabled():
        S.check_integrity()
    return len(ks)


def is_eps_balanced(S: ScalingState, eps: float) -> bool:
    """``||r(A) - c(A)||_1 / sum(A) <= eps``, from cached sums when tracked."""
    if S.tracked:
        return S.cached_l1() <= eps
    if S.fresh_version != S.version:
        S.refresh()
    return S.fresh_l1 <= eps


# -- coordinate and block selection ------------------------------------------

class _Uniform:
    """Uniform draws from ``range(n)``, fetched from the generator in batches."""

    BATCH = 4096

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf: list[int] = []
        self.pos = 0

    def __call__(self) -> int:
        if self.pos == len(self.buf):
            self.buf = self.rng.integers(0, self.n, size=self.BATCH).tolist()
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return v


class RandomSelector:
    def __init__(self, n: int, rng: np.random.Generator):
        self._draw = _Uniform(n, rng)

    def select(self, S: ScalingState) -> int:
        return self._draw()


class CyclicSelector:
    """A fresh random permutation of ``range(n)`` for every cycle."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []
        self.cycle_position = 0

    def select(self, S: ScalingState) -> int:
        if self.cycle_position == len(self.order):
            self.order = self.rng.permutation(self.n).tolist()
            self.cycle_position = 0
        k = self.order[self.cycle_position]
        self.cycle_position += 1
        return k


class GreedySelector:
    """``argmax_k |sqrt(r_k) - sqrt(c_k)|``, ties to the lowest index."""

    def select(self, S: ScalingState) -> int:
        pr, pc = S.normalized_offdiag()
        return int(np.argmax(np.abs(np.sqrt(pr) - np.sqrt(pc))))


class _Fenwick:
    def __init__(self, w: Sequence[float]):
        n = len(w)
        self.n = n
        self.w = list(w)
        t = [0.0] * (n + 1)
        for i, v in enumerate(self.w, 1):
            t[i] += v
            j = i + (i & -i)
            if j <= n:
                t[j] += t[i]
        self.t = t
        self.top = 1 << (n.bit_length() - 1) if n else 0

    def set(self, i: int, v: float) -> None:
        d = v - self.w[i]
        self.w[i] = v
        i += 1
        while i <= self.n:
            self.t[i] += d
            i += i & -i

    def total(self) -> float:
        s, i = 0.0, self.n
        while i > 0:
            s += self.t[i]
            i -= i & -i
        return s

    def find(self, u: float) -> int:
        """Smallest index whose prefix sum exceeds ``u``."""
        pos, step = 0, self.top
        while step:
            nxt = pos + step
            if nxt <= self.n and self.t[nxt] <= u:
                pos = nxt
                u -= self.t[nxt]
            step >>= 1
        return min(pos, self.n - 1)


class WeightedSelector:
    """Draw ``k`` with probability ``(r_k + c_k) / (2 sum_ij A_ij)``.

    Weights live in a Fenwick tree, rebuilt every ``n`` updates and patched
    for each touched coordinate in between.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.tree: _Fenwick | None = None
        self.built_at = -1
        self.ref = 0.0

    def _weights(self, S: ScalingState, idx=None) -> np.ndarray:
        if idx is None:
            idx = slice(None)
        with np.errstate(under="ignore"):
            r = S.r_val[idx] * np.exp(S.r_log[idx] - self.ref)
            c = S.c_val[idx] * np.exp(S.c_log[idx] - self.ref)
            d = S._diag_lin[idx] * math.exp(-self.ref) if math.isfinite(self.ref) else 0.0
        return r + c + 2.0 * d

    def select(self, S: ScalingState) -> int:
        if self.tree is None or S.updates - self.built_at >= self.n:
            self.ref = S.log_total
            self.tree = _Fenwick(self._weights(S).tolist())
            self.built_at = S.updates
            S.touched = []
        elif S.touched:
            idx = np.unique(np.concatenate(S.touched))
            for i, v in zip(idx.tolist(), self._weights(S, idx).tolist()):
                self.tree.set(i, v)
            S.touched = []
        return self.tree.find(float(self.rng.random()) * self.tree.total())


class GreedyBlockSelector:
    """Block maximising the mean of ``(sqrt(r_k) - sqrt(c_k))**2`` over its members."""

    def __init__(self, coloring: Coloring):
        self.label = coloring.block_of()
        self.sizes = np.array([len(b) for b in coloring.blocks], dtype=float)

    def select(self, S: ScalingState) -> int:
        pr, pc = S.normalized_offdiag()
        sq = (np.sqrt(pr) - np.sqrt(pc)) ** 2
        score = np.bincount(self.label, weights=sq, minlength=self.sizes.size) / self.sizes
        return int(np.argmax(score))


def make_selector(cfg: VariantConfig, n: int, rng: np.random.Generator):
    v = cfg.variant
    p = cfg.coloring.p if cfg.coloring is not None else n
    if v == "random":
        return RandomSelector(n, rng)
    if v == "cyclic":
        return CyclicSelector(n, rng)
    if v == "greedy":
        return GreedySelector()
    if v == "weighted":
        return WeightedSelector(n, rng)
    if v == "block-random":
        return RandomSelector(p, rng)
    if v == "block-cyclic":
        return CyclicSelector(p, rng)
    return GreedyBlockSelector(cfg.coloring)


# -- the run loop ---------------------------------------------------------------

@dataclass
class RunResult:
    x: np.ndarray
    iterations: int
    rounds: int
    op_count: int
    converged: bool
    trace: list[TraceRecord]
    final_l1: float
    final_phi: float
    matrix: LogSparseMatrix = field(repr=False)
    config: VariantConfig = field(repr=False)
    bit_widths: dict[str, float] | None = None


def run(M: LogSparseMatrix, cfg: VariantConfig,
        observer: UpdateObserver | None = None) -> RunResult:
    """Balance ``M`` to l1 accuracy ``cfg.epsilon``.

    The result is a deterministic function of ``(M, cfg)``; the thread count
    only changes how block targets are computed, never their values.
    Raises :class:`NotBalanceableError` when the support graph is not
    strongly connected.
    """
    G = SupportGraph.from_matrix(M)
    comps = scc_decompose(G)
    if len(comps) != 1:
        raise NotBalanceableError(comps)
    if cfg.is_block:
        validate_coloring(G, cfg.coloring)
    quant = cfg.quant
    Mq = quantize_logs(M, quant) if quant is not None else M
    S = init_state(Mq, tracked=cfg.variant in TRACKED_VARIANTS)
    rng = np.random.Generator(np.random.PCG64(int(cfg.seed)))
    selector = make_selector(cfg, M.n, rng)
    blocks = cfg.coloring.blocks if cfg.is_block else None
    eps = cfg.epsilon
    stride = cfg.trace_stride
    debug = debug_enabled()
    executor = ThreadPoolExecutor(cfg.threads) if cfg.is_block and cfg.threads > 1 else None

    trace: list[TraceRecord] = []

    def record() -> None:
        rec = metrics(S)
        trace.append(rec)
        if not S.tracked:
            S.fresh_l1, S.fresh_version = rec.l1_imbalance, S.version

    def converged() -> bool:
        if S.tracked:
            if S.cached_l1() > eps:
                return False
            # confirm against a full recomputation before stopping
            return S.refresh() <= eps
        return S.fresh_version == S.version and S.fresh_l1 <= eps

    x_lo = x_hi = 0.0
    rounds = 0
    ok = False
    if stride:
        record()
    try:
        while True:
            if converged():
                ok = True
                break
            if cfg.max_ops is not None and S.op_count >= cfg.max_ops:
                break
            if blocks is None:
                k = selector.select(S)
                osborne_update(S, k, quant, observer)
                if quant is not None:
                    xk = float(S.x[k])
                    x_lo, x_hi = min(x_lo, xk), max(x_hi, xk)
            else:
                ell = selector.select(S)
                block_round(S, blocks[ell], quant, executor, observer)
                if quant is not None:
                    xs = S.x[list(blocks[ell])]
                    x_lo, x_hi = min(x_lo, float(xs.min())), max(x_hi, float(xs.max()))
            rounds += 1
            if stride and rounds % stride == 0:
                record()
            if debug:
                log.debug("round %d: updates=%d ops=%d", rounds, S.updates, S.op_count)
    finally:
        if executor is not None:
            executor.shutdown()

    if stride and (not trace or trace[-1].op_count != S.op_count or trace[-1].iteration != S.updates):
        record()
    final = metrics(S)
    bits = None
    if quant is not None:
        lv = Mq.logv
        span = float(lv.max() - lv.min()) if lv.size else 0.0
        deg = int(max(np.diff(Mq.ro_ptr).max(initial=0), np.diff(Mq.co_ptr).max(initial=0), 1))
        bits = {
            "log_entries": bit_width(span, quant.gamma),
            "iterates": bit_width(x_hi - x_lo, quant.tau),
            "log_sum_exp": bit_width(-drop_threshold(deg, quant.tau), quant.tau / 4),
        }
    x = S.x - S.x.min()
    return RunResult(
        x=x,
        iterations=S.updates,
        rounds=rounds,
        op_count=S.op_count,
        converged=ok,
        trace=trace,
        final_l1=final.l1_imbalance,
        final_phi=final.phi,
        matrix=Mq,
        config=cfg,
        bit_widths=bits,
    )
