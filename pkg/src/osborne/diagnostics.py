"""Imbalance metrics, potential tracking, traces, and the bound auditor.

All quantities here are computed from scratch from ``(K, x)`` in the log
domain, so they serve as an independent check on the balancer's caches.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .logmat import LogSparseMatrix, MatrixStats, segment_lse

if TYPE_CHECKING:  # pragma: no cover
    from .balancer import RunResult, ScalingState, VariantConfig

TRACE_HEADER = ("iter", "ops", "phi", "l1", "hellinger_sq", "var_norm")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    op_count: int
    phi: float
    l1_imbalance: float
    hellinger_sq: float
    var_norm: float


# -- from-scratch marginals -----------------------------------------------------

def offdiag_log_sums(M: LogSparseMatrix, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log row and column sums of the scaled matrix, diagonal excluded."""
    zr = x[M.ro_row] - x[M.ro_nbr] + M.ro_logv
    zc = x[M.co_nbr] - x[np.repeat(np.arange(M.n), np.diff(M.co_ptr))] + M.co_logv
    return segment_lse(zr, M.ro_ptr), segment_lse(zc, M.co_ptr)


def log_marginals(M: LogSparseMatrix, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log row and column sums of ``diag(e^x) K diag(e^-x)``, diagonal included."""
    x = np.asarray(x, dtype=np.float64)
    z = x[M.rows] - x[M.cols] + M.logv
    lr = segment_lse(z, M.row_ptr)
    lc = segment_lse(z[M.col_order], M.col_ptr)
    return lr, lc


def imbalance_from_logs(lr: np.ndarray, lc: np.ndarray, log_total: float) -> float:
    if not math.isfinite(log_total):
        return 0.0
    with np.errstate(under="ignore"):
        return float(np.abs(np.exp(lr - log_total) - np.exp(lc - log_total)).sum())


def _normalized(M: LogSparseMatrix, x) -> tuple[np.ndarray, np.ndarray, float]:
    lr, lc = log_marginals(M, x)
    lT = _lse_vec(lr)
    if not math.isfinite(lT):
        z = np.zeros(M.n)
        return z, z, lT
    with np.errstate(under="ignore"):
        return np.exp(lr - lT), np.exp(lc - lT), lT


def _lse_vec(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    if v.size == 0:
        return -math.inf
    mx = v.max()
    return float(mx + np.log(np.exp(v - mx).sum()))


def potential(M: LogSparseMatrix, x) -> float:
    """``log sum_ij e^{x_i - x_j} K_ij``."""
    x = np.asarray(x, dtype=np.float64)
    return _lse_vec(x[M.rows] - x[M.cols] + M.logv)


def imbalance(M: LogSparseMatrix, x) -> float:
    """``||r(A) - c(A)||_1 / sum(A)``, between 0 and 2."""
    pr, pc, _ = _normalized(M, x)
    return float(np.abs(pr - pc).sum())


def l2_imbalance(M: LogSparseMatrix, x) -> float:
    pr, pc, _ = _normalized(M, x)
    return float(np.sqrt(((pr - pc) ** 2).sum()))


def hellinger_sq(mu: np.ndarray, nu: np.ndarray) -> float:
    """Squared Hellinger distance ``1/2 sum (sqrt(mu) - sqrt(nu))**2``."""
    return float(0.5 * ((np.sqrt(mu) - np.sqrt(nu)) ** 2).sum())


def var_norm(x) -> float:
    x = np.asarray(x)
    return float(x.max() - x.min()) if x.size else 0.0


def metrics_at(M: LogSparseMatrix, x, iteration: int = 0, op_count: int = 0) -> TraceRecord:
    x = np.asarray(x, dtype=np.float64)
    pr, pc, lT = _normalized(M, x)
    return TraceRecord(
        iteration=int(iteration),
        op_count=int(op_count),
        phi=lT,
        l1_imbalance=float(np.abs(pr - pc).sum()),
        hellinger_sq=hellinger_sq(pr, pc),
        var_norm=var_norm(x),
    )


def metrics(S: "ScalingState") -> TraceRecord:
    return metrics_at(S.matrix, S.x, S.updates, S.op_count)


def predicted_decrease(S: "ScalingState", k: int) -> float:
    """Potential drop an Osborne update on ``k`` would cause, from the current marginals.

    Diagonal entries are unaffected by the update, so the off-diagonal
    row and column sums enter the formula.
    """
    lr, lc = S.coordinate_logs(k)
    if lr == -math.inf and lc == -math.inf:
        return 0.0
    if lr == -math.inf or lc == -math.inf:
        raise ValueError(f"coordinate {k} has a zero row or column sum")
    M, x = S.matrix, np.asarray(S.x)
    z = x[M.rows] - x[M.cols] + M.logv
    lT = _lse_vec(z)
    D = (math.exp(0.5 * (lr - lT)) - math.exp(0.5 * (lc - lT))) ** 2
    if D < 0.5:
        return -math.log1p(-D)
    # 1 - D is the mass left after the update: everything outside row and
    # column k, the diagonal entry, and 2 sqrt(r_k c_k); sum it directly
    keep = (M.rows != k) & (M.cols != k) | (M.rows == M.cols)
    left = np.append(z[keep], math.log(2.0) + 0.5 * (lr + lc))
    return lT - _lse_vec(left)


# below this many draws the log-ratio is summed term by term; lgamma
# differences lose ~1e-12 to cancellation
_TV_SERIES_MAX = 4096


def tv_with_without_replacement(n: int, t: int) -> float:
    """Total variation between ``t`` uniform draws from ``[n]`` with and without replacement.

    Equals ``1 - n**-t * n! / (n - t)!``, evaluated in the log domain.
    """
    n, t = int(n), int(t)
    if t < 1 or n < 1:
        raise ValueError("need n >= 1 and t >= 1")
    if t > n:
        raise ValueError(f"t={t} exceeds n={n}")
    if t == 1:
        return 0.0
    if t <= _TV_SERIES_MAX:
        lg = float(np.log1p(-np.arange(1, t) / n).sum())
    else:
        lg = math.lgamma(n + 1) - math.lgamma(n - t + 1) - t * math.log(n)
    return -math.expm1(lg)


# -- iteration bounds ----------------------------------------------------------

def greedy_bound(n: int, d: float, log_kappa: float, eps: float) -> float:
    """Deterministic iteration bound for Greedy Osborne."""
    return min(4 * n * log_kappa / eps**2, 20 * n * d * log_kappa / eps)


def random_bound(n: int, d: float, log_kappa: float, eps: float) -> float:
    """Expected iteration bound for Random Osborne."""
    return min(4 * n * log_kappa / eps**2 + 1, 21 * n * d * log_kappa / eps)


def cyclic_bound(n: int, log_kappa: float, eps: float) -> float:
    """Expected iteration bound for Cyclic Osborne: full cycles times ``n``.

    Each cycle lowers the potential by ``eps**2 / (16 sqrt n)`` in expectation
    while unbalanced, and the potential can drop by at most ``log kappa``.
    """
    return n * (16 * math.sqrt(n) * log_kappa / eps**2 + 1)


def variant_bound(variant: str, n: int, p: int | None, d: float, log_kappa: float,
                  eps: float, lowbit: bool = False) -> float:
    """Iteration (block variants: round) bound for ``variant``.

    Low-bit mode halves the guaranteed per-step progress, so bounds double.
    """
    q = p if variant.startswith("block-") else n
    if q is None:
        raise ValueError("block variants need the number of blocks p")
    if variant in ("greedy", "block-greedy"):
        b = greedy_bound(q, d, log_kappa, eps)
    elif variant in ("random", "block-random", "weighted"):
        b = random_bound(q, d, log_kappa, eps)
    elif variant in ("cyclic", "block-cyclic"):
        b = cyclic_bound(q, log_kappa, eps)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return 2 * b if lowbit else b


# -- audit ----------------------------------------------------------------------

@dataclass(frozen=True)
class Claim:
    claim: str
    bound: float
    observed: float
    status: str  # pass | fail | info
    detail: str = ""

    def as_dict(self) -> dict:
        return {"claim": self.claim, "bound": _jsonable(self.bound),
                "observed": _jsonable(self.observed), "status": self.status,
                "detail": self.detail}


def _jsonable(v: float):
    v = float(v)
    return v if math.isfinite(v) else str(v)


@dataclass
class AuditReport:
    claims: list[Claim] = field(default_factory=list)
    partial: bool = False

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.claims)

    def failures(self) -> list[Claim]:
        return [c for c in self.claims if c.status == "fail"]

    def add(self, claim: str, bound: float, observed: float, ok: bool | None, detail: str = "") -> None:
        status = "info" if ok is None else ("pass" if ok else "fail")
        self.claims.append(Claim(claim, float(bound), float(observed), status, detail))

    def as_dict(self) -> dict:
        return {"passed": self.passed, "partial": self.partial,
                "claims": [c.as_dict() for c in self.claims]}


def audit(result: "RunResult", stats: MatrixStats, d: float | None,
          cfg: "VariantConfig", atol: float = 1e-9) -> AuditReport:
    """Check a finished run against the convergence guarantees.

    ``d`` is the support-graph diameter; ``None`` uses the trivial ``n - 1``.
    Bounds are evaluated on the matrix the run actually balanced.
    """
    rep = AuditReport()
    trace = result.trace
    n = result.matrix.n
    eps = cfg.epsilon
    lk = stats.log_kappa
    if d is None:
        d = n - 1
    lowbit = cfg.quant is not None
    p = cfg.coloring.p if cfg.coloring is not None else None
    per_update = set(r.iteration for r in trace) == set(range(result.iterations + 1)) \
        if not cfg.is_block else len(trace) == result.rounds + 1
    if cfg.trace_stride != 1 or not per_update:
        rep.partial = True
        warnings.warn("trace not recorded at every step: audit is partial", stacklevel=2)

    # (a) iteration counts
    steps = result.rounds if cfg.is_block else result.iterations
    b = variant_bound(cfg.variant, n, p, d, lk, eps, lowbit)
    hard = cfg.variant == "greedy"
    rep.add(f"{cfg.variant}_count", b, steps, (steps <= b) if hard else None,
            "deterministic bound" if hard else "expectation bound, single run")

    if not trace:
        return rep
    phis = np.array([r.phi for r in trace])
    l1 = np.array([r.l1_imbalance for r in trace])
    h2 = np.array([r.hellinger_sq for r in trace])
    vn = np.array([r.var_norm for r in trace])

    # (b) H >= ||mu - nu||_1 / (2 sqrt 2)
    gap = np.sqrt(h2) - l1 / (2 * math.sqrt(2))
    i = int(np.argmin(gap))
    rep.add("hellinger_vs_l1", float(l1[i] / (2 * math.sqrt(2))), float(math.sqrt(h2[i])),
            bool(gap[i] >= -atol), f"worst record {i}")

    # (c) H^2 >= eps^2/8 before convergence
    pre = l1 > eps
    if pre.any():
        worst = float(h2[pre].min())
        rep.add("hellinger_floor", eps**2 / 8, worst, worst >= eps**2 / 8 - atol)
    else:
        rep.add("hellinger_floor", eps**2 / 8, math.nan, True, "vacuous: no unbalanced record")

    # (d) var norm <= d log kappa
    slack = 2 * cfg.quant.tau * n if lowbit else 0.0
    vmax = float(vn.max())
    rep.add("var_norm", d * lk + slack, vmax, vmax <= d * lk + slack + atol)

    # (e) monotone potential, total drop <= log kappa
    # an inexact low-bit step can overshoot the coordinate minimum by ~1.5 tau,
    # which raises the potential by at most half its square
    rise_tol = 2 * cfg.quant.tau**2 if lowbit else 0.0
    rise = float(np.max(np.diff(phis), initial=0.0))
    rep.add("phi_monotone", rise_tol, rise, rise <= rise_tol + atol)
    drop = float(phis[0] - phis[-1])
    rep.add("phi_total_drop", lk, drop, drop <= lk + atol)

    # (g) Phi* branch, with Phi* >= log K_min as a stand-in
    if pre.any():
        need = ((phis[pre] - stats.log_kmin) / (d * lk)) ** 2 / 8 if d * lk > 0 else np.zeros(pre.sum())
        rep.add("hellinger_phi_branch", float(need.max()), float(h2[pre].min()), None,
                "uses log K_min in place of the optimal potential")

    # (h) per-update floor for greedy selection
    if cfg.variant in ("greedy", "block-greedy") and per_update and len(trace) > 1:
        drops = phis[:-1] - phis[1:]
        active = l1[:-1] > eps
        if active.any():
            worst = float(drops[active].min())
            floor_n = eps**2 / (4 * n)
            rep.add("greedy_step_floor", floor_n, worst, worst >= floor_n - atol)
            if cfg.variant == "block-greedy":
                floor_p = eps**2 / (4 * p)
                rep.add("block_greedy_step_floor_p", floor_p, worst, None,
                        "holds for max-sum block choice; the mean rule only guarantees the n floor")
    return rep


def audit_expectation(counts: Sequence[float], bound: float, claim: str = "expected_count") -> Claim:
    """Assert a sample mean over ``>= 20`` seeds lies under an expectation bound."""
    c = np.asarray(counts, dtype=np.float64)
    if c.size < 20:
        raise ValueError("expectation audits need at least 20 seeds")
    mean = float(c.mean())
    return Claim(claim, float(bound), mean, "pass" if mean <= bound else "fail",
                 f"{c.size} seeds, margin {bound / mean if mean else math.inf:.3g}x")


# -- trace CSV --------------------------------------------------------------------

def write_trace(path, trace: Iterable[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace:
            w.writerow([r.iteration, r.op_count, "%.17g" % r.phi, "%.17g" % r.l1_imbalance,
                        "%.17g" % r.hellinger_sq, "%.17g" % r.var_norm])


def read_trace(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = tuple(next(rd))
        if head != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {head}")
        return [TraceRecord(int(a), int(b), float(c), float(d), float(e), float(f))
                for a, b, c, d, e, f in rd]
