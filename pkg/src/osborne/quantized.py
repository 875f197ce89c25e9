"""Low-bit execution mode.

Three modifications turn the exact Osborne iteration into one that only
needs logarithmically many bits: log-entries of ``K`` are rounded to a grid
of step ``gamma``, iterates are rounded to a grid of step ``tau``, and each
update's log-sum-exp is evaluated to ``+-tau`` after discarding negligible
terms. Values are quantized in float64; no fixed-width arithmetic is
emulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .logmat import LogSparseMatrix


@dataclass(frozen=True)
class QuantConfig:
    gamma: float
    tau: float

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1 / 3:
            raise ValueError(f"gamma must lie in (0, 1/3), got {self.gamma!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau!r}")


def default_quant(n: int, eps: float) -> QuantConfig:
    """``gamma = eps / (12 n)`` and ``tau = eps**2 / (64 n)``.

    With this gamma the input-truncation error term ``6 n gamma`` equals
    ``eps / 2``.
    """
    if not 0 < eps <= 2:
        raise ValueError(f"eps must lie in (0, 2], got {eps!r}")
    return QuantConfig(gamma=eps / (12 * n), tau=eps * eps / (64 * n))


def round_to_grid(v, step: float):
    return np.rint(np.asarray(v, dtype=np.float64) / step) * step


def quantize_logs(M: LogSparseMatrix, q: QuantConfig) -> LogSparseMatrix:
    return M.with_logv(round_to_grid(M.logv, q.gamma))


def truncate_iterate(x: np.ndarray, tau: float) -> np.ndarray:
    return round_to_grid(x, tau)


def drop_threshold(length: int, tau: float) -> float:
    """Shifted terms below this are discarded; their total mass is < tau/4."""
    return -math.log(4 * length / tau)


def logsumexp_lowbit(zs, tau: float) -> float:
    """Log-sum-exp to within ``+-tau``.

    After shifting by the maximum, terms below ``-log(4 len / tau)`` are
    dropped and the survivors are rounded to a grid of step ``tau / 4``.
    Rounding costs at most ``tau / 8`` and dropping at most ``tau / 4``.
    """
    z = np.asarray(zs, dtype=np.float64)
    if z.size == 0:
        raise ValueError("log-sum-exp of an empty sequence")
    return _lse_lowbit(z, tau)


def _lse_lowbit(z: np.ndarray, tau: float) -> float:
    mx = z.max()
    if z.size == 1:
        return float(mx)
    s = z - mx
    s = s[s >= drop_threshold(z.size, tau)]
    s = round_to_grid(s, tau / 4)
    return float(mx + math.log(np.exp(s).sum()))


def bit_width(value_range: float, step: float) -> float:
    """Bits needed to address ``value_range`` on a grid of width ``step``."""
    return math.log2(max(value_range / step, 1.0)) + 1.0
