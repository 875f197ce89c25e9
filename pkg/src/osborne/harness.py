"""Command-line entry point: load or generate a matrix, balance it, report.

Example::

    balance --generate erdos-renyi:200:0.05:7 --variant random --epsilon 0.1 \\
        --summary out.json --trace out.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import balancer
from .balancer import NotBalanceableError, VariantConfig, run
from .diagnostics import audit, imbalance, l2_imbalance, write_trace
from .graph import Coloring, SupportGraph, diameter, greedy_coloring, scc_decompose
from .logmat import LogSparseMatrix, from_log_triplets, lp_preprocess, stats
from .quantized import default_quant

log = logging.getLogger("osborne")

MM_HEADER = "%%matrixmarket matrix coordinate real general"
LOG_DOMAIN_TAG = "%balancer: log-domain"
KINDS = ("erdos-renyi", "directed-cycle", "positive-row-col", "dense-positive")


class MatrixMarketError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def parse_matrix_market(path) -> LogSparseMatrix:
    """Read a square coordinate Matrix Market file (1-indexed).

    A comment line ``%balancer: log-domain`` marks the values as ``log K_ij``;
    otherwise values must be strictly positive.
    """
    log_domain = False
    size = None
    trips: list[tuple[int, int, float]] = []
    seen: dict[tuple[int, int], int] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if lineno == 1:
                if " ".join(line.lower().split()) != MM_HEADER:
                    raise MatrixMarketError(path, 1, f"expected header '{MM_HEADER}'")
                continue
            if line.startswith("%"):
                if line.lower().replace(" ", "") == LOG_DOMAIN_TAG.replace(" ", ""):
                    log_domain = True
                continue
            if not line:
                continue
            parts = line.split()
            if size is None:
                try:
                    nr, nc, nnz = (int(t) for t in parts)
                except ValueError:
                    raise MatrixMarketError(path, lineno, "size line must be 'rows cols nnz'") from None
                if nr != nc or nr < 1:
                    raise MatrixMarketError(path, lineno, f"matrix must be square and nonempty, got {nr}x{nc}")
                size = (nr, nnz)
                continue
            if len(parts) != 3:
                raise MatrixMarketError(path, lineno, "entry line must be 'row col value'")
            try:
                i, j, v = int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])
            except ValueError:
                raise MatrixMarketError(path, lineno, f"cannot parse entry {line!r}") from None
            n = size[0]
            if not (0 <= i < n and 0 <= j < n):
                raise MatrixMarketError(path, lineno, f"index ({i + 1}, {j + 1}) out of range for n={n}")
            if not math.isfinite(v):
                raise MatrixMarketError(path, lineno, f"non-finite value {parts[2]}")
            if not log_domain:
                if v <= 0:
                    raise MatrixMarketError(path, lineno, f"nonpositive value {v!r}")
                v = math.log(v)
            if (i, j) in seen:
                raise MatrixMarketError(path, lineno, f"duplicate entry ({i + 1}, {j + 1}), "
                                                      f"first on line {seen[i, j]}")
            seen[i, j] = lineno
            trips.append((i, j, v))
    if size is None:
        raise MatrixMarketError(path, 1, "missing size line")
    if len(trips) != size[1]:
        raise MatrixMarketError(path, lineno, f"expected {size[1]} entries, found {len(trips)}")
    return from_log_triplets(size[0], trips)


def write_matrix_market(path, M: LogSparseMatrix, log_domain: bool = True) -> None:
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if log_domain:
            fh.write(LOG_DOMAIN_TAG + "\n")
        fh.write(f"{M.n} {M.n} {M.m}\n")
        for i, j, v in M.entries():
            fh.write(f"{i + 1} {j + 1} {v if log_domain else math.exp(v):.17g}\n")


def read_coloring(path) -> Coloring:
    blocks = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            blocks.append([int(t) for t in line.split()])
    return Coloring.from_blocks(blocks)


# -- instance generation ----------------------------------------------------------

@dataclass(frozen=True)
class InstanceSpec:
    kind: str
    n: int
    param: float = 0.0
    log_range: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown instance kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.kind in ("erdos-renyi", "positive-row-col") and not 0 <= self.param <= 1:
            raise ValueError(f"density must lie in [0, 1], got {self.param}")
        lo, hi = self.log_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError(f"bad log range {self.log_range}")

    @classmethod
    def parse(cls, text: str, log_range=(-1.0, 1.0)) -> "InstanceSpec":
        """``kind:n:param:seed``."""
        parts = text.split(":")
        if len(parts) != 4:
            raise ValueError(f"expected kind:n:param:seed, got {text!r}")
        kind, n, param, seed = parts
        return cls(kind, int(n), float(param), tuple(log_range), int(seed))


def _repair(n: int, src: np.ndarray, dst: np.ndarray) -> list[tuple[int, int]]:
    """Edges closing a cycle through one vertex of each strongly connected component."""
    comps = scc_decompose(SupportGraph.from_edges(n, list(zip(src.tolist(), dst.tolist()))))
    if len(comps) == 1:
        return []
    reps = [c[0] for c in comps]
    have = set(zip(src.tolist(), dst.tolist()))
    ring = [(reps[i], reps[(i + 1) % len(reps)]) for i in range(len(reps))]
    return [e for e in ring if e not in have]


def build_instance(spec: InstanceSpec) -> tuple[LogSparseMatrix, int]:
    """Generate ``spec``'s matrix; also return the number of edges added for connectivity."""
    n = spec.n
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.kind == "directed-cycle":
        src = np.arange(n)
        dst = (src + 1) % n
    elif spec.kind == "dense-positive":
        mask = ~np.eye(n, dtype=bool)
        src, dst = np.nonzero(mask)
    else:
        mask = rng.random((n, n)) < spec.param
        np.fill_diagonal(mask, False)
        if spec.kind == "positive-row-col":
            mask[0, 1:] = True
            mask[1:, 0] = True
        src, dst = np.nonzero(mask)
    if n == 1 and src.size == 0:
        src = dst = np.zeros(1, dtype=np.int64)
    extra = _repair(n, src, dst)
    if extra:
        e = np.array(extra, dtype=np.int64)
        src = np.concatenate([src, e[:, 0]])
        dst = np.concatenate([dst, e[:, 1]])
    lo, hi = spec.log_range
    logv = rng.uniform(lo, hi, size=src.size) if hi > lo else np.full(src.size, lo)
    M = LogSparseMatrix(n, src, dst, logv)
    return M, len(extra)


def generate_instance(spec: InstanceSpec) -> LogSparseMatrix:
    return build_instance(spec)[0]


# -- CLI --------------------------------------------------------------------------------

def _range(text: str) -> tuple[float, float]:
    lo, hi = text.split(":")
    return float(lo), float(hi)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="balance", description="Balance a nonnegative matrix with Osborne's algorithm.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="Matrix Market coordinate file")
    src.add_argument("--generate", metavar="KIND:N:PARAM:SEED",
                     help=f"generate an instance; KIND is one of {', '.join(KINDS)}")
    ap.add_argument("--log-range", type=_range, default=(-1.0, 1.0), metavar="LO:HI",
                    help="range of generated log-weights, e.g. --log-range=-3:3 (default -1:1)")
    ap.add_argument("--variant", choices=balancer.VARIANTS, default="random")
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=("exact", "lowbit"), default="exact")
    ap.add_argument("--lp", type=float, default=1.0, help="balance in l_p by working with K**p")
    ap.add_argument("--coloring", default="auto", help="'auto' or a file with one block per line")
    ap.add_argument("--max-ops", type=int, default=None)
    ap.add_argument("--trace", help="write the per-update trace as CSV")
    ap.add_argument("--trace-stride", type=int, default=1, help="record every k-th update (0 disables)")
    ap.add_argument("--summary", help="write the summary JSON here (default: stdout)")
    ap.add_argument("--skip-diameter", action="store_true")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    return ap


def summarize(M: LogSparseMatrix, M_orig: LogSparseMatrix, cfg: VariantConfig, result,
              d, report, wall_ms: float, extra: dict | None = None) -> dict:
    st = stats(M_orig)
    out = {
        "variant": cfg.variant,
        "n": M.n,
        "m": M.m,
        "epsilon": cfg.epsilon,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "iterations": result.iterations,
        "rounds": result.rounds,
        "op_count": result.op_count,
        "converged": result.converged,
        "final_l1": result.final_l1,
        "final_phi": result.final_phi,
        "final_l1_original": imbalance(M_orig, result.x),
        "final_l2": l2_imbalance(result.matrix, result.x),
        "d": None if d is None else (d if math.isfinite(d) else None),
        "log_kappa": st.log_kappa,
        "wall_time_ms": wall_ms,
        "audit": report.as_dict() if report is not None else None,
    }
    if cfg.quant is not None:
        out["gamma"], out["tau"] = cfg.quant.gamma, cfg.quant.tau
        out["bit_widths"] = result.bit_widths
    if cfg.coloring is not None:
        out["p"] = cfg.coloring.p
    if extra:
        out.update(extra)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if balancer.debug_enabled():
        logging.basicConfig(level=logging.DEBUG, format="%(name)s: %(message)s")
    extra: dict = {}
    try:
        if args.input:
            M = parse_matrix_market(args.input)
        else:
            M, repairs = build_instance(InstanceSpec.parse(args.generate, args.log_range))
            extra["repairs"] = repairs
        M = lp_preprocess(M, args.lp)
    except (OSError, ValueError) as exc:
        print(f"balance: {exc}", file=sys.stderr)
        return 2
    if args.lp != 1:
        extra["lp"] = args.lp

    G = SupportGraph.from_matrix(M)
    comps = scc_decompose(G)
    if len(comps) != 1:
        sizes = sorted((len(c) for c in comps), reverse=True)
        print(f"balance: matrix is reducible: {len(comps)} strongly connected components "
              f"of sizes {sizes}; balance each diagonal block separately", file=sys.stderr)
        return 3
    if args.variant == "greedy" and args.mode == "lowbit" or \
            args.variant == "block-greedy" and args.mode == "lowbit":
        print("balance: greedy variants need exact mode", file=sys.stderr)
        return 2

    coloring = None
    if args.variant in balancer.BLOCK_VARIANTS:
        coloring = greedy_coloring(G) if args.coloring == "auto" else read_coloring(args.coloring)
    d = None if args.skip_diameter else diameter(G)
    try:
        cfg = VariantConfig(
            variant=args.variant,
            epsilon=args.epsilon,
            seed=args.seed,
            quant=default_quant(M.n, args.epsilon) if args.mode == "lowbit" else None,
            max_ops=args.max_ops,
            coloring=coloring,
            trace_stride=args.trace_stride,
            threads=max(1, args.threads),
        )
        t0 = time.perf_counter()
        result = run(M, cfg)
        wall = (time.perf_counter() - t0) * 1e3
    except (NotBalanceableError, ValueError) as exc:
        print(f"balance: {exc}", file=sys.stderr)
        return 2

    report = None
    if cfg.trace_stride:
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = audit(result, stats(result.matrix), d, cfg)
    summary = summarize(M, M, cfg, result, d, report, wall, extra)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    else:
        print(text)
    if args.trace:
        write_trace(args.trace, result.trace)
    return 0 if result.converged else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
