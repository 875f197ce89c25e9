"""Osborne-style matrix balancing in the log domain."""

from .balancer import (NotBalanceableError, RunResult, ScalingState, StructuralError,
                       VariantConfig, block_round, init_state, is_eps_balanced,
                       osborne_update, run)
from .diagnostics import (AuditReport, TraceRecord, audit, imbalance, l2_imbalance,
                          metrics, potential, predicted_decrease, tv_with_without_replacement)
from .graph import (Coloring, SupportGraph, diameter, greedy_coloring, is_balanceable,
                    scc_decompose, validate_coloring)
from .logmat import (LogSparseMatrix, MatrixStats, from_dense, from_log_triplets,
                     from_triplets, lp_preprocess, stats)
from .quantized import (QuantConfig, default_quant, logsumexp_lowbit, quantize_logs,
                        truncate_iterate)

__version__ = "0.1.0"
