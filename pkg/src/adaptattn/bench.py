"""Analytic FLOP/memory accounting and wall-clock timing of the attention layers.

FLOPs are multiply-adds of every matrix product plus ``SOFTMAX_COST`` per
softmax entry (one entry per head per query-key pair). Elementwise scaling,
bias adds and the routing MLP are not counted.
"""

from __future__ import annotations

import csv
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .attention import frame_attention, global_full_attention
from .numcore import SOFTMAX_COST, ParamStore, Tensor
from .sparse_global import compressed_count, global_mixing, init_block, route
from .tokens import TokenBatch

CSV_COLUMNS = (
    "L", "M", "S", "D", "H", "k_mean", "flops_full", "flops_sparse",
    "ms_frame", "ms_full", "ms_sparse", "speedup_analytic", "speedup_measured",
)
TIMING_COLUMNS = ("ms_frame", "ms_full", "ms_sparse", "speedup_measured")


class BenchWarning(UserWarning):
    pass


def _check_dims(*dims: int) -> None:
    if any(d < 0 for d in dims):
        raise ValueError(f"dimensions must be non-negative: {dims}")


def attention_flops(n_q: int, n_kv: int, D: int, H: int) -> int:
    """Projections (Q, K, V, output), QK^T and AV products, softmax."""
    proj = 2 * n_q * D * D + 2 * n_kv * D * D
    return proj + 2 * n_q * n_kv * D + SOFTMAX_COST * H * n_q * n_kv


def flop_count_full(L: int, M: int, S: int, D: int, H: int) -> int:
    _check_dims(L, M, S, D, H)
    T = L * (M + S)
    return attention_flops(T, T, D, H)


def kv_count(L: int, M: int, S: int, ks: Sequence[float], ref_frame: bool = False) -> int:
    mks = [compressed_count(M, k) for k in ks]
    return sum(mks) + L * S + ((M + S) if ref_frame else 0)


def compression_flops(M: int, D: int, ks: Sequence[float]) -> int:
    """Row-wise weight generation M*D*M_k plus aggregation M_k*M*D, per frame."""
    return sum(2 * M * D * compressed_count(M, k) for k in ks)


def flop_count_sparse(
    L: int, M: int, S: int, D: int, H: int, ks: Sequence[float], ref_frame: bool = False
) -> int:
    """``ks`` holds the routed sparsity ratio of each of the L frames."""
    _check_dims(L, M, S, D, H)
    if len(ks) != L:
        raise ValueError(f"need one ratio per frame: {len(ks)} ratios for L={L}")
    T = L * (M + S)
    return compression_flops(M, D, ks) + attention_flops(T, kv_count(L, M, S, ks, ref_frame), D, H)


def activation_bytes(n_q: int, n_kv: int, D: int, H: int, itemsize: int = 4) -> int:
    """Live activations of one attention layer: input, Q, K, V, scores and
    probabilities, per-head context and output."""
    return itemsize * (4 * n_q * D + 2 * n_kv * D + 2 * H * n_q * n_kv)


def mem_estimate(
    L: int, M: int, S: int, D: int, H: int, ks: Sequence[float] | None = None,
    ref_frame: bool = False, itemsize: int = 4,
) -> int:
    """Peak activation estimate of global attention; dense when ``ks`` is None."""
    T = L * (M + S)
    if ks is None:
        return activation_bytes(T, T, D, H, itemsize)
    n_kv = kv_count(L, M, S, ks, ref_frame)
    comp = sum(M * compressed_count(M, k) for k in ks) + n_kv * D
    return activation_bytes(T, n_kv, D, H, itemsize) + itemsize * comp


@dataclass
class BenchConfig:
    M: int = 196
    S: int = 2
    D: int = 64
    H: int = 4
    ratios: tuple[float, ...] = (3 / 4, 8 / 9, 15 / 16)
    ref_frame: bool = False
    seed: int = 0
    reps: int = 9
    warmup: int = 2
    dtype: str = "float32"


@dataclass
class Timing:
    mean: float
    median: float
    stdev: float


@dataclass
class BenchReport:
    L: int
    M: int
    S: int
    D: int
    H: int
    ks: list[float]
    flops_full: int
    flops_sparse: int
    frame: Timing
    full: Timing
    sparse: Timing
    mem_full_bytes: int
    mem_sparse_bytes: int
    warnings: list[str] = field(default_factory=list)

    @property
    def k_mean(self) -> float:
        return float(np.mean(self.ks))

    @property
    def speedup_analytic(self) -> float:
        return self.flops_full / self.flops_sparse

    @property
    def speedup_measured(self) -> float:
        return self.full.median / self.sparse.median

    @property
    def ratio_full_frame(self) -> float:
        return self.full.median / self.frame.median

    def row(self) -> dict:
        return {
            "L": self.L, "M": self.M, "S": self.S, "D": self.D, "H": self.H,
            "k_mean": f"{self.k_mean:.6f}",
            "flops_full": self.flops_full, "flops_sparse": self.flops_sparse,
            "ms_frame": f"{self.frame.median:.4f}", "ms_full": f"{self.full.median:.4f}",
            "ms_sparse": f"{self.sparse.median:.4f}",
            "speedup_analytic": f"{self.speedup_analytic:.6f}",
            "speedup_measured": f"{self.speedup_measured:.4f}",
        }


def time_call(fn, reps: int, warmup: int) -> tuple[Timing, list[str]]:
    """Median-of-``reps`` wall clock in milliseconds after ``warmup`` untimed calls."""
    if reps < 3:
        raise ValueError("need at least 3 timed repetitions")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    med = statistics.median(samples)
    notes = []
    tick_ms = time.get_clock_info("perf_counter").resolution * 1e3
    if med < 10 * tick_ms:
        msg = f"median {med:.6f} ms below 10x clock tick ({tick_ms:.6f} ms); increase work"
        warnings.warn(msg, BenchWarning, stacklevel=2)
        notes.append(msg)
    return Timing(statistics.fmean(samples), med, statistics.stdev(samples)), notes


def bench_one(cfg: BenchConfig, L: int) -> BenchReport:
    dtype = np.dtype(cfg.dtype)
    ps = ParamStore(cfg.seed, dtype=dtype)
    blk = init_block(ps, "bench", cfg.D, cfg.H, cfg.M, cfg.ratios, cfg.ref_frame)
    rng = np.random.default_rng([cfg.seed, L])
    tokens = rng.standard_normal((L, cfg.M + cfg.S, cfg.D)).astype(dtype)
    batch = TokenBatch(Tensor(tokens), cfg.M, cfg.S)
    with nc.no_grad():
        decision = route(batch, blk)
        ks = [float(k) for k in decision.k_selected]
        t_frame, n1 = time_call(lambda: frame_attention(batch, blk.frame_attn), cfg.reps, cfg.warmup)
        t_full, n2 = time_call(lambda: global_full_attention(batch, blk.global_attn), cfg.reps, cfg.warmup)
        t_sparse, n3 = time_call(lambda: global_mixing(batch, blk, "full"), cfg.reps, cfg.warmup)
    return BenchReport(
        L=L, M=cfg.M, S=cfg.S, D=cfg.D, H=cfg.H, ks=ks,
        flops_full=flop_count_full(L, cfg.M, cfg.S, cfg.D, cfg.H),
        flops_sparse=flop_count_sparse(L, cfg.M, cfg.S, cfg.D, cfg.H, ks, cfg.ref_frame),
        frame=t_frame, full=t_full, sparse=t_sparse,
        mem_full_bytes=mem_estimate(L, cfg.M, cfg.S, cfg.D, cfg.H, itemsize=dtype.itemsize),
        mem_sparse_bytes=mem_estimate(L, cfg.M, cfg.S, cfg.D, cfg.H, ks, cfg.ref_frame, dtype.itemsize),
        warnings=n1 + n2 + n3,
    )


def run_bench(cfg: BenchConfig, frame_counts: Sequence[int]) -> list[BenchReport]:
    """Sequential sweep over frame counts (never parallel: timings would interfere)."""
    return [bench_one(cfg, L) for L in frame_counts]


def write_csv(path, reports: Sequence[BenchReport], header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_long_csv(path, reports: Sequence[BenchReport], header: Sequence[str] = ()) -> None:
    """One ``L,series,value`` row per measurement, ready for plotting."""
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["L", "series", "value"])
        for r in reports:
            for series, value in (
                ("ms_frame", f"{r.frame.median:.4f}"),
                ("ms_full", f"{r.full.median:.4f}"),
                ("ms_sparse", f"{r.sparse.median:.4f}"),
                ("flops_full", r.flops_full),
                ("flops_sparse", r.flops_sparse),
                ("mem_full_bytes", r.mem_full_bytes),
                ("mem_sparse_bytes", r.mem_sparse_bytes),
            ):
                w.writerow([r.L, series, value])
