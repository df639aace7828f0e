"""Per-frame sparsity routing: pool, score with a gating MLP, pick one branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ParamStore, Tensor, gelu, matmul, softmax_rows
from .tokens import ConfigError, TokenBatch


@dataclass
class GatingParams:
    w1: Tensor  # D x D_h
    b1: Tensor
    w2: Tensor  # D_h x n_branches
    b2: Tensor

    @property
    def n_branches(self) -> int:
        return self.w2.shape[1]


def init_gating(ps: ParamStore, prefix: str, D: int, n_branches: int, hidden: int | None = None):
    hidden = D if hidden is None else hidden
    return GatingParams(
        w1=ps.xavier(f"{prefix}.w1", (D, hidden)),
        b1=ps.zeros(f"{prefix}.b1", (hidden,)),
        w2=ps.xavier(f"{prefix}.w2", (hidden, n_branches)),
        b2=ps.zeros(f"{prefix}.b2", (n_branches,)),
    )


@dataclass
class RoutingDecision:
    probs: Tensor  # L x n_branches, differentiable
    branch_index: np.ndarray  # (L,) int
    k_selected: np.ndarray  # (L,) float
    ratios: tuple[float, ...]

    @property
    def n_branches(self) -> int:
        return len(self.ratios)

    def occupancy(self) -> np.ndarray:
        """Fraction of frames routed to each branch."""
        counts = np.bincount(self.branch_index, minlength=self.n_branches)
        return counts / len(self.branch_index)


def validate_ratios(ratios: Sequence[float]) -> tuple[float, ...]:
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ConfigError("at least one sparsity branch is required")
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ConfigError(f"sparsity ratio {r} outside (0, 1)")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ConfigError(f"sparsity ratios must be strictly increasing: {ratios}")
    return ratios


def frame_pool(batch: TokenBatch) -> Tensor:
    """Mean over each frame's patch tokens; special tokens are ignored."""
    return nc.mean(batch.tokens[:, : batch.M, :], axis=1)


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest-sparsity branch on ties
    return np.argmax(probs, axis=-1)


def gate(pooled: Tensor, g: GatingParams, ratios: Sequence[float]) -> RoutingDecision:
    ratios = validate_ratios(ratios)
    if len(ratios) != g.n_branches:
        raise ConfigError(f"{len(ratios)} ratios for a gate with {g.n_branches} outputs")
    logits = matmul(gelu(matmul(pooled, g.w1) + g.b1), g.w2) + g.b2
    return decision_from_logits(logits, ratios)


def decision_from_logits(logits: Tensor, ratios: Sequence[float]) -> RoutingDecision:
    probs = softmax_rows(logits)
    idx = argmax_lowest(probs.data)
    return RoutingDecision(probs, idx, np.asarray(ratios)[idx], tuple(ratios))


def fixed_decision(branch_index, ratios: Sequence[float], dtype=np.float32) -> RoutingDecision:
    """Non-learned routing (one-hot probs) for the fixed-selection ablations."""
    idx = np.asarray(branch_index, dtype=np.int64)
    probs = nc.one_hot(idx, len(ratios), dtype=dtype)
    return RoutingDecision(probs, idx, np.asarray(ratios, dtype=np.float64)[idx], tuple(ratios))


def straight_through(decision: RoutingDecision) -> Tensor:
    """Hard one-hot in the forward pass, gradient of the soft probs in backward.

    Computed as ``one_hot + (p - detach(p))`` so the forward value is exactly
    the one-hot matrix.
    """
    p = decision.probs
    hard = nc.one_hot(decision.branch_index, decision.n_branches, dtype=p.dtype)
    return hard + (p - nc.detach(p))


def route_stats_table(decisions: Sequence[Sequence[RoutingDecision]]) -> list[list[float]]:
    """Per block, the fraction of frames routed to each branch.

    ``decisions[e][n]`` is the decision of block ``n`` on evaluation batch ``e``.
    """
    if not decisions:
        return []
    n_blocks = len(decisions[0])
    table = []
    for n in range(n_blocks):
        idx = np.concatenate([d[n].branch_index for d in decisions])
        nb = decisions[0][n].n_branches
        table.append((np.bincount(idx, minlength=nb) / len(idx)).tolist())
    return table
