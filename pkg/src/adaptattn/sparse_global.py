"""Compressed representative tokens, sparse global cross-attention and the
adaptive alternating block (plus the ablation substitutes)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .attention import (
    AttentionParams,
    frame_attention,
    global_full_attention,
    init_attention,
    multi_head,
    write_matrix,
)
from .numcore import ParamStore, Tensor, concat, gelu, layernorm, matmul, reshape
from .routing import (
    GatingParams,
    RoutingDecision,
    decision_from_logits,
    fixed_decision,
    frame_pool,
    init_gating,
    straight_through,
)
from .tokens import (
    ConfigError,
    PatchifierParams,
    TokenBatch,
    flatten_frames,
    init_patchifier,
    patchify,
    unflatten_frames,
)

VARIANTS = ("full", "V1", "V2", "V3", "V4", "baseline-full-attn")


def compressed_count(M: int, k: float) -> int:
    """floor(M * (1 - k)), robust to representation error in k."""
    return int(math.floor(round(M * (1.0 - k), 9)))


@dataclass
class SparsityBranch:
    ratio: float
    fw_w: Tensor  # D x M_k
    fw_b: Tensor  # M_k
    bias: Tensor  # M x M_k  (B_k)

    def __post_init__(self):
        M, mk = self.bias.shape
        if mk != compressed_count(M, self.ratio):
            raise ConfigError(
                f"branch k={self.ratio}: bias has {mk} columns, expected floor(M(1-k))="
                f"{compressed_count(M, self.ratio)}"
            )
        if mk < 1:
            raise ConfigError(f"branch k={self.ratio} compresses M={M} tokens to zero")
        if mk > M:
            raise ConfigError("compression must not expand the token count")
        if self.fw_w.shape[1] != mk or self.fw_b.shape != (mk,):
            raise ConfigError("weight-generator output width must equal the compressed count")

    @property
    def M(self) -> int:
        return self.bias.shape[0]

    @property
    def n_compressed(self) -> int:
        return self.bias.shape[1]


def init_branch(ps: ParamStore, prefix: str, k: float, M: int, D: int) -> SparsityBranch:
    mk = compressed_count(M, k)
    if mk < 1:
        raise ConfigError(f"sparsity ratio {k} leaves no tokens for M={M} (floor(M(1-k)) = {mk})")
    return SparsityBranch(
        ratio=k,
        # W^T x sums over M tokens; scale so compressed tokens start at unit size
        fw_w=ps.xavier(f"{prefix}.fw_w", (D, mk), gain=1.0 / math.sqrt(M)),
        fw_b=ps.zeros(f"{prefix}.fw_b", (mk,)),
        bias=ps.zeros(f"{prefix}.bias", (M, mk)),
    )


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class BlockParams:
    gating: GatingParams
    branches: list[SparsityBranch]
    global_attn: AttentionParams
    frame_attn: AttentionParams
    mlp: MLPParams
    norms: list[NormParams]  # before global attention, frame attention, MLP
    ref_frame_dense: bool = False
    gate_frozen: bool = False  # routing probs carry no gradient in either direction

    def __post_init__(self):
        ratios = self.ratios
        # k = 0 (no compression) is accepted here for the equivalence oracles
        if any(not 0.0 <= r < 1.0 for r in ratios):
            raise ConfigError(f"branch ratios must lie in [0, 1): {ratios}")
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ConfigError(f"branch ratios must be strictly increasing: {ratios}")
        if self.gating.n_branches != len(self.branches):
            raise ConfigError("gate output width differs from branch count")

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(b.ratio for b in self.branches)


def init_block(
    ps: ParamStore,
    prefix: str,
    D: int,
    heads: int,
    M: int,
    ratios: Sequence[float],
    ref_frame_dense: bool = False,
    mlp_ratio: int = 4,
) -> BlockParams:
    hidden = mlp_ratio * D
    return BlockParams(
        gating=init_gating(ps, f"{prefix}.gate", D, len(ratios)),
        branches=[init_branch(ps, f"{prefix}.branch.{b}", k, M, D) for b, k in enumerate(ratios)],
        global_attn=init_attention(ps, f"{prefix}.global", D, heads),
        frame_attn=init_attention(ps, f"{prefix}.frame", D, heads),
        mlp=MLPParams(
            w1=ps.xavier(f"{prefix}.mlp.w1", (D, hidden)),
            b1=ps.zeros(f"{prefix}.mlp.b1", (hidden,)),
            w2=ps.xavier(f"{prefix}.mlp.w2", (hidden, D)),
            b2=ps.zeros(f"{prefix}.mlp.b2", (D,)),
        ),
        norms=[
            NormParams(ps.ones(f"{prefix}.norm{i}.gamma", (D,)), ps.zeros(f"{prefix}.norm{i}.beta", (D,)))
            for i in range(3)
        ],
        ref_frame_dense=ref_frame_dense,
    )


# --------------------------------------------------------------------------
# compression and key/value assembly
# --------------------------------------------------------------------------


def compression_weights(x: Tensor, branch: SparsityBranch) -> Tensor:
    """W = F_w(x) + B_k, applied row-wise; x is (..., M, D) -> (..., M, M_k)."""
    if x.shape[-2] != branch.M:
        raise ConfigError(f"branch built for M={branch.M} got {x.shape[-2]} patch tokens")
    return matmul(x, branch.fw_w) + branch.fw_b + branch.bias


def compress_frame(x: Tensor, branch: SparsityBranch) -> Tensor:
    """Compressed tokens W^T x, shape (..., M_k, D)."""
    return matmul(nc.swap_last(compression_weights(x, branch)), x)


def grid_indices(M: int, n_keep: int) -> np.ndarray:
    """Every ceil(M / n_keep)-th patch index, starting at 0."""
    return np.arange(0, M, -(-M // n_keep))


def merge_matrix(M: int, n_groups: int, dtype=np.float64) -> np.ndarray:
    """n_groups x M uniform averaging over contiguous runs of patch tokens."""
    group = (np.arange(M) * n_groups) // M
    G = np.zeros((n_groups, M), dtype=dtype)
    G[group, np.arange(M)] = 1.0
    return G / G.sum(axis=1, keepdims=True)


def upsample_matrix(M: int, n_groups: int, dtype=np.float64) -> np.ndarray:
    """M x n_groups nearest-neighbour copy back to the original token count."""
    group = (np.arange(M) * n_groups) // M
    U = np.zeros((M, n_groups), dtype=dtype)
    U[np.arange(M), group] = 1.0
    return U


def assemble_global_kv(
    compressed: Sequence[Tensor], specials: Tensor | None, dense_ref: Tensor | None = None
) -> Tensor:
    """Reference-frame tokens (optional), compressed tokens, then special tokens."""
    parts: list[Tensor] = []
    if dense_ref is not None:
        parts.append(dense_ref)
    parts.extend(compressed)
    if specials is not None and specials.shape[1] > 0:
        parts.append(reshape(specials, (-1, specials.shape[-1])))
    if not parts:
        raise ConfigError("empty key/value set")
    return concat(parts, axis=0) if len(parts) > 1 else parts[0]


def sparse_global_cross_attention(x_dense: Tensor, x_c: Tensor, p: AttentionParams) -> Tensor:
    """Queries from every dense token, keys/values from the compressed set."""
    if x_c.shape[0] < 1:
        raise ConfigError("compressed key/value set is empty")
    return multi_head(x_dense, x_c, p)


def _scatter_frames(L: int, decision: RoutingDecision, fn) -> list[Tensor]:
    """Evaluate ``fn(frames, b)`` per selected branch and return per-frame rows."""
    rows: list[Tensor | None] = [None] * L
    for b in np.unique(decision.branch_index):
        frames = np.nonzero(decision.branch_index == b)[0]
        out = fn(frames, int(b))
        for j, i in enumerate(frames):
            rows[i] = out[j]
    return rows  # type: ignore[return-value]


def compressed_tokens(
    patch: Tensor, decision: RoutingDecision, p: BlockParams, variant: str = "full"
) -> list[Tensor]:
    """Per-frame compressed tokens scaled by the straight-through selection."""
    sel = straight_through(decision)

    def run(frames, b):
        x = patch[frames]
        if variant == "V3":
            idx = grid_indices(p.branches[b].M, p.branches[b].n_compressed)
            c = x[:, idx, :]
        else:
            c = compress_frame(x, p.branches[b])
        return c * reshape(sel[frames, b], (len(frames), 1, 1))

    return _scatter_frames(patch.shape[0], decision, run)


def route(batch: TokenBatch, p: BlockParams, variant: str = "full") -> RoutingDecision:
    nb = len(p.branches)
    dtype = batch.tokens.dtype
    if variant == "V1":
        return fixed_decision(np.arange(batch.L) % nb, p.ratios, dtype=dtype)
    if variant == "V2":
        return fixed_decision(np.full(batch.L, nb // 2), p.ratios, dtype=dtype)
    g = p.gating
    pooled = frame_pool(batch)
    logits = matmul(gelu(matmul(pooled, g.w1) + g.b1), g.w2) + g.b2
    if p.gate_frozen:
        logits = nc.detach(logits)
    return decision_from_logits(logits, p.ratios)


def _merged_global_attention(h: TokenBatch, decision: RoutingDecision, p: BlockParams) -> Tensor:
    """V4: mean-merge patches per frame, full attention, nearest upsample."""
    L, M, S = h.L, h.M, h.S
    dtype = h.tokens.dtype
    sel = straight_through(decision)
    patch = h.tokens[:, :M, :]
    merged = _scatter_frames(
        L,
        decision,
        lambda frames, b: matmul(
            Tensor(merge_matrix(M, p.branches[b].n_compressed, dtype)), patch[frames]
        )
        * reshape(sel[frames, b], (len(frames), 1, 1)),
    )
    seqs = []
    for i in range(L):
        seqs.append(merged[i])
        if S:
            seqs.append(h.tokens[i, M:, :])
    z = concat(seqs, axis=0)
    out = multi_head(z, z, p.global_attn)
    frames, pos = [], 0
    for i in range(L):
        mk = merged[i].shape[0]
        up = matmul(Tensor(upsample_matrix(M, mk, dtype)), out[pos : pos + mk])
        pos += mk
        if S:
            up = concat([up, out[pos : pos + S]], axis=0)
            pos += S
        frames.append(reshape(up, (1, M + S, -1)))
    return concat(frames, axis=0)


def global_mixing(h: TokenBatch, p: BlockParams, variant: str = "full"):
    """Cross-frame sublayer output (L x (M+S) x D) and the routing decision."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "baseline-full-attn":
        return global_full_attention(h, p.global_attn).tokens, None
    decision = route(h, p, variant)
    if variant == "V4":
        return _merged_global_attention(h, decision, p), decision
    patch = h.tokens[:, : h.M, :]
    comp = compressed_tokens(patch, decision, p, variant)
    ref = h.tokens[0] if p.ref_frame_dense else None
    x_c = assemble_global_kv(comp, h.tokens[:, h.M :, :], ref)
    out = sparse_global_cross_attention(flatten_frames(h), x_c, p.global_attn)
    return unflatten_frames(out, h.L), decision


def _norm(x: Tensor, n: NormParams) -> Tensor:
    return layernorm(x, n.gamma, n.beta)


def feed_forward(x: Tensor, m: MLPParams) -> Tensor:
    return matmul(gelu(matmul(x, m.w1) + m.b1), m.w2) + m.b2


def adaptive_block_forward(
    batch: TokenBatch, p: BlockParams, variant: str = "full"
) -> tuple[TokenBatch, RoutingDecision | None]:
    """Pre-norm residual block: global mixing, frame attention, feed-forward."""
    x = batch.tokens
    h = batch.with_tokens(_norm(x, p.norms[0]))
    mixed, decision = global_mixing(h, p, variant)
    x = x + mixed
    x = x + frame_attention(batch.with_tokens(_norm(x, p.norms[1])), p.frame_attn).tokens
    x = x + feed_forward(_norm(x, p.norms[2]), p.mlp)
    return batch.with_tokens(x), decision


def ablation_variant(batch: TokenBatch, p: BlockParams, variant: str):
    if variant not in ("V1", "V2", "V3", "V4"):
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return adaptive_block_forward(batch, p, variant)


def full_block_forward(batch: TokenBatch, p: BlockParams) -> TokenBatch:
    """Reference alternating block with dense global attention."""
    return adaptive_block_forward(batch, p, "baseline-full-attn")[0]


# --------------------------------------------------------------------------
# model stack
# --------------------------------------------------------------------------


@dataclass
class ModelParams:
    embed: PatchifierParams
    blocks: list[BlockParams]
    head_w: Tensor  # D x P
    head_b: Tensor
    store: ParamStore = field(repr=False)


def init_model(
    ps: ParamStore,
    *,
    patch: int,
    M: int,
    S: int,
    D: int,
    heads: int,
    n_blocks: int,
    ratios: Sequence[float],
    max_frames: int,
    ref_frame_dense: bool = False,
) -> ModelParams:
    P = patch * patch
    return ModelParams(
        embed=init_patchifier(ps, "embed", patch, M, S, D, max_frames),
        blocks=[
            init_block(ps, f"block.{n}", D, heads, M, ratios, ref_frame_dense)
            for n in range(n_blocks)
        ],
        head_w=ps.zeros("head.w", (D, P)),
        head_b=ps.zeros("head.b", (P,)),
        store=ps,
    )


def model_forward(images: np.ndarray, model: ModelParams, variant: str = "full"):
    """Per-patch pixel predictions (L x M x P) and one decision per block."""
    batch = patchify(images, model.embed)
    decisions = []
    for blk in model.blocks:
        batch, d = adaptive_block_forward(batch, blk, variant)
        decisions.append(d)
    pred = matmul(batch.tokens[:, : batch.M, :], model.head_w) + model.head_b
    return pred, decisions


def dump_compression(path, batch: TokenBatch, p: BlockParams) -> None:
    """Write each frame's W_i (under its routed branch) and the assembled x^c."""
    with nc.no_grad():
        h = batch.with_tokens(_norm(batch.tokens, p.norms[0]))
        decision = route(h, p)
        for i, b in enumerate(decision.branch_index):
            w = compression_weights(h.tokens[i, : h.M, :], p.branches[int(b)])
            write_matrix(path, f"W_frame{i}_branch{int(b)}", w.data)
        comp = compressed_tokens(h.tokens[:, : h.M, :], decision, p)
        ref = h.tokens[0] if p.ref_frame_dense else None
        x_c = assemble_global_kv(comp, h.tokens[:, h.M :, :], ref)
        write_matrix(path, "x_c", x_c.data)


def identity_branch(M: int, D: int, dtype=np.float64) -> SparsityBranch:
    """k=0 branch whose generated weights are the identity: W^T x = x."""
    return SparsityBranch(
        ratio=0.0,
        fw_w=Tensor(np.zeros((D, M), dtype=dtype)),
        fw_b=Tensor(np.zeros(M, dtype=dtype)),
        bias=Tensor(np.eye(M, dtype=dtype)),
    )


def identity_equivalence(seed: int, L: int, M: int, S: int, D: int, heads: int) -> float:
    """Max |sparse - full| when every frame keeps all patch tokens through an
    identity compression and all specials join the key/value set (64-bit)."""
    ps = ParamStore(seed, dtype=np.float64)
    attn = init_attention(ps, "global", D, heads)
    rng = np.random.default_rng([seed, 3])
    batch = TokenBatch(Tensor(rng.standard_normal((L, M + S, D))), M, S)
    branch = identity_branch(M, D)
    comp = [compress_frame(batch.tokens[i, :M, :], branch) for i in range(L)]
    x_c = assemble_global_kv(comp, batch.tokens[:, M:, :])
    sparse = sparse_global_cross_attention(flatten_frames(batch), x_c, attn)
    full = flatten_frames(global_full_attention(batch, attn))
    return float(np.max(np.abs(sparse.data - full.data)))


def v4_identity_deviation(seed: int, L: int, M: int, S: int, D: int, heads: int) -> float:
    """Max |V4 - dense block| with a single k=0 branch, where merging and
    upsampling are identities (64-bit)."""
    ps = ParamStore(seed, dtype=np.float64)
    p = init_block(ps, "v4", D, heads, M, (0.0,))
    rng = np.random.default_rng([seed, 4])
    batch = TokenBatch(Tensor(rng.standard_normal((L, M + S, D))), M, S)
    merged, _ = ablation_variant(batch, p, "V4")
    dense = full_block_forward(batch, p)
    return float(np.max(np.abs(merged.tokens.data - dense.tokens.data)))


def v3_selected_indices(M: int, k: float, D: int = 4) -> list[int]:
    """Patch indices kept by the V3 compression path, read back from tokens
    whose first channel holds their own index."""
    ps = ParamStore(0, dtype=np.float64)
    p = init_block(ps, "v3", D, 1, M, (k,))
    x = np.zeros((1, M, D))
    x[0, :, 0] = np.arange(M)
    decision = fixed_decision(np.zeros(1, dtype=int), p.ratios, dtype=np.float64)
    (kept,) = compressed_tokens(Tensor(x), decision, p, "V3")
    return [int(v) for v in kept.data[:, 0]]
