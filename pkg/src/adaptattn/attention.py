"""Scaled dot-product and multi-head attention, per-frame and global scopes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ParamStore, ShapeError, Tensor, matmul, reshape, softmax_rows, transpose
from .tokens import TokenBatch, flatten_frames, unflatten_frames

# Inference-only attention splits queries so the score block stays below this
# many entries; rows are independent so the result is unchanged.
CHUNK_ENTRIES = 1 << 24


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        D = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (D, D):
                raise ShapeError(f"attention projections must be {D}x{D}, got {w.shape}")
        if self.heads < 1 or D % self.heads:
            raise ShapeError(f"width {D} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def init_attention(ps: ParamStore, prefix: str, D: int, heads: int) -> AttentionParams:
    return AttentionParams(
        wq=ps.xavier(f"{prefix}.wq", (D, D)),
        wk=ps.xavier(f"{prefix}.wk", (D, D)),
        wv=ps.xavier(f"{prefix}.wv", (D, D)),
        wo=ps.xavier(f"{prefix}.wo", (D, D)),
        heads=heads,
    )


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic weights softmax(q k^T / sqrt(d)) over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax_rows(matmul(q, nc.swap_last(k)) * scale)


def _chunked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    n_q, n_k = q.shape[-2], k.shape[-2]
    lead = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
    rows = max(1, CHUNK_ENTRIES // max(1, n_k * lead))
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k, -1, -2)
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.result_type(q, v))
    for s in range(0, n_q, rows):
        sc = np.matmul(q[..., s : s + rows, :], kt)
        sc *= scale
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=-1, keepdims=True)
        out[..., s : s + rows, :] = np.matmul(sc, v)
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v; leading axes are batch axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if k.shape[-2] < 1:
        raise ShapeError("attention needs at least one key")
    needs_graph = nc.grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    n_entries = int(np.prod(q.shape[:-1])) * k.shape[-2]
    if not needs_graph and nc._flop_counter is None and n_entries > CHUNK_ENTRIES:
        return Tensor(_chunked_attention(q.data, k.data, v.data))
    return matmul(attention_weights(q, k), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, D = x.shape
    x = reshape(x, (*lead, n, heads, D // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = transpose(x, axes)
    *lead, n, h, dh = x.shape
    return reshape(x, (*lead, n, h * dh))


def multi_head(x_q: Tensor, x_kv: Tensor, p: AttentionParams) -> Tensor:
    """Projected multi-head attention with output projection, no biases.

    Leading axes of ``x_q`` and ``x_kv`` are batch axes (e.g. frames).
    """
    if x_q.shape[-1] != p.width or x_kv.shape[-1] != p.width:
        raise ShapeError(
            f"inputs {x_q.shape}/{x_kv.shape} do not match projection width {p.width}"
        )
    q = _split_heads(matmul(x_q, p.wq), p.heads)
    k = _split_heads(matmul(x_kv, p.wk), p.heads)
    v = _split_heads(matmul(x_kv, p.wv), p.heads)
    return matmul(_merge_heads(scaled_dot_attention(q, k, v)), p.wo)


def head_weights(x_q: Tensor, x_kv: Tensor, p: AttentionParams) -> np.ndarray:
    """Per-head attention weights, shape (..., H, n_q, n_k), for inspection."""
    with nc.no_grad():
        q = _split_heads(matmul(x_q, p.wq), p.heads)
        k = _split_heads(matmul(x_kv, p.wk), p.heads)
        return attention_weights(q, k).data


def frame_attention(batch: TokenBatch, p: AttentionParams) -> TokenBatch:
    """Self-attention inside each frame; frames are a batch axis."""
    return batch.with_tokens(multi_head(batch.tokens, batch.tokens, p))


def global_full_attention(batch: TokenBatch, p: AttentionParams) -> TokenBatch:
    """Self-attention over all L*(M+S) tokens jointly."""
    x = flatten_frames(batch)
    return batch.with_tokens(unflatten_frames(multi_head(x, x, p), batch.L))


def write_matrix(path, name: str, m: np.ndarray, mode: str = "a") -> None:
    """Append a 2-d matrix as a ``# name rows cols`` header plus comma rows."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"write_matrix expects 2-d data, got {m.shape}")
    with open(Path(path), mode) as fh:
        fh.write(f"# {name} {m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_matrices(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    name, rows = None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            if name is not None:
                out[name] = np.array(rows, dtype=np.float64)
            name, rows = line[2:].rsplit(" ", 2)[0], []
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    if name is not None:
        out[name] = np.array(rows, dtype=np.float64)
    return out
