"""Synthetic frames, the linear patchifier stand-in, and token layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ParamStore, Tensor, concat, matmul, reshape


class ConfigError(ValueError):
    pass


@dataclass
class TokenBatch:
    """``tokens`` is L x (M+S) x D; per frame patches sit in [0, M), specials in [M, M+S)."""

    tokens: Tensor
    M: int
    S: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ConfigError(f"token tensor must be 3-d, got shape {self.tokens.shape}")
        if self.tokens.shape[1] != self.M + self.S:
            raise ConfigError(
                f"token count {self.tokens.shape[1]} != M + S = {self.M} + {self.S}"
            )
        if self.L < 1 or self.M < 2 or self.S < 0 or self.D < 2:
            raise ConfigError(f"invalid batch dims L={self.L} M={self.M} S={self.S} D={self.D}")

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    @property
    def D(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        return TokenBatch(tokens, self.M, self.S)


@dataclass
class PatchifierParams:
    projection: Tensor  # P x D
    pos_embed: Tensor  # M x D
    frame_embed: Tensor  # L_max x D
    special_init: Tensor  # S x D
    patch: int

    @property
    def M(self) -> int:
        return self.pos_embed.shape[0]

    @property
    def S(self) -> int:
        return self.special_init.shape[0]


def init_patchifier(
    ps: ParamStore, prefix: str, patch: int, M: int, S: int, D: int, max_frames: int
) -> PatchifierParams:
    return PatchifierParams(
        projection=ps.xavier(f"{prefix}.projection", (patch * patch, D)),
        pos_embed=ps.normal(f"{prefix}.pos_embed", (M, D), std=1.0),
        frame_embed=ps.normal(f"{prefix}.frame_embed", (max_frames, D)),
        special_init=ps.normal(f"{prefix}.special", (S, D)),
        patch=patch,
    )


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """L x H x W -> L x M x p*p, patches in row-major grid order."""
    L, H, W = images.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch side {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(L, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(L, gh * gw, patch * patch)


def patchify(images, params: PatchifierParams) -> TokenBatch:
    """Project image patches to tokens, add embeddings, append special tokens."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    L = imgs.shape[0]
    patches = extract_patches(imgs, params.patch)
    M = patches.shape[1]
    if M != params.M:
        raise ConfigError(f"image yields {M} patches but pos_embed has {params.M} rows")
    if L > params.frame_embed.shape[0]:
        raise ConfigError(f"{L} frames exceed frame_embed capacity {params.frame_embed.shape[0]}")
    dtype = params.projection.dtype
    x = matmul(Tensor(patches.astype(dtype)), params.projection)
    x = x + params.pos_embed + reshape(params.frame_embed[:L], (L, 1, -1))
    if params.S:
        spec = params.special_init.reshape(1, params.S, -1) + Tensor(
            np.zeros((L, 1, 1), dtype=dtype)
        )
        x = concat([x, spec], axis=1)
    return TokenBatch(x, M, params.S)


def split_patch_special(batch: TokenBatch) -> tuple[Tensor, Tensor]:
    t = batch.tokens
    return t[:, : batch.M, :], t[:, batch.M :, :]


def join_patch_special(patch: Tensor, special: Tensor) -> Tensor:
    if special.shape[1] == 0:
        return patch
    return concat([patch, special], axis=1)


def flatten_frames(batch: TokenBatch) -> Tensor:
    """L x (M+S) x D -> L*(M+S) x D in frame-major order."""
    L, n, D = batch.tokens.shape
    return reshape(batch.tokens, (L * n, D))


def unflatten_frames(x: Tensor, L: int) -> Tensor:
    return reshape(x, (L, x.shape[0] // L, x.shape[1]))


def synthetic_frames(
    rng: np.random.Generator,
    L: int,
    H: int,
    W: int,
    n_waves: int = 3,
    offset_std: float = 1.0,
    noise: float = 0.1,
) -> np.ndarray:
    """Seeded views of one smooth scene.

    The scene is a sum of ``n_waves`` random low-frequency 2-d cosines shared by
    all frames; every frame adds its own brightness offset and pixel noise.
    """
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    scene = np.zeros((H, W))
    for _ in range(n_waves):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        scene += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    scene /= np.sqrt(n_waves)
    offsets = rng.normal(0.0, offset_std, size=(L, 1, 1))
    return scene[None] + offsets + noise * rng.normal(size=(L, H, W))
