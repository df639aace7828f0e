"""Regularised objective, toy cross-frame regression task and an Adam loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ParamStore, Tensor
from .routing import RoutingDecision, route_stats_table
from .sparse_global import ModelParams, init_model, model_forward
from .tokens import ConfigError, extract_patches, synthetic_frames


class TrainingError(RuntimeError):
    pass


@dataclass
class LossConfig:
    lambda_reg: float = 0.01
    entropy_enabled: bool = False
    entropy_coeff: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")


def _active(decisions: Sequence[RoutingDecision | None]) -> list[RoutingDecision]:
    return [d for d in decisions if d is not None]


def sparsity_reg_loss(decisions: Sequence[RoutingDecision | None], ratios=None) -> Tensor:
    """sum over blocks, frames, branches of p_b * (1 - k_b).

    Under one-hot probabilities this is exactly sum_n sum_i (1 - k_selected).
    """
    ds = _active(decisions)
    if not ds:
        return Tensor(np.zeros(()))
    total = None
    for d in ds:
        ks = np.asarray(d.ratios if ratios is None else ratios, dtype=d.probs.dtype)
        term = nc.tsum(d.probs * Tensor(1.0 - ks))
        total = term if total is None else total + term
    return total


def hard_reg_loss(decisions: Sequence[RoutingDecision | None]) -> float:
    return float(sum(np.sum(1.0 - d.k_selected) for d in _active(decisions)))


def entropy_term(decisions: Sequence[RoutingDecision | None]) -> Tensor:
    """sum over blocks of the mean per-frame Shannon entropy (nats, 0 log 0 = 0)."""
    ds = _active(decisions)
    if not ds:
        return Tensor(np.zeros(()))
    total = None
    for d in ds:
        p = d.probs
        pos = p.data > 0
        # log of a masked copy keeps 0*log(0) = 0 and its gradient finite
        safe = nc.where_const(p, pos, 1.0)
        term = nc.tsum(p * nc.log(safe)) * (-1.0 / p.shape[0])
        total = term if total is None else total + term
    return total


def total_loss(task_loss: Tensor, decisions, cfg: LossConfig) -> Tensor:
    if cfg.lambda_reg == 0:
        return task_loss
    reg = sparsity_reg_loss(decisions)
    if cfg.entropy_enabled:
        reg = reg + entropy_term(decisions) * cfg.entropy_coeff
    return task_loss + reg * cfg.lambda_reg


# --------------------------------------------------------------------------
# toy task
# --------------------------------------------------------------------------


def cross_frame_targets(images: np.ndarray, patch: int) -> np.ndarray:
    """Target for patch j of every frame: mean of patch j over all input frames."""
    patches = extract_patches(images, patch)
    return np.broadcast_to(patches.mean(axis=0, keepdims=True), patches.shape).copy()


def task_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target.astype(pred.dtype))
    return nc.mean(diff * diff)


@dataclass
class ToyConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    patch: int = 4
    specials: int = 2
    width_d: int = 32
    heads: int = 4
    blocks: int = 2
    ratios: tuple[float, ...] = (3 / 4, 8 / 9, 15 / 16)
    ref_frame: bool = False
    variant: str = "full"
    lr: float = 1e-3
    scenes_per_step: int = 4
    eval_batches: int = 8
    dtype: str = "float32"
    freeze_gate: bool = False

    @property
    def M(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


@dataclass
class TrainState:
    params: ParamStore
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self, state: TrainState, grads: dict[str, np.ndarray]) -> None:
        state.step += 1
        t = state.step
        for name, p in state.params.items():
            g = grads[name]
            m = state.m.setdefault(name, np.zeros_like(p.data))
            v = state.v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def build_toy_model(cfg: ToyConfig, seed: int) -> ModelParams:
    ps = ParamStore(seed, dtype=np.dtype(cfg.dtype))
    model = init_model(
        ps,
        patch=cfg.patch,
        M=cfg.M,
        S=cfg.specials,
        D=cfg.width_d,
        heads=cfg.heads,
        n_blocks=cfg.blocks,
        ratios=cfg.ratios,
        max_frames=cfg.frames,
        ref_frame_dense=cfg.ref_frame,
    )
    for blk in model.blocks:
        blk.gate_frozen = cfg.freeze_gate
    return model


def toy_batch(cfg: ToyConfig, rng: np.random.Generator):
    images = synthetic_frames(rng, cfg.frames, cfg.height, cfg.width)
    return images, cross_frame_targets(images, cfg.patch)


def eval_set(cfg: ToyConfig, seed: int):
    rng = np.random.default_rng([seed, 1])
    return [toy_batch(cfg, rng) for _ in range(cfg.eval_batches)]


@dataclass
class TrainResult:
    rows: list[dict]  # per step: step, task_loss, reg_loss, total, mean_k
    route_table: list[list[float]]  # block x branch occupancy on the eval set
    initial_task_loss: float  # eval-set task loss before training
    eval_task_loss: float  # eval-set task loss after training
    eval_mean_k: float  # mean selected sparsity on the eval set after training
    model: ModelParams | None = field(default=None, repr=False)

    @property
    def window(self) -> int:
        return max(1, len(self.rows) // 20)

    @property
    def final_task_loss(self) -> float:
        """Training task loss averaged over the last 5% of steps."""
        if not self.rows:
            return self.initial_task_loss
        return float(np.mean([r["task_loss"] for r in self.rows[-self.window :]]))

    @property
    def mean_k(self) -> float:
        """Mean selected sparsity over the last 5% of steps."""
        if not self.rows:
            return self.eval_mean_k
        return float(np.mean([r["mean_k"] for r in self.rows[-self.window :]]))


def evaluate(model: ModelParams, batches, variant: str):
    """Mean task loss, mean selected k and per-batch decisions over ``batches``."""
    losses, ks, decs = [], [], []
    with nc.no_grad():
        for images, target in batches:
            pred, ds = model_forward(images, model, variant)
            losses.append(task_loss(pred, target).item())
            active = [d for d in ds if d is not None]
            if active:
                ks.append(np.mean(np.concatenate([d.k_selected for d in active])))
                decs.append(active)
    return float(np.mean(losses)), float(np.mean(ks)) if ks else 0.0, decs


def train_toy(cfg: ToyConfig, steps: int, seed: int, loss_cfg: LossConfig | None = None) -> TrainResult:
    """Adam on fresh seeded batches; raises TrainingError on a non-finite loss."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    loss_cfg = loss_cfg or LossConfig()
    model = build_toy_model(cfg, seed)
    state = TrainState(model.store)
    opt = Adam(cfg.lr)
    data_rng = np.random.default_rng([seed, 0])
    held_out = eval_set(cfg, seed)
    init_loss, _, _ = evaluate(model, held_out, cfg.variant)
    rows = []
    for step in range(steps):
        tl_sum, loss_sum, hard_reg, ks = None, None, 0.0, []
        for _ in range(cfg.scenes_per_step):
            images, target = toy_batch(cfg, data_rng)
            pred, decisions = model_forward(images, model, cfg.variant)
            tl = task_loss(pred, target)
            loss = total_loss(tl, decisions, loss_cfg)
            tl_sum = tl if tl_sum is None else tl_sum + tl
            loss_sum = loss if loss_sum is None else loss_sum + loss
            hard_reg += hard_reg_loss(decisions)
            ks.extend(d.k_selected for d in decisions if d is not None)
        scale = 1.0 / cfg.scenes_per_step
        loss = loss_sum * scale
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss at step {step}")
        rows.append(
            {
                "step": step,
                "task_loss": tl_sum.item() * scale,
                "reg_loss": hard_reg * scale,
                "total": loss.item(),
                "mean_k": float(np.mean(np.concatenate(ks))) if ks else 0.0,
            }
        )
        grads = nc.backward(loss, model.store)
        opt.step(state, grads)
    final_loss, mean_k, decs = evaluate(model, held_out, cfg.variant)
    return TrainResult(rows, route_stats_table(decs), init_loss, final_loss, mean_k, model)


def write_trajectory(path, rows: Sequence[dict], header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task_loss", "reg_loss", "total", "mean_k"])
        for r in rows:
            w.writerow(
                [r["step"]] + [f"{r[k]:.10g}" for k in ("task_loss", "reg_loss", "total", "mean_k")]
            )


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------


def jitter_params(store: ParamStore, seed: int, scale: float = 0.1) -> None:
    """Add seeded noise to every parameter so zero-initialised tensors (head,
    biases) do not hide gradient paths from the oracle."""
    rng = np.random.default_rng([seed, 2])
    for _, t in store.items():
        t.data += (scale * rng.standard_normal(t.shape)).astype(t.dtype)


def gradcheck_config() -> ToyConfig:
    """Smallest model exercising every path: 3 frames of 8 patches, one
    special token, D=16, 2 heads, 2 blocks and 3 branches with M_k = 4, 2, 1."""
    return ToyConfig(
        frames=3, height=8, width=16, patch=4, specials=1, width_d=16, heads=2,
        blocks=2, ratios=(1 / 2, 3 / 4, 7 / 8), dtype="float64",
    )


def model_gradcheck(
    cfg: ToyConfig, seed: int, loss_cfg: LossConfig | None = None,
    h: float = 1e-5, max_entries: int | None = None,
) -> dict[str, float]:
    """Per-parameter worst relative error of the total-loss gradient in 64-bit."""
    cfg = ToyConfig(**{**cfg.__dict__, "dtype": "float64"})
    loss_cfg = loss_cfg or LossConfig(lambda_reg=0.01, entropy_enabled=True)
    model = build_toy_model(cfg, seed)
    jitter_params(model.store, seed)
    images, target = toy_batch(cfg, np.random.default_rng([seed, 0]))

    def objective(_store):
        pred, decisions = model_forward(images, model, cfg.variant)
        return total_loss(task_loss(pred, target), decisions, loss_cfg)

    return nc.gradcheck(objective, model.store, h=h, max_entries=max_entries, seed=seed)
