"""Flat ``key = value`` run configuration with line-numbered errors.

Precedence, lowest first: built-in defaults, ``ADAPTATTN_SEED`` (seed only),
config file, command-line overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Iterable

from .sparse_global import VARIANTS, compressed_count
from .tokens import ConfigError
from .training import ToyConfig

SEED_ENV = "ADAPTATTN_SEED"
PRECISIONS = ("float32", "float64")


@dataclass
class RunConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    patch: int = 4
    specials: int = 2
    dim: int = 32
    heads: int = 4
    blocks: int = 2
    ratios: tuple[float, ...] = (3 / 4, 8 / 9, 15 / 16)
    lambda_reg: float = 0.01
    entropy: bool = False
    entropy_coeff: float = 1.0
    ref_frame: bool = False
    variant: str = "full"
    seed: int = 0
    precision: str = "float32"
    out_dir: str = "runs"
    steps: int = 500
    lr: float = 1e-3
    scenes_per_step: int = 4
    eval_batches: int = 8
    ablate_steps: int = 200
    gradcheck_entries: int = 8  # per tensor; 0 checks every entry
    gradcheck_h: float = 1e-5
    equivalence_seeds: int = 20
    bench_frames: tuple[int, ...] = (16, 32, 64)
    bench_patches: int = 196
    bench_specials: int = 2
    bench_dim: int = 64
    bench_heads: int = 4
    reps: int = 9
    warmup: int = 2

    @property
    def patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def validate(self) -> "RunConfig":
        if min(self.frames, self.height, self.width, self.patch, self.dim, self.heads, self.blocks) < 1:
            raise ConfigError("frames, height, width, patch, dim, heads and blocks must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} must divide height {self.height} and width {self.width}")
        if self.patches < 2:
            raise ConfigError("need at least 2 patches per frame")
        if self.specials < 0 or self.bench_specials < 0:
            raise ConfigError("special token counts must be >= 0")
        if self.dim % self.heads or self.bench_dim % self.bench_heads:
            raise ConfigError("width must be divisible by the head count")
        if not self.ratios:
            raise ConfigError("need at least one branch ratio")
        if any(not 0 < r < 1 for r in self.ratios):
            raise ConfigError(f"branch ratios must lie in (0, 1): {self.ratios}")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ConfigError(f"branch ratios must be strictly increasing: {self.ratios}")
        for M in (self.patches, self.bench_patches):
            for r in self.ratios:
                if compressed_count(M, r) < 1:
                    raise ConfigError(f"ratio {r} leaves no tokens for {M} patches")
        if self.lambda_reg < 0 or self.entropy_coeff < 0:
            raise ConfigError("lambda_reg and entropy_coeff must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.steps < 1 or self.ablate_steps < 1 or self.scenes_per_step < 1 or self.eval_batches < 1:
            raise ConfigError("step and batch counts must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.gradcheck_entries < 0:
            raise ConfigError("gradcheck_entries must be >= 0")
        if not 1e-6 <= self.gradcheck_h <= 1e-4:
            raise ConfigError("gradcheck_h must lie in [1e-6, 1e-4]")
        if self.equivalence_seeds < 1:
            raise ConfigError("equivalence_seeds must be >= 1")
        if not self.bench_frames or min(self.bench_frames) < 1 or self.bench_patches < 2:
            raise ConfigError("bench_frames must be >= 1 and bench_patches >= 2")
        if self.reps < 3 or self.warmup < 0:
            raise ConfigError("reps must be >= 3 and warmup >= 0")
        return self

    def toy(self, variant: str | None = None) -> ToyConfig:
        return ToyConfig(
            frames=self.frames, height=self.height, width=self.width, patch=self.patch,
            specials=self.specials, width_d=self.dim, heads=self.heads, blocks=self.blocks,
            ratios=self.ratios, ref_frame=self.ref_frame, variant=variant or self.variant,
            lr=self.lr, scenes_per_step=self.scenes_per_step, eval_batches=self.eval_batches,
            dtype=self.precision,
        )

    def header(self, command: str) -> list[str]:
        """``key = value`` lines echoing the resolved configuration."""
        lines = [f"command = {command}"]
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return lines


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def _parse_float(text: str) -> float:
    # fractions such as 15/16 are exact; Fraction also accepts decimals
    return float(Fraction(text.strip()))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(name: str, text: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown key {name!r}")
    kind = _FIELDS[name]
    default = getattr(RunConfig, name)
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text.strip())
        if kind is float:
            return _parse_float(text)
        if kind is tuple:
            items = [x for x in text.split(",") if x.strip()]
            if isinstance(default, tuple) and default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(_parse_float(x) for x in items)
        return text.strip()
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


_FIELDS: dict[str, type] = {}
for _f in fields(RunConfig):
    _d = _f.default
    _FIELDS[_f.name] = bool if isinstance(_d, bool) else type(_d)


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(
    path: str | None = None, overrides: dict | None = None, env: dict | None = None
) -> RunConfig:
    env = os.environ if env is None else env
    values: dict = {}
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_text(text, path))
    values.update(overrides or {})
    return dataclasses.replace(RunConfig(), **values).validate()


def parse_assignments(items: Iterable[str]) -> dict:
    """``key=value`` strings from the command line."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = parse_value(key, value)
    return out
