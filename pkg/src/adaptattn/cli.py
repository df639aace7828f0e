"""Command-line entry point.

Every command writes a CSV report into ``out_dir`` (headed by ``# key = value``
lines echoing the resolved configuration) and prints it to stdout.
Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from typing import Sequence

import numpy as np

from . import numcore as nc
from .bench import BenchConfig, run_bench, write_csv, write_long_csv
from .config import PRECISIONS, RunConfig, load_config, parse_assignments
from .sparse_global import (
    dump_compression,
    identity_equivalence,
    v3_selected_indices,
    v4_identity_deviation,
)
from .tokens import ConfigError, patchify
from .training import (
    LossConfig,
    TrainingError,
    eval_set,
    model_gradcheck,
    train_toy,
    write_trajectory,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRAD_TOL = 1e-4
EQUIV_TOL = 1e-10
V4_TOL = 1e-8
COMMANDS = ("gradcheck", "equivalence", "bench", "train-toy", "route-stats", "ablate")


class CheckFailed(Exception):
    pass


def _fmt(x) -> str:
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def emit_table(cfg: RunConfig, command: str, name: str, columns, rows) -> str:
    """Write ``<out_dir>/<name>.csv`` and return its text."""
    buf = io.StringIO()
    for line in cfg.header(command):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    text = buf.getvalue()
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, f"{name}.csv"), "w", newline="") as fh:
        fh.write(text)
    return text


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(cfg.lambda_reg, cfg.entropy, cfg.entropy_coeff)


def occupancy_rows(table: list[list[float]]) -> list[list]:
    return [[n] + [float(f) for f in fracs] for n, fracs in enumerate(table)]


def cmd_gradcheck(cfg: RunConfig, args) -> str:
    entries = cfg.gradcheck_entries or None
    lc = LossConfig(cfg.lambda_reg, True, cfg.entropy_coeff)
    errs = model_gradcheck(cfg.toy(), cfg.seed, lc, cfg.gradcheck_h, entries)
    worst = max(errs.values())
    rows = [[name, err] for name, err in errs.items()] + [["worst", worst]]
    text = emit_table(cfg, "gradcheck", "gradcheck", ["parameter", "max_rel_err"], rows)
    status = "PASS" if worst < GRAD_TOL else "FAIL"
    text += f"{status} gradcheck worst_rel_err={worst:.3e} tol={GRAD_TOL:g} (float64)\n"
    if status == "FAIL":
        raise CheckFailed(text)
    return text


def cmd_equivalence(cfg: RunConfig, args) -> str:
    rows = []
    for i in range(cfg.equivalence_seeds):
        seed = cfg.seed + i
        # sweep small shapes: L in 1..4, M in 2..8, S in 0..2
        L, M, S = 1 + i % 4, 2 + (i * 3) % 7, i % 3
        dev = identity_equivalence(seed, L, M, S, cfg.dim, cfg.heads)
        rows.append([seed, L, M, S, dev])
    worst = max(r[-1] for r in rows)
    text = emit_table(cfg, "equivalence", "equivalence", ["seed", "L", "M", "S", "max_dev"], rows)
    status = "PASS" if worst < EQUIV_TOL else "FAIL"
    text += f"{status} equivalence max_dev={worst:.3e} tol={EQUIV_TOL:g} (float64)\n"
    if status == "FAIL":
        raise CheckFailed(text)
    return text


def cmd_bench(cfg: RunConfig, args) -> str:
    bc = BenchConfig(
        M=cfg.bench_patches, S=cfg.bench_specials, D=cfg.bench_dim, H=cfg.bench_heads,
        ratios=cfg.ratios, ref_frame=cfg.ref_frame, seed=cfg.seed, reps=cfg.reps,
        warmup=cfg.warmup, dtype=cfg.precision,
    )
    reports = run_bench(bc, cfg.bench_frames)
    header = cfg.header("bench")
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "bench.csv")
    write_csv(path, reports, header)
    write_long_csv(os.path.join(cfg.out_dir, "bench_long.csv"), reports, header)
    with open(path) as fh:
        text = fh.read()
    for r in reports:
        for note in r.warnings:
            text += f"warning L={r.L}: {note}\n"
    return text


def cmd_train_toy(cfg: RunConfig, args) -> str:
    result = train_toy(cfg.toy(), cfg.steps, cfg.seed, loss_config(cfg))
    header = cfg.header("train-toy")
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_trajectory(os.path.join(cfg.out_dir, "trajectory.csv"), result.rows, header)
    summary = [
        ["initial_task_loss", result.initial_task_loss],
        ["final_task_loss", result.final_task_loss],
        ["mean_k", result.mean_k],
        ["eval_task_loss", result.eval_task_loss],
        ["eval_mean_k", result.eval_mean_k],
    ]
    text = emit_table(cfg, "train-toy", "train_summary", ["metric", "value"], summary)
    nb = len(cfg.ratios)
    text += emit_table(
        cfg, "train-toy", "train_routes", ["block"] + [f"branch{b}" for b in range(nb)],
        occupancy_rows(result.route_table),
    )
    return text


def cmd_route_stats(cfg: RunConfig, args) -> str:
    """Train for ``steps`` steps, then report routing occupancy on held-out scenes."""
    result = train_toy(cfg.toy(), cfg.steps, cfg.seed, loss_config(cfg))
    nb = len(cfg.ratios)
    text = emit_table(
        cfg, "route-stats", "route_stats", ["block"] + [f"branch{b}" for b in range(nb)],
        occupancy_rows(result.route_table),
    )
    if args.dump:
        images, _ = eval_set(cfg.toy(), cfg.seed)[0]
        if os.path.exists(args.dump):
            os.remove(args.dump)
        model = result.model
        with nc.no_grad():
            dump_compression(args.dump, patchify(images, model.embed), model.blocks[0])
        text += f"dumped block-0 compression matrices to {args.dump}\n"
    return text


def expected_round_robin(L: int, nb: int) -> list[float]:
    return (np.bincount(np.arange(L) % nb, minlength=nb) / L).tolist()


def cmd_ablate(cfg: RunConfig, args) -> str:
    nb = len(cfg.ratios)
    rows, failures = [], []
    for variant in ("full", "V1", "V2", "V3", "V4", "baseline-full-attn"):
        res = train_toy(cfg.toy(variant), cfg.ablate_steps, cfg.seed, loss_config(cfg))
        occ = ";".join("/".join(f"{f:.4f}" for f in fracs) for fracs in res.route_table)
        rows.append([variant, res.final_task_loss, res.eval_task_loss, res.eval_mean_k, occ or "-"])
        if variant == "V1":
            want = expected_round_robin(cfg.frames, nb)
            if any(fr != want for fr in res.route_table):
                failures.append(f"V1 occupancy {res.route_table} != round robin {want}")
    text = emit_table(
        cfg, "ablate", "ablate",
        ["variant", "final_task_loss", "eval_task_loss", "eval_mean_k", "occupancy"], rows,
    )
    grid = v3_selected_indices(8, 0.5)
    v4_dev = v4_identity_deviation(cfg.seed, 3, 8, 1, 16, 2)
    checks = [
        ["v1_round_robin", "ok" if not failures else "fail"],
        ["v3_grid_M8_keep4", " ".join(map(str, grid))],
        ["v4_identity_max_dev", v4_dev],
    ]
    if grid != [0, 2, 4, 6]:
        failures.append(f"V3 grid indices {grid} != [0, 2, 4, 6]")
    if not v4_dev < V4_TOL:
        failures.append(f"V4 identity deviation {v4_dev:.3e} >= {V4_TOL:g}")
    text += emit_table(cfg, "ablate", "ablate_checks", ["check", "value"], checks)
    if failures:
        raise CheckFailed(text + "".join(f"FAIL {f}\n" for f in failures))
    return text + "PASS ablate harness checks\n"


HANDLERS = {
    "gradcheck": cmd_gradcheck,
    "equivalence": cmd_equivalence,
    "bench": cmd_bench,
    "train-toy": cmd_train_toy,
    "route-stats": cmd_route_stats,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config (and ADAPTATTN_SEED)")
    common.add_argument("--precision", choices=PRECISIONS)
    common.add_argument("--out-dir", help="directory for CSV reports")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config key; repeatable",
    )
    parser = argparse.ArgumentParser(
        prog="adaptattn",
        description="Adaptive sparse global attention: oracles, benchmarks, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gradcheck": "compare backward() with finite differences on the toy model",
        "equivalence": "check sparse attention with identity compression against dense attention",
        "bench": "analytic FLOPs and wall-clock timing over frame counts",
        "train-toy": "train on the synthetic cross-frame task and write the loss trajectory",
        "route-stats": "per-block branch occupancy after training",
        "ablate": "train every variant and emit a comparison table",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "route-stats":
            p.add_argument("--dump", help="write block-0 compression matrices to this file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = parse_assignments(args.set)
        for key in ("seed", "precision", "out_dir"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        text = HANDLERS[args.command](cfg, args)
    except CheckFailed as exc:
        sys.stdout.write(str(exc))
        print(f"error: check-failed: {args.command}", file=sys.stderr)
        return EXIT_FAIL
    except TrainingError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
