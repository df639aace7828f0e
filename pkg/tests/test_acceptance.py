"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import csv
import io
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from adaptattn import bench
from adaptattn import training as tr
from adaptattn.numcore import Tensor
from adaptattn.routing import RoutingDecision, fixed_decision
from adaptattn.sparse_global import identity_equivalence

from conftest import ACCEPTANCE_LINES

RATIOS = (3 / 4, 8 / 9, 15 / 16)


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_oracle():
    # L=3, M=8, S=1, D=16, H=2, two blocks, three branches; every entry checked
    cfg = tr.gradcheck_config()
    assert (cfg.frames, cfg.M, cfg.specials, cfg.width_d, cfg.heads, cfg.blocks) == (3, 8, 1, 16, 2, 2)
    errs = tr.model_gradcheck(cfg, seed=0, h=1e-5)
    worst_name = max(errs, key=errs.get)
    worst = errs[worst_name]
    report(1, "full-model gradcheck (float64, h=1e-5)", worst < 1e-4,
           f"worst rel err {worst:.2e} at {worst_name} over {len(errs)} tensors (tol 1e-4)")


def test_criterion_2_identity_equivalence():
    devs = []
    for seed in range(20):
        L, M, S = 1 + seed % 4, 2 + (seed * 3) % 7, seed % 3
        devs.append(identity_equivalence(seed, L, M, S, 8, 2))
    worst = max(devs)
    report(2, "sparse == dense under identity compression", worst < 1e-10,
           f"max deviation {worst:.2e} over 20 seeds, L<=4, M<=8 (tol 1e-10)")


def test_criterion_3_analytic_speedup():
    out, ok = [], True
    for k, target in ((15 / 16, 16.0), (3 / 4, 4.0)):
        ratio = bench.flop_count_full(256, 64, 0, 32, 4) / bench.flop_count_sparse(256, 64, 0, 32, 4, [k] * 256)
        ok &= abs(ratio - target) <= 0.1 * target
        out.append(f"k={k:.4f}: {ratio:.3f} vs {target:g}")
    report(3, "analytic speedup at L=256, M=64, S=0", ok, "; ".join(out) + " (tol 10%)")


def test_criterion_4_runtime_scaling():
    cfg = bench.BenchConfig(M=196, S=2, D=64, H=4, reps=3, warmup=1)
    details, ok = [], True
    for run in range(3):
        reports = {r.L: r for r in bench.run_bench(cfg, [16, 32, 64])}
        grows = reports[64].ratio_full_frame > reports[16].ratio_full_frame
        faster = all(r.sparse.median < r.full.median for r in reports.values())
        ok &= grows and faster
        details.append(
            f"run{run + 1}: full/frame {reports[16].ratio_full_frame:.1f}->{reports[64].ratio_full_frame:.1f}, "
            f"full/sparse " + "/".join(f"{r.speedup_measured:.1f}" for r in reports.values())
        )
    report(4, "runtime scaling at M=196, D=64, L in {16,32,64}", ok, "; ".join(details))


def test_criterion_5_regularisation_effect():
    cfg = tr.ToyConfig()
    assert (cfg.frames, cfg.M, cfg.width_d, cfg.blocks) == (4, 16, 32, 2)
    base = tr.train_toy(cfg, 500, seed=0, loss_cfg=tr.LossConfig(lambda_reg=0.0))
    reg = tr.train_toy(cfg, 500, seed=0, loss_cfg=tr.LossConfig(lambda_reg=0.01))
    rel = abs(reg.final_task_loss - base.final_task_loss) / base.final_task_loss
    ok = reg.mean_k > base.mean_k and rel <= 0.25
    report(5, "lambda=0.01 vs lambda=0 over 500 steps", ok,
           f"mean k {base.mean_k:.4f} -> {reg.mean_k:.4f}; task loss {base.final_task_loss:.4f} -> "
           f"{reg.final_task_loss:.4f} ({rel:.1%} relative, tol 25%); "
           f"initial {base.initial_task_loss:.3f}")


def test_criterion_6_regulariser_closed_forms():
    def hard(index):
        return fixed_decision(index, RATIOS, dtype=np.float64)

    def soft(rows):
        p = np.asarray(rows, dtype=np.float64)
        idx = np.argmax(p, axis=-1)
        return RoutingDecision(Tensor(p), idx, np.asarray(RATIOS)[idx], RATIOS)

    checks = {
        "N=2,L=3 at 15/16": (tr.sparsity_reg_loss([hard([2] * 3)] * 2).item(), 0.375, 0.0),
        "N=1,L=4 at 3/4": (tr.sparsity_reg_loss([hard([0] * 4)]).item(), 1.0, 0.0),
        "hard sum == closed form": (tr.hard_reg_loss([hard([0, 1, 2])]), 1 / 4 + 1 / 9 + 1 / 16, 1e-15),
        "uniform probs": (tr.sparsity_reg_loss([soft(np.full((1, 3), 1 / 3))]).item(), (1 / 4 + 1 / 9 + 1 / 16) / 3, 1e-15),
        "total with lambda": (tr.total_loss(Tensor(np.array(1.0)), [hard([2] * 3)] * 2, tr.LossConfig(0.01)).item(), 1.00375, 1e-15),
        "entropy one-hot": (tr.entropy_term([hard([0, 1, 2])]).item(), 0.0, 1e-12),
        "entropy uniform": (tr.entropy_term([soft(np.full((2, 3), 1 / 3))]).item(), math.log(3), 1e-12),
    }
    bad = [name for name, (got, want, tol) in checks.items() if abs(got - want) > tol]
    report(6, "regulariser closed forms", not bad,
           f"{len(checks) - len(bad)}/{len(checks)} exact" + (f"; failed: {', '.join(bad)}" if bad else ""))


def run_cli(args, cwd):
    env = dict(os.environ, ADAPTATTN_SEED="0")
    return subprocess.run(
        [sys.executable, "-m", "adaptattn", *args], capture_output=True, text=True, cwd=cwd, env=env
    )


def test_criterion_7_ablation_harness(tmp_path):
    proc = run_cli(["ablate", "--set", "ablate_steps=20", "--out-dir", "out"], tmp_path)
    rows = {}
    with open(tmp_path / "out" / "ablate.csv") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            rows[row["variant"]] = row
    checks = {}
    with open(tmp_path / "out" / "ablate_checks.csv") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            checks[row["check"]] = row["value"]
    variants = {"full", "V1", "V2", "V3", "V4"} <= set(rows)
    v1 = rows["V1"]["occupancy"] == "0.5000/0.2500/0.2500;0.5000/0.2500/0.2500"
    v3 = checks.get("v3_grid_M8_keep4") == "0 2 4 6"
    v4 = float(checks.get("v4_identity_max_dev", "inf")) < 1e-8
    ok = proc.returncode == 0 and variants and v1 and v3 and v4
    report(7, "ablation harness", ok,
           f"exit {proc.returncode}; variants {sorted(rows)}; V1 occupancy {rows['V1']['occupancy']}; "
           f"V3 indices {checks.get('v3_grid_M8_keep4')}; V4 identity dev {checks.get('v4_identity_max_dev')}")


TIMING = set(bench.TIMING_COLUMNS)


def strip_timing(name: str, text: str) -> str:
    """Drop timing columns (bench.csv), timing rows (bench_long.csv), timer warnings."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("warning")]
    body = [ln for ln in lines if not ln.startswith("#")]
    head = [ln for ln in lines if ln.startswith("#")]
    if not body:
        return text
    rows = list(csv.reader(body))
    if rows[0] == ["L", "series", "value"]:
        rows = [r for r in rows if r[1] not in TIMING]
    elif "ms_full" in rows[0]:
        keep = [i for i, c in enumerate(rows[0]) if c not in TIMING]
        rows = [[r[i] for i in keep] for r in rows]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return "\n".join(head) + "\n" + buf.getvalue()


FAST = [
    "--set", "steps=30", "--set", "ablate_steps=10", "--set", "gradcheck_entries=2",
    "--set", "bench_frames=2,4", "--set", "bench_patches=16", "--set", "bench_dim=16", "--set", "reps=3",
]


def test_criterion_8_cli_determinism(tmp_path):
    differing, codes = [], {}
    for command in ("gradcheck", "equivalence", "bench", "train-toy", "route-stats", "ablate"):
        outputs = []
        for rep in range(2):
            # same relative paths in two fresh directories, so the echoed config matches
            cwd = tmp_path / f"{command}-{rep}"
            cwd.mkdir()
            extra = ["--dump", "out/dump.txt"] if command == "route-stats" else []
            proc = run_cli([command, "--seed", "3", "--out-dir", "out", *FAST, *extra], cwd)
            codes[command] = proc.returncode
            out_dir = cwd / "out"
            files = {p: strip_timing(p, (out_dir / p).read_text()) for p in sorted(os.listdir(out_dir))}
            outputs.append((files, strip_timing("stdout", proc.stdout)))
        if outputs[0] != outputs[1]:
            differing.append(command)
    ok = not differing and all(c == 0 for c in codes.values())
    report(8, "CLI determinism (timing excluded)", ok,
           f"exit codes {codes}; differing: {differing or 'none'}")
