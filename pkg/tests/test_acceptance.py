"""Acceptance suite: one PASS/FAIL line per criterion, printed at session end.

Each check records a line with its measured values; the tolerances are the ones the
criteria state. Run ``pytest tests/test_acceptance.py -v`` to see the table.
"""
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from lwfedssl import fed as fed_mod
from lwfedssl.cli import main
from lwfedssl.config import parse_config
from lwfedssl.data import gen_synthetic, partition_dirichlet
from lwfedssl.fed import FedConfig, OptimConfig, aggregate, run_federation
from lwfedssl.gradcheck import TOLERANCE, run_suite
from lwfedssl.model import ModelSpec, build_model, serialize_model
from lwfedssl.resource import memory_model, plan_ledger
from lwfedssl.schedule import ALLOCATIONS, StageSchedule, make_schedule
from lwfedssl.ssl import AugmentPolicy, MomentumBranch, SslConfig, alignment_loss, infonce, momentum_update
from lwfedssl.tensor import Tensor

import oracles

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.toml"
RESULTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. communication ratios


def test_01_communication_ratios():
    t0 = time.perf_counter()
    spec = ModelSpec(input_dim=64, num_layers=12, block_hidden_dim=128, block_out_dim=64, proj_hidden=64, proj_out=32, pred_hidden=64)
    totals = {}
    for strategy in ("end_to_end", "layer_wise", "lw_fedssl"):
        sched = StageSchedule.build(strategy, 12, 180, "uniform")
        if sched.staged:
            assert sched.rounds_per_stage == (15,) * 12
        totals[strategy] = plan_ledger(spec, sched, [100], 32, 1, False).totals("client:0")
    up = Fraction(totals["end_to_end"]["enc_bytes_up"], totals["layer_wise"]["enc_bytes_up"])
    down = Fraction(totals["end_to_end"]["enc_bytes_down"], totals["lw_fedssl"]["enc_bytes_down"])
    elapsed = time.perf_counter() - t0
    ok = up == 12 and down == Fraction(2160, 1170) and elapsed < 1.0
    record(1, "communication ratios", ok,
           f"upload E2E/LW = {up} , download E2E/LW-FedSSL = {down} = {float(down):.4f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. gradient oracle


def test_02_gradient_oracle():
    t0 = time.perf_counter()
    report = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    ok = report.ok and report.cases >= 100 and report.worst.max_rel_error <= TOLERANCE and elapsed < 60
    record(2, "gradient oracle", ok,
           f"{report.cases} cases over {len(report.results)} checks, worst {report.worst.name} "
           f"{report.worst.max_rel_error:.2e} <= {TOLERANCE:g}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. loss oracles


def test_03_loss_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        b, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        rows = [rng.standard_normal((b, d)) for _ in range(4)]
        z1, z2, g1, g2 = (r / np.linalg.norm(r, axis=1, keepdims=True) for r in rows)
        worst = max(worst, abs(float(infonce(Tensor(z1), g1, 0.2).data) - oracles.infonce_loop(z1, g1, 0.2)))
        ours = float(alignment_loss(Tensor(z1), Tensor(z2), g1, g2, 0.2).data)
        worst = max(worst, abs(ours - oracles.alignment_loop(z1, z2, g1, g2, 0.2)))
    record(3, "loss oracles", worst <= 1e-10, f"1000 trials (B<=8, d<=4), max |diff| {worst:.1e} <= 1e-10")


# ---------------------------------------------------------------------------
# 4. reduction equivalences


def _trace(spec, strategy, data, aux, workers, ssl, calib):
    fed = FedConfig(strategy=strategy, clients=len(data), rounds=4, calibration_epochs=calib)
    out = []
    run_federation(spec, fed, ssl, OptimConfig(base_lr=0.05), AugmentPolicy(jitter_sigma=0.5), data, aux, seed=11,
                   workers=workers, on_round=lambda rec, m: out.append(serialize_model(m)))
    return out


def test_04_reduction_equivalences():
    rng = np.random.default_rng(4)
    data = [rng.standard_normal((16, 16)).astype(np.float32) for _ in range(4)]
    one = ModelSpec(input_dim=16, num_layers=1, block_hidden_dim=8, block_out_dim=16, proj_hidden=8, proj_out=4, pred_hidden=8)
    two = ModelSpec(input_dim=16, num_layers=2, block_hidden_dim=8, block_out_dim=16, proj_hidden=8, proj_out=4, pred_hidden=8)
    ssl = SslConfig(batch_size=8, local_epochs=1, momentum=0.9)
    plain = SslConfig(batch_size=8, local_epochs=1, momentum=0.9, align_weight=0.0)
    checks = []
    for workers in (1, 4):
        checks.append(_trace(one, "progressive", data, None, workers, ssl, 0)
                      == _trace(one, "end_to_end", data, None, workers, ssl, 0))
        checks.append(_trace(two, "lw_fedssl", data, None, workers, plain, 0)
                      == _trace(two, "layer_wise", data, None, workers, plain, 0))
    record(4, "reduction equivalences", all(checks),
           f"prog(S=1)==e2e and lw_fedssl(a=0,E_g=0)==layer_wise, bitwise per round at workers 1 and 4: {checks}")


# ---------------------------------------------------------------------------
# 5. freezing and aggregation


def test_05_freezing_and_aggregation(monkeypatch):
    rng = np.random.default_rng(5)
    spec = ModelSpec(input_dim=16, num_layers=3, block_hidden_dim=8, block_out_dim=16, proj_hidden=8, proj_out=4, pred_hidden=8)
    data = [rng.standard_normal((16, 16)).astype(np.float32) for _ in range(3)]
    violations, rounds = [], 0
    original = fed_mod._client_round

    def spy(client, r, broadcast, *args):
        frozen = {f"enc.{i}": {n: a.tobytes() for n, a in broadcast.groups[f"enc.{i}"].items()}
                  for i in range(broadcast.frozen_prefix)}
        res = original(client, r, broadcast, *args)
        for g, grp in frozen.items():
            if g in res.upload or any(broadcast.groups[g][n].tobytes() != b for n, b in grp.items()):
                violations.append((r, client, g))
        return res

    monkeypatch.setattr(fed_mod, "_client_round", spy)
    for strategy in ("layer_wise", "lw_fedssl"):
        fed = FedConfig(strategy=strategy, clients=3, rounds=6, calibration_epochs=1)
        run_federation(spec, fed, SslConfig(batch_size=8, local_epochs=1), OptimConfig(base_lr=0.05),
                       AugmentPolicy(), data, rng.standard_normal((8, 16)), seed=0)
        rounds += 6

    models = [{"g": {"w": rng.standard_normal((7, 5)).astype(np.float32)}} for _ in range(5)]
    merged = aggregate(models, [0.2] * 5)["g"]["w"]
    err = float(np.abs(merged - np.mean([m["g"]["w"].astype(np.float64) for m in models], axis=0)).max())
    ok = not violations and err <= 1e-6
    record(5, "freezing and aggregation", ok,
           f"{rounds} layer-wise rounds, {len(violations)} frozen-layer violations; N=5 mean error {err:.1e} <= 1e-6")


# ---------------------------------------------------------------------------
# 6. momentum contraction


def test_06_momentum_contraction():
    rng = np.random.default_rng(6)
    spec = ModelSpec(input_dim=6, num_layers=2, block_hidden_dim=5, block_out_dim=4, proj_hidden=8, proj_out=4, pred_hidden=8)
    worst, unchanged = 0.0, True
    for mu in (0.0, 0.5, 0.9, 0.99, 1.0):
        online = build_model(spec, 1, dtype=np.float64)
        branch = MomentumBranch.from_model(online)
        for grp in branch.groups.values():
            for n in grp:
                grp[n] = grp[n] + rng.standard_normal(grp[n].shape)
        before = {(g, n): a.copy() for g, grp in branch.groups.items() for n, a in grp.items() if "running_" not in n}
        momentum_update(online, branch, mu)
        for (g, n), old in before.items():
            d0 = np.linalg.norm(old - online.groups[g][n])
            d1 = np.linalg.norm(branch.groups[g][n] - online.groups[g][n])
            worst = max(worst, abs(d1 - mu * d0))
            if mu == 1.0:
                unchanged &= branch.groups[g][n].tobytes() == old.tobytes()
    record(6, "momentum contraction", worst <= 1e-12 and unchanged,
           f"max | ||t'-o|| - mu||t-o|| | = {worst:.1e} <= 1e-12; mu=1 bitwise unchanged: {unchanged}")


# ---------------------------------------------------------------------------
# 7 and 10. reference runs


@pytest.fixture(scope="module")
def reference_runs(tmp_path_factory, monkeypatch_module):
    monkeypatch_module.delenv("LWFS_WORKERS", raising=False)
    root = tmp_path_factory.mktemp("reference")
    runs = {}
    for workers in (1, 8):
        out = root / f"w{workers}"
        t0 = time.perf_counter()
        code = main(["run", str(REFERENCE), "--out", str(out), "--workers", str(workers)])
        runs[workers] = (code, out, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_07_learning_smoke(reference_runs):
    cfg = parse_config(REFERENCE)
    code, out, elapsed = reference_runs[1]
    s = json.loads((out / "summary.json").read_text())
    acc, base = s["probe_accuracy"], s["untrained_probe_accuracy"]
    shape_ok = (cfg.fed.clients, cfg.model.num_layers, cfg.fed.rounds, cfg.ssl.batch_size) == (4, 3, 15, 32)
    ok = code == 0 and shape_ok and cfg.strategy == "lw_fedssl" and acc >= 0.90 and acc - base >= 0.05 and elapsed < 300
    record(7, "desk-scale learning", ok,
           f"probe accuracy {acc:.4f} >= 0.90, untrained {base:.4f} (margin {acc - base:+.4f} >= 0.05), {elapsed:.1f}s single worker")


def test_10_determinism(reference_runs):
    (c1, a, _), (c8, b, _) = reference_runs[1], reference_runs[8]
    same = {name: (a / name).read_bytes() == (b / name).read_bytes() for name in ("summary.json", "final.lwfs")}
    record(10, "determinism across workers", c1 == c8 == 0 and all(same.values()),
           f"--workers 1 vs 8 byte-identical: {same}")


# ---------------------------------------------------------------------------
# 8. cost ordering


def test_08_cost_ordering():
    cfg = parse_config(REFERENCE)
    from dataclasses import replace

    spec = replace(cfg.model, num_layers=6)
    R, B, E = cfg.fed.rounds, cfg.ssl.batch_size, cfg.ssl.local_epochs
    per_round = {}
    for strategy in ("layer_wise", "progressive", "end_to_end"):
        sched = StageSchedule.build(strategy, 6, R)
        per_round[strategy] = [e.flops_bwd for e in plan_ledger(spec, sched, [128], B, E, False).entries]
    stages = StageSchedule.build("progressive", 6, R)
    bad = []
    for r in range(R):
        lw, pr, e2e = (per_round[k][r] for k in ("layer_wise", "progressive", "end_to_end"))
        if not (lw <= pr <= e2e) or ((pr == e2e) != (stages.stage(r) == 6)):
            bad.append(r)
    mem_eq = memory_model(spec, "progressive", 6, B) == memory_model(spec, "end_to_end", 6, B)
    record(8, "cost ordering", not bad and mem_eq,
           f"S=6, {R} rounds: LW <= Prog <= E2E with Prog == E2E only in stage 6 (violations {bad}); "
           f"memory Prog(s=S) == E2E: {mem_eq}")


# ---------------------------------------------------------------------------
# 9. Dirichlet heterogeneity


def test_09_dirichlet():
    ds = gen_synthetic(5000, 10, 2, 1.0, seed=9)
    glob = np.bincount(ds.labels, minlength=10) / len(ds)
    worst_dev, shares, exact = 0.0, [], True
    for seed in range(20):
        for beta in (1e6, 0.1):
            p = partition_dirichlet(ds, 10, beta, seed)
            allidx = np.sort(np.concatenate(p.clients))
            exact &= np.array_equal(allidx, np.arange(len(ds))) and min(p.sizes()) > 0
            props = [np.bincount(ds.labels[c], minlength=10) / len(c) for c in p.clients]
            if beta == 1e6:
                worst_dev = max(worst_dev, max(np.abs(q - glob).max() for q in props))
            else:
                shares.append(np.mean([q.max() for q in props]))
    ok = worst_dev <= 0.05 and np.mean(shares) >= 0.5 and exact
    record(9, "Dirichlet heterogeneity", ok,
           f"beta=1e6 max deviation {worst_dev:.3f} <= 0.05; beta=0.1 mean max-class share {np.mean(shares):.3f} >= 0.5; "
           f"all 40 partitions exact: {exact}")


# ---------------------------------------------------------------------------
# 11. schedule allocations


def test_11_schedule_allocations():
    twelve = make_schedule(12, 180, "uniform") == [15] * 12
    rng = np.random.default_rng(11)
    failures = 0
    for _ in range(1000):
        S = int(rng.integers(1, 50))
        R = S + int(rng.integers(0, 500))
        for kind in ALLOCATIONS:
            counts = make_schedule(S, R, kind)
            failures += not (len(counts) == S and sum(counts) == R and min(counts) >= 1)
    record(11, "schedule allocations", twelve and failures == 0,
           f"(S=12, R=180) uniform -> 15 per stage: {twelve}; 1000 random (S, R) x 3 kinds, {failures} failures")
