"""Acceptance criteria 1-7. Each test prints one PASS/FAIL line with its measurements."""
import copy
import json
import math
import os
import random
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

import oracles
from filterprune import cli, pruner
from filterprune.criteria import CRITERIA, score_weights
from filterprune.data_pipeline import load_dataset, sample_probe
from filterprune.flops_meter import FlopsReport, exploration_steps, flops, pruning_rate
from filterprune.model_zoo import build_model, count_params
from filterprune.pruning_graph import build_groups, remove_filters, trace_channels
from filterprune.train_loop import TrainSchedule, fit, full_pipeline


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def data_spec(size=32, n=5000):
    """CIFAR-10 subset when FILTERPRUNE_DATA is set, synthetic blobs otherwise."""
    if os.environ.get("FILTERPRUNE_DATA"):
        return {"source": "cifar10", "train_subset": n, "subset_seed": 0}
    return {"source": "synthetic", "classes": 10, "n": n, "val_n": 2000, "seed": 7, "size": size}


# 1 ---------------------------------------------------------------------------

def test_criteria_oracle_suite(capsys):
    start = time.time()
    rng = np.random.default_rng(2024)
    worst, prop_fail = 0.0, 0
    for layer in range(100):
        n = int(rng.integers(2, 33))
        shape = (n, int(rng.integers(1, 17)), *([int(rng.choice([1, 3]))] * 2))
        w = torch.from_numpy(rng.normal(size=shape) * rng.uniform(0.01, 2.0))
        if layer % 10 == 0:
            w[int(rng.integers(n))] = 0.0  # zero filters must be handled too
        for crit in CRITERIA:
            got = score_weights(w, crit).scores
            want = oracles.score(w, crit) if crit in ("l1", "l2") else oracles.similarity_np(w, crit)
            rel = max(abs(g - x) / max(abs(x), 1e-12) for g, x in zip(got, want))
            worst = max(worst, rel)
            c = 2.0 ** int(rng.integers(-4, 5))
            scaled = score_weights(w * c, crit).scores
            perm = rng.permutation(n)
            permuted = score_weights(w[perm], crit).scores
            ok_scale = np.array_equal(scaled, got if crit == "cos" else got * c)
            ok_perm = np.array_equal(permuted, got[perm])
            prop_fail += (not ok_scale) + (not ok_perm)
    elapsed = time.time() - start
    ok = worst <= 1e-6 and prop_fail == 0 and elapsed < 30
    verdict(capsys, 1, ok, f"max rel err {worst:.2e} (<=1e-6), property violations {prop_fail}, "
                           f"{elapsed:.1f}s (<30s)")


# 2 ---------------------------------------------------------------------------

SURGERY_ARCHS = [("toy-chain[6,8]", None), ("toy-chain[4,6,8]/plain", None),
                 ("toy-chain[5,7,9]/bias", None), ("resnet8", None), ("resnet14", None),
                 ("vgg11", None), ("resnet18-shape", (3, 64, 64))]


def closure_ok(net):
    g = trace_channels(net)
    mods = dict(net.named_modules())
    for sp in g.spaces.values():
        n = sp.channels
        if any(mods[p].out_channels != n for p in sp.producers):
            return False
        if any(mods[b].num_features != n for b in sp.norms):
            return False
        if any(mods[c].in_channels != n for c in sp.consumers):
            return False
        if any(mods[l].in_features != n * m for l, m in sp.linears):
            return False
    groups = build_groups(net, g)
    return all(len({id(groups[(p, k)]) for p in g.spaces[gr.space].producers}) == 1
               for (_, k), gr in groups.items())


def test_structural_safety(capsys):
    start = time.time()
    rnd = random.Random(0)
    nets = {a: build_model(a, 5, seed=1, input_shape=s) for a, s in SURGERY_ARCHS}
    xs = {a: torch.randn(2, *n.input_shape) for a, n in nets.items()}
    failures, surgeries = [], 0
    for seq in range(500):
        arch = SURGERY_ARCHS[seq % len(SURGERY_ARCHS)][0]
        net = copy.deepcopy(nets[arch])
        for _ in range(rnd.randint(1, 3)):
            g = trace_channels(net)
            layer = rnd.choice(g.prunable_layers())
            n = net.get_submodule(layer).out_channels
            if n < 2:
                continue
            idx = rnd.sample(range(n), rnd.randint(1, max(1, n // 3)))
            p0 = count_params(net)
            remove_filters(net, layer, idx, graph=g, measure_flops=False)
            surgeries += 1
            with torch.no_grad():
                out = net.eval()(xs[arch])
            if out.shape != (2, 5) or not torch.isfinite(out).all():
                failures.append((seq, "forward"))
            if count_params(net) >= p0:
                failures.append((seq, "params"))
        if not closure_ok(net):
            failures.append((seq, "closure"))

    # zero-filter equivalence on bias-free, norm-free chains
    worst = 0.0
    for trial in range(40):
        net = build_model("toy-chain[6,8,10]/plain", 4, seed=trial)
        ref = copy.deepcopy(net)
        alive = {l: list(range(net.get_submodule(l).out_channels)) for l in net.prunable_layers()}
        for _ in range(3):
            layer = rnd.choice(list(alive))
            if len(alive[layer]) < 2:
                continue
            pos = sorted(rnd.sample(range(len(alive[layer])), rnd.randint(1, len(alive[layer]) - 1)))
            with torch.no_grad():
                ref.get_submodule(layer).weight[[alive[layer][p] for p in pos]] = 0.0
            remove_filters(net, layer, pos)
            alive[layer] = [c for i, c in enumerate(alive[layer]) if i not in pos]
        x = torch.randn(4, *net.input_shape)
        with torch.no_grad():
            worst = max(worst, float((net(x) - ref(x)).abs().max()))
    elapsed = time.time() - start
    ok = not failures and worst <= 1e-5 and elapsed < 300
    verdict(capsys, 2, ok, f"500 sequences / {surgeries} surgeries, failures {failures[:5]}, "
                           f"zero-filter max diff {worst:.1e} (<=1e-5), {elapsed:.0f}s (<300s)")


# 3 ---------------------------------------------------------------------------

def hand_resnet8():
    m = oracles.conv_macs
    total = m(3, 16, 3, 32, 32) + 2 * m(16, 16, 3, 32, 32)
    total += m(16, 32, 3, 16, 16) + m(32, 32, 3, 16, 16) + m(16, 32, 1, 16, 16)
    total += m(32, 64, 3, 8, 8) + m(64, 64, 3, 8, 8) + m(32, 64, 1, 8, 8)
    return total + 64 * 10


def test_flops_fidelity(capsys):
    m = oracles.conv_macs
    hand = {
        ("toy-chain[8,16]", 4, None): m(3, 8, 3, 32, 32) + m(8, 16, 3, 32, 32) + 16 * 4,
        ("toy-chain[4,8,16]/plain", 3, (3, 8, 8)): m(3, 4, 3, 8, 8) + m(4, 8, 3, 8, 8)
                                                   + m(8, 16, 3, 8, 8) + 16 * 3,
        ("resnet8", 10, None): hand_resnet8(),
    }
    hand_ok = all(flops(build_model(a, c, input_shape=s)).total == v for (a, c, s), v in hand.items())

    delta_bad, checked = [], 0
    for arch in ("resnet20", "vgg11", "toy-chain[8,16]"):
        net = build_model(arch, 10)
        plan = exploration_steps(net, 0.01)
        for layer, d in plan.per_filter_delta.items():
            clone = copy.deepcopy(net)
            before = flops(clone).total
            remove_filters(clone, layer, [clone.get_submodule(layer).out_channels - 1])
            checked += 1
            if before - flops(clone).total != d:
                delta_bad.append(layer)

    plan = exploration_steps(build_model("resnet18-shape", 1000), 0.01)
    stem, l1 = plan.steps["conv1"], plan.steps["layer1.0.conv_a"]
    anchors_ok = abs(stem - 2) <= 1 and abs(l1 - 5) <= 1
    ok = hand_ok and not delta_bad and anchors_ok
    verdict(capsys, 3, ok, f"hand MACs exact on 3 nets: {hand_ok}; measured deltas exact "
                           f"{checked - len(delta_bad)}/{checked}; steps stem={stem} (2±1), "
                           f"layer1={l1} (5±1)")


# 4 ---------------------------------------------------------------------------

def log_contract(log, P_s):
    """Violations of argmin, monotone FLOPs, R_max safety and per-step drop, from the log alone."""
    bad = []
    h = log.header
    base = h["baseline_flops"]["total"]
    r_max = h["config"]["R_max"]
    orig = h["original_counts"]
    removed = {l: 0 for l in h["original_conv_channels"]}
    prev_after, prev_rate = base, 0.0
    for e in log.entries:
        losses = [c[2] for c in e.candidates]
        if e.chosen["loss"] > min(losses):
            bad.append((e.iteration, "argmin"))
        if not e.flops_after < e.flops_before == prev_after or e.rate_after < prev_rate:
            bad.append((e.iteration, "monotone"))
        if e.flops_before - e.flops_after > 3 * P_s * base:
            bad.append((e.iteration, "drop"))
        for l, k in e.removed_per_layer.items():
            removed[l] += k
        for l, n in orig.items():
            if removed[l] > math.floor(n * r_max + 1e-9):
                bad.append((e.iteration, f"R_max {l}"))
        prev_after, prev_rate = e.flops_after, e.rate_after
    return bad


def comparable(log):
    d = json.loads(log.to_json())
    for k in ("wall_time_s", "finished_at"):
        d["footer"].pop(k)
    return d


def test_greedy_loop_contract(capsys):
    data = load_dataset(data_spec(32, 5000))
    net = build_model("resnet20", data.class_count, seed=0, input_shape=data.input_shape)
    fit(net, data, TrainSchedule(t_max=2), 1)  # one epoch so probe losses are not flat
    probe = sample_probe(data, 256, seed=0)
    images, labels = data.train_tensors(probe.indices)
    cfg = pruner.RunConfig(P=0.5, P_s=0.01, probe_size=256)
    runs, times = [], []
    for _ in range(2):
        work = copy.deepcopy(net)
        start = time.time()
        res = pruner.run(work, cfg, (images, labels), trainer_hook=lambda n, e: None)
        times.append(time.time() - start)
        runs.append(res)
    res = runs[0]
    measured = pruning_rate(res.log.header["baseline_flops"]["total"], flops(res.net).total)
    bad = log_contract(res.log, cfg.P_s)
    same = comparable(runs[0].log) == comparable(runs[1].log)
    ok = 0.50 <= measured <= 0.52 and not bad and same and max(times) < 600
    verdict(capsys, 4, ok, f"P'={measured:.4f} in [0.50,0.52], {len(res.log.entries)} iterations, "
                           f"contract violations {bad[:5]}, rerun identical {same}, "
                           f"run times {times[0]:.0f}s/{times[1]:.0f}s (<600s)")


# 5 ---------------------------------------------------------------------------

def test_end_to_end_smoke(capsys, tmp_path):
    start = time.time()
    cifar = bool(os.environ.get("FILTERPRUNE_DATA"))
    data = load_dataset(data_spec(16, 5000))
    sched = TrainSchedule(t_max=60, seed=0)
    t_p = sched.default_t_p()
    base = full_pipeline(pruner.RunConfig(P=0.0, t_p=t_p, t_max=60), data, "resnet20", sched)
    pruned = full_pipeline(pruner.RunConfig(P=0.3, t_p=t_p, t_max=60, probe_size=256), data,
                           "resnet20", sched, tmp_path / "pruned")
    elapsed = time.time() - start
    gap = pruned.final_accuracy - base.final_accuracy
    rec = pruned.extras["recovery"]
    regressions = [(round(b, 2), round(a, 2)) for b, a in rec if a < b - 0.5]
    ok = abs(gap) <= 3.0 and pruned.log.footer["final_rate"] >= 0.3 and elapsed < 3600
    verdict(capsys, 5, ok,
            f"{'cifar10 subset' if cifar else 'synthetic blobs 16x16'}: baseline "
            f"{base.final_accuracy:.2f}% vs pruned {pruned.final_accuracy:.2f}% "
            f"(gap {gap:+.2f}, |gap|<=3), P'={pruned.log.footer['final_rate']:.3f}, t_p={t_p}, "
            f"{len(rec)} fine-tunes ({len(regressions)} regressed >0.5: {regressions}), "
            f"{elapsed / 60:.1f} min (<60)")


# 6 ---------------------------------------------------------------------------

def _ablate(study, grid, out):
    return cli.main(["ablate", "--study", study, "--grid", grid, "--seeds", "0,1",
                     "--preset", "resnet8-synthetic", "--out", str(out)])


def test_ablation_machinery(capsys, tmp_path):
    import csv
    start = time.time()
    studies = {"rmax": ("0.55,0.60,0.65,0.70,0.75", 5), "ps": ("0.005,0.01,0.015,0.02,0.025,0.03", 6)}
    problems = []
    for study, (grid, cols) in studies.items():
        if _ablate(study, grid, tmp_path / "a") != 0:
            problems.append(f"{study} exit")
        with open(tmp_path / "a" / f"{study}_summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != cols or any(r["runs"] != "2" or r["acc_mean"] in ("", "None") for r in rows):
            problems.append(f"{study} cells")
        header = (tmp_path / "a" / f"{study}_summary.md").read_text().splitlines()[0]
        if header.count("|") != cols + 2:
            problems.append(f"{study} columns")
    _ablate("rmax", studies["rmax"][0], tmp_path / "b")
    same = (tmp_path / "a" / "rmax_summary.csv").read_text() == (tmp_path / "b" / "rmax_summary.csv").read_text()
    if not same:
        problems.append("rerun differs")
    elapsed = time.time() - start
    with capsys.disabled():
        print("\n" + (tmp_path / "a" / "rmax_summary.md").read_text() + (tmp_path / "a" / "ps_summary.md").read_text())
    verdict(capsys, 6, not problems, f"rmax 5 cols + ps 6 cols x 2 seeds populated, rerun identical "
                                     f"{same}, problems {problems}, {elapsed:.0f}s")


# 7 ---------------------------------------------------------------------------

def test_pruning_rate_arithmetic(capsys):
    shape = (3, 32, 32)
    checks = [
        (round(pruning_rate(1000, 474), 3), 0.526),
        (round(pruning_rate(FlopsReport(10 ** 6, {}, shape), FlopsReport(577_000, {}, shape)), 3), 0.423),
        (round(pruning_rate(1.0, 0.474) * 100, 1), 52.6),
        (round(pruning_rate(1.0, 0.577) * 100, 1), 42.3),
    ]
    ok = all(a == b for a, b in checks)
    verdict(capsys, 7, ok, "; ".join(f"{a} == {b}" for a, b in checks))
