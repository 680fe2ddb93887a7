"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS|FAIL ...`` line as it finishes; the
same lines are repeated in the pytest terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from fedvtc.accounting import closed_form_bytes, ledger_total
from fedvtc.cli import main
from fedvtc.checkpoint import load_module
from fedvtc.config import RunConfig, ExperimentSuite, default_variants, dumps_config
from fedvtc.data import dirichlet_partition, toy_bundle
from fedvtc.losses import kl_gaussian
from fedvtc.models import ZOO, PROFILES, build_profile_model, build_vtc_decoder, get_profile
from fedvtc.accounting import schedule_report
from fedvtc.protocol import generate_synthetic, run_experiment
from fedvtc.runner import load_stats
from fedvtc.suite import run_suite

import aggregation_cases
import conftest
import gradcheck_cases
import oracles


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------- 1

def test_criterion_1_kl_matches_monte_carlo():
    start = time.perf_counter()
    worst, failures = 0.0, []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, 6))
        z, c = rng.normal(size=p), rng.normal(size=p)
        sigma = rng.uniform(0.2, 3.0, size=p)
        est, se = oracles.monte_carlo_kl(z, c, sigma, 10**6, rng)
        got = kl_gaussian(*(torch.as_tensor(v) for v in (z, c, sigma))).item()
        score = abs(got - est) / se
        worst = max(worst, score)
        if score > 3:
            failures.append(seed)
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    report(1, ok, f"200 instances, worst |analytic - MC| = {worst:.2f} SE (limit 3), {elapsed:.1f}s (limit 120s)")
    assert ok, failures


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_checks():
    start = time.perf_counter()
    worst = {}
    for seed in range(50):
        for name, err in gradcheck_cases.gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, ok, f"50 instances, worst relative error: {detail} (limit 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_aggregation_oracles():
    start = time.perf_counter()
    worst = {"prototype": 0.0, "sigma": 0.0, "decoder": 0.0}
    for seed in range(100):
        worst["prototype"] = max(worst["prototype"], aggregation_cases.prototype_error(seed))
        worst["sigma"] = max(worst["sigma"], aggregation_cases.sigma_error(seed))
        worst["decoder"] = max(worst["decoder"], aggregation_cases.decoder_error(seed))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"100 instances each, worst relative error: {detail} (limit 1e-12), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_ledger_exactness():
    bundle = toy_bundle("tiny", 400, 100, seed=0)
    results = {}
    for mode in ("singular", "regular"):
        cfg = RunConfig(name=mode, profile="tiny", toy_data=True, clients=10, participants=3, clusters=2,
                        rounds=20, finetune_rounds=1, synthetic=20, tc_mode=mode, seed=7)
        part = dirichlet_partition(bundle.train_y.numpy(), cfg.clients, cfg.alpha, cfg.seed)
        results[mode] = run_experiment(cfg, bundle, part)
    exact = {}
    for mode, r in results.items():
        closed = closed_form_bytes(r.selections, r.client_classes, r.p, r.decoder_elements, r.config.clients, mode)
        exact[mode] = (ledger_total(r.ledger), closed)
    s, g = results["singular"], results["regular"]
    diff = ledger_total(g.ledger, kind="decoder") - ledger_total(s.ledger, kind="decoder")
    formula = 4 * s.decoder_elements * (20 * 3 - 10)
    ok = all(a == b for a, b in exact.values()) and diff == formula
    report(4, ok, f"T=20 ledger vs closed form: singular {exact['singular'][0]} == {exact['singular'][1]}, "
                  f"regular {exact['regular'][0]} == {exact['regular'][1]}; "
                  f"regular - singular decoder bytes {diff} == 4*{s.decoder_elements}*(20*3-10) = {formula}")
    assert ok


# ---------------------------------------------------------------- 5, 6, 9

@pytest.fixture(scope="module")
def mnist_suite(mnist_subset_root, tmp_path_factory):
    base = RunConfig(profile="mnist", data_root=str(mnist_subset_root), train_cap=2000, test_cap=1000,
                     clients=10, participants=3, clusters=2, rounds=20, finetune_rounds=5, synthetic=100, alpha=0.1)
    variants = {k: v for k, v in default_variants(base).items() if k != "fedvtc-regular"}
    out = tmp_path_factory.mktemp("mnist-suite")
    start = time.perf_counter()
    result = run_suite(ExperimentSuite("acceptance", base, variants, [1, 2, 3]), out)
    return out, result, time.perf_counter() - start


def test_criterion_5_finetuning_beats_no_finetune(mnist_suite):
    out, result, elapsed = mnist_suite
    rows = {r["run"]: r for r in result.rows}
    full, none = rows["fedvtc-singular"], rows["no-finetune"]
    gain = full["accuracy_mean"] - none["accuracy_mean"]
    ok = not result.failures and full["n"] == none["n"] == 3 and gain >= 2.0 and elapsed < 1800
    report(5, ok, f"MNIST 2000/1000, 3 seeds: fine-tuned {full['accuracy_mean']:.2f}% vs no-finetune "
                  f"{none['accuracy_mean']:.2f}%, gain {gain:+.2f} pp (need >= 2), suite runtime {elapsed:.0f}s (limit 1800s)")
    assert ok


def test_criterion_6_dm_helps(mnist_suite):
    _, result, _ = mnist_suite
    rows = {r["run"]: r for r in result.rows}
    full, elbo = rows["fedvtc-singular"], rows["elbo-only"]
    ok = full["n"] == elbo["n"] == 3 and full["accuracy_mean"] >= elbo["accuracy_mean"]
    report(6, ok, f"MNIST, 3 seeds: full objective {full['accuracy_mean']:.2f}% vs elbo_only "
                  f"{elbo['accuracy_mean']:.2f}% (need full >= elbo_only)")
    assert ok


def test_criterion_9_synthetic_contracts(mnist_suite):
    out, _, _ = mnist_suite
    run_dir = out / "fedvtc-singular" / "seed-1"
    prof = get_profile("mnist")
    decoder = build_vtc_decoder(prof, prof.p, seed=0)
    load_module(run_dir / "checkpoints" / "decoder.ckpt", decoder)
    prototypes, sigma, _ = load_stats(run_dir / "checkpoints" / "stats.ckpt")
    checks = {}

    synth = generate_synthetic(decoder, prototypes, sigma, 100, torch.Generator().manual_seed(0), num_classes=10)
    counts = synth.class_counts()
    checks["size == S"] = len(synth) == 100
    checks["counts differ <= 1"] = max(counts.values()) - min(counts.values()) <= 1
    checks["pixels in [0,1]"] = float(synth.x.min()) >= 0.0 and float(synth.x.max()) <= 1.0

    n = 10_000
    cls = sorted(prototypes)[:2]
    big = generate_synthetic(decoder, {c: prototypes[c] for c in cls}, sigma, n * len(cls), torch.Generator().manual_seed(1))
    worst = 0.0
    se = sigma.double() / math.sqrt(n)
    for c in cls:
        mean = big.latents[big.y == c].double().mean(dim=0)
        worst = max(worst, float(((mean - prototypes[c].double()).abs() / se).max()))
    checks["latent means within 5 SE"] = worst <= 5
    ok = all(checks.values())
    report(9, ok, f"S=100 counts {sorted(counts.values())[0]}..{sorted(counts.values())[-1]}, "
                  f"pixel range [{float(synth.x.min()):.3f}, {float(synth.x.max()):.3f}], "
                  f"worst latent-mean deviation {worst:.2f} SE over 10^4 draws per class; "
                  + ", ".join(f"{k}: {'ok' if v else 'violated'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_memory_schedule():
    start = time.perf_counter()
    violations, checked = [], 0
    for name in PROFILES:
        prof = get_profile(name)
        decoder = build_vtc_decoder(prof, prof.p, 0)
        for arch in ZOO:
            r = schedule_report(build_profile_model(prof, arch, 0), decoder, prof.input_shape, prof.p, 16)
            checked += 1
            if not r.alternating_peak <= r.simultaneous:
                violations.append((name, arch.cluster_id))
    elapsed = time.perf_counter() - start
    ok = not violations and elapsed < 60
    report(7, ok, f"{checked} profile/architecture pairs, alternating peak <= simultaneous in all; "
                  f"violations {violations}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(tmp_path):
    cfg = RunConfig(name="det", profile="tiny", toy_data=True, train_cap=300, test_cap=100, clients=5,
                    participants=2, rounds=4, finetune_rounds=2, synthetic=30, tc_mode="regular")
    path = tmp_path / "c.ini"
    path.write_text(dumps_config(cfg))
    for d in ("a", "b"):
        assert main(["run", "--config", str(path), "--seed", "1", "--out", str(tmp_path / d)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.jsonl", "ledger.tsv", "ledger_summary.tsv", "summary.json")}
    nonempty = json.loads((tmp_path / "a" / "summary.json").read_text())["ledger_bytes"] > 0
    ok = all(same.values()) and nonempty
    report(8, ok, "repeat run byte comparison: " + ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
