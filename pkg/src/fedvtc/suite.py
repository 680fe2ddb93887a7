"""Run every variant of an experiment suite over a shared seed list."""

from __future__ import annotations

import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from .config import ExperimentSuite, RunConfig
from .report import build_report
from .runner import load_bundle, run_to_dir

log = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    out_dir: Path
    rows: List[dict]
    records: Dict[Tuple[str, int], List[dict]] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)


def _data_key(cfg: RunConfig):
    return (cfg.profile, cfg.data_root, cfg.toy_data, cfg.train_cap, cfg.test_cap, cfg.data_seed)


def _run_one(job) -> dict:
    variant, cfg, out, bundle = job
    try:
        result = run_to_dir(cfg, out, bundle=bundle)
        return {"variant": variant, "seed": cfg.seed, "records": result.records}
    except Exception as exc:  # a broken sub-run must not stop the suite
        log.error("variant %s seed %d failed: %s", variant, cfg.seed, exc)
        return {"variant": variant, "seed": cfg.seed, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _worker_init():
    torch.set_num_threads(1)


def suite_jobs(suite: ExperimentSuite, out_dir: Path, seeds: List[int]):
    for variant, cfg in suite.variants.items():
        for seed in seeds:
            yield variant, cfg.with_overrides(seed=seed), out_dir / variant / f"seed-{seed}"


def run_suite(suite: ExperimentSuite, out_dir, repeats: Optional[int] = None, workers: int = 1) -> SuiteResult:
    """Run each variant for each seed, then summarize from the stored metrics.

    With ``workers > 1`` runs are dispatched to a process pool; every run has
    its own output directory and seed-derived random streams, so results do
    not depend on scheduling.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = suite.seeds[:repeats] if repeats else list(suite.seeds)
    jobs = list(suite_jobs(suite, out, seeds))

    bundles = {}
    outcomes = []
    if workers <= 1:
        for variant, cfg, run_dir in jobs:
            key = _data_key(cfg)
            if key not in bundles:
                try:
                    bundles[key] = load_bundle(cfg)
                except Exception as exc:
                    outcomes.append({"variant": variant, "seed": cfg.seed, "error": f"{type(exc).__name__}: {exc}"})
                    continue
            outcomes.append(_run_one((variant, cfg, run_dir, bundles[key])))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            outcomes = list(pool.map(_run_one, [(v, c, d, None) for v, c, d in jobs]))

    failures = [{k: o[k] for k in ("variant", "seed", "error")} for o in outcomes if "error" in o]
    with (out / "failures.jsonl").open("w") as fh:
        for f in failures:
            fh.write(json.dumps(f) + "\n")
    records = {(o["variant"], o["seed"]): o["records"] for o in outcomes if "records" in o}
    rows = build_report(out) if records else []
    return SuiteResult(out, rows, records, failures)
