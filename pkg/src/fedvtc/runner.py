"""Execute one configured run and archive everything it produced.

Run directory layout::

    config.ini          resolved configuration
    partition.txt       client shard manifest
    metrics.jsonl       one record per evaluation point, appended as the run goes
    ledger.tsv          every directed message
    ledger_summary.tsv  totals per payload kind and direction
    memory.tsv          memory estimates per architecture in the run
    summary.json        final accuracies, per-class breakdown, byte totals
    checkpoints/        client-<k>.ckpt, decoder.ckpt, stats.ckpt
    synthetic/          64 decoded samples plus grid.png

No wall-clock values are written, so two runs with the same config and seed
produce byte-identical files.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import torch

from . import accounting
from .checkpoint import load_tensors, save_module, save_tensors
from .config import RunConfig, dumps_config
from .data import DatasetBundle, PartitionSpec, dirichlet_partition, load_dataset, toy_bundle
from .evaluation import per_class_accuracy
from .images import save_grid, save_samples
from .models import ZOO, arch_clusters, build_local_model, build_vtc_decoder, get_profile
from .protocol import RunResult, generate_synthetic, run_experiment

log = logging.getLogger(__name__)

DUMP_COUNT = 64


def load_bundle(config: RunConfig) -> DatasetBundle:
    if config.toy_data:
        return toy_bundle(config.profile, config.train_cap or 400, config.test_cap or 200, seed=config.data_seed)
    return load_dataset(config.profile, config.data_root, config.train_cap, config.test_cap, seed=config.data_seed)


def make_partition(config: RunConfig, bundle: DatasetBundle) -> PartitionSpec:
    return dirichlet_partition(bundle.train_y.numpy(), config.clients, config.alpha, seed=config.seed)


def _json_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=True) + "\n"


def memory_reports(config: RunConfig, batch_size: Optional[int] = None, all_archs: bool = False):
    profile = get_profile(config.profile)
    archs = ZOO if all_archs else arch_clusters(config.clusters)
    decoder = build_vtc_decoder(profile, profile.p, seed=0)
    reports = []
    for arch in archs:
        model = build_local_model(arch, profile.input_shape, profile.p, profile.num_classes, seed=0,
                                  latent_shape=profile.latent_shape, base_width=profile.base_width)
        reports.append(accounting.schedule_report(model, decoder, profile.input_shape, profile.p,
                                                  batch_size or config.batch_size, arch=f"cluster-{arch.cluster_id}"))
    return reports


def save_stats(path, prototypes, sigma, **meta) -> Path:
    tensors = {f"prototype_{y}": c for y, c in sorted(prototypes.items())}
    tensors["sigma"] = sigma
    return save_tensors(path, tensors, {"kind": "stats", **meta})


def load_stats(path):
    manifest, tensors = load_tensors(path)
    sigma = tensors.pop("sigma")
    prototypes = {int(k.split("_", 1)[1]): v for k, v in tensors.items()}
    return dict(sorted(prototypes.items())), sigma, manifest


def dump_synthetic(decoder, prototypes, sigma, out_dir, count: int = DUMP_COUNT, seed: int = 0, num_classes=None) -> Path:
    gen = torch.Generator().manual_seed(int(seed))
    synth = generate_synthetic(decoder, prototypes, sigma, count, gen, num_classes=num_classes)
    out_dir = Path(out_dir)
    save_samples(synth.x, synth.y.tolist(), out_dir)
    return save_grid(synth.x, out_dir / "grid.png")


def write_run_outputs(result: RunResult, bundle: DatasetBundle, out: Path) -> dict:
    cfg = result.config
    (out / "ledger.tsv").write_text(result.ledger.to_tsv())
    (out / "ledger_summary.tsv").write_text(result.ledger.summary())
    (out / "memory.tsv").write_text(accounting.memory_table(memory_reports(cfg)))

    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for c in result.clients:
        save_module(ckpt / f"client-{c.client_id}.ckpt", c.model, kind="model", arch_id=c.model.arch_id,
                    client=c.client_id, seed=cfg.seed)
    save_module(ckpt / "decoder.ckpt", result.server.decoder, kind="decoder", arch_id="vtc", seed=cfg.seed)
    save_stats(ckpt / "stats.ckpt", result.server.prototypes, result.server.sigma, seed=cfg.seed)

    dump_synthetic(result.server.decoder, result.server.prototypes, result.server.sigma, out / "synthetic",
                   seed=result.dump_seed, num_classes=result.server.num_classes)

    C = bundle.num_classes
    per_class = [per_class_accuracy(c.model, bundle.test_x, bundle.test_y, C) for c in result.clients]
    mean_per_class = [sum(row[y] for row in per_class) / len(per_class) for y in range(C)]
    closed = accounting.closed_form_bytes(result.selections, result.client_classes, result.p,
                                          result.decoder_elements, cfg.clients, cfg.tc_mode)
    summary = {
        "run": cfg.name,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "finetune_rounds": cfg.finetune_rounds,
        "final_accuracy": result.final_accuracy,
        "pre_finetune_accuracy": result.pre_finetune_accuracy,
        "per_class_accuracy": mean_per_class,
        "uninitialized_classes": result.server.uninitialized,
        "ledger_bytes": accounting.ledger_total(result.ledger),
        "decoder_bytes": accounting.ledger_total(result.ledger, kind="decoder"),
        "closed_form_bytes": closed,
        "decoder_elements": result.decoder_elements,
        "p": result.p,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_to_dir(config: RunConfig, out_dir, bundle: Optional[DatasetBundle] = None) -> RunResult:
    """Run ``config`` end to end, writing the directory layout described above."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = bundle if bundle is not None else load_bundle(config)
    partition = make_partition(config, bundle)
    (out / "config.ini").write_text(dumps_config(config))
    (out / "partition.txt").write_text(partition.to_manifest())

    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    with metrics.open("a") as fh:
        def progress(record):
            fh.write(_json_line(record))
            fh.flush()
            log.info("%s seed=%d round=%d acc=%.2f", record["run"], record["seed"], record["round"], record["mean_accuracy"])

        result = run_experiment(config, bundle, partition, progress=progress)
    write_run_outputs(result, bundle, out)
    return result


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
