"""Summaries and plots built only from files already on disk.

``build_report(root)`` scans ``root`` for run directories (anything holding a
``metrics.jsonl``), then writes into ``root/report``:

* ``summary.tsv`` / ``summary.md``: mean and sample SD over seeds per run name
* ``curves.csv``: per-round mean accuracy for every run and seed
* ``comparison.md``: singular vs regular decoder transmission, when both exist
* ``accuracy.png``: per-round curves with a dashed line where fine-tuning starts
"""

from __future__ import annotations

import configparser
import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class NoRunsFound(LookupError):
    pass


@dataclass
class StoredRun:
    path: Path
    records: List[dict]
    summary: dict = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.summary.get("run") or self.records[0]["run"]

    @property
    def seed(self) -> int:
        return int(self.summary.get("seed", self.records[0]["seed"]))

    @property
    def final_accuracy(self) -> float:
        return self.records[-1]["mean_accuracy"]

    @property
    def pre_finetune_accuracy(self) -> float:
        fl = [r for r in self.records if r["phase"] == "fl"]
        return fl[-1]["mean_accuracy"] if fl else float("nan")

    @property
    def ledger_bytes(self) -> int:
        return int(self.records[-1]["ledger_bytes"])


def _read_jsonl(path: Path) -> List[dict]:
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def discover_runs(root) -> List[StoredRun]:
    root = Path(root)
    runs = []
    for metrics in sorted(root.rglob("metrics.jsonl")):
        records = _read_jsonl(metrics)
        if not records:
            continue
        run_dir = metrics.parent
        summary = json.loads((run_dir / "summary.json").read_text()) if (run_dir / "summary.json").exists() else {}
        config = {}
        if (run_dir / "config.ini").exists():
            cp = configparser.ConfigParser(interpolation=None)
            cp.read(run_dir / "config.ini")
            config = dict(cp["run"]) if "run" in cp else {}
        runs.append(StoredRun(run_dir, records, summary, config))
    return runs


def mean_sd(values) -> tuple:
    values = list(values)
    mean = sum(values) / len(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd


def summarize(runs: List[StoredRun]) -> List[dict]:
    groups: Dict[str, List[StoredRun]] = {}
    for r in runs:
        groups.setdefault(r.name, []).append(r)
    rows = []
    for name in sorted(groups):
        members = sorted(groups[name], key=lambda r: r.seed)
        acc_m, acc_sd = mean_sd(r.final_accuracy for r in members)
        pre_m, pre_sd = mean_sd(r.pre_finetune_accuracy for r in members)
        bytes_m, _ = mean_sd(r.ledger_bytes for r in members)
        rows.append({
            "run": name,
            "seeds": [r.seed for r in members],
            "n": len(members),
            "accuracy_mean": acc_m,
            "accuracy_sd": acc_sd,
            "pre_finetune_mean": pre_m,
            "pre_finetune_sd": pre_sd,
            "ledger_bytes_mean": bytes_m,
            "tc_mode": members[0].config.get("tc_mode", ""),
            "train_mode": members[0].config.get("train_mode", ""),
            "finetune_rounds": int(members[0].config.get("finetune_rounds", -1)),
            "rounds": int(members[0].config.get("rounds", -1)),
        })
    return rows


def _fmt(mean, sd) -> str:
    return f"{mean:.2f} ± {sd:.2f}"


def summary_markdown(rows: List[dict], failures: Optional[List[dict]] = None) -> str:
    lines = [
        "| run | seeds | accuracy after fine-tuning (%) | accuracy before fine-tuning (%) | total bytes |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(f"| {r['run']} | {r['n']} | {_fmt(r['accuracy_mean'], r['accuracy_sd'])} | "
                     f"{_fmt(r['pre_finetune_mean'], r['pre_finetune_sd'])} | {r['ledger_bytes_mean']:.0f} |")
    if any(r["finetune_rounds"] == 0 for r in rows):
        lines += ["", "Runs with finetune_rounds = 0 stop after the FL rounds. They get no extra "
                      "full-participation rounds in place of fine-tuning."]
    if failures:
        lines += ["", "Failed sub-runs:"]
        lines += [f"- {f['variant']} seed {f['seed']}: {f['error']}" for f in failures]
    return "\n".join(lines) + "\n"


def comparison_markdown(rows: List[dict]) -> str:
    """Singular vs regular decoder transmission: accuracy and bytes."""
    def pick(mode):
        cands = [r for r in rows if r["tc_mode"] == mode and r["train_mode"] == "full" and r["finetune_rounds"] != 0]
        return cands[0] if cands else None

    single, regular = pick("singular"), pick("regular")
    if single is None or regular is None:
        return ""
    lines = ["| decoder transmission | run | accuracy (%) | total bytes | total GB |", "|---|---|---|---|---|"]
    for label, r in (("singular", single), ("regular", regular)):
        gb = r["ledger_bytes_mean"] / 1e9
        lines.append(f"| {label} | {r['run']} | {_fmt(r['accuracy_mean'], r['accuracy_sd'])} | "
                     f"{r['ledger_bytes_mean']:.0f} | {gb:.4f} |")
    return "\n".join(lines) + "\n"


def write_curves(runs: List[StoredRun], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "seed", "round", "phase", "mean_accuracy"])
        for r in sorted(runs, key=lambda r: (r.name, r.seed)):
            for rec in r.records:
                w.writerow([r.name, r.seed, rec["round"], rec["phase"], repr(rec["mean_accuracy"])])
    return path


def plot_curves(runs: List[StoredRun], path: Path) -> Path:
    groups: Dict[str, List[StoredRun]] = {}
    for r in runs:
        groups.setdefault(r.name, []).append(r)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    split = None
    for name in sorted(groups):
        by_round: Dict[int, List[float]] = {}
        for r in groups[name]:
            for rec in r.records:
                by_round.setdefault(rec["round"], []).append(rec["mean_accuracy"])
            fl = [rec["round"] for rec in r.records if rec["phase"] == "fl"]
            if fl and any(rec["phase"] == "finetune" for rec in r.records):
                split = max(fl)
        xs = sorted(by_round)
        ax.plot(xs, [sum(by_round[x]) / len(by_round[x]) for x in xs], marker=".", label=name)
    if split is not None:
        ax.axvline(split + 0.5, linestyle="--", color="grey")
    ax.set_xlabel("round")
    ax.set_ylabel("mean generalization accuracy (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _read_failures(root: Path) -> List[dict]:
    path = root / "failures.jsonl"
    return _read_jsonl(path) if path.exists() else []


def build_report(root, out_dir=None) -> List[dict]:
    """Write the report files and return the summary rows.

    Raises ``NoRunsFound`` when ``root`` holds no stored metrics.
    """
    root = Path(root)
    runs = discover_runs(root) if root.is_dir() else []
    if not runs:
        raise NoRunsFound(f"no runs found under {root}")
    out = Path(out_dir) if out_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(runs)
    failures = _read_failures(root)
    with (out / "summary.tsv").open("w") as fh:
        cols = ["run", "n", "accuracy_mean", "accuracy_sd", "pre_finetune_mean", "pre_finetune_sd", "ledger_bytes_mean"]
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    (out / "summary.md").write_text(summary_markdown(rows, failures))
    comparison = comparison_markdown(rows)
    if comparison:
        (out / "comparison.md").write_text(comparison)
    write_curves(runs, out / "curves.csv")
    plot_curves(runs, out / "accuracy.png")
    return rows
