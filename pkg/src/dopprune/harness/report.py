"""Run reports and cross-run comparison tables and plots."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("mode", "criterion", "sparsity", "mean_acc", "std_acc", "n_seeds")


@dataclass
class RunReport:
    """Rows are deterministic; wall-clock timing is kept apart from them."""

    config_hash: str
    dataset: str
    rows: list[dict]
    timing: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.get("status") == "ok" for r in self.rows)

    @property
    def failures(self) -> list[dict]:
        return [r for r in self.rows if r.get("status") != "ok"]

    def rows_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def accuracies(self, sparsity: float) -> list[float]:
        return [r["accuracy"] for r in self.rows if r["status"] == "ok" and r["sparsity"] == sparsity]

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.jsonl").write_text(self.rows_jsonl())
        (d / "timing.json").write_text(json.dumps(self.timing, sort_keys=True, indent=2))
        head = {"config_hash": self.config_hash, "dataset": self.dataset, **self.meta}
        (d / "report.json").write_text(json.dumps(head, sort_keys=True, indent=2))
        return d

    @classmethod
    def read(cls, directory) -> "RunReport":
        d = Path(directory)
        head = json.loads((d / "report.json").read_text())
        rows = [json.loads(line) for line in (d / "report.jsonl").read_text().splitlines() if line.strip()]
        timing = json.loads((d / "timing.json").read_text()) if (d / "timing.json").is_file() else {}
        config_hash = head.pop("config_hash")
        dataset = head.pop("dataset")
        return cls(config_hash, dataset, rows, timing, head)


def aggregate(reports) -> list[dict]:
    """Mean and sample standard deviation (ddof=1) of accuracy over seeds."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    datasets = {r.dataset for r in reports}
    if len(datasets) > 1:
        raise ValueError(f"reports come from different datasets: {sorted(datasets)}")
    groups: dict[tuple, dict[int, float]] = {}
    for rep in reports:
        for row in rep.rows:
            if row.get("status") != "ok":
                continue
            key = (row["mode"], row["criterion"], float(row["sparsity"]))
            # keyed by seed, so feeding the same report twice changes nothing
            groups.setdefault(key, {})[row["seed"]] = row["accuracy"]
    table = []
    for (mode, crit, sparsity) in sorted(groups):
        accs = np.array([groups[(mode, crit, sparsity)][s] for s in sorted(groups[(mode, crit, sparsity)])])
        std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
        table.append({"mode": mode, "criterion": crit, "sparsity": sparsity,
                      "mean_acc": float(accs.mean()), "std_acc": std, "n_seeds": int(len(accs))})
    return table


def write_csv(table: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def plot_table(table: list[dict], directory) -> list[Path]:
    """One sparsity-vs-accuracy line plot per criterion, one line per mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for crit in sorted({r["criterion"] for r in table}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        rows = [r for r in table if r["criterion"] == crit]
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((r["sparsity"], r["mean_acc"], r["std_acc"]) for r in rows if r["mode"] == mode)
            xs, ys, es = (np.array(v) for v in zip(*pts))
            ax.errorbar(100 * xs, 100 * ys, yerr=100 * es, marker="o", capsize=3, label=mode)
        ax.set_xlabel("sparsity (%)")
        ax.set_ylabel("test accuracy (%)")
        ax.set_title(crit.upper())
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = Path(directory) / f"accuracy-{crit}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def compare_runs(reports, out_dir, plots: bool = True) -> tuple[list[dict], Path, list[Path]]:
    """Aggregate reports (objects or run directories) into a CSV and plots under ``out_dir``."""
    reports = [r if isinstance(r, RunReport) else RunReport.read(r) for r in reports]
    table = aggregate(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(table, out / "comparison.csv")
    images = plot_table(table, out) if plots and table else []
    return table, csv_path, images
