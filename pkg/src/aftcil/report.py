"""Run directories, metric tables and accuracy-curve figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .backbone import save_checkpoint
from .container import Entry, write_container
from .engine import AccuracyMatrix, RunConfig, RunReport, compute_acc, compute_bwt

CONFIG_FILE = "config.yaml"
MATRIX_FILE = "accuracy_matrix.csv"
METRICS_FILE = "metrics.json"
FEATURE_DUMP_KIND = "FDMP"


class RunDirError(RuntimeError):
    pass


def load_config(path) -> dict:
    """Read a YAML key/value config file into a plain dict."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of config keys")
    return data


def split_config(data: dict) -> tuple[RunConfig, dict]:
    """Separate RunConfig keys from CLI-level keys such as ``dataset`` and ``out``."""
    known = set(RunConfig().to_dict())
    run = {k: v for k, v in data.items() if k in known}
    rest = {k: v for k, v in data.items() if k not in known}
    return RunConfig.from_dict(run), rest


def accuracy_curve(matrix: AccuracyMatrix) -> list[float]:
    """ACC after each task: mean accuracy over the tasks seen so far."""
    return [float(np.mean(row)) for row in matrix.rows]


def _metrics(report: RunReport, pair_rate: Optional[float]) -> dict:
    return {
        "method": report.config["method"],
        "seed": report.config["seed"],
        "acc": report.acc,
        "bwt": report.bwt,
        "per_task": report.per_task,
        "acc_curve": accuracy_curve(report.matrix),
        "pair_confusion": pair_rate,
        "class_order": report.class_order,
        "task_classes": report.task_classes,
        "class_names": report.class_names,
        "elapsed_s": round(report.elapsed, 3),
    }


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_run(report: RunReport, out_dir, dataset: Optional[str] = None,
              pair_rate: Optional[float] = None) -> Path:
    """Persist everything needed to inspect or re-run one method run.

    Run directories are append-only: an existing non-empty directory is refused.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise RunDirError(f"run directory {out} already exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)

    snapshot = dict(report.config)
    if dataset is not None:
        snapshot["dataset"] = str(dataset)
    (out / CONFIG_FILE).write_text(yaml.safe_dump(snapshot, sort_keys=True))
    (out / MATRIX_FILE).write_text(report.matrix.to_csv())
    (out / METRICS_FILE).write_text(json.dumps(_metrics(report, pair_rate), indent=2) + "\n")
    _write_rows(out / "loss_log.csv", report.loss_log)
    report.space.to_csv(out / "prototypes.csv")
    for t, conf in enumerate(report.confusions):
        np.savetxt(out / f"confusion_task{t + 1}.csv", conf, fmt="%d", delimiter=",")

    state = report.state
    if state is not None and state.head is not None:
        extra = {"class_order": np.asarray(report.class_order, dtype=np.int64)}
        if report.standardizer is not None:
            extra["standardizer_mean"] = report.standardizer.mean
            extra["standardizer_std"] = report.standardizer.std
        save_checkpoint(out / "model.ckpt", state.model, state.head, extra)
    if report.feature_dump is not None:
        entries = [Entry(k, np.asarray(v), {}) for k, v in report.feature_dump.items()]
        write_container(out / "features.bin", FEATURE_DUMP_KIND, state.model.cfg.config_hash(), entries)
    return out


def load_run(run_dir) -> dict:
    """Read a run directory back; metrics are recomputed from the matrix."""
    run_dir = Path(run_dir)
    try:
        matrix = AccuracyMatrix.from_csv((run_dir / MATRIX_FILE).read_text())
        stored = json.loads((run_dir / METRICS_FILE).read_text())
        config = load_config(run_dir / CONFIG_FILE)
    except FileNotFoundError as exc:
        raise RunDirError(f"{run_dir} is not a complete run directory: {exc}") from exc
    return {
        "dir": str(run_dir),
        "config": config,
        "matrix": matrix,
        "stored": stored,
        "acc": compute_acc(matrix),
        "bwt": None if matrix.final_only else compute_bwt(matrix),
        "curve": accuracy_curve(matrix),
    }


def summary_rows(runs: Iterable[dict]) -> list[dict]:
    rows = []
    for run in runs:
        cfg = run["config"]
        rows.append({
            "run": Path(run["dir"]).name,
            "method": cfg.get("method"),
            "seed": cfg.get("seed"),
            "alpha": cfg.get("alpha"),
            "beta": cfg.get("beta"),
            "gamma": cfg.get("gamma"),
            "acc": run["acc"],
            "bwt": run["bwt"],
        })
    return rows


def rank_rows(rows: Sequence[dict]) -> list[dict]:
    """Best ACC first; ties broken by the less negative BWT."""
    def key(r):
        bwt = r["bwt"] if r["bwt"] is not None else float("-inf")
        return (-r["acc"], -bwt, str(r["run"]))

    return [dict(r, rank=i + 1) for i, r in enumerate(sorted(rows, key=key))]


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return "(no runs)"
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def curve_csv(runs: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n = max(len(r["curve"]) for r in runs)
    writer.writerow(["run"] + [f"task{t + 1}" for t in range(n)])
    for r in runs:
        writer.writerow([Path(r["dir"]).name] + [repr(v) for v in r["curve"]] + [""] * (n - len(r["curve"])))
    return buf.getvalue()


def curve_svg(runs: Sequence[dict], path) -> None:
    """ACC (%) after each task, one line per run; Joint runs draw a single marker."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    n_tasks = 1
    for r in runs:
        label = f"{r['config'].get('method')} (seed {r['config'].get('seed')})"
        curve = [100 * v for v in r["curve"]]
        if r["matrix"].final_only:
            ax.plot([r["matrix"].n_tasks], curve, marker="*", linestyle="none", label=label)
            n_tasks = max(n_tasks, r["matrix"].n_tasks)
        else:
            ax.plot(range(1, len(curve) + 1), curve, marker="o", label=label)
            n_tasks = max(n_tasks, len(curve))
    ax.set_xlabel("task")
    ax.set_ylabel("ACC (%)")
    ax.set_xticks(range(1, n_tasks + 1))
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_report(run_dirs: Sequence, out_dir) -> list[dict]:
    """Summarise stored runs into ``out_dir``; the run directories are only read."""
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(runs)
    _write_rows(out / "summary.csv", rows)
    (out / "accuracy_curve.csv").write_text(curve_csv(runs))
    curve_svg(runs, out / "accuracy_curve.svg")
    return rows
