"""CSV, gnuplot data and matplotlib figures for experiment outputs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TRAIN_COLUMNS = ["round", "hospital_id", "split", "accuracy", "loss", "bytes_sent", "wall_ms"]
INFER_COLUMNS = [
    "batch_size", "accuracy", "fixed_point_agreement", "float_agreement",
    "sim_time_s", "bytes", "messages",
]


def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_dat(path, columns: Sequence[str], data: Sequence[Sequence]):
    """Whitespace-separated columns with a commented header, for gnuplot."""
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in data:
            fh.write(" ".join(fmt(v) for v in row) + "\n")


def _figure(width=6.0):
    golden = (np.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, width * golden))
    ax.grid(True, linestyle="--", alpha=0.5)
    return fig, ax


def plot_training(rows: Sequence[dict], path):
    fig, ax = _figure()
    for split, style in (("train", "o-"), ("validation", "s--")):
        pts = [(r["round"], r["accuracy"]) for r in rows if r["hospital_id"] == "global" and r["split"] == split]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, np.asarray(y) * 100, style, label=f"global {split}")
    ax.set_xlabel("Round")
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_inference(rows: Sequence[dict], path_time, path_acc):
    b = [r["batch_size"] for r in rows]
    fig, ax = _figure()
    ax.plot(b, [r["sim_time_s"] for r in rows], "o-")
    ax.set_xlabel("Images per batch")
    ax.set_ylabel("Simulated time (s)")
    fig.tight_layout()
    fig.savefig(path_time, dpi=120)
    plt.close(fig)

    fig, ax = _figure()
    ax.bar([str(v) for v in b], [100 * r["accuracy"] for r in rows], color="tab:red")
    ax.set_xlabel("Images per batch")
    ax.set_ylabel("Encrypted inference accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path_acc, dpi=120)
    plt.close(fig)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
