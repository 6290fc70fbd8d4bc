"""SVG chart emission from the evaluation CSV files."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataIntegrityError

_PDA_SERIES = (
    ("pda.csv", "full method"),
    ("pda_prop_only.csv", "propagation only"),
    ("pda_oracle.csv", "oracle upper bound"),
)


def _read_xy(path: Path, x_col: str, y_col: str) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            xs.append(float(row[x_col]))
            ys.append(float(row[y_col]))
    return xs, ys


def plot_pda(eval_dir: str | Path) -> Path:
    eval_dir = Path(eval_dir)
    fig, ax = plt.subplots(figsize=(6, 4))
    found = False
    for fname, label in _PDA_SERIES:
        path = eval_dir / fname
        if not path.is_file():
            continue
        xs, ys = _read_xy(path, "distance", "miou")
        ax.plot(xs, ys, marker="o", label=label)
        found = True
    if not found:
        raise DataIntegrityError(f"no pda*.csv files under {eval_dir}")
    ax.set_xlabel("propagation distance")
    ax.set_ylabel("mIoU")
    ax.set_title("accuracy vs propagation distance")
    ax.grid(alpha=0.3)
    ax.legend()
    out = eval_dir / "pda.svg"
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def plot_cca(eval_dir: str | Path) -> Path:
    eval_dir = Path(eval_dir)
    path = eval_dir / "cca.csv"
    if not path.is_file():
        raise DataIntegrityError(f"missing {path}; run `eval cca` first")
    xs, ys = _read_xy(path, "mean_gflops", "miou")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("mean cost per frame (GFLOPs)")
    ax.set_ylabel("mIoU")
    ax.set_title("accuracy vs average compute")
    ax.grid(alpha=0.3)
    out = eval_dir / "cca.svg"
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def plot_false_correction(eval_dir: str | Path) -> Path:
    eval_dir = Path(eval_dir)
    path = eval_dir / "false_correction.csv"
    if not path.is_file():
        raise DataIntegrityError(f"missing {path}; run `eval false-correction` first")
    modes, ratios = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            modes.append(row["mode"])
            r = float(row["ratio"])
            ratios.append(r if math.isfinite(r) else 0.0)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(modes, ratios, color=["tab:blue", "tab:orange"][: len(modes)])
    ax.set_ylabel("wrongly / rightly rectified pixels")
    ax.set_title("false-correction ratio")
    out = eval_dir / "false_correction.svg"
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def plot_all(eval_dir: str | Path) -> list[Path]:
    written = []
    for fn in (plot_pda, plot_cca, plot_false_correction):
        try:
            written.append(fn(eval_dir))
        except DataIntegrityError:
            continue
    if not written:
        raise DataIntegrityError(f"nothing to plot under {eval_dir}")
    return written
