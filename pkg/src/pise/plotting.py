"""Vector plots rendered straight from the CSV artifacts (no recomputation)."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .losses import GradientTrace, grad_index  # noqa: E402


def plot_trace(path, fmt: str = "svg", window: int = 5) -> Path:
    """Gradient-norm curve of one run; the caption carries its grad index."""
    path = Path(path)
    trace = GradientTrace.from_csv(path)
    epochs = range(1, len(trace) + 1)
    try:
        caption = f"grad index (last {window} / first) = {grad_index(trace, window):.3f}"
    except ValueError as e:
        caption = f"grad index undefined: {e}"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(epochs), trace.values, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel(r"$\|\nabla_\theta L\|_2$")
    ax.set_title(caption, fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = path.with_suffix(f".{fmt}")
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_robustness(path, fmt: str = "svg") -> Path:
    """PSNR versus noise level, one line per method in the table."""
    path = Path(path)
    curves = defaultdict(lambda: ([], []))
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            xs, ys = curves[row["method"]]
            xs.append(float(row["sigma"]))
            ys.append(float(row["psnr"]))
    if not curves:
        raise ValueError(f"{path} has no rows")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for method, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker="o", ms=3, label=f"{method} (drop {ys[0] - ys[-1]:.2f} dB)")
    ax.set_xlabel(r"relative AWGN $\sigma$")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = path.with_suffix(f".{fmt}")
    fig.savefig(out)
    plt.close(fig)
    return out
