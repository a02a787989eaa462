"""Two-panel training-curve figure from the loss CSV."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .training import LOSS_CSV_HEADER

ADVERSARIAL_COLUMNS = ("adv_g_OH", "adv_g_HO", "adv_d_H", "adv_d_O")
CONSTRAINT_COLUMNS = ("cycle", "embedding", "coronary")


def read_loss_csv(path: str) -> dict[str, np.ndarray]:
    """Parse the training log; malformed rows raise with their line number."""
    columns = LOSS_CSV_HEADER.split(",")
    data: dict[str, list[float]] = {name: [] for name in columns}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty loss CSV") from None
        if header != columns:
            raise ValueError(f"{path}:1: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise ValueError(f"{path}:{lineno}: expected {len(columns)} fields, found {len(row)}")
            try:
                for name, value in zip(columns, row):
                    data[name].append(float(value))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in row {row!r}") from None
    if not data["epoch"]:
        raise ValueError(f"{path}: no loss rows")
    return {name: np.asarray(vals) for name, vals in data.items()}


def per_epoch_means(data: dict[str, np.ndarray], column: str) -> tuple[np.ndarray, np.ndarray]:
    epochs = np.unique(data["epoch"])
    means = np.array([data[column][data["epoch"] == e].mean() for e in epochs])
    return epochs, means


def plot_losses(csv_path: str, out_path: str) -> str:
    """Panel (a): adversarial terms; panel (b): cycle/embedding/coronary."""
    data = read_loss_csv(csv_path)
    fig, (ax_a, ax_b) = plt.subplots(1, 2, figsize=(11, 4))
    for column in ADVERSARIAL_COLUMNS:
        epochs, means = per_epoch_means(data, column)
        ax_a.plot(epochs, means, label=column)
    ax_a.set_title("(a) adversarial losses")
    for column in CONSTRAINT_COLUMNS:
        epochs, means = per_epoch_means(data, column)
        ax_b.plot(epochs, means, label=column)
    ax_b.set_title("(b) cycle / embedding / coronary losses")
    for ax in (ax_a, ax_b):
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
