"""Shared training-loop plumbing: configuration, epoch subsampling, histories."""
import csv
from dataclasses import dataclass

import numpy as np

from .data import epoch_subsets
from .nn import Rng


@dataclass
class TrainingConfig:
    batch_size: int = 32
    epochs: int = 50
    fraction: float = 0.2       # share of the training set visited per epoch
    lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; the model holds the last good parameters."""

    def __init__(self, epoch, history):
        super().__init__(f"training diverged in epoch {epoch}; parameters restored to the last good epoch")
        self.epoch = epoch
        self.history = history


def batches(n, cfg):
    """Yield ``(epoch, batch_no, index_array)`` following the shared subsample sequence."""
    subsets = epoch_subsets(n, cfg.epochs, cfg.fraction, cfg.seed)
    for e, sub in enumerate(subsets):
        order = Rng(cfg.seed).child("shuffle", e).permutation(len(sub))
        sub = sub[order]
        for b in range(0, len(sub), cfg.batch_size):
            yield e, b // cfg.batch_size, sub[b:b + cfg.batch_size]


def snapshot(model):
    return {k: v.copy() for k, v in model.named_params().items()}


def run(model, n, cfg, step, on_epoch=None):
    """Drive ``step(idx, epoch, batch_no) -> dict of terms`` over all batches.

    Returns the per-epoch mean history. A non-finite loss or gradient restores
    the parameters of the last completed epoch and raises ``TrainingDiverged``.
    """
    cfg.validate()
    history, acc, good = [], [], snapshot(model)
    current = 0

    def close_epoch(e):
        row = {"epoch": e}
        for k in acc[0]:
            row[k] = float(np.mean([a[k] for a in acc]))
        history.append(row)
        if on_epoch:
            on_epoch(row)

    for e, b, idx in batches(n, cfg):
        if e != current:
            close_epoch(current)
            acc.clear()
            good = snapshot(model)
            current = e
        try:
            terms = step(idx, e, b)
        except FloatingPointError:
            terms = None
        if terms is None or not all(np.isfinite(v) for v in terms.values()):
            model.load_params(good)
            raise TrainingDiverged(e, history)
        acc.append(terms)
    if acc:
        close_epoch(current)
    return history


def write_history(path, history, fields):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch"] + list(fields))
        for row in history:
            wr.writerow([row["epoch"]] + [f"{row[k]:.9g}" for k in fields])
