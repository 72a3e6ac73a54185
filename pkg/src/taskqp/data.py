"""Feature/target container shared by the task modules, with flat CSV IO."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["Dataset"]


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} feature rows vs {len(self.y)} targets")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def save_csv(self, path) -> None:
        y = self.y if self.y.ndim == 2 else self.y[:, None]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.x.shape[1])]
                       + [f"y{i}" for i in range(y.shape[1])])
            for xi, yi in zip(self.x, y):
                w.writerow([repr(float(v)) for v in xi]
                           + [repr(float(v)) for v in yi])

    @staticmethod
    def load_csv(path, int_targets: bool = False) -> "Dataset":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            n_x = sum(1 for c in header if c.startswith("x"))
            rows = [[float(v) for v in row] for row in r]
        arr = np.array(rows)
        x = arr[:, :n_x]
        y = arr[:, n_x:]
        if y.shape[1] == 1:
            y = y[:, 0]
        if int_targets:
            y = np.rint(y).astype(np.int64)
        return Dataset(x, y)
