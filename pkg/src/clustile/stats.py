"""Small statistics helpers shared by the analysis and saliency modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def pearson(x, y) -> float | None:
    """Pearson correlation; None when either input is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt(np.sum(xd * xd))
    sy = np.sqrt(np.sum(yd * yd))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.sum(xd * yd) / (sx * sy))


@dataclass
class RunningStats:
    """Single-pass mean/std accumulator (count, mean, M2); merge-able."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    def merge(self, other: "RunningStats") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self.m2 += other.m2 + delta * delta * self.count * other.count / total
        self.count = total

    @property
    def std(self) -> float:
        """Population standard deviation (0 for fewer than 2 samples)."""
        if self.count < 2:
            return 0.0
        return float(np.sqrt(self.m2 / self.count))
