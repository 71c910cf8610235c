"""Maxent-style feature expansion of normalized environmental vectors.

Five feature families per retained variable: linear, quadratic, forward and
reverse hinges at interior knots, and step thresholds, plus pairwise products
across variables. With 27 variables and default knot counts the expansion
yields exactly 1161 features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

DEFAULT_HINGE_KNOTS = 10
DEFAULT_THRESHOLDS = 10


@dataclass
class MaxentConfig:
    """Per-variable train ranges and knot schedules.

    `hinge_knots[v]` holds the n-1 strictly interior knots used by both hinge
    directions; `thresholds[v]` holds n strictly interior step positions.
    Variables with a degenerate train range are excluded entirely.
    """

    lo: np.ndarray
    hi: np.ndarray
    kept: np.ndarray  # indices of retained variables
    n_hinge_knots: int
    n_thresholds: int

    def hinge_knots(self, v: int) -> np.ndarray:
        lo, hi = self.lo[v], self.hi[v]
        k = np.arange(1, self.n_hinge_knots)
        return lo + k * (hi - lo) / self.n_hinge_knots

    def thresholds(self, v: int) -> np.ndarray:
        lo, hi = self.lo[v], self.hi[v]
        k = np.arange(1, self.n_thresholds + 1)
        return lo + k * (hi - lo) / (self.n_thresholds + 1)

    @property
    def n_features(self) -> int:
        return feature_count(len(self.kept), self.n_hinge_knots, self.n_thresholds)

    def to_json(self) -> str:
        return json.dumps(
            {
                "lo": self.lo.tolist(),
                "hi": self.hi.tolist(),
                "kept": self.kept.tolist(),
                "n_hinge_knots": self.n_hinge_knots,
                "n_thresholds": self.n_thresholds,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MaxentConfig":
        d = json.loads(text)
        return cls(
            lo=np.asarray(d["lo"], dtype=float),
            hi=np.asarray(d["hi"], dtype=float),
            kept=np.asarray(d["kept"], dtype=int),
            n_hinge_knots=int(d["n_hinge_knots"]),
            n_thresholds=int(d["n_thresholds"]),
        )


def feature_count(d: int, n_hinge_knots: int = DEFAULT_HINGE_KNOTS, n_thresholds: int = DEFAULT_THRESHOLDS) -> int:
    """d * (2 + 2*(n_knots - 1) + n_thresholds) + d*(d-1)/2."""
    return d * (2 + 2 * (n_hinge_knots - 1) + n_thresholds) + d * (d - 1) // 2


def fit_maxent(
    train_env: np.ndarray,
    n_hinge_knots: int = DEFAULT_HINGE_KNOTS,
    n_thresholds: int = DEFAULT_THRESHOLDS,
) -> MaxentConfig:
    """Fix knot/threshold schedules from the train split's per-variable ranges.

    Constant variables (min == max) are excluded, consistent with the
    normalization stage dropping zero-variance columns.
    """
    train_env = np.asarray(train_env, dtype=float)
    lo = train_env.min(axis=0)
    hi = train_env.max(axis=0)
    kept = np.flatnonzero(hi > lo)
    return MaxentConfig(lo=lo, hi=hi, kept=kept, n_hinge_knots=n_hinge_knots, n_thresholds=n_thresholds)


def expand(env: np.ndarray, config: MaxentConfig) -> np.ndarray:
    """Expand (N, n_env) rows into (N, n_features).

    Feature order per retained variable: linear, quadratic, forward hinges,
    reverse hinges, thresholds; then all pairwise products (i < j). Inputs
    outside the train range are clamped to the boundary first.
    """
    env = np.atleast_2d(np.asarray(env, dtype=float))
    cols = []
    clamped = {}
    for v in config.kept:
        lo, hi = config.lo[v], config.hi[v]
        x = np.clip(env[:, v], lo, hi)
        clamped[v] = x
        cols.append(x)
        cols.append(x * x)
        for t in config.hinge_knots(v):
            cols.append(np.clip((x - t) / (hi - t), 0.0, 1.0))
        for t in config.hinge_knots(v):
            cols.append(np.clip((t - x) / (t - lo), 0.0, 1.0))
        for t in config.thresholds(v):
            cols.append((x > t).astype(float))
    kept = list(config.kept)
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            cols.append(clamped[kept[a]] * clamped[kept[b]])
    return np.stack(cols, axis=1) if cols else np.zeros((env.shape[0], 0))
