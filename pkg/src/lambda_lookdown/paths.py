"""Recorded trajectories shared by every simulation engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Path:
    """A piecewise-constant trajectory sampled on a recording grid.

    ``values[i]`` is the (cadlag) state at ``times[i]``.  ``meta`` carries
    engine diagnostics such as event counts or first boundary-hit times.
    """

    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have matching shapes")

    def value_at_end(self) -> float:
        return float(self.values[-1])


def normalize_grid(record_grid, T: float) -> np.ndarray:
    """Sorted recording times; defaults to 21 evenly spaced points on [0, T]."""
    if record_grid is None:
        grid = np.linspace(0.0, T, 21)
    else:
        grid = np.sort(np.asarray(record_grid, dtype=float))
    if len(grid) == 0:
        raise ValueError("recording grid must not be empty")
    if grid[0] < 0.0 or grid[-1] > T + 1e-12:
        raise ValueError("recording grid must lie within [0, T]")
    return grid
