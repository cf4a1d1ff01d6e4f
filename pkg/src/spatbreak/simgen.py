"""Data-generating process for the simulation study.

Three true weighting schemes on a rectangular lattice (queen contiguity,
random directed links, rectangular blocks), the two-group mean-level
schedule and simulation of the spatiotemporal process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    MeanLevelSchedule,
    ModelSpec,
    PanelObservations,
    SpatialWeightMatrix,
    reduced_form,
    row_standardize,
)

__all__ = [
    "GridSpec",
    "SchemeConfig",
    "gen_queen",
    "gen_random",
    "gen_block",
    "gen_scheme",
    "build_break_schedule",
    "simulate_panel",
    "SCHEMES",
]

SCHEMES = ("queen", "random", "block")


@dataclass(frozen=True)
class GridSpec:
    """Lattice with ``rows * cols`` cells, indexed in row-major order."""

    rows: int = 5
    cols: int = 5

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def cell(self, i: int) -> tuple[int, int]:
        return divmod(i, self.cols)

    def index(self, r: int, c: int) -> int:
        return r * self.cols + c


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = "queen"
    link_probability: float = 0.2
    n_blocks: int = 3
    block_side_range: tuple[int, int] = (1, 5)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        if not 0.0 <= self.link_probability <= 1.0:
            raise ValueError("link_probability must lie in [0, 1]")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be positive")
        lo, hi = self.block_side_range
        if not 1 <= lo <= hi:
            raise ValueError("block_side_range must satisfy 1 <= lo <= hi")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_queen(grid: GridSpec) -> SpatialWeightMatrix:
    """Row-standardized queen contiguity (8-neighbourhood) on ``grid``."""
    if grid.rows < 2 or grid.cols < 2:
        raise ValueError("queen contiguity needs a grid of at least 2 x 2")
    r, c = np.divmod(np.arange(grid.n), grid.cols)
    dr = np.abs(r[:, None] - r[None, :])
    dc = np.abs(c[:, None] - c[None, :])
    adj = (np.maximum(dr, dc) == 1).astype(float)
    return SpatialWeightMatrix(row_standardize(adj), row_standardized=True)


def gen_random(n: int, cfg: SchemeConfig, rng=None) -> SpatialWeightMatrix:
    """Directed random links with probability ``cfg.link_probability``.

    Rows without any link stay zero.
    """
    if n < 2:
        raise ValueError("random scheme needs n >= 2")
    rng = _rng(cfg.seed if rng is None else rng)
    adj = (rng.random((n, n)) < cfg.link_probability).astype(float)
    np.fill_diagonal(adj, 0.0)
    return SpatialWeightMatrix(row_standardize(adj), row_standardized=True)


def block_adjacency(grid: GridSpec, rects) -> np.ndarray:
    """Adjacency linking every pair of distinct cells inside each rectangle.

    ``rects`` holds ``(top, left, height, width)`` tuples.
    """
    adj = np.zeros((grid.n, grid.n))
    for top, left, h, w in rects:
        if top < 0 or left < 0 or top + h > grid.rows or left + w > grid.cols:
            raise ValueError(f"block {(top, left, h, w)} does not fit on the grid")
        cells = [grid.index(top + a, left + b) for a in range(h) for b in range(w)]
        adj[np.ix_(cells, cells)] = 1.0
    np.fill_diagonal(adj, 0.0)
    return adj


def gen_block(grid: GridSpec, cfg: SchemeConfig, rng=None) -> SpatialWeightMatrix:
    """Union of ``cfg.n_blocks`` random rectangles of linked cells.

    Side lengths are drawn independently (rectangles need not be square)
    and capped at the grid size; the top-left corner is uniform over all
    positions where the rectangle fits.
    """
    rng = _rng(cfg.seed if rng is None else rng)
    lo, hi = cfg.block_side_range
    if lo > min(grid.rows, grid.cols):
        raise ValueError("grid too small for the smallest block")
    rects = []
    for _ in range(cfg.n_blocks):
        h = int(rng.integers(lo, min(hi, grid.rows) + 1))
        w = int(rng.integers(lo, min(hi, grid.cols) + 1))
        top = int(rng.integers(0, grid.rows - h + 1))
        left = int(rng.integers(0, grid.cols - w + 1))
        rects.append((top, left, h, w))
    adj = block_adjacency(grid, rects)
    return SpatialWeightMatrix(row_standardize(adj), row_standardized=True)


def gen_scheme(grid: GridSpec, cfg: SchemeConfig, rng=None) -> SpatialWeightMatrix:
    if cfg.kind == "queen":
        return gen_queen(grid)
    if cfg.kind == "random":
        return gen_random(grid.n, cfg, rng)
    return gen_block(grid, cfg, rng)


def build_break_schedule(n: int, T: int, group1_size: int = 10) -> MeanLevelSchedule:
    """Two-group schedule of the simulation study.

    The first ``group1_size`` locations sit at 0, rise to 3 at ``ceil(T/2)``
    and return to 0 at ``ceil(3T/4)``. The others jump from 0 to 7 at
    ``ceil(T/4)``. Times are 1-based onsets of the new level.
    """
    if not 0 < group1_size < n:
        raise ValueError("group1_size must satisfy 0 < group1_size < n")
    if T < 8:
        raise ValueError("T must be at least 8")
    t = np.arange(1, T + 1)[:, None]
    t_q1, t_half, t_q3 = (math.ceil(T * f) for f in (0.25, 0.5, 0.75))
    g1 = np.where((t >= t_half) & (t < t_q3), 3.0, 0.0)
    g2 = np.where(t >= t_q1, 7.0, 0.0)
    levels = np.hstack([np.repeat(g1, group1_size, axis=1), np.repeat(g2, n - group1_size, axis=1)])
    return MeanLevelSchedule(levels)


def simulate_panel(spec: ModelSpec, seed=None) -> PanelObservations:
    """Draw ``y_t = S (a_t + e_t)`` with ``e_t ~ N(0, noise_sd^2 I)``."""
    rng = _rng(seed)
    s = reduced_form(spec.weights)
    a = spec.schedule.levels
    eps = spec.noise_sd * rng.standard_normal(a.shape) if spec.noise_sd > 0 else np.zeros(a.shape)
    return PanelObservations((a + eps) @ s.T)
