"""Uniform partition of the (p, theta) state box into cells, plus an absorbing sink.

Cell ``i * n_theta + j`` is the ``i``-th p bin and ``j``-th theta bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .zonotope import Box

SINK = -1

P_RANGE = (-11.0, 11.0)
THETA_RANGE = (-30.0, 30.0)
BINS = (128, 128)


@dataclass(frozen=True)
class Grid:
    lo: tuple[float, float] = (P_RANGE[0], THETA_RANGE[0])
    hi: tuple[float, float] = (P_RANGE[1], THETA_RANGE[1])
    bins: tuple[int, int] = BINS

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "bins", tuple(int(v) for v in self.bins))
        if len(self.lo) != 2 or len(self.hi) != 2 or len(self.bins) != 2:
            raise ValueError("grid is two dimensional (p, theta)")
        if min(self.bins) < 1:
            raise ValueError("need at least one bin per dimension")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("grid lo must be below hi")

    @property
    def n_cells(self) -> int:
        return self.bins[0] * self.bins[1]

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.bins)

    @property
    def domain(self) -> Box:
        return Box(self.lo, self.hi)

    def _edges(self, d: int) -> np.ndarray:
        return self.lo[d] + self.widths[d] * np.arange(self.bins[d] + 1)

    def all_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """``(lo, hi)`` arrays of shape (n_cells, 2) in cell-index order."""
        ep, et = self._edges(0), self._edges(1)
        ep[-1], et[-1] = self.hi  # exact top edges
        i, j = np.divmod(np.arange(self.n_cells), self.bins[1])
        lo = np.stack([ep[i], et[j]], axis=1)
        hi = np.stack([ep[i + 1], et[j + 1]], axis=1)
        return lo, hi

    def cell_bounds(self, cell: int) -> Box:
        if cell == SINK:
            raise ValueError("the sink has no bounds")
        if not 0 <= cell < self.n_cells:
            raise IndexError(f"cell {cell} outside grid of {self.n_cells} cells")
        i, j = divmod(int(cell), self.bins[1])
        ep, et = self._edges(0), self._edges(1)
        ep[-1], et[-1] = self.hi
        return Box([ep[i], et[j]], [ep[i + 1], et[j + 1]])

    def locate(self, p: float, theta: float) -> int:
        return int(self.locate_all(np.array([[p, theta]]))[0])

    def locate_all(self, states: np.ndarray) -> np.ndarray:
        """Cell of each (p, theta) row; bins are [lo, hi) except the closed top bin."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        lo, hi, n = np.array(self.lo), np.array(self.hi), np.array(self.bins)
        inside = np.all((states >= lo) & (states <= hi), axis=1)
        k = np.floor((states - lo) / self.widths).astype(np.int64)
        k = np.clip(k, 0, n - 1)
        # undo rounding of (x - lo) / w across an edge
        edges_lo = lo + k * self.widths
        k = np.where(states < edges_lo, k - 1, k)
        k = np.where(states >= lo + (k + 1) * self.widths, k + 1, k)
        k = np.clip(k, 0, n - 1)
        return np.where(inside, k[:, 0] * self.bins[1] + k[:, 1], SINK)

    def index_ranges(self, lo: np.ndarray, hi: np.ndarray):
        """Per region row, the inclusive bin ranges touched and whether it leaves the domain.

        Closed cells touching the closed region count, including contact
        through a shared face only.
        """
        lo = np.asarray(lo, dtype=np.float64).reshape(-1, 2)
        hi = np.asarray(hi, dtype=np.float64).reshape(-1, 2)
        g_lo, g_hi, n, w = np.array(self.lo), np.array(self.hi), np.array(self.bins), self.widths
        leaves = np.any((lo < g_lo) | (hi > g_hi), axis=1)
        first = np.ceil((lo - g_lo) / w).astype(np.int64) - 1
        last = np.floor((hi - g_lo) / w).astype(np.int64)
        first = np.clip(first, 0, n - 1)
        last = np.clip(last, 0, n - 1)
        # re-check the edges directly; the division can round across an edge
        first = np.where((first > 0) & (g_lo + first * w >= lo), first - 1, first)
        first = np.where(g_lo + (first + 1) * w < lo, first + 1, first)
        last = np.where((last < n - 1) & (g_lo + (last + 1) * w <= hi), last + 1, last)
        last = np.where(g_lo + last * w > hi, last - 1, last)
        first = np.clip(first, 0, n - 1)
        last = np.clip(last, 0, n - 1)
        empty = np.any((hi < g_lo) | (lo > g_hi), axis=1)
        return first, last, leaves, empty

    def overlapping_cells(self, region: Box) -> set[int]:
        first, last, leaves, empty = self.index_ranges(region.lo, region.hi)
        out: set[int] = set()
        if not empty[0]:
            (i0, j0), (i1, j1) = first[0], last[0]
            out = {int(i * self.bins[1] + j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1)}
        if leaves[0]:
            out.add(SINK)
        return out

    def overlap_mask(self, region: Box) -> np.ndarray:
        """Boolean vector over cells of ``overlapping_cells`` (the sink excluded)."""
        mask = np.zeros(self.n_cells, dtype=bool)
        for c in self.overlapping_cells(region) - {SINK}:
            mask[c] = True
        return mask
