"""File formats for grid results: CSV tables, run-length bitsets and PGM heatmaps."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .closed_loop import ActionTable, SafetyResult
from .grid import SINK, Grid

ACTION_COLUMNS = ["cell_index", "phi_min", "phi_max", "certified"]
CELL_COLUMNS = ["cell_index", "p_lo", "p_hi", "theta_lo", "theta_hi"]


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_action_table(path, table: ActionTable) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ACTION_COLUMNS)
        for c in range(len(table)):
            w.writerow([c, repr(float(table.phi_min[c])), repr(float(table.phi_max[c])), int(table.certified[c])])


def read_action_table(path, grid: Grid | None = None) -> ActionTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ACTION_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(ACTION_COLUMNS)}")
        rows = [r for r in reader]
    idx = np.array([int(r[0]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError(f"{path}: cell indices must run 0..n-1 in order")
    if grid is not None and len(rows) != grid.n_cells:
        raise ValueError(f"{path}: {len(rows)} cells, grid has {grid.n_cells}")
    return ActionTable(
        np.array([float(r[1]) for r in rows]),
        np.array([float(r[2]) for r in rows]),
        np.array([r[3] == "1" for r in rows]),
    )


def _bounds_row(lo, hi, c):
    return [c, repr(float(lo[c, 0])), repr(float(hi[c, 0])), repr(float(lo[c, 1])), repr(float(hi[c, 1]))]


def write_safe_cells(path, grid: Grid, result: SafetyResult) -> None:
    lo, hi = grid.all_bounds()
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(CELL_COLUMNS + ["label"])
        for c in range(grid.n_cells):
            w.writerow(_bounds_row(lo, hi, c) + ["SAFE" if result.safe[c] else "INCONCLUSIVE"])


def write_cell_set(path, grid: Grid, mask: np.ndarray) -> None:
    """Cells of a node mask; the sink is written as index -1 with empty bounds."""
    lo, hi = grid.all_bounds()
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(CELL_COLUMNS)
        for c in np.flatnonzero(mask[: grid.n_cells]):
            w.writerow(_bounds_row(lo, hi, int(c)))
        if mask.size > grid.n_cells and mask[grid.n_cells]:
            w.writerow([SINK, "", "", "", ""])


def rle_encode(mask: np.ndarray) -> list[tuple[int, int]]:
    """(start, length) runs of True entries."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def rle_decode(runs, size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    for s, n in runs:
        mask[s : s + n] = True
    return mask


def write_rle(path, masks) -> None:
    """One line per mask: ``t size start:len start:len ...``."""
    with open(path, "w") as fh:
        for t, m in enumerate(masks):
            runs = " ".join(f"{s}:{n}" for s, n in rle_encode(m))
            fh.write(f"{t} {m.size} {runs}".rstrip() + "\n")


def read_rle(path) -> list[np.ndarray]:
    out = []
    for line in Path(path).read_text().splitlines():
        _, size, *runs = line.split()
        out.append(rle_decode([tuple(int(v) for v in r.split(":")) for r in runs], int(size)))
    return out


def grid_image(grid: Grid, values) -> np.ndarray:
    """Per-cell values as an image: columns follow p, rows follow theta (top row = largest theta)."""
    v = np.asarray(values)[: grid.n_cells].reshape(grid.bins)
    return v.T[::-1]


def write_heatmap(path, grid: Grid, values) -> None:
    """8-bit PGM of per-cell values in [0, 1]."""
    img = grid_image(grid, np.asarray(values, dtype=np.float64))
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
