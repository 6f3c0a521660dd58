"""Grid-based closed-loop analysis of a network-in-the-loop taxi controller.

Per-cell steering ranges come from branch and bound on the composite
generator+controller network; they induce a cell transition graph on which
backward safety (can an unsafe cell be reached?) and forward reachability
are solved as fixed points.  Graph node ``n_cells`` stands for the sink.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import bnb
from .grid import SINK, Grid
from .network import Activation, Layer, Network, NetworkError
from .plant import CONTROL_GAINS, PHI_LIMIT, PlantParams, step_overapprox_all
from .zonotope import Box

log = logging.getLogger(__name__)

LATENT_BOUND = 0.8
STATE_INPUTS = ("p", "theta")
RUNWAY_HALF_WIDTH = 10.0

SAFE = 0
INCONCLUSIVE = 1


def default_latent_box(dim: int = 2) -> Box:
    return Box(np.full(dim, -LATENT_BOUND), np.full(dim, LATENT_BOUND))


@dataclass(frozen=True)
class ActionBounds:
    cell: int
    phi_min: float
    phi_max: float
    certified: bool


class ActionBoundsError(RuntimeError):
    def __init__(self, cell: int, cause: Exception):
        super().__init__(f"cell {cell}: {cause}")
        self.cell = cell


def _query_box(composite: Network, cell_box: Box, latent: Box) -> Box:
    ip, it = (composite.index_of(n) for n in STATE_INPUTS)
    latent_idx = [k for k in range(composite.input_dim) if k not in (ip, it)]
    if len(latent_idx) != latent.dim:
        raise NetworkError(
            f"composite has {len(latent_idx)} latent inputs, latent box has {latent.dim}"
        )
    lo = np.empty(composite.input_dim)
    hi = np.empty(composite.input_dim)
    lo[[ip, it]], hi[[ip, it]] = cell_box.lo, cell_box.hi
    lo[latent_idx], hi[latent_idx] = latent.lo, latent.hi
    return Box(lo, hi)


def action_bounds_for_box(
    composite: Network,
    cell_box: Box,
    latent: Box | None = None,
    tol: float = bnb.DEFAULT_TOL,
    budget: int = bnb.DEFAULT_BUDGET,
    cell: int = -1,
) -> ActionBounds:
    """Sound steering range over a state box times the latent box.

    The composite maps its inputs to (p_hat, theta_hat); the state inputs are
    found by the names ``p`` and ``theta``.  Outer branch-and-bound bounds
    are used whether or not the gap closed.
    """
    latent = latent if latent is not None else default_latent_box(max(composite.input_dim - 2, 0))
    try:
        if composite.output_dim != 2:
            raise NetworkError(f"composite must output (p_hat, theta_hat), got {composite.output_dim} outputs")
        box = _query_box(composite, cell_box, latent)
        obj = bnb.Linear(CONTROL_GAINS)
        lo = bnb.minimize(composite, box, obj, tol, budget)
        hi = bnb.maximize(composite, box, obj, tol, budget)
    except (NetworkError, ValueError) as exc:
        raise ActionBoundsError(cell, exc) from exc
    return ActionBounds(cell, lo.lower_bound, hi.upper_bound, lo.certified and hi.certified)


def action_bounds(composite: Network, grid: Grid, cell: int, latent: Box | None = None,
                  tol: float = bnb.DEFAULT_TOL, budget: int = bnb.DEFAULT_BUDGET) -> ActionBounds:
    return action_bounds_for_box(composite, grid.cell_bounds(cell), latent, tol, budget, cell)


@dataclass
class ActionTable:
    phi_min: np.ndarray
    phi_max: np.ndarray
    certified: np.ndarray

    def __len__(self):
        return len(self.phi_min)

    def __getitem__(self, cell: int) -> ActionBounds:
        return ActionBounds(cell, float(self.phi_min[cell]), float(self.phi_max[cell]), bool(self.certified[cell]))

    @property
    def n_uncertified(self) -> int:
        return int(np.count_nonzero(~self.certified))


def _bounds_chunk(args):
    composite, grid, cells, latent, tol, budget = args
    return [action_bounds(composite, grid, c, latent, tol, budget) for c in cells]


def compute_action_table(
    composite: Network,
    grid: Grid,
    latent: Box | None = None,
    tol: float = bnb.DEFAULT_TOL,
    budget: int = bnb.DEFAULT_BUDGET,
    threads: int = 1,
    chunk: int = 64,
    progress=None,
) -> ActionTable:
    """Action bounds for every cell; results do not depend on ``threads``."""
    n = grid.n_cells
    chunks = [list(range(s, min(s + chunk, n))) for s in range(0, n, chunk)]
    jobs = [(composite, grid, cs, latent, tol, budget) for cs in chunks]
    results: list[ActionBounds] = []
    if threads <= 1:
        for job in jobs:
            results += _bounds_chunk(job)
            if progress:
                progress(len(results), n)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(_bounds_chunk, jobs):
                results += part
                if progress:
                    progress(len(results), n)
    results.sort(key=lambda a: a.cell)
    table = ActionTable(
        np.array([a.phi_min for a in results]),
        np.array([a.phi_max for a in results]),
        np.array([a.certified for a in results]),
    )
    if table.n_uncertified:
        log.warning("%d of %d cells have uncertified action bounds", table.n_uncertified, n)
    return table


# -- transition map ----------------------------------------------------------


@dataclass
class TransitionMap:
    """Successor cells as rectangular index ranges plus an exits-domain flag."""

    grid: Grid
    first: np.ndarray  # (n_cells, 2) inclusive bin range start
    last: np.ndarray  # (n_cells, 2) inclusive bin range end
    to_sink: np.ndarray  # (n_cells,)
    empty: np.ndarray  # (n_cells,) image entirely outside the domain

    @property
    def n_nodes(self) -> int:
        return self.grid.n_cells + 1

    def successors(self, cell: int) -> set[int]:
        if cell == SINK:
            return {SINK}
        out: set[int] = set()
        if not self.empty[cell]:
            (i0, j0), (i1, j1) = self.first[cell], self.last[cell]
            nt = self.grid.bins[1]
            out = {int(i * nt + j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1)}
        if self.to_sink[cell]:
            out.add(SINK)
        return out

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(source, target) node arrays, the sink being node ``n_cells``."""
        n, nt = self.grid.n_cells, self.grid.bins[1]
        span = np.where(self.empty[:, None], 0, self.last - self.first + 1)
        counts = span[:, 0] * span[:, 1]
        src = np.repeat(np.arange(n), counts)
        # offset of each edge within its source's block
        start = np.repeat(np.cumsum(counts) - counts, counts)
        k = np.arange(src.size) - start
        di, dj = np.divmod(k, np.maximum(span[src, 1], 1))
        dst = (self.first[src, 0] + di) * nt + self.first[src, 1] + dj
        sink_src = np.flatnonzero(self.to_sink)
        src = np.concatenate([src, sink_src, [n]])
        dst = np.concatenate([dst, np.full(sink_src.size, n), [n]])
        return src, dst

    def matrix(self) -> sparse.csr_matrix:
        """Adjacency with ``A[c, c'] = 1`` iff ``c'`` is a successor of ``c``."""
        src, dst = self.edges()
        a = sparse.csr_matrix(
            (np.ones(src.size, dtype=np.int32), (src, dst)), shape=(self.n_nodes, self.n_nodes)
        )
        a.sum_duplicates()
        return a


def build_transitions(grid: Grid, table: ActionTable, params: PlantParams = PlantParams()) -> TransitionMap:
    if len(table) != grid.n_cells:
        raise ValueError(f"action bounds cover {len(table)} cells, grid has {grid.n_cells}")
    lo, hi = grid.all_bounds()
    # concrete steering saturates at PHI_LIMIT, so clipping the range stays sound
    phi_lo = np.clip(table.phi_min, -PHI_LIMIT, PHI_LIMIT)
    phi_hi = np.clip(table.phi_max, -PHI_LIMIT, PHI_LIMIT)
    new_lo, new_hi = step_overapprox_all(lo, hi, phi_lo, phi_hi, params)
    first, last, leaves, empty = grid.index_ranges(new_lo, new_hi)
    return TransitionMap(grid, first, last, leaves, empty)


# -- fixed points ------------------------------------------------------------


def default_unsafe(grid: Grid, half_width: float = RUNWAY_HALF_WIDTH) -> np.ndarray:
    """Node mask of cells reaching beyond the runway edge, plus the sink."""
    lo, hi = grid.all_bounds()
    mask = np.zeros(grid.n_cells + 1, dtype=bool)
    mask[: grid.n_cells] = (hi[:, 0] > half_width) | (lo[:, 0] < -half_width)
    mask[grid.n_cells] = True
    return mask


def _node_mask(grid: Grid, cells) -> np.ndarray:
    mask = np.zeros(grid.n_cells + 1, dtype=bool)
    if isinstance(cells, np.ndarray) and cells.dtype == bool:
        mask[: cells.size] = cells
    else:
        for c in cells:
            mask[grid.n_cells if c == SINK else c] = True
    return mask


@dataclass
class SafetyResult:
    labels: np.ndarray  # per cell, SAFE or INCONCLUSIVE
    sink_unsafe: bool
    sweeps: int

    @property
    def safe(self) -> np.ndarray:
        return self.labels == SAFE


def backward_safety(tm: TransitionMap, unsafe=None) -> SafetyResult:
    """Least fixed point of F(c) = max over successors, F = 1 on the unsafe set.

    ``unsafe`` is a node mask (length ``n_cells + 1``) or an iterable of cell
    ids; default is :func:`default_unsafe`.  Sweeps update every node from the
    previous iterate, so the result is independent of processing order.
    """
    unsafe = default_unsafe(tm.grid) if unsafe is None else _node_mask(tm.grid, unsafe)
    a = tm.matrix()
    f = unsafe.copy()
    sweeps = 0
    while True:
        sweeps += 1
        nxt = unsafe | ((a @ f.astype(np.int32)) > 0)
        if np.array_equal(nxt, f):
            break
        f = nxt
    n = tm.grid.n_cells
    return SafetyResult(np.where(f[:n], INCONCLUSIVE, SAFE).astype(np.int8), bool(f[n]), sweeps)


@dataclass
class ReachSet:
    sets: list[np.ndarray]  # node masks R_0 .. R_T, sink last
    converged_at: int | None

    def cells(self, t: int) -> set[int]:
        n = self.sets[t].size - 1
        out = {int(c) for c in np.flatnonzero(self.sets[t][:n])}
        if self.sets[t][n]:
            out.add(SINK)
        return out

    def at(self, t: int) -> np.ndarray:
        """Set at step t, holding the converged set for every later step."""
        return self.sets[min(t, len(self.sets) - 1)]


def forward_reach(tm: TransitionMap, initial: Box | np.ndarray | None, max_steps: int = 400) -> ReachSet:
    """Iterate R_{t+1} = union of successors of R_t from the cells touching ``initial``.

    Stops at the first t with R_{t+1} == R_t (``converged_at = t``); otherwise
    runs ``max_steps`` steps and reports ``converged_at = None``.
    """
    grid = tm.grid
    if initial is None:
        r = np.zeros(grid.n_cells + 1, dtype=bool)
    elif isinstance(initial, Box):
        r = _node_mask(grid, grid.overlapping_cells(initial))
    else:
        r = _node_mask(grid, initial)
    at = tm.matrix().T.tocsr()
    sets = [r]
    for t in range(max_steps):
        nxt = (at @ r.astype(np.int32)) > 0
        if np.array_equal(nxt, r):
            return ReachSet(sets, t)
        sets.append(nxt)
        r = nxt
    return ReachSet(sets, None)


def safety_for(composite: Network, grid: Grid, params: PlantParams = PlantParams(), **kw):
    table = compute_action_table(composite, grid, **kw)
    tm = build_transitions(grid, table, params)
    return table, tm, backward_safety(tm)


def default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))


def passthrough_composite(n_latent: int = 2) -> Network:
    """Perfect-perception composite: (z..., p, theta) -> (p, theta)."""
    names = tuple(f"z{k + 1}" for k in range(n_latent)) + STATE_INPUTS
    w = np.zeros((2, n_latent + 2))
    w[0, n_latent], w[1, n_latent + 1] = 1.0, 1.0
    return Network((Layer(w, np.zeros(2), Activation.IDENTITY),), input_names=names)


def containment_violations(reach: ReachSet, grid: Grid, trajectories) -> list[tuple[int, int]]:
    """(run, t) pairs whose state lies outside the reach set for step t."""
    bad = []
    for run, tr in enumerate(trajectories):
        cells = grid.locate_all(np.column_stack([tr.p, tr.theta]))
        nodes = np.where(cells == SINK, grid.n_cells, cells)
        for t, node in enumerate(nodes):
            if not reach.at(t)[node]:
                bad.append((run, t))
    return bad
