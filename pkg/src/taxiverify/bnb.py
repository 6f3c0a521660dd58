"""Branch-and-bound minimisation of objectives of a network output over an input box."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .network import Network, NetworkError, evaluate
from .zonotope import Box, Zonotope, from_box, linear_bounds, propagate_zonotope

DEFAULT_TOL = 1e-4
DEFAULT_BUDGET = 200_000
DEFAULT_BATCH = 16


class Objective:
    """Function of the network output with a sound lower bound over zonotopes."""

    dim: int

    def value(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lower_bound(self, z: Zonotope) -> np.ndarray:
        raise NotImplementedError

    def negate(self) -> "Objective":
        raise NotImplementedError

    def vertex_hint(self, z: Zonotope, n_inputs: int) -> np.ndarray | None:
        """Signs in {-1, 0, 1} per input dimension pointing at a promising vertex."""
        return None


class Linear(Objective):
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)
        self.dim = self.c.shape[0]

    def value(self, y):
        return y @ self.c

    def lower_bound(self, z):
        return linear_bounds(z, self.c)[0]

    def negate(self):
        return Linear(-self.c)

    def vertex_hint(self, z, n_inputs):
        # input noise symbols are the first n_inputs columns (from_box order)
        g = np.einsum("...dk,d->...k", z.generators[..., :n_inputs], self.c)
        return -np.sign(g)

    def __repr__(self):
        return f"Linear({self.c.tolist()})"


class L2Distance(Objective):
    """Euclidean distance of the output to a fixed target."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64).reshape(-1)
        self.dim = self.target.shape[0]

    def value(self, y):
        return np.sqrt(np.sum((y - self.target) ** 2, axis=-1))

    def lower_bound(self, z):
        hull = z.interval_hull()
        gap = np.maximum(0.0, np.maximum(hull.lo - self.target, self.target - hull.hi))
        interval_lb = np.sqrt(np.sum(gap**2, axis=-1))
        # ||y - t|| >= u.(y - t) for any unit u; u along the centre residual
        resid = z.center - self.target
        norm = np.sqrt(np.sum(resid**2, axis=-1, keepdims=True))
        u = np.divide(resid, norm, out=np.zeros_like(resid), where=norm > 0)
        mid = np.sum(u * resid, axis=-1)
        spread = np.abs(np.einsum("...dk,...d->...k", z.generators, u)).sum(axis=-1)
        return np.maximum(interval_lb, mid - spread)

    def negate(self):
        return _NegL2Distance(self.target)

    def __repr__(self):
        return f"L2Distance(dim={self.dim})"


class _NegL2Distance(Objective):
    def __init__(self, target):
        self.target = target
        self.dim = target.shape[0]

    def value(self, y):
        return -np.sqrt(np.sum((y - self.target) ** 2, axis=-1))

    def lower_bound(self, z):
        hull = z.interval_hull()
        far = np.maximum(np.abs(hull.lo - self.target), np.abs(hull.hi - self.target))
        return -np.sqrt(np.sum(far**2, axis=-1))

    def negate(self):
        return L2Distance(self.target)


@dataclass
class BnbResult:
    lower_bound: float
    upper_bound: float
    witness: np.ndarray
    nodes_expanded: int
    certified: bool

    @property
    def gap(self) -> float:
        return self.upper_bound - self.lower_bound


def _check(net: Network, box: Box, obj: Objective, tol: float, budget: int):
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    if budget < 1:
        raise ValueError(f"node budget must be positive, got {budget}")
    if box.dim != net.input_dim:
        raise NetworkError(f"box has dimension {box.dim}, network expects {net.input_dim}")
    if obj.dim != net.output_dim:
        raise NetworkError(f"objective has dimension {obj.dim}, network outputs {net.output_dim}")


def minimize(
    net: Network,
    box: Box,
    obj: Objective,
    tol: float = DEFAULT_TOL,
    budget: int = DEFAULT_BUDGET,
    batch: int = DEFAULT_BATCH,
    trace: list | None = None,
) -> BnbResult:
    """Certified minimum of ``obj(net(x))`` over ``box`` to within ``tol``.

    Open sub-boxes sit in a heap keyed by (lower bound, lo vector).  Each round
    pops up to ``batch`` of the best, halves each along its widest dimension
    relative to the root box, and bounds all children together.  ``budget``
    caps the number of popped nodes; on exhaustion the sound bounds reached
    so far are returned with ``certified=False``.  When ``trace`` is a list,
    (global lower, global upper) is appended after every round.
    """
    _check(net, box, obj, tol, budget)
    n_in = box.dim
    root_w = box.widths
    scale = np.divide(1.0, root_w, out=np.zeros_like(root_w), where=root_w > 0)

    def bound(lo, hi):
        z = propagate_zonotope(net, from_box(Box(lo, hi)))
        lbs = obj.lower_bound(z)
        mid = (lo + hi) / 2
        cands = [mid]
        signs = obj.vertex_hint(z, n_in)
        if signs is not None:
            cands.append(mid + signs * (hi - lo) / 2)
        pts = np.stack(cands, axis=1)  # (B, m, d)
        vals = obj.value(evaluate(net, pts))
        best = np.argmin(vals, axis=1)
        rows = np.arange(len(lo))
        return lbs, vals[rows, best], pts[rows, best]

    lbs, ubs, wits = bound(box.lo[None], box.hi[None])
    best_ub, witness = float(ubs[0]), wits[0]
    heap = [(float(lbs[0]), tuple(box.lo), 0, box.lo, box.hi)]
    counter = 1
    closed_lb = np.inf  # lower bounds of exhausted point boxes
    expanded = 0

    def global_lb():
        return min(heap[0][0] if heap else np.inf, closed_lb)

    while True:
        glb = min(global_lb(), best_ub)
        if trace is not None:
            trace.append((glb, best_ub))
        if best_ub - glb <= tol:
            return BnbResult(glb, best_ub, witness, expanded, True)
        if expanded >= budget:
            return BnbResult(glb, best_ub, witness, expanded, False)

        take = min(batch, budget - expanded, len(heap))
        parents = []
        for _ in range(take):
            if not heap or best_ub - heap[0][0] <= tol:
                break
            parents.append(heapq.heappop(heap))
        if not parents:
            # only unsplittable point boxes hold the gap open
            return BnbResult(glb, best_ub, witness, expanded, False)
        expanded += len(parents)

        los, his, plbs = [], [], []
        for plb, _, _, lo, hi in parents:
            rel = (hi - lo) * scale
            k = int(np.argmax(rel))
            if rel[k] <= 0:
                closed_lb = min(closed_lb, plb)
                continue
            m = (lo[k] + hi[k]) / 2
            hi_left = hi.copy()
            hi_left[k] = m
            lo_right = lo.copy()
            lo_right[k] = m
            los += [lo, lo_right]
            his += [hi_left, hi]
            plbs += [plb, plb]
        if not los:
            continue
        lo_arr, hi_arr = np.array(los), np.array(his)
        clbs, cubs, cwits = bound(lo_arr, hi_arr)
        # children are subsets, so the parent bound stays valid for them
        clbs = np.maximum(clbs, np.array(plbs))
        j = int(np.argmin(cubs))
        if cubs[j] < best_ub:
            best_ub, witness = float(cubs[j]), cwits[j]
        for i in range(len(lo_arr)):
            heapq.heappush(heap, (float(clbs[i]), tuple(lo_arr[i]), counter, lo_arr[i], hi_arr[i]))
            counter += 1


def maximize(
    net: Network,
    box: Box,
    obj: Objective,
    tol: float = DEFAULT_TOL,
    budget: int = DEFAULT_BUDGET,
    batch: int = DEFAULT_BATCH,
    trace: list | None = None,
) -> BnbResult:
    neg_trace = [] if trace is not None else None
    r = minimize(net, box, obj.negate(), tol, budget, batch, neg_trace)
    if trace is not None:
        trace.extend((-u, -l) for l, u in neg_trace)
    return BnbResult(-r.upper_bound, -r.lower_bound, r.witness, r.nodes_expanded, r.certified)
