"""Certified distance from reference images to the generator's range, and recall curves."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bnb
from .closed_loop import STATE_INPUTS, default_latent_box
from .network import Network, NetworkError
from .zonotope import Box


@dataclass
class DistanceRecord:
    index: int
    distance: float  # upper bound on the minimum; within tol of it when certified
    certified: bool
    witness_z: np.ndarray
    lower_bound: float


def pinned_box(gen: Network, state, latent: Box) -> Box:
    """Generator input box with the state inputs fixed and the latents free."""
    ip, it = (gen.index_of(n) for n in STATE_INPUTS)
    latent_idx = [k for k in range(gen.input_dim) if k not in (ip, it)]
    if len(latent_idx) != latent.dim:
        raise NetworkError(f"generator has {len(latent_idx)} latent inputs, box has {latent.dim}")
    lo = np.empty(gen.input_dim)
    hi = np.empty(gen.input_dim)
    lo[[ip, it]] = hi[[ip, it]] = np.asarray(state, dtype=np.float64)
    lo[latent_idx], hi[latent_idx] = latent.lo, latent.hi
    return Box(lo, hi)


def latent_indices(gen: Network) -> list[int]:
    ip, it = (gen.index_of(n) for n in STATE_INPUTS)
    return [k for k in range(gen.input_dim) if k not in (ip, it)]


def nearest_distance(
    gen: Network,
    state,
    target,
    latent: Box | None = None,
    tol: float = bnb.DEFAULT_TOL,
    budget: int = bnb.DEFAULT_BUDGET,
    index: int = 0,
) -> DistanceRecord:
    """min over z in ``latent`` of ||gen(z, state) - target||_2 by branch and bound."""
    latent = latent if latent is not None else default_latent_box(gen.input_dim - 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    try:
        if target.shape[0] != gen.output_dim:
            raise NetworkError(f"target has {target.shape[0]} pixels, generator makes {gen.output_dim}")
        res = bnb.minimize(gen, pinned_box(gen, state, latent), bnb.L2Distance(target), tol, budget)
    except (NetworkError, ValueError) as exc:
        raise RuntimeError(f"record {index}: {exc}") from exc
    z = res.witness[latent_indices(gen)]
    return DistanceRecord(index, res.upper_bound, res.certified, z, max(res.lower_bound, 0.0))


def _chunk(args):
    gen, states, targets, start, latent, tol, budget = args
    return [
        nearest_distance(gen, s, o, latent, tol, budget, start + k)
        for k, (s, o) in enumerate(zip(states, targets))
    ]


def nearest_distances(
    gen: Network,
    states,
    targets,
    latent: Box | None = None,
    tol: float = bnb.DEFAULT_TOL,
    budget: int = bnb.DEFAULT_BUDGET,
    threads: int = 1,
    chunk: int = 32,
) -> list[DistanceRecord]:
    states = np.asarray(states, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    jobs = [
        (gen, states[s : s + chunk], targets[s : s + chunk], s, latent, tol, budget)
        for s in range(0, len(states), chunk)
    ]
    if threads <= 1:
        parts = [_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_chunk, jobs))
    return sorted((r for part in parts for r in part), key=lambda r: r.index)


@dataclass
class RecallCurve:
    thresholds: np.ndarray
    recall: np.ndarray

    def at(self, r: float) -> float:
        return float(np.interp(r, self.thresholds, self.recall, left=0.0, right=1.0))


def recall_curve(records_or_distances, r_grid) -> RecallCurve:
    """Fraction of records with distance <= r for each r in ``r_grid``."""
    d = np.array(
        [r.distance if isinstance(r, DistanceRecord) else float(r) for r in records_or_distances]
    )
    r = np.sort(np.asarray(r_grid, dtype=np.float64))
    if d.size == 0:
        return RecallCurve(r, np.zeros_like(r))
    counts = np.searchsorted(np.sort(d), r, side="right")
    return RecallCurve(r, counts / d.size)


def default_r_grid(distances, n: int = 101) -> np.ndarray:
    top = max(float(np.max(distances)) if len(distances) else 1.0, 1e-12)
    return np.linspace(0.0, top, n)


def write_distances(path, records: list[DistanceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "distance", "certified", "z1", "z2"])
        for r in records:
            w.writerow([r.index, repr(float(r.distance)), int(r.certified), *(repr(float(v)) for v in r.witness_z)])


def write_recall(path, curve: RecallCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "recall"])
        for r, v in zip(curve.thresholds, curve.recall):
            w.writerow([repr(float(r)), repr(float(v))])


def write_histogram(path, distances, bins: int = 40) -> None:
    counts, edges = np.histogram(np.asarray(distances, dtype=np.float64), bins=bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
