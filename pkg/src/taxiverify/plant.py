"""Taxi dynamics, proportional steering law, simulation and interval one-step images.

Angles are degrees everywhere outside the trig calls.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .zonotope import Box

DEG = np.pi / 180.0

GAIN_P = -0.74
GAIN_THETA = -0.44
CONTROL_GAINS = (GAIN_P, GAIN_THETA)
PHI_LIMIT = 89.0  # steering saturation, deg; keeps tan finite


@dataclass(frozen=True)
class PlantParams:
    v: float = 5.0  # taxi speed, m/s
    L: float = 5.0  # wheelbase, m
    dt: float = 0.1  # s

    def __post_init__(self):
        for name in ("v", "L", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"plant parameter {name} must be positive")


def _check_angles(phi, what="steering angle"):
    if np.any(np.abs(np.asarray(phi)) >= 90.0):
        raise ValueError(f"{what} must lie strictly within (-90, 90) degrees")


# Shared by the concrete and interval steps so both round identically.
def _dp(theta, params: PlantParams):
    return params.v * params.dt * np.sin(np.asarray(theta) * DEG)


def _dtheta(phi, params: PlantParams):
    return params.v / params.L * params.dt * np.tan(np.asarray(phi) * DEG) / DEG


def step(p, theta, phi, params: PlantParams = PlantParams()):
    """One Euler step of the kinematic taxi model; works elementwise on arrays."""
    _check_angles(phi)
    return p + _dp(theta, params), theta + _dtheta(phi, params)


def control_law(p_hat, theta_hat):
    return GAIN_P * p_hat + GAIN_THETA * theta_hat


def step_overapprox(cell: Box, phi_min: float, phi_max: float, params: PlantParams = PlantParams()) -> Box:
    """Box containing every successor of states in ``cell`` under steering in [phi_min, phi_max].

    Relies on sin and tan being increasing on (-90, 90) degrees.
    """
    (p_lo, t_lo), (p_hi, t_hi) = cell.lo, cell.hi
    _check_angles([t_lo, t_hi], "heading bounds")
    _check_angles([phi_min, phi_max])
    if phi_min > phi_max:
        raise ValueError("phi_min exceeds phi_max")
    return Box(
        [p_lo + _dp(t_lo, params), t_lo + _dtheta(phi_min, params)],
        [p_hi + _dp(t_hi, params), t_hi + _dtheta(phi_max, params)],
    )


def step_overapprox_all(lo: np.ndarray, hi: np.ndarray, phi_min, phi_max, params: PlantParams = PlantParams()):
    """Vectorised ``step_overapprox`` over rows of (p, theta) bounds."""
    _check_angles(lo[:, 1], "heading bounds")
    _check_angles(hi[:, 1], "heading bounds")
    _check_angles(phi_min)
    _check_angles(phi_max)
    new_lo = np.stack([lo[:, 0] + _dp(lo[:, 1], params), lo[:, 1] + _dtheta(phi_min, params)], axis=1)
    new_hi = np.stack([hi[:, 0] + _dp(hi[:, 1], params), hi[:, 1] + _dtheta(phi_max, params)], axis=1)
    return new_lo, new_hi


# -- simulation --------------------------------------------------------------

# Maps (p, theta, z) to an estimate (p_hat, theta_hat).
Estimator = Callable[[float, float, np.ndarray], tuple[float, float]]


def perfect_estimator(p, theta, z):
    return p, theta


class LatentSource:
    """Per-step latent vectors: ``"zero"``, ``"fixed"`` or ``"random"`` in a box."""

    def __init__(self, kind: str = "zero", box: Box | None = None, value=None, seed: int = 0):
        if kind not in ("zero", "fixed", "random"):
            raise ValueError(f"unknown latent source {kind!r}")
        self.kind = kind
        self.box = box if box is not None else Box([-0.8, -0.8], [0.8, 0.8])
        self.value = np.zeros(self.box.dim) if value is None else np.asarray(value, dtype=np.float64)
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(self.box.dim)
        if self.kind == "fixed":
            return self.value
        return self.rng.uniform(self.box.lo, self.box.hi)


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    p_hat: np.ndarray
    theta_hat: np.ndarray
    out_of_domain: np.ndarray  # per-state flag, recorded rather than clamped

    def __len__(self):
        return len(self.t)


def simulate(
    estimate: Estimator,
    p0: float,
    theta0: float,
    steps: int,
    params: PlantParams = PlantParams(),
    latent: LatentSource | None = None,
    envelope: Box = Box([-11.0, -30.0], [11.0, 30.0]),
    phi_limit: float = PHI_LIMIT,
) -> Trajectory:
    """Closed loop estimate -> control_law -> step, ``steps + 1`` states long.

    The commanded angle is saturated at ``phi_limit`` degrees to stay clear of
    the tan singularity; the envelope only sets the out-of-domain flags.
    """
    latent = latent or LatentSource("zero")
    n = steps + 1
    rec = {k: np.zeros(n) for k in ("p", "theta", "phi", "p_hat", "theta_hat")}
    ood = np.zeros(n, dtype=bool)
    p, theta = float(p0), float(theta0)
    for k in range(n):
        ph, th = estimate(p, theta, latent())
        phi = float(np.clip(control_law(ph, th), -phi_limit, phi_limit))
        rec["p"][k], rec["theta"][k], rec["phi"][k] = p, theta, phi
        rec["p_hat"][k], rec["theta_hat"][k] = ph, th
        ood[k] = not bool(envelope.contains([p, theta]))
        if k < steps:
            p, theta = (float(v) for v in step(p, theta, phi, params))
    return Trajectory(np.arange(n) * params.dt, out_of_domain=ood, **rec)


# Maps state rows (n, 2) and latent rows (n, k) to estimate rows (n, 2).
BatchEstimator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def simulate_batch(
    estimate: BatchEstimator,
    starts,
    steps: int,
    params: PlantParams = PlantParams(),
    latent: LatentSource | None = None,
    envelope: Box = Box([-11.0, -30.0], [11.0, 30.0]),
    phi_limit: float = PHI_LIMIT,
) -> list[Trajectory]:
    """:func:`simulate` for many starts at once; latents are drawn per step for all runs."""
    latent = latent or LatentSource("zero")
    s = np.array(starts, dtype=np.float64).reshape(-1, 2)
    m, n = len(s), steps + 1
    rec = {k: np.zeros((m, n)) for k in ("p", "theta", "phi", "p_hat", "theta_hat")}
    ood = np.zeros((m, n), dtype=bool)
    for k in range(n):
        z = np.array([latent() for _ in range(m)]).reshape(m, -1)
        est = np.asarray(estimate(s, z), dtype=np.float64).reshape(m, 2)
        phi = np.clip(control_law(est[:, 0], est[:, 1]), -phi_limit, phi_limit)
        rec["p"][:, k], rec["theta"][:, k], rec["phi"][:, k] = s[:, 0], s[:, 1], phi
        rec["p_hat"][:, k], rec["theta_hat"][:, k] = est[:, 0], est[:, 1]
        ood[:, k] = ~envelope.contains(s)
        if k < steps:
            s = np.column_stack(step(s[:, 0], s[:, 1], phi, params))
    t = np.arange(n) * params.dt
    return [Trajectory(t, out_of_domain=ood[r], **{c: v[r] for c, v in rec.items()}) for r in range(m)]


TRAJECTORY_COLUMNS = ("t", "p", "theta", "phi", "p_hat", "theta_hat")


def write_trajectories(path, trajectories: list[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run",) + TRAJECTORY_COLUMNS + ("out_of_domain",))
        for run, tr in enumerate(trajectories):
            for k in range(len(tr)):
                w.writerow(
                    [run] + [repr(float(getattr(tr, c)[k])) for c in TRAJECTORY_COLUMNS] + [int(tr.out_of_domain[k])]
                )
