"""Deterministic synthetic runway images and datasets of (state, latent, image) records.

A pinhole camera on the right wing looks down the runway.  Each of the
8 x 16 pixels samples the ground plane at a fixed forward range and bearing;
paint markings are box-filtered over the pixel footprint so the image is a
continuous function of (p, theta, z).  ``z1`` slides the centerline dashes
through one full period, ``z2`` tilts brightness left to right by up to 10%.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import P_RANGE, THETA_RANGE

HEIGHT, WIDTH = 8, 16
N_PIXELS = HEIGHT * WIDTH


@dataclass(frozen=True)
class RendererParams:
    image_height: int = HEIGHT
    image_width: int = WIDTH
    wing_offset: float = 3.0  # camera sits this far right of the aircraft, m
    half_fov: float = 35.0  # horizontal half field of view, deg
    near_range: float = 6.0  # ground range seen by the bottom row, m
    far_range: float = 30.0  # ground range seen by the top row, m
    line_width: float = 0.9  # m
    edge_offset: float = 10.0  # edge-line centres, m from the centerline
    shoulder: float = 10.5  # asphalt ends here, m from the centerline
    dash_length: float = 6.0  # m
    dash_gap: float = 6.0  # m
    grass: float = 0.30
    asphalt: float = 0.40
    paint: float = 0.70
    tilt: float = 0.10
    blur: float = 5.0  # footprint multiplier; >1 widens the box filter beyond one pixel
    mean_target: float = 0.5

    @property
    def dash_period(self) -> float:
        return self.dash_length + self.dash_gap


DEFAULT_PARAMS = RendererParams()


def _geometry(rp: RendererParams):
    rows = np.arange(rp.image_height)
    ratio = (rp.near_range / rp.far_range) ** (1.0 / max(rp.image_height - 1, 1))
    dist = rp.far_range * ratio**rows  # top row is farthest
    # longitudinal footprint: distance between neighbouring row centres
    foot_x = dist * abs(1.0 / np.sqrt(ratio) - np.sqrt(ratio))
    cols = np.arange(rp.image_width)
    step = 2.0 * rp.half_fov / rp.image_width
    bearing = np.deg2rad(-rp.half_fov + step * (cols + 0.5))
    foot_y = dist[:, None] * np.deg2rad(step) / np.cos(bearing[None, :]) ** 2
    return dist, rp.blur * foot_x, np.tan(bearing), rp.blur * foot_y


def _interval_cover(center, foot, a, b):
    """Fraction of [center - foot/2, center + foot/2] lying in [a, b]."""
    lo = np.maximum(center - foot / 2, a)
    hi = np.minimum(center + foot / 2, b)
    return np.clip(hi - lo, 0.0, None) / foot


def _dash_integral(x, rp: RendererParams):
    """Painted length of the dash pattern on [0, x]; dashes start at multiples of the period."""
    period = rp.dash_period
    k = np.floor(x / period)
    return k * rp.dash_length + np.minimum(x - k * period, rp.dash_length)


def _ground(states, latents, rp):
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, 2)
    if states.shape[0] != latents.shape[0]:
        raise ValueError("need one latent per state")
    p, theta = states[:, 0], np.deg2rad(states[:, 1])
    dist, foot_x, tan_b, foot_y = _geometry(rp)
    d = dist[None, :, None]
    b = d * tan_b[None, None, :]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    x = d * c - b * s
    y = (p + rp.wing_offset)[:, None, None] + d * s + b * c
    return x, y, foot_x[None, :, None], foot_y[None, :, :], latents


def centerline_coverage(states, latents, rp: RendererParams = DEFAULT_PARAMS) -> np.ndarray:
    """Per-pixel painted fraction of the dashed centerline, shape (n, H, W)."""
    x, y, fx, fy, z = _ground(states, latents, rp)
    w = rp.line_width / 2
    phase = ((z[:, 0] + 1.0) / 2.0 * rp.dash_period)[:, None, None]
    xs = x + phase
    dash = (_dash_integral(xs + fx / 2, rp) - _dash_integral(xs - fx / 2, rp)) / fx
    return _interval_cover(y, fy, -w, w) * dash


def render_batch(states, latents, rp: RendererParams = DEFAULT_PARAMS) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, 2)
    _check_domain(states, latents)
    x, y, fx, fy, z = _ground(states, latents, rp)
    w = rp.line_width / 2
    edges = _interval_cover(y, fy, rp.edge_offset - w, rp.edge_offset + w) + _interval_cover(
        y, fy, -rp.edge_offset - w, -rp.edge_offset + w
    )
    paint = np.minimum(edges + centerline_coverage(states, latents, rp), 1.0)
    tarmac = _interval_cover(y, fy, -rp.shoulder, rp.shoulder)
    img = rp.grass + (rp.asphalt - rp.grass) * tarmac + (rp.paint - rp.asphalt) * paint
    cols = np.arange(rp.image_width)
    slope = (cols - (rp.image_width - 1) / 2) / ((rp.image_width - 1) / 2)
    img = img * (1.0 + rp.tilt * z[:, 1, None, None] * slope[None, None, :])
    img = img.reshape(img.shape[0], -1)
    img = img + (rp.mean_target - img.mean(axis=1, keepdims=True))
    return np.clip(img, 0.0, 1.0)


def render(p: float, theta: float, z, rp: RendererParams = DEFAULT_PARAMS) -> np.ndarray:
    """Row-major 128-vector image of state (p, theta) under latent z."""
    return render_batch([[p, theta]], [z], rp)[0]


def _check_domain(states, latents):
    ok_s = (
        (states[:, 0] >= P_RANGE[0]) & (states[:, 0] <= P_RANGE[1])
        & (states[:, 1] >= THETA_RANGE[0]) & (states[:, 1] <= THETA_RANGE[1])
    )
    if not np.all(ok_s):
        bad = states[~ok_s][0]
        raise ValueError(f"state {bad.tolist()} outside the rendering domain")
    if np.any(np.abs(latents) > 1.0):
        raise ValueError("latent entries must lie in [-1, 1]")


# -- datasets ------------------------------------------------------------------


@dataclass
class Dataset:
    states: np.ndarray  # (n, 2) p [m], theta [deg]
    latents: np.ndarray  # (n, 2)
    images: np.ndarray  # (n, 128)

    def __len__(self):
        return len(self.states)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.latents[idx], self.images[idx])


def make_dataset(n: int, seed: int, rp: RendererParams = DEFAULT_PARAMS) -> Dataset:
    if n < 1:
        raise ValueError("dataset needs at least one record")
    rng = np.random.default_rng(seed)
    states = np.column_stack([rng.uniform(*P_RANGE, size=n), rng.uniform(*THETA_RANGE, size=n)])
    latents = rng.uniform(-1.0, 1.0, size=(n, 2))
    return Dataset(states, latents, render_batch(states, latents, rp))


DATASET_HEADER = ["p", "theta", "z1", "z2"] + [f"px_{k}" for k in range(N_PIXELS)]


def save_dataset_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for row in np.hstack([ds.states, ds.latents, ds.images]):
            w.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[: len(DATASET_HEADER)] != DATASET_HEADER:
            raise ValueError(f"{path}: unexpected dataset header")
        data = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    data = data.reshape(-1, len(DATASET_HEADER))
    return Dataset(data[:, :2], data[:, 2:4], data[:, 4:])


def write_pgm(path, image, height: int = HEIGHT, width: int = WIDTH) -> None:
    """Binary 8-bit PGM (P5) of an image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64).reshape(height, width)
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end() : m.end() + width * height], dtype=np.uint8)
    return data.reshape(height, width).astype(np.float64) / maxval
