"""Sound output bounds for ReLU networks by zonotope (DeepZ) propagation.

Every operation accepts an optional leading batch axis so that branch and
bound can bound many sub-boxes with one set of matrix products.  Soundness is
with respect to real arithmetic; floating-point error is not rounded outward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, NetworkError


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64)
        hi = np.array(self.hi, dtype=np.float64)
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds have shapes {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[-1]

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo - atol) & (x <= self.hi + atol), axis=-1)

    def subset_of(self, other: "Box") -> bool:
        return bool(np.all(self.lo >= other.lo) and np.all(self.hi <= other.hi))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


@dataclass(frozen=True, eq=False)
class Zonotope:
    """The set ``{center + generators @ eps : eps in [-1, 1]^k}``.

    ``center`` has shape ``(..., d)`` and ``generators`` ``(..., d, k)``.
    """

    center: np.ndarray
    generators: np.ndarray

    @property
    def dim(self) -> int:
        return self.center.shape[-1]

    @property
    def n_generators(self) -> int:
        return self.generators.shape[-1]

    def radius(self) -> np.ndarray:
        return np.abs(self.generators).sum(axis=-1)

    def interval_hull(self) -> Box:
        r = self.radius()
        return Box(self.center - r, self.center + r)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Points of an unbatched zonotope from uniform noise symbols."""
        eps = rng.uniform(-1.0, 1.0, size=(n, self.n_generators))
        return self.center + eps @ self.generators.T


def from_box(b: Box) -> Zonotope:
    half = (b.hi - b.lo) / 2
    gens = half[..., :, None] * np.eye(b.dim)
    return Zonotope((b.lo + b.hi) / 2, gens)


def affine(z: Zonotope, w, b) -> Zonotope:
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape[-1] != z.dim:
        raise NetworkError(f"affine map takes {w.shape[-1]} inputs, zonotope has {z.dim}")
    return Zonotope(z.center @ w.T + b, w @ z.generators)


def relu(z: Zonotope) -> Zonotope:
    """DeepZ ReLU transformer, one fresh noise symbol per unstable neuron.

    New symbols are only allocated for neurons unstable in at least one batch
    element; elsewhere the new column entry is zero.
    """
    c, g = z.center, z.generators
    r = np.abs(g).sum(axis=-1)
    lo, hi = c - r, c + r
    dead = hi <= 0
    crossing = (lo < 0) & ~dead
    denom = np.where(crossing, hi - lo, 1.0)
    lam = np.where(crossing, hi / denom, 1.0)
    mu = np.where(crossing, -lam * lo / 2, 0.0)
    lam = np.where(dead, 0.0, lam)

    new_c = lam * c + mu
    new_g = lam[..., :, None] * g
    cols = np.flatnonzero(crossing.reshape(-1, c.shape[-1]).any(axis=0))
    if cols.size:
        extra = np.zeros(c.shape + (cols.size,))
        extra[..., cols, np.arange(cols.size)] = mu[..., cols]
        new_g = np.concatenate([new_g, extra], axis=-1)
    return Zonotope(new_c, new_g)


def propagate_zonotope(net: Network, z: Zonotope) -> Zonotope:
    if z.dim != net.input_dim:
        raise NetworkError(f"input has dimension {z.dim}, network expects {net.input_dim}")
    for w, b, has_relu in net.affine_blocks:
        z = affine(z, w, b)
        if has_relu:
            z = relu(z)
    return z


def propagate(net: Network, box: Box) -> tuple[Box, Zonotope]:
    """Sound output box and zonotope of ``net`` over ``box``."""
    if box.dim != net.input_dim:
        raise NetworkError(f"input has dimension {box.dim}, network expects {net.input_dim}")
    out = propagate_zonotope(net, from_box(box))
    return out.interval_hull(), out


def linear_bounds(z: Zonotope, c) -> tuple[np.ndarray, np.ndarray]:
    """Range of ``c @ y`` over the zonotope, keeping generator correlations."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != z.dim:
        raise NetworkError(f"functional has length {c.shape[-1]}, zonotope has {z.dim}")
    mid = z.center @ c
    spread = np.abs(np.einsum("...dk,d->...k", z.generators, c)).sum(axis=-1)
    return mid - spread, mid + spread
