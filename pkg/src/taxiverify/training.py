"""Supervised MLP training (backprop, minibatch Adam or SGD) for the generator and controller.

Networks are trained on normalised inputs/targets; the affine normalisation
is folded into the first and last layers afterwards so the saved networks
take and return physical units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .grid import P_RANGE, THETA_RANGE
from .network import Activation, Layer, Network, evaluate, mlp
from .render import N_PIXELS, Dataset

log = logging.getLogger(__name__)

P_SCALE = P_RANGE[1]
THETA_SCALE = THETA_RANGE[1]
GENERATOR_INPUTS = ("z1", "z2", "p", "theta")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    optimizer: str = "adam"  # "adam" or "sgd" (with momentum)
    lr: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    lr_decay: float = 0.01  # final lr as a fraction of the initial one (cosine schedule)
    input_noise: float = 0.0  # std of Gaussian noise added to raw inputs each minibatch
    loss: str = "mse"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")

    def to_dict(self) -> dict:
        return {**asdict(self), "hidden": list(self.hidden)}


GENERATOR_CONFIG = TrainConfig(hidden=(64, 64), epochs=400, seed=1)
CONTROLLER_CONFIG = TrainConfig(hidden=(32, 32), lr=1e-3, epochs=150, seed=2, input_noise=0.05)


# -- backprop ------------------------------------------------------------------


def forward(params, x):
    """Activations of every layer; ``params`` is a list of (W, b)."""
    acts = [x]
    h = x
    for k, (w, b) in enumerate(params):
        h = h @ w.T + b
        if k < len(params) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mse_loss(params, x, y) -> float:
    out = forward(params, x)[-1]
    return float(np.mean((out - y) ** 2))


def mse_grads(params, x, y):
    """Loss and gradients of mean((f(x) - y)^2) over samples and outputs."""
    acts = forward(params, x)
    out = acts[-1]
    diff = out - y
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    grads = [None] * len(params)
    for k in range(len(params) - 1, -1, -1):
        w, _ = params[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w) * (acts[k] > 0)
    return loss, grads


def train_mlp(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, noise_scale: float = 1.0):
    """Fit a ReLU MLP by minibatch Adam or momentum SGD; returns (params, loss trace).

    The trace holds the full-data loss before training and after each epoch.
    Iteration order and augmentation noise are fixed by ``cfg.seed``;
    ``noise_scale`` converts ``cfg.input_noise`` to the units of ``x``.
    """
    rng = np.random.default_rng(cfg.seed)
    sizes = [x.shape[1], *cfg.hidden, y.shape[1]]
    init = mlp(sizes, rng)
    params = [(layer.weights.copy(), layer.bias.copy()) for layer in init.layers]
    m1 = [[np.zeros_like(a) for a in p] for p in params]
    m2 = [[np.zeros_like(a) for a in p] for p in params]
    params = [list(p) for p in params]
    losses = [mse_loss(params, x, y)]
    # overflow shows up as a non-finite loss, which is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        _run_epochs(params, m1, m2, x, y, cfg, noise_scale, rng, losses)
    return [tuple(p) for p in params], losses


def _run_epochs(params, m1, m2, x, y, cfg, noise_scale, rng, losses):
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(x)
    t = 0
    for epoch in range(cfg.epochs):
        frac = epoch / max(cfg.epochs - 1, 1)
        lr = cfg.lr * (cfg.lr_decay + (1 - cfg.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac)))
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = x[idx]
            if cfg.input_noise > 0:
                xb = xb + rng.normal(0.0, cfg.input_noise * noise_scale, size=xb.shape)
            _, grads = mse_grads(params, xb, y[idx])
            t += 1
            for k, g in enumerate(grads):
                for j in range(2):
                    if cfg.optimizer == "sgd":
                        m1[k][j] = cfg.momentum * m1[k][j] - lr * g[j]
                        params[k][j] = params[k][j] + m1[k][j]
                    else:
                        m1[k][j] = beta1 * m1[k][j] + (1 - beta1) * g[j]
                        m2[k][j] = beta2 * m2[k][j] + (1 - beta2) * g[j] ** 2
                        step = (m1[k][j] / (1 - beta1**t)) / (np.sqrt(m2[k][j] / (1 - beta2**t)) + eps)
                        params[k][j] = params[k][j] - lr * step
        loss = mse_loss(params, x, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1} (lr={lr:.3g})")
        losses.append(loss)
        log.debug("epoch %d loss %.6g", epoch + 1, loss)


def to_network(params, in_shift, in_scale, out_scale, out_shift, **meta) -> Network:
    """Network computing ``out_scale * f((x - in_shift) / in_scale) + out_shift``."""
    layers = []
    last = len(params) - 1
    for k, (w, b) in enumerate(params):
        if k == 0:
            w, b = w / in_scale, b - (w / in_scale) @ in_shift
        if k == last:
            w, b = out_scale[:, None] * w, out_scale * b + out_shift
        act = Activation.IDENTITY if k == last else Activation.RELU
        layers.append(Layer(w, b, act))
    return Network(tuple(layers), **meta)


# -- generator / controller ------------------------------------------------------


def generator_inputs(states, latents) -> np.ndarray:
    """Physical generator inputs (z1, z2, p, theta)."""
    return np.column_stack([latents, states])


def train_generator(ds: Dataset, cfg: TrainConfig = GENERATOR_CONFIG):
    """Generator (z1, z2, p [m], theta [deg]) -> 128 pixels, and its loss trace."""
    x = generator_inputs(ds.states, ds.latents)
    in_scale = np.array([1.0, 1.0, P_SCALE, THETA_SCALE])
    in_shift = np.zeros(4)
    params, losses = train_mlp(x / in_scale, ds.images - 0.5, cfg)
    net = to_network(
        params, in_shift, in_scale, np.ones(N_PIXELS), np.full(N_PIXELS, 0.5),
        input_names=GENERATOR_INPUTS,
        input_lo=[-1.0, -1.0, P_RANGE[0], THETA_RANGE[0]],
        input_hi=[1.0, 1.0, P_RANGE[1], THETA_RANGE[1]],
    )
    return net, losses


PIXEL_SCALE = 0.1


def train_controller(ds: Dataset, cfg: TrainConfig = CONTROLLER_CONFIG):
    """Controller 128 pixels -> (p_hat [m], theta_hat [deg]), and its loss trace."""
    out_scale = np.array([P_SCALE, THETA_SCALE])
    x = (ds.images - 0.5) / PIXEL_SCALE
    params, losses = train_mlp(x, ds.states / out_scale, cfg, noise_scale=1.0 / PIXEL_SCALE)
    net = to_network(
        params, np.full(N_PIXELS, 0.5), np.full(N_PIXELS, PIXEL_SCALE), out_scale, np.zeros(2),
        input_names=tuple(f"px_{k}" for k in range(N_PIXELS)),
    )
    return net, losses


def generate(gen: Network, states, latents) -> np.ndarray:
    return evaluate(gen, generator_inputs(np.asarray(states).reshape(-1, 2), np.asarray(latents).reshape(-1, 2)))


def prediction_rmse(controller: Network, images, states) -> np.ndarray:
    """Per-output RMSE of (p_hat, theta_hat) against true states."""
    pred = evaluate(controller, images)
    return np.sqrt(np.mean((pred - states) ** 2, axis=0))
