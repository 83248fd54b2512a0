"""Block-coordinate training: AdamW on the smooth blocks, proximal l1 steps on gates.

One optimisation step does a single forward/backward pass, moves every
trainable tensor except the gate vectors with AdamW, then replaces each
trainable gate vector ``v`` by

    soft_threshold(v - rho * grad_v, eta_t * lam)

using the gradient from that same pass. ``eta_t`` is the cosine-scheduled
learning rate shared with AdamW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, TrainingAborted
from .linalg import as_vector, l1_norm

__all__ = [
    "AdamWConfig",
    "ProxConfig",
    "OptimizerState",
    "EarlyStopState",
    "soft_threshold",
    "soft_threshold_array",
    "prox_step_v",
    "prox_subproblem_oracle",
    "cosine_lr",
    "adamw_step",
    "train_step",
    "should_stop",
    "regularizer",
    "is_gate",
]


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class ProxConfig:
    lam: float = 0.5
    rho: float = 0.0
    base_lr: float = 1e-3
    total_epochs: int = 200
    min_lr: float = 0.0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    # Replaces the scheduled rate inside the prox threshold when set.
    prox_eta: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.rho < 0:
            raise ParameterError(f"rho must be >= 0, got {self.rho}")
        if not self.base_lr > 0:
            raise ParameterError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_epochs < 0:
            raise ParameterError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if isinstance(self.adamw, dict):
            self.adamw = AdamWConfig(**self.adamw)


def soft_threshold(x, tau):
    """Shrink ``x`` toward zero by ``tau``; exactly 0.0 when ``|x| <= tau``."""
    if tau < 0:
        raise ParameterError(f"threshold must be >= 0, got {tau}")
    if x > tau:
        return x - tau
    if x < -tau:
        return x + tau
    return 0.0


def soft_threshold_array(x, tau):
    if tau < 0:
        raise ParameterError(f"threshold must be >= 0, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > tau, x - tau, np.where(x < -tau, x + tau, 0.0))


def prox_step_v(v, grad_v, eta_t, cfg):
    v = as_vector(v, "v")
    grad_v = as_vector(grad_v, "grad_v")
    if v.shape != grad_v.shape:
        raise ShapeError(f"gate length {v.shape[0]} does not match gradient length {grad_v.shape[0]}")
    if not eta_t > 0:
        raise ParameterError(f"eta_t must be > 0, got {eta_t}")
    return soft_threshold_array(v - cfg.rho * grad_v, eta_t * cfg.lam)


def prox_subproblem_oracle(v_prev, grad_v, eta_t, cfg, step=1e-4, bound=3.0, chunk=64):
    """Brute-force minimiser of ``|w - z|^2 / (2 eta_t) + lam |w|`` per coordinate.

    ``z = v_prev - rho * grad_v``. Candidates lie on a grid of spacing
    ``step`` over ``[-bound, bound]`` that contains 0 exactly. Only used to
    certify :func:`prox_step_v`.
    """
    z = as_vector(v_prev) - cfg.rho * as_vector(grad_v)
    half = int(round(bound / step))
    grid = np.arange(-half, half + 1) * step
    out = np.empty_like(z)
    for start in range(0, z.size, chunk):
        zc = z[start:start + chunk, None]
        obj = (grid[None, :] - zc) ** 2 / (2.0 * eta_t) + cfg.lam * np.abs(grid)[None, :]
        out[start:start + chunk] = grid[np.argmin(obj, axis=1)]
    return out


def cosine_lr(epoch, cfg):
    """Cosine decay from ``base_lr`` at epoch 0 to ``min_lr`` at ``total_epochs``."""
    if cfg.total_epochs == 0:
        return cfg.min_lr
    e = min(max(epoch, 0), cfg.total_epochs)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * e / cfg.total_epochs))


def is_gate(name):
    return name.endswith(".adapter.v")


class OptimizerState:
    """AdamW first/second moments and step counts, keyed by parameter group."""

    def __init__(self, adamw=None):
        self.adamw = adamw or AdamWConfig()
        self.m = {}
        self.v = {}
        self.t = {}
        self.epoch = 0
        self.eta = None

    def moments(self, name, shape):
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = 0
        elif self.m[name].shape != shape:
            raise ShapeError(f"{name}: moment shape {self.m[name].shape} does not match {shape}")
        return self.m[name], self.v[name]


def adamw_step(state, name, param, grad, eta_t, decay=True):
    """In-place decoupled-weight-decay Adam update of ``param``."""
    if param.shape != grad.shape:
        raise ShapeError(f"{name}: gradient shape {grad.shape} does not match parameter {param.shape}")
    cfg = state.adamw
    m, v = state.moments(name, param.shape)
    state.t[name] += 1
    t = state.t[name]
    if decay and cfg.weight_decay:
        param *= 1.0 - eta_t * cfg.weight_decay
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    param -= eta_t * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return param


def regularizer(model, trainable, lam):
    """``lam * sum ||v||_1`` over the trainable gate vectors."""
    params = model.parameters()
    return lam * sum(l1_norm(params[n]) for n in trainable if is_gate(n))


def train_step(model, x, y, loss_fn, opt_state, cfg, trainable, eta_t):
    """One block-coordinate step; returns the data loss before the update."""
    pred, cache = model.forward(x)
    loss, gpred = loss_fn(pred, y)
    if not math.isfinite(loss):
        layer = model.first_nonfinite_layer(x) or "loss"
        raise TrainingAborted(f"non-finite loss {loss}; first non-finite output at {layer!r}", layer=layer)
    grads = model.backward(cache, gpred)
    params = model.parameters()
    gates = []
    for name in trainable:
        if is_gate(name):
            gates.append(name)
        else:
            adamw_step(opt_state, name, params[name], grads[name], eta_t)
    prox_eta = cfg.prox_eta if cfg.prox_eta is not None else eta_t
    for name in gates:
        if prox_eta > 0:
            params[name][...] = prox_step_v(params[name], grads[name], prox_eta, cfg)
    model.touch()
    return loss


@dataclass
class EarlyStopState:
    window: int = 20
    threshold: float = 0.01
    history: list = field(default_factory=list)


# Slack for decimal traces such as 1.00 -> 0.99 whose float difference
# lands a few ulps above the threshold.
_REL_SLACK = 1e-12


def should_stop(es, epoch_loss):
    """Record ``epoch_loss``; True once the improvement over the last
    ``window`` epochs is at most ``threshold`` of the loss at the window start."""
    es.history.append(float(epoch_loss))
    if len(es.history) <= es.window:
        return False
    ref = es.history[-es.window - 1]
    if not ref > 0:
        return True
    improvement = (ref - es.history[-1]) / ref
    return improvement <= es.threshold + _REL_SLACK
