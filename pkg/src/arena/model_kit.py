"""Small differentiable layers, losses and metrics with explicit backward passes.

Data layout: features along rows, samples (or tokens) along columns, so a
linear layer computes ``W @ x + b[:, None]``.

Every parameter is exposed under a dotted name (``fc1.weight``,
``attn.k.adapter.A`` ...). That name is its parameter group; training
strategies select trainable groups by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .linalg import as_matrix, random_gaussian

__all__ = [
    "LinearLayer",
    "LayerNorm",
    "ReLU",
    "Sigmoid",
    "Softmax",
    "AttentionBlock",
    "ToyModel",
    "build_linear_model",
    "build_mlp",
    "build_attention_model",
    "forward",
    "backward",
    "soft_dice_loss",
    "multiclass_dice_loss",
    "mse_loss",
    "dice_score",
    "multiclass_dice_score",
]


class LinearLayer:
    """``y = W x + b``, optionally with a low-rank adapter added to ``W``.

    The adapter is any object with ``params()``, ``apply(x)`` and
    ``backprop(cache, grad)``; see :class:`arena.adapters.AdapterState`.
    """

    kind = "linear"

    def __init__(self, name, weight, bias=None, adapter=None):
        self.name = name
        self.weight = as_matrix(weight, f"{name}.weight").copy()
        m = self.weight.shape[0]
        self.bias = np.zeros(m) if bias is None else np.array(bias, dtype=np.float64)
        if self.bias.shape != (m,):
            raise ShapeError(f"{name}: bias shape {self.bias.shape} does not match {m} outputs")
        self.adapter = adapter

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    def params(self):
        out = {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}
        if self.adapter is not None:
            for key, arr in self.adapter.params().items():
                out[f"{self.name}.adapter.{key}"] = arr
        return out

    def forward(self, x):
        if x.shape[0] != self.in_features:
            raise ShapeError(
                f"layer {self.name!r} expects {self.in_features} input features, got {x.shape[0]}"
            )
        y = self.weight @ x + self.bias[:, None]
        adapter_cache = None
        if self.adapter is not None:
            z, adapter_cache = self.adapter.apply(x)
            y = y + z
        return y, (x, adapter_cache)

    def backward(self, cache, gy):
        x, adapter_cache = cache
        grads = {
            f"{self.name}.weight": gy @ x.T,
            f"{self.name}.bias": gy.sum(axis=1),
        }
        gx = self.weight.T @ gy
        if self.adapter is not None:
            gx_adapter, adapter_grads = self.adapter.backprop(adapter_cache, gy)
            gx = gx + gx_adapter
            for key, g in adapter_grads.items():
                grads[f"{self.name}.adapter.{key}"] = g
        return gx, grads

    def linears(self):
        return {self.name: self}


class LayerNorm:
    """Normalizes each column over its features, then applies ``gamma``, ``beta``."""

    kind = "layernorm"

    def __init__(self, name, size, eps=1e-5, gamma=None, beta=None):
        self.name = name
        self.eps = eps
        self.gamma = np.ones(size) if gamma is None else np.array(gamma, dtype=np.float64)
        self.beta = np.zeros(size) if beta is None else np.array(beta, dtype=np.float64)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def normalize(self, x):
        mu = x.mean(axis=0, keepdims=True)
        var = x.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        return (x - mu) * inv_std, inv_std

    def forward(self, x):
        if x.shape[0] != self.gamma.shape[0]:
            raise ShapeError(
                f"layer {self.name!r} expects {self.gamma.shape[0]} features, got {x.shape[0]}"
            )
        xhat, inv_std = self.normalize(x)
        return self.gamma[:, None] * xhat + self.beta[:, None], (xhat, inv_std)

    def backward(self, cache, gy):
        xhat, inv_std = cache
        grads = {
            f"{self.name}.gamma": (gy * xhat).sum(axis=1),
            f"{self.name}.beta": gy.sum(axis=1),
        }
        gxhat = gy * self.gamma[:, None]
        gx = inv_std * (
            gxhat - gxhat.mean(axis=0, keepdims=True) - xhat * (gxhat * xhat).mean(axis=0, keepdims=True)
        )
        return gx, grads

    def linears(self):
        return {}


class _Activation:
    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def linears(self):
        return {}


class ReLU(_Activation):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, gy):
        return gy * cache, {}


class Sigmoid(_Activation):
    kind = "sigmoid"

    def forward(self, x):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, cache, gy):
        return gy * cache * (1.0 - cache), {}


class Softmax(_Activation):
    """Softmax over the feature (class) axis of each column."""

    kind = "softmax"

    def forward(self, x):
        e = np.exp(x - x.max(axis=0, keepdims=True))
        y = e / e.sum(axis=0, keepdims=True)
        return y, y

    def backward(self, cache, gy):
        y = cache
        return y * (gy - (gy * y).sum(axis=0, keepdims=True)), {}


class AttentionBlock:
    """Single-head self-attention with a residual connection.

    Columns are tokens; with ``seq_len`` set, consecutive runs of
    ``seq_len`` columns form independent sequences. Adapters attach to the
    key and value projections.
    """

    kind = "attention"

    def __init__(self, name, w_q, w_k, w_v, w_o, seq_len=None):
        self.name = name
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o
        self.seq_len = seq_len
        d = w_q.out_features
        for lin in (w_q, w_k, w_v):
            if lin.weight.shape != (d, d):
                raise ShapeError(f"{lin.name}: expected ({d}, {d}) projection, got {lin.weight.shape}")
        self.d = d

    def params(self):
        out = {}
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            out.update(lin.params())
        return out

    def linears(self):
        return {lin.name: lin for lin in (self.w_q, self.w_k, self.w_v, self.w_o)}

    def _split(self, a):
        n = a.shape[1]
        t = n if self.seq_len is None else self.seq_len
        if n % t:
            raise ShapeError(f"layer {self.name!r}: {n} tokens not divisible by seq_len {t}")
        return a.reshape(a.shape[0], n // t, t).transpose(1, 0, 2)

    @staticmethod
    def _merge(a):
        s, d, t = a.shape
        return a.transpose(1, 0, 2).reshape(d, s * t)

    def forward(self, x):
        if x.shape[0] != self.d:
            raise ShapeError(f"layer {self.name!r} expects {self.d} features, got {x.shape[0]}")
        q, cq = self.w_q.forward(x)
        k, ck = self.w_k.forward(x)
        v, cv = self.w_v.forward(x)
        Q, K, V = self._split(q), self._split(k), self._split(v)
        scores = np.einsum("sdi,sdj->sij", Q, K) / np.sqrt(self.d)
        e = np.exp(scores - scores.max(axis=2, keepdims=True))
        P = e / e.sum(axis=2, keepdims=True)
        mixed = self._merge(np.einsum("sij,sdj->sdi", P, V))
        o, co = self.w_o.forward(mixed)
        return x + o, (cq, ck, cv, co, Q, K, V, P)

    def backward(self, cache, gy):
        cq, ck, cv, co, Q, K, V, P = cache
        gO, grads = self.w_o.backward(co, gy)
        gO = self._split(gO)
        gV = np.einsum("sdi,sij->sdj", gO, P)
        gP = np.einsum("sdi,sdj->sij", gO, V)
        gS = P * (gP - (gP * P).sum(axis=2, keepdims=True)) / np.sqrt(self.d)
        gQ = np.einsum("sij,sdj->sdi", gS, K)
        gK = np.einsum("sij,sdi->sdj", gS, Q)
        gx = gy.copy()
        for lin, c, g in ((self.w_q, cq, gQ), (self.w_k, ck, gK), (self.w_v, cv, gV)):
            gxi, gi = lin.backward(c, self._merge(g))
            gx += gxi
            grads.update(gi)
        return gx, grads


@dataclass
class ModelCache:
    token: tuple
    layer_caches: list = field(repr=False)


class ToyModel:
    """An ordered stack of layers; the layer named ``head`` plays the decoder."""

    def __init__(self, layers, kind="mlp", attachment_points=(), head_name="head"):
        self.layers = list(layers)
        self.kind = kind
        self.head_name = head_name
        self.attachment_points = tuple(attachment_points)
        self._revision = 0
        names = [n for layer in self.layers for n in layer.params()]
        if len(names) != len(set(names)):
            raise ShapeError("duplicate parameter names in model")
        missing = set(self.attachment_points) - set(self.linears())
        if missing:
            raise ShapeError(f"attachment points {sorted(missing)} are not linear layers")

    def touch(self):
        """Mark parameters as changed; outstanding forward caches become stale."""
        self._revision += 1

    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def linears(self):
        out = {}
        for layer in self.layers:
            out.update(layer.linears())
        return out

    @property
    def head(self):
        return self.linears().get(self.head_name)

    def adapters(self):
        return {name: lin.adapter for name, lin in self.linears().items() if lin.adapter is not None}

    @property
    def in_features(self):
        first = self.layers[0]
        if isinstance(first, LinearLayer):
            return first.in_features
        if isinstance(first, AttentionBlock):
            return first.d
        return first.gamma.shape[0]

    def forward(self, x):
        return forward(self, x)

    def backward(self, cache, grad_output):
        return backward(self, cache, grad_output)

    def first_nonfinite_layer(self, x):
        """Name of the first layer whose output contains NaN/Inf, or None."""
        h = as_matrix(x)
        if not np.all(np.isfinite(h)):
            return "input"
        for layer in self.layers:
            h, _ = layer.forward(h)
            if not np.all(np.isfinite(h)):
                return layer.name
        return None

    def state_dict(self):
        return {name: arr.copy() for name, arr in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise ShapeError(
                f"state keys differ: missing {sorted(set(params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(params))}"
            )
        for name, arr in params.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src
        self.touch()


def forward(model, x):
    """Run ``model`` on ``x``; returns the output and a cache for :func:`backward`."""
    h = as_matrix(x, "input")
    caches = []
    for layer in model.layers:
        h, c = layer.forward(h)
        caches.append(c)
    return h, ModelCache(token=(id(model), model._revision), layer_caches=caches)


def backward(model, cache, grad_output):
    """Gradients for every parameter of ``model`` (dict keyed by group name)."""
    if not isinstance(cache, ModelCache) or cache.token != (id(model), model._revision):
        raise ContractError("cache does not come from the current state of this model")
    g = as_matrix(grad_output, "grad_output")
    grads = {}
    for layer, c in zip(reversed(model.layers), reversed(cache.layer_caches)):
        g, lg = layer.backward(c, g)
        grads.update(lg)
    return grads


# ---------------------------------------------------------------- builders


def _init_linear(rng, name, n_out, n_in):
    w = random_gaussian(rng.split(name), n_out, n_in, std=1.0 / np.sqrt(n_in))
    return LinearLayer(name, w, np.zeros(n_out))


def build_linear_model(weight, bias=None):
    """A single frozen-base linear map named ``base``; no head."""
    return ToyModel([LinearLayer("base", weight, bias)], kind="linear", attachment_points=("base",))


def build_mlp(rng, n_in, hidden=32, n_out=1, output="sigmoid"):
    """Linear -> LayerNorm -> ReLU -> Linear -> ReLU -> head -> output activation."""
    layers = [
        _init_linear(rng, "fc1", hidden, n_in),
        LayerNorm("ln1", hidden),
        ReLU("relu1"),
        _init_linear(rng, "fc2", hidden, hidden),
        ReLU("relu2"),
        _init_linear(rng, "head", n_out, hidden),
    ]
    layers += _output_layer(output)
    return ToyModel(layers, kind="mlp", attachment_points=("fc1", "fc2"))


def build_attention_model(rng, n_in, d=16, n_out=1, seq_len=None, output="sigmoid"):
    """Embedding -> single-head attention (adapters on key/value) -> LayerNorm -> head."""
    if d > 32:
        raise ShapeError(f"attention dimension is capped at 32, got {d}")
    attn = AttentionBlock(
        "attn",
        *(_init_linear(rng, f"attn.{p}", d, d) for p in "qkvo"),
        seq_len=seq_len,
    )
    layers = [_init_linear(rng, "embed", d, n_in), attn, LayerNorm("ln1", d), ReLU("relu1"),
              _init_linear(rng, "head", n_out, d)]
    layers += _output_layer(output)
    return ToyModel(layers, kind="attention", attachment_points=("attn.k", "attn.v"))


def _output_layer(output):
    if output == "sigmoid":
        return [Sigmoid("out")]
    if output == "softmax":
        return [Softmax("out")]
    if output in (None, "identity"):
        return []
    raise ValueError(f"unknown output activation {output!r}")


# ---------------------------------------------------------------- losses


def _check_same(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return pred, target


def soft_dice_loss(pred, target, smooth=1e-6):
    """``1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)`` and its gradient in ``pred``."""
    pred, target = _check_same(pred, target)
    inter = float(np.sum(pred * target))
    denom = float(np.sum(pred) + np.sum(target)) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom
    grad = -(2.0 * target * denom - num) / denom**2
    return loss, grad


def multiclass_dice_loss(pred, target, smooth=1e-6):
    """Mean over classes (rows) of the per-class soft Dice loss."""
    pred, target = _check_same(pred, target)
    n_classes = pred.shape[0]
    total = 0.0
    grad = np.empty_like(pred)
    for c in range(n_classes):
        lc, gc = soft_dice_loss(pred[c], target[c], smooth)
        total += lc
        grad[c] = gc / n_classes
    return total / n_classes, grad


def mse_loss(pred, target):
    pred, target = _check_same(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _binary(mask, name):
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ContractError(f"{name} must be binary (0/1)")
    return m.astype(bool)


def dice_score(pred_mask, gt_mask):
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p = _binary(pred_mask, "pred_mask")
    g = _binary(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(p & g)) / total


def multiclass_dice_score(prob, onehot, include_background=False):
    """Mean Dice over classes after an argmax over rows; row 0 is background."""
    labels = np.argmax(prob, axis=0)
    truth = np.argmax(onehot, axis=0)
    start = 0 if include_background else 1
    scores = [dice_score(labels == c, truth == c) for c in range(start, prob.shape[0])]
    return float(np.mean(scores))
