"""Low-rank adapters: gated ``B diag(v) A`` and vanilla ``B A`` forms.

An :class:`AdapterState` hangs off a :class:`~arena.model_kit.LinearLayer`
and adds ``scaling * B diag(v) A x`` to its output. The product is applied
right-to-left so the ``m x n`` increment is never formed during training.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .linalg import as_matrix, as_vector, l0_norm, random_gaussian, random_uniform, scale_columns
from .model_kit import LinearLayer

__all__ = [
    "GATED",
    "VANILLA",
    "STRATEGIES",
    "AdapterState",
    "init_adapter",
    "delta",
    "adapted_forward",
    "merge",
    "effective_rank",
    "attach_adapters",
    "detach_adapters",
    "trainable_parameters",
    "count_trainable",
    "adapter_param_count",
    "save_adapter",
    "load_adapter",
]

GATED = "gated"
VANILLA = "vanilla"
STRATEGIES = ("linear_probe", "bitfit", "affine_ln", "fft", "lora", "arena")

LORA_A_STD = 0.02
DEFAULT_RANK_EPS = 1e-3


@dataclass(eq=False)
class AdapterState:
    A: np.ndarray
    B: np.ndarray
    v: np.ndarray | None = None
    mode: str = GATED
    scaling: float = 1.0
    attachment: str | None = None

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        r = self.A.shape[0]
        if self.mode not in (GATED, VANILLA):
            raise ParameterError(f"unknown adapter mode {self.mode!r}")
        if r < 1:
            raise ParameterError("adapter rank must be >= 1")
        if self.B.shape[1] != r:
            raise ShapeError(f"B {self.B.shape} and A {self.A.shape} disagree on rank")
        if self.mode == GATED:
            if self.v is None:
                raise ShapeError("gated adapter needs a gate vector v")
            self.v = as_vector(self.v, "v")
            if self.v.shape[0] != r:
                raise ShapeError(f"gate vector length {self.v.shape[0]} != rank {r}")
        elif self.v is not None:
            raise ShapeError("vanilla adapter carries no gate vector")
        if not self.scaling > 0:
            raise ParameterError(f"scaling must be > 0, got {self.scaling}")
        if r > min(self.m, self.n):
            warnings.warn(
                f"adapter rank {r} exceeds min(m, n) = {min(self.m, self.n)}",
                stacklevel=3,
            )

    @property
    def r(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def shape(self):
        return (self.m, self.n)

    def params(self):
        out = {"A": self.A, "B": self.B}
        if self.v is not None:
            out["v"] = self.v
        return out

    def apply(self, x):
        h = self.A @ x
        u = h * self.v[:, None] if self.v is not None else h
        return self.scaling * (self.B @ u), (x, h, u)

    def backprop(self, cache, gz):
        x, h, u = cache
        gz = self.scaling * gz
        grads = {"B": gz @ u.T}
        gu = self.B.T @ gz
        if self.v is not None:
            grads["v"] = np.sum(gu * h, axis=1)
            gh = gu * self.v[:, None]
        else:
            gh = gu
        grads["A"] = gh @ x.T
        return self.A.T @ gh, grads

    def copy(self):
        return AdapterState(
            self.A.copy(), self.B.copy(), None if self.v is None else self.v.copy(),
            self.mode, self.scaling, self.attachment,
        )

    def to_record(self):
        """JSON-ready dict; floats are hex-encoded so the round trip is bit-exact."""
        hexes = lambda a: [float(x).hex() for x in np.ravel(a)]  # noqa: E731
        return {
            "mode": self.mode,
            "m": self.m,
            "n": self.n,
            "r": self.r,
            "scaling": float(self.scaling).hex(),
            "attachment": self.attachment,
            "A": hexes(self.A),
            "B": hexes(self.B),
            "v": None if self.v is None else hexes(self.v),
        }

    @classmethod
    def from_record(cls, rec):
        unhex = lambda xs: np.array([float.fromhex(x) for x in xs], dtype=np.float64)  # noqa: E731
        m, n, r = rec["m"], rec["n"], rec["r"]
        v = None if rec.get("v") is None else unhex(rec["v"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cls(
                unhex(rec["A"]).reshape(r, n),
                unhex(rec["B"]).reshape(m, r),
                v,
                rec["mode"],
                float.fromhex(rec["scaling"]),
                rec.get("attachment"),
            )


def init_adapter(rng, mode, m, n, r, scaling=1.0, attachment=None, gate_init="uniform"):
    """Standard LoRA start (A Gaussian with std 0.02, B zero) plus, when gated,
    gates drawn uniformly on [-1, 1).

    ``gate_init="ones"`` starts the gates at 1, which makes a gated adapter
    extensionally equal to a vanilla one with the same A and B.
    """
    if r < 1 or m < 1 or n < 1:
        raise ParameterError(f"m, n, r must be >= 1, got m={m}, n={n}, r={r}")
    A = random_gaussian(rng, r, n, LORA_A_STD)
    B = np.zeros((m, r))
    v = None
    if mode == GATED:
        if gate_init == "uniform":
            v = random_uniform(rng, r, -1.0, 1.0)
        elif gate_init == "ones":
            v = np.ones(r)
        else:
            raise ParameterError(f"unknown gate_init {gate_init!r}")
    elif mode != VANILLA:
        raise ParameterError(f"unknown adapter mode {mode!r}")
    return AdapterState(A, B, v, mode, scaling, attachment)


def delta(s):
    """The weight increment ``scaling * B diag(v) A`` as an explicit matrix."""
    left = scale_columns(s.B, s.v) if s.v is not None else s.B
    return s.scaling * (left @ s.A)


def adapted_forward(host, s, x):
    """``(W0 + delta) x + b`` evaluated as ``W0 x + b + B (v * (A x))``."""
    x = as_matrix(x, "x")
    if s.shape != host.weight.shape:
        raise ShapeError(f"adapter shape {s.shape} does not match host weight {host.weight.shape}")
    if x.shape[0] != host.in_features:
        raise ShapeError(f"input has {x.shape[0]} rows, host expects {host.in_features}")
    z, _ = s.apply(x)
    return host.weight @ x + host.bias[:, None] + z


def merge(host, s):
    if s.shape != host.weight.shape:
        raise ShapeError(f"adapter shape {s.shape} does not match host weight {host.weight.shape}")
    return LinearLayer(host.name, host.weight + delta(s), host.bias.copy())


def effective_rank(s, eps=DEFAULT_RANK_EPS):
    if s.mode == VANILLA:
        return s.r
    return l0_norm(s.v, eps)


def attach_adapters(model, rng, mode, r, scaling=1.0, points=None, gate_init="uniform"):
    """Put a fresh adapter on each attachment point; each draws from its own stream."""
    linears = model.linears()
    points = model.attachment_points if points is None else tuple(points)
    if not points:
        raise ConfigError("model has no adapter attachment points")
    out = {}
    for name in points:
        if name not in linears:
            raise ConfigError(f"no linear layer named {name!r}")
        host = linears[name]
        host.adapter = init_adapter(
            rng.split(name), mode, host.out_features, host.in_features, r, scaling, name, gate_init
        )
        out[name] = host.adapter
    model.touch()
    return out


def detach_adapters(model):
    for lin in model.linears().values():
        lin.adapter = None
    model.touch()


def _is_adapter(name):
    return ".adapter." in name


def trainable_parameters(model, strategy, task_mode="base"):
    """Sorted list of trainable parameter-group names for ``strategy``.

    In ``novel`` mode every strategy also trains the head; ``base`` mode
    keeps it frozen except for strategies that are defined on it.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if task_mode not in ("base", "novel"):
        raise ConfigError(f"unknown task mode {task_mode!r}")
    names = list(model.parameters())
    head = f"{model.head_name}."
    head_names = [n for n in names if n.startswith(head) and not _is_adapter(n)]

    if strategy == "fft":
        return sorted(names)
    if strategy == "linear_probe":
        chosen = list(head_names)
    elif strategy == "bitfit":
        chosen = [n for n in names if n.endswith(".bias") and not _is_adapter(n)]
    elif strategy == "affine_ln":
        chosen = [n for n in names if n.endswith((".gamma", ".beta"))]
    else:
        adapters = model.adapters()
        if not adapters:
            raise ConfigError(f"strategy {strategy!r} needs adapters attached to the model")
        if strategy == "arena":
            vanilla = sorted(p for p, a in adapters.items() if a.mode != GATED)
            if vanilla:
                raise ConfigError(f"arena needs gated adapters; {vanilla} are vanilla")
            suffixes = (".adapter.A", ".adapter.B", ".adapter.v")
        else:
            suffixes = (".adapter.A", ".adapter.B")
        chosen = [n for n in names if n.endswith(suffixes)]
    if not chosen:
        raise ConfigError(f"strategy {strategy!r} selects no parameters on this {model.kind} model")
    if task_mode == "novel":
        if not head_names:
            raise ConfigError("novel task mode needs a head layer")
        chosen += head_names
    return sorted(set(chosen))


def count_trainable(model, strategy, task_mode="base"):
    params = model.parameters()
    return int(sum(params[n].size for n in trainable_parameters(model, strategy, task_mode)))


def adapter_param_count(m, n, r, mode):
    """Closed form: ``r (m + n)`` for vanilla, plus ``r`` gates for gated."""
    return r * (m + n) + (r if mode == GATED else 0)


def save_adapter(path, s):
    with open(path, "w") as fh:
        json.dump(s.to_record(), fh, sort_keys=True)


def load_adapter(path):
    with open(path) as fh:
        return AdapterState.from_record(json.load(fh))
