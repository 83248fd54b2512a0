"""Seeded synthetic few-shot tasks with known ground truth.

Two families:

* planted-rank regression: ``y = (W0 + dW*) x + noise`` where ``dW*`` has an
  exact, known rank; the frozen base model is ``W0``.
* toy segmentation on a 32x32 grid: images are sums of Gaussian blobs plus
  noise, labels are half-maximum blob masks, and each pixel is a column of
  11 features. ``base`` tasks come from the pre-training distribution;
  ``novel`` tasks label a fainter, elongated structure next to unlabeled
  base-type distractors.
"""

from __future__ import annotations

import json
import numpy as np

from .errors import ParameterError, ShapeError, TrainingAborted
from .linalg import Rng, random_gaussian
from .model_kit import build_attention_model, build_mlp, dice_score, multiclass_dice_score

__all__ = [
    "Task",
    "planted_rank_task",
    "toy_segmentation_task",
    "segmentation_features",
    "pretrain_toy_model",
    "evaluate_segmentation",
    "save_model",
    "load_model",
    "task_to_json",
    "task_from_json",
    "N_FEATURES",
]

GRID = 32
N_FOURIER = 8
N_FEATURES = 3 + N_FOURIER
QUERY_COLUMNS = 256
QUERY_IMAGES = 8
FEATURE_SEED = 20240917


class Task:
    """Support/query split of one few-shot problem.

    The query pair is only reachable through :meth:`query`, which counts
    reads so callers can prove it was not consulted during training.
    """

    def __init__(self, support_x, support_y, query_x, query_y, loss_kind="mse", K=1, meta=None):
        if loss_kind not in ("mse", "soft_dice", "multiclass_dice"):
            raise ParameterError(f"unknown loss kind {loss_kind!r}")
        if support_x.shape[1] != support_y.shape[1] or query_x.shape[1] != query_y.shape[1]:
            raise ShapeError("x/y column counts differ")
        self.support_x = support_x
        self.support_y = support_y
        self._query = (query_x, query_y)
        self.loss_kind = loss_kind
        self.K = K
        self.meta = dict(meta or {})
        self.query_reads = 0

    def __repr__(self):
        return (f"Task(loss_kind={self.loss_kind!r}, K={self.K}, support={self.support_x.shape}, "
                f"query={self._query[0].shape})")

    def query(self):
        self.query_reads += 1
        return self._query

    def peek_query(self):
        """Query pair without counting (serialization and tests only)."""
        return self._query

    @property
    def columns_per_example(self):
        return int(self.meta.get("pixels_per_image", 1))

    def support_batches(self, batch_size=None):
        """Column slices of the support set; ``None`` means one full batch."""
        per = self.columns_per_example
        n = self.support_x.shape[1] // per
        size = n if batch_size is None else batch_size
        for start in range(0, n, size):
            sl = slice(start * per, min(n, start + size) * per)
            yield self.support_x[:, sl], self.support_y[:, sl]


# ---------------------------------------------------------------- planted rank


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(random_gaussian(rng, rows, cols))
    return q * np.sign(np.diag(r))[None, :]


def planted_rank_task(rng, m, n, r_star, K, noise_sigma, query_size=QUERY_COLUMNS, spectrum="flat"):
    """Regression task whose ideal adapter is a rank-``r_star`` increment.

    Returns ``(task, W0)``. ``dW* = U diag(s) V^T`` with orthonormal ``U``,
    ``V`` and ``s = 1`` (``spectrum="flat"``) or ``s_i = 2**-i``
    (``spectrum="decay"``). ``r_star = 0`` gives a zero increment.
    """
    if not 0 <= r_star <= min(m, n):
        raise ParameterError(f"r_star must lie in [0, {min(m, n)}], got {r_star}")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    W0 = random_gaussian(rng.split("W0"), m, n, 1.0 / np.sqrt(n))
    if r_star:
        U = _orthonormal(rng.split("U"), m, r_star)
        V = _orthonormal(rng.split("V"), n, r_star)
        if spectrum == "flat":
            s = np.ones(r_star)
        elif spectrum == "decay":
            s = 2.0 ** -np.arange(r_star)
        else:
            raise ParameterError(f"unknown spectrum {spectrum!r}")
        d_star = (U * s[None, :]) @ V.T
    else:
        d_star = np.zeros((m, n))
    W = W0 + d_star

    def draw(stream, cols):
        g = rng.split(stream)
        x = random_gaussian(g.split("x"), n, cols)
        y = W @ x
        if noise_sigma > 0:
            y = y + random_gaussian(g.split("noise"), m, cols, noise_sigma)
        return x, y

    sx, sy = draw("support", K)
    qx, qy = draw("query", query_size)
    meta = {
        "family": "planted_rank",
        "planted_rank": r_star,
        "noise_sigma": noise_sigma,
        "spectrum": spectrum,
        "task_mode": "base",
        "delta_star": d_star,
    }
    return Task(sx, sy, qx, qy, loss_kind="mse", K=K, meta=meta), W0


# ---------------------------------------------------------------- segmentation


def _fourier_params():
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(FEATURE_SEED)))
    omega = g.normal(0.0, 3.0, size=(N_FOURIER, 3))
    phase = g.uniform(0.0, 2 * np.pi, size=N_FOURIER)
    return omega, phase


_OMEGA, _PHASE = _fourier_params()
_YY, _XX = np.mgrid[0:GRID, 0:GRID].astype(np.float64)


def segmentation_features(image):
    """Per-pixel feature columns: intensity, x/32, y/32 and 8 fixed Fourier features."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (GRID, GRID):
        raise ShapeError(f"expected a {GRID}x{GRID} image, got {image.shape}")
    base = np.stack([image.ravel(), _XX.ravel() / GRID, _YY.ravel() / GRID])
    rff = np.cos(_OMEGA @ base + _PHASE[:, None])
    return np.vstack([base, rff])


def _blob(gen, kind):
    cx, cy = gen.uniform(5.0, GRID - 5.0, size=2)
    if kind == "base":
        sx = sy = gen.uniform(2.0, 4.0)
        theta = 0.0
        amp = gen.uniform(0.8, 1.2)
    else:
        sx = gen.uniform(1.5, 2.5)
        sy = gen.uniform(3.5, 6.0)
        theta = gen.uniform(0.0, np.pi)
        amp = gen.uniform(0.35, 0.6)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = _XX - cx, _YY - cy
    u = c * dx + s * dy
    w = -s * dx + c * dy
    shape = np.exp(-0.5 * ((u / sx) ** 2 + (w / sy) ** 2))
    return amp, shape


def _segmentation_image(gen, mode, noise, n_classes):
    """One (image, label) pair; label is an int map of class ids."""
    while True:
        intensity = np.zeros((GRID, GRID))
        label = np.zeros((GRID, GRID), dtype=int)
        if n_classes > 2:
            # each blob carries a class; bright base-type blobs are class C-1
            kinds = [("novel", 1 + gen.integers(0, n_classes - 2)) for _ in range(gen.integers(1, 3))]
            kinds.append(("base", n_classes - 1))
        elif mode == "base":
            kinds = [("base", 1) for _ in range(gen.integers(1, 4))]
        else:
            kinds = [("novel", 1) for _ in range(gen.integers(1, 3))]
            kinds += [("base", 0) for _ in range(gen.integers(0, 2))]
        for kind, cls in kinds:
            amp, shape = _blob(gen, kind)
            intensity += amp * shape
            if cls:
                label[shape >= 0.5] = cls
        intensity += gen.normal(0.0, noise, size=(GRID, GRID))
        fg = label > 0
        if fg.any() and not fg.all():
            return intensity, label


def toy_segmentation_task(rng, K=5, mode="base", n_query=QUERY_IMAGES, noise=0.1, n_classes=2):
    """Few-shot segmentation task: ``K`` support images and ``n_query`` query images.

    Columns of ``support_x`` are pixels (1024 per image, image-major).
    Binary tasks use a 1-row target and soft Dice; ``n_classes > 2`` gives
    one-hot targets and the mean per-class soft Dice.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if mode not in ("base", "novel"):
        raise ParameterError(f"unknown task mode {mode!r}")
    if n_classes < 2:
        raise ParameterError(f"n_classes must be >= 2, got {n_classes}")

    def draw(stream, count):
        gen = rng.split(stream).generator
        xs, ys = [], []
        for _ in range(count):
            image, label = _segmentation_image(gen, mode, noise, n_classes)
            xs.append(segmentation_features(image))
            if n_classes == 2:
                ys.append((label > 0).astype(np.float64).reshape(1, -1))
            else:
                ys.append(np.eye(n_classes)[:, label.ravel()])
        return np.hstack(xs), np.hstack(ys)

    sx, sy = draw("support", K)
    qx, qy = draw("query", n_query)
    meta = {
        "family": "segmentation",
        "task_mode": mode,
        "grid": GRID,
        "pixels_per_image": GRID * GRID,
        "n_classes": n_classes,
        "noise": noise,
    }
    kind = "soft_dice" if n_classes == 2 else "multiclass_dice"
    return Task(sx, sy, qx, qy, loss_kind=kind, K=K, meta=meta)


def evaluate_segmentation(model, x, y, threshold=0.5, pixels_per_image=GRID * GRID):
    """Mean per-image Dice of ``model`` on stacked images."""
    pred, _ = model.forward(x)
    n = x.shape[1] // pixels_per_image
    scores = []
    for i in range(n):
        sl = slice(i * pixels_per_image, (i + 1) * pixels_per_image)
        if y.shape[0] == 1:
            scores.append(dice_score(pred[:, sl] >= threshold, y[:, sl]))
        else:
            scores.append(multiclass_dice_score(pred[:, sl], y[:, sl]))
    return float(np.mean(scores))


def pretrain_toy_model(rng, epochs=2, n_examples=2048, model_kind="mlp", hidden=32,
                       n_classes=2, batch_images=8, lr=3e-3):
    """Fully train a toy model on base-mode images; the result stands in for a
    pre-trained foundation model."""
    # local import: the optimizer module sits above the task generators
    from .prox_optimizer import AdamWConfig, OptimizerState, adamw_step
    from .model_kit import multiclass_dice_loss, soft_dice_loss

    out = "sigmoid" if n_classes == 2 else "softmax"
    n_out = 1 if n_classes == 2 else n_classes
    if model_kind == "mlp":
        model = build_mlp(rng.split("init"), N_FEATURES, hidden, n_out, out)
    elif model_kind == "attention":
        model = build_attention_model(rng.split("init"), N_FEATURES, min(hidden, 32), n_out,
                                      seq_len=GRID * GRID, output=out)
    else:
        raise ParameterError(f"unknown model kind {model_kind!r}")
    data = toy_segmentation_task(rng.split("data"), K=n_examples, mode="base", n_query=1,
                                 n_classes=n_classes)
    loss_fn = soft_dice_loss if n_classes == 2 else multiclass_dice_loss
    state = OptimizerState(AdamWConfig(weight_decay=0.0))
    params = model.parameters()
    order_rng = rng.split("order").generator
    per = GRID * GRID
    for epoch in range(epochs):
        order = order_rng.permutation(n_examples)
        for start in range(0, n_examples, batch_images):
            idx = order[start:start + batch_images]
            cols = (idx[:, None] * per + np.arange(per)[None, :]).ravel()
            pred, cache = model.forward(data.support_x[:, cols])
            loss, g = loss_fn(pred, data.support_y[:, cols])
            if not np.isfinite(loss):
                raise TrainingAborted("pre-training diverged", layer=model.first_nonfinite_layer(
                    data.support_x[:, cols]), epoch=epoch)
            grads = model.backward(cache, g)
            for name, p in params.items():
                adamw_step(state, name, p, grads[name], lr)
            model.touch()
    return model


def save_model(path, model):
    """Write parameters to ``.npz`` (bit-exact)."""
    np.savez(path, **model.state_dict())


def load_model(path, model):
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files})
    return model


# ---------------------------------------------------------------- JSON


def _enc(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": list(obj.shape), "data": obj.ravel().tolist()}
    if isinstance(obj, dict):
        return {k: _enc(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _dec(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["data"], dtype=np.float64).reshape(obj["__array__"])
        return {k: _dec(v) for k, v in obj.items()}
    return obj


def task_to_json(task):
    qx, qy = task.peek_query()
    rec = {
        "loss_kind": task.loss_kind,
        "K": task.K,
        "meta": task.meta,
        "support_x": task.support_x,
        "support_y": task.support_y,
        "query_x": qx,
        "query_y": qy,
    }
    return json.dumps(_enc(rec), sort_keys=True)


def task_from_json(text):
    rec = _dec(json.loads(text))
    return Task(rec["support_x"], rec["support_y"], rec["query_x"], rec["query_y"],
                loss_kind=rec["loss_kind"], K=rec["K"], meta=rec["meta"])


def default_pretrained(seed=0, **kwargs):
    """Pre-trained model for ``seed``; deterministic, memoised per process."""
    key = (seed, tuple(sorted(kwargs.items())))
    if key not in _PRETRAINED:
        _PRETRAINED[key] = pretrain_toy_model(Rng(seed).split("pretrain"), **kwargs).state_dict()
    return _PRETRAINED[key]


_PRETRAINED = {}
