"""Reference feature-map classifier: flatten -> tanh hidden layer -> sigmoid.

Trained with mini-batch SGD with momentum on binary cross-entropy. Any
object with ``fit(X, y, X_val=None, y_val=None)`` and ``predict_proba(X)``
can stand in for it in the search and prediction code.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from cnnforge.errors import ContractError, InputError
from cnnforge.imaging import LABELS

FULL_SCALE_MAX_EPOCHS = 900
MODEL_FORMAT = "cnnforge-model"
MODEL_VERSION = 1


class FeatureClassifier(Protocol):
    def fit(self, X, y, X_val=None, y_val=None): ...

    def predict_proba(self, X) -> np.ndarray: ...


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 3e-4
    max_epochs: int = 50
    momentum: float = 0.9
    rng_seed: int = 0
    hidden_units: int = 64
    early_stop_patience: int = 20

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.hidden_units < 1:
            raise ContractError("hidden_units must be >= 1")


@dataclass
class Model:
    input_shape: tuple
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)

    PARAMS = ("W1", "b1", "W2", "b2")

    @property
    def n_inputs(self):
        return int(np.prod(self.input_shape))

    def params(self):
        return {k: getattr(self, k) for k in self.PARAMS}

    def logits(self, X):
        X = self._flatten(X)
        return np.tanh(X @ self.W1 + self.b1) @ self.W2 + self.b2

    def predict_proba(self, X):
        return _sigmoid(self.logits(X))

    def _flatten(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and X.shape[1] == self.n_inputs:
            return X
        if X.shape[-len(self.input_shape):] != tuple(self.input_shape):
            raise ContractError(f"input shape {X.shape} does not match model input {tuple(self.input_shape)}")
        return X.reshape(-1, self.n_inputs)


@dataclass(frozen=True)
class Classification:
    lesion_id: str
    template_name: str
    p_class1: float

    @property
    def hard_label(self):
        return "class1" if self.p_class1 >= 0.5 else "class2"


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def init_model(input_shape, cfg=None, rng=None):
    """Glorot-uniform weights, zero biases."""
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    d = int(np.prod(input_shape))
    h = cfg.hidden_units
    lim1 = math.sqrt(6.0 / (d + h))
    lim2 = math.sqrt(6.0 / (h + 1))
    return Model(
        tuple(input_shape),
        rng.uniform(-lim1, lim1, (d, h)),
        np.zeros(h),
        rng.uniform(-lim2, lim2, h),
        np.zeros(()),
        cfg,
    )


def zero_model(input_shape, hidden_units=64):
    d = int(np.prod(input_shape))
    return Model(tuple(input_shape), np.zeros((d, hidden_units)), np.zeros(hidden_units),
                 np.zeros(hidden_units), np.zeros(()))


def bce(model, X, y):
    z = model.logits(X)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grad(model, X, y):
    """Mean binary cross-entropy and its gradient w.r.t. every parameter."""
    X = model._flatten(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    hidden = np.tanh(X @ model.W1 + model.b1)
    z = hidden @ model.W2 + model.b2
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (_sigmoid(z) - y) / n
    dpre = np.outer(dz, model.W2) * (1.0 - hidden * hidden)
    grads = {
        "W1": X.T @ dpre,
        "b1": dpre.sum(axis=0),
        "W2": hidden.T @ dz,
        "b2": np.asarray(dz.sum()),
    }
    return loss, grads


def _as_targets(labels):
    y = np.asarray([1.0 if (lab == "class1" or lab == 1 or lab is True) else 0.0 for lab in labels])
    return y


def train_arrays(X, y, cfg=None, X_val=None, y_val=None):
    """Fit on stacked maps ``X`` (n, H, W) with targets ``y`` (1 = class1)."""
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ContractError("empty training set")
    if len(np.unique(y)) < 2:
        raise ContractError("degenerate training set: a single class is present")
    rng = np.random.default_rng(cfg.rng_seed)
    model = init_model(X.shape[1:], cfg, rng)
    Xf = X.reshape(X.shape[0], -1)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    has_val = X_val is not None and len(X_val) > 0
    best, best_val, stale = None, math.inf, 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(Xf))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(model, Xf[idx], y[idx])
            total += loss * len(idx)
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g
                setattr(model, k, getattr(model, k) + velocity[k])
        epoch_loss = total / len(Xf)
        if not math.isfinite(epoch_loss):
            raise ContractError(f"training diverged at epoch {epoch}")
        model.loss_curve.append(epoch_loss)
        if has_val:
            v = bce(model, X_val, y_val)
            model.val_curve.append(v)
            if v < best_val:
                best_val, stale = v, 0
                best = {k: p.copy() for k, p in model.params().items()}
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best is not None:
        for k, p in best.items():
            setattr(model, k, p)
    return model


def stack_features(features):
    return np.stack([f.values for f in features]).astype(np.float64)


def train(samples, cfg=None, val=None):
    """Fit on ``[(FeatureMap, label), ...]``; ``val`` (same form) enables early stopping."""
    if not samples:
        raise ContractError("empty training set")
    X = stack_features([f for f, _ in samples])
    y = _as_targets([lab for _, lab in samples])
    if val:
        Xv = stack_features([f for f, _ in val])
        yv = _as_targets([lab for _, lab in val])
        return train_arrays(X, y, cfg, Xv, yv)
    return train_arrays(X, y, cfg)


def predict(model, fmap):
    if fmap.values.shape != tuple(model.input_shape):
        raise ContractError(
            f"feature {fmap.values.shape} does not match model input {tuple(model.input_shape)}")
    p = float(model.predict_proba(fmap.values[None])[0])
    return Classification(fmap.lesion_id, fmap.template_name, p)


def numerical_gradient_check(model, sample, epsilon=1e-5, n_coords=64, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``sample`` is ``(x, label)``. Coordinates are drawn at random across all
    parameter arrays; relative error uses ``max(|a|, |n|, 1e-8)`` as scale.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-7, 1e-3]")
    x, label = sample
    X = np.asarray(x, dtype=np.float64)[None]
    y = _as_targets([label])
    _, grads = loss_and_grad(model, X, y)
    rng = np.random.default_rng(seed)
    names = list(model.PARAMS)
    sizes = np.array([getattr(model, k).size for k in names])
    worst = 0.0
    for flat in rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False):
        which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        offset = int(flat - (sizes[:which].sum() if which else 0))
        arr = getattr(model, names[which])
        view = arr.reshape(-1)
        orig = view[offset]
        view[offset] = orig + epsilon
        up = bce(model, X, y)
        view[offset] = orig - epsilon
        down = bce(model, X, y)
        view[offset] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[names[which]].reshape(-1)[offset]
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


class MLPClassifier:
    """``FeatureClassifier`` adapter around ``train_arrays``."""

    def __init__(self, cfg=None):
        self.cfg = cfg or TrainConfig()
        self.model = None

    def fit(self, X, y, X_val=None, y_val=None):
        self.model = train_arrays(X, y, self.cfg, X_val, y_val)
        return self

    def predict_proba(self, X):
        if self.model is None:
            raise ContractError("classifier is not fitted")
        return self.model.predict_proba(X)


def save_model(model, path):
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "config": asdict(model.config),
        "loss_curve": model.loss_curve,
        "val_curve": model.val_curve,
    }
    with Path(path).open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)),
                 **{k: np.asarray(v) for k, v in model.params().items()})


def load_model(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k: z[k].copy() for k in Model.PARAMS}
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot load model {path}: {exc}") from exc
    if meta.get("format") != MODEL_FORMAT or meta.get("version") != MODEL_VERSION:
        raise InputError(f"{path}: unsupported model format")
    return Model(tuple(meta["input_shape"]), config=TrainConfig(**meta["config"]),
                 loss_curve=meta["loss_curve"], val_curve=meta["val_curve"], **params)


def label_of(p):
    return LABELS[0] if p >= 0.5 else LABELS[1]
