"""Learned environment model: (7 rules, threads, calls) -> (qps, p503).

Also holds the ridge / least-squares baseline and the standardized-MSE
metric used to compare the two.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import neural
from .datagen import INPUT_FIELDS, ScalerParams, fit_scaler, to_arrays
from .errors import FormatError, NumericError, ValidationError

log = logging.getLogger(__name__)

SURROGATE_DIMS = (9, 512, 512, 512, 2)
N_INPUTS = 9


@dataclass
class SurrogateModel:
    net: neural.DenseNet
    scaler: ScalerParams
    profile: str = ""

    def __post_init__(self):
        if self.net.layer_dims[0] != N_INPUTS or self.net.layer_dims[-1] != 2:
            raise ValidationError(f"surrogate net must map 9 -> 2, got {self.net.layer_dims}")


def concat_input(state: Sequence[float], actions: dict[str, float] | Sequence[float],
                 state_fields: Sequence[str] | None = None) -> np.ndarray:
    """Assemble the 9-slot model input from an agent state and its action(s).

    ``state_fields`` names the canonical slots the state occupies (defaults
    to the leading slots); ``actions`` maps slot names ("threads", "calls")
    to values, or is a plain sequence filling the remaining slots in order.
    Threads always land in slot 8 and calls in slot 9 whichever side of the
    concatenation supplied them.
    """
    state = np.asarray(state, dtype=float).reshape(-1)
    if isinstance(actions, dict):
        action_items = list(actions.items())
    else:
        action_items = None
    n_act = len(actions)
    if state.size + n_act != N_INPUTS:
        raise ValidationError(f"state ({state.size}) + actions ({n_act}) must total 9")
    if state_fields is None:
        state_fields = INPUT_FIELDS[: state.size]
    if len(state_fields) != state.size:
        raise ValidationError("state_fields length does not match state")
    if action_items is None:
        free = [f for f in INPUT_FIELDS if f not in state_fields]
        action_items = list(zip(free, actions))
    out = np.full(N_INPUTS, np.nan)
    for name, value in list(zip(state_fields, state)) + action_items:
        slot = INPUT_FIELDS.index(name)
        if not np.isnan(out[slot]):
            raise ValidationError(f"slot {name!r} filled twice")
        out[slot] = float(value)
    if np.isnan(out).any():
        raise ValidationError("input assembly left a slot empty")
    return out


def predict(model: SurrogateModel, i) -> np.ndarray:
    """Raw-unit prediction ``[qps, p503]`` (or ``(B, 2)`` for a batch), clamped."""
    x = np.asarray(i, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("surrogate input contains non-finite values")
    y, _ = neural.forward(model.net, model.scaler.scale_x(x))
    out = model.scaler.unscale_y(y)
    out[..., 0] = np.maximum(out[..., 0], 0.0)
    out[..., 1] = np.clip(out[..., 1], 0.0, 1.0)
    return out


def evaluate_mse(predict_fn: Callable[[np.ndarray], np.ndarray], test, scaler: ScalerParams) -> float:
    """Mean squared error over rows and both outputs, in standardized target units."""
    x, y = test if isinstance(test, tuple) else to_arrays(test)
    if len(x) == 0:
        raise ValidationError("empty test set")
    pred = np.asarray(predict_fn(x), dtype=float)
    diff = scaler.scale_y(pred) - scaler.scale_y(y)
    return float(np.mean(diff * diff))


@dataclass
class TrainResult:
    model: SurrogateModel
    train_curve: list[float] = field(default_factory=list)
    test_curve: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_test_mse: float = float("inf")


def train_surrogate(train, test, learning_rate: float = 1e-5, epochs: int = 200, batch_size: int = 64,
                    seed: int = 0, dims: Sequence[int] = SURROGATE_DIMS, profile: str = "") -> TrainResult:
    """Mini-batch Adam on standardized MSE, keeping the best-test-MSE snapshot."""
    xtr, ytr = train if isinstance(train, tuple) else to_arrays(train)
    xte, yte = test if isinstance(test, tuple) else to_arrays(test)
    if len(xtr) == 0 or len(xte) == 0:
        raise ValidationError("train and test splits must be non-empty")
    if not 0 < learning_rate < 1:
        raise ValidationError(f"learning_rate out of range: {learning_rate}")
    if epochs < 1 or batch_size < 1:
        raise ValidationError("epochs and batch_size must be >= 1")

    scaler = fit_scaler((xtr, ytr))
    ztr_x, ztr_y = scaler.scale_x(xtr), scaler.scale_y(ytr)
    zte_x, zte_y = scaler.scale_x(xte), scaler.scale_y(yte)

    ss = np.random.SeedSequence(seed)
    init_seed, shuffle_seed = (int(s) for s in ss.generate_state(2))
    net = neural.net_init(dims, init_seed)
    opt = neural.adam_init(net, learning_rate)
    rng = np.random.default_rng(shuffle_seed)

    result = TrainResult(model=SurrogateModel(net.copy(), scaler, profile))
    n = len(ztr_x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = neural.forward(net, ztr_x[idx])
            _, d = neural.mse(out, ztr_y[idx])
            neural.adam_step(net, neural.backward(net, cache, d), opt)
        train_mse = neural.mse(neural.forward(net, ztr_x)[0], ztr_y)[0]
        test_mse = neural.mse(neural.forward(net, zte_x)[0], zte_y)[0]
        if not np.isfinite(test_mse):
            raise NumericError(f"surrogate training diverged at epoch {epoch}")
        result.train_curve.append(train_mse)
        result.test_curve.append(test_mse)
        if test_mse < result.best_test_mse:
            result.best_test_mse = test_mse
            result.best_epoch = epoch
            result.model = SurrogateModel(net.copy(), scaler, profile)
        log.debug("epoch %d train %.5f test %.5f", epoch, train_mse, test_mse)
    return result


@dataclass
class RidgeModel:
    coef: np.ndarray  # (9, 2), raw units
    intercept: np.ndarray  # (2,)
    lam: float


def ridge_fit(train, lam: float) -> RidgeModel:
    """Closed-form ridge on standardized data; ``lam=0`` is ordinary least squares.

    Constant input columns carry no information and get a zero coefficient.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValidationError(f"lambda must be finite and >= 0, got {lam}")
    x, y = train if isinstance(train, tuple) else to_arrays(train)
    if len(x) < 10:
        raise ValidationError(f"ridge needs >= 10 rows, got {len(x)}")
    scaler = fit_scaler((x, y))
    live = x.std(axis=0) > 0
    zx = scaler.scale_x(x)[:, live]
    zy = scaler.scale_y(y)
    gram = zx.T @ zx + lam * np.eye(zx.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise NumericError("normal matrix is singular at lambda=0; use lambda > 0")
    beta_live = np.linalg.solve(gram, zx.T @ zy)
    beta = np.zeros((x.shape[1], y.shape[1]))
    beta[live] = beta_live
    coef = beta / scaler.input_std[:, None] * scaler.output_std[None, :]
    intercept = scaler.output_mean - scaler.input_mean @ coef
    return RidgeModel(coef, intercept, float(lam))


def ridge_predict(model: RidgeModel, i) -> np.ndarray:
    return np.asarray(i, dtype=float) @ model.coef + model.intercept


def model_to_dict(model: SurrogateModel) -> dict:
    doc = neural.net_to_dict(model.net)
    doc["scaler"] = model.scaler.to_dict()
    doc["profile"] = model.profile
    return doc


def save_model(model: SurrogateModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def model_from_dict(doc: dict) -> SurrogateModel:
    net = neural.net_from_dict(doc)
    if "scaler" not in doc:
        raise FormatError("weight file has no 'scaler' block")
    scaler = ScalerParams.from_dict(doc["scaler"])
    try:
        return SurrogateModel(net, scaler, str(doc.get("profile", "")))
    except ValidationError as e:
        raise FormatError(str(e)) from None


def load_model(path) -> SurrogateModel:
    return model_from_dict(neural.load_json(path))
