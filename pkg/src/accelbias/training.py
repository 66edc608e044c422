"""Supervised training of OFBENet.

MSE loss, Adam, learning-rate reduction on a validation plateau and early
stopping. With the default schedule the learning rate drops by ``lr_factor``
after ``lr_patience`` epochs without improvement, and training stops when a
further ``early_stop_patience`` epochs pass after a reduction without
improvement. ``strict_schedule=True`` instead stops after
``early_stop_patience`` non-improving epochs counted from the best epoch, so
with the default patiences the learning rate is never reduced.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _rng
from .errors import DivergenceError, InvalidArgumentError, NonFiniteGradientError
from .ofbenet import network
from .ofbenet.serialize import save_model

log = logging.getLogger(__name__)


def mse_loss(targets, predictions) -> float:
    """Mean over examples of the squared error norm (summed over the 3 axes)."""
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    p = np.asarray(predictions, dtype=float).reshape(-1, 3)
    if t.shape != p.shape:
        raise InvalidArgumentError(f"targets {t.shape} and predictions {p.shape} differ")
    if t.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    d = p - t
    return float(np.einsum("ij,ij->", d, d) / t.shape[0])


def mse_grad(targets, predictions):
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    p = np.asarray(predictions, dtype=float).reshape(-1, 3)
    return 2.0 * (p - t) / t.shape[0]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    lr_factor: float = 0.2
    lr_patience: int = 15
    early_stop_patience: int = 5
    max_epochs: int = 300
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_rel_improvement: float = 1e-4
    strict_schedule: bool = False

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise InvalidArgumentError("lr_factor must lie in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise InvalidArgumentError("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("batch size and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning rate must be positive")

    def to_dict(self):
        return asdict(self)


class PlateauSchedule:
    """Learning-rate reduction and early stopping driven by validation loss."""

    def __init__(self, config: TrainingConfig):
        self.config = config
        self.lr = config.learning_rate
        self.best = math.inf
        self.wait = 0
        self.since_reduction = None

    def is_improvement(self, loss):
        if not math.isfinite(self.best):
            return True
        return loss < self.best * (1.0 - self.config.min_rel_improvement)

    def update(self, loss):
        """Record one epoch; returns ``(improved, stop)`` and may lower ``lr``."""
        cfg = self.config
        if self.is_improvement(loss):
            self.best = loss
            self.wait = 0
            self.since_reduction = None
            return True, False
        self.wait += 1
        if cfg.strict_schedule:
            stop = self.wait >= cfg.early_stop_patience
            if not stop and self.wait % cfg.lr_patience == 0:
                self.lr *= cfg.lr_factor
            return False, stop
        if self.since_reduction is not None:
            self.since_reduction += 1
            if self.since_reduction >= cfg.early_stop_patience:
                return False, True
        if self.wait >= cfg.lr_patience:
            self.lr *= cfg.lr_factor
            self.wait = 0
            self.since_reduction = 0
        return False, False


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""

    def add(self, epoch, train_loss, val_loss, lr, seconds):
        self.epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr, "seconds": seconds}
        )

    @property
    def learning_rates(self):
        return [e["lr"] for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_loss"]), repr(e["lr"]), f"{e['seconds']:.3f}"])

    def summary(self):
        """Everything except wall times, so the summary is reproducible."""
        return {
            "n_epochs": len(self.epochs),
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "train_loss": [e["train_loss"] for e in self.epochs],
            "val_loss": [e["val_loss"] for e in self.epochs],
            "lr": self.learning_rates,
        }


def evaluate_loss(params, net_config, x, y, batch_size=64):
    return mse_loss(y, network.predict(params, x, net_config, batch_size))


def _copy(params):
    return OrderedDict((k, v.copy()) for k, v in params.items())


def train(
    params,
    net_config,
    train_x,
    train_y,
    val_x,
    val_y,
    config: TrainingConfig | None = None,
    checkpoint_path=None,
    progress=None,
):
    """Fit ``params`` and return ``(best_params, TrainingLog)``.

    ``train_x`` is ``(N, T, 3)``, ``train_y`` is ``(N, 3)``. The returned
    parameters are those of the epoch with the lowest validation loss. When
    ``checkpoint_path`` is set the best parameters are written there each
    time they improve.
    """
    config = config or TrainingConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise InvalidArgumentError("training and validation sets must be non-empty")
    if train_x.shape[1:] != val_x.shape[1:]:
        raise InvalidArgumentError(f"window shapes differ: {train_x.shape[1:]} vs {val_x.shape[1:]}")
    network.check_params(params, net_config)

    params = _copy(params)
    shuffle_rng = _rng.make_rng(_rng.derive_seed(config.seed, _rng.SHUFFLE))
    dropout_rng = _rng.make_rng(_rng.derive_seed(config.seed, _rng.DROPOUT))
    state = AdamState()
    schedule = PlateauSchedule(config)
    history = TrainingLog()
    best_params = _copy(params)
    last_checkpoint = None
    n = len(train_x)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = schedule.lr
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            pred, trace = network.forward(params, xb, net_config, "training", rng=dropout_rng)
            total += mse_loss(yb, pred) * len(idx)
            grads = network.backward(params, trace, mse_grad(yb, pred))
            adam_step(params, grads, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            params.update(trace.running_stats())
        train_loss = total / n
        val_loss = evaluate_loss(params, net_config, val_x, val_y)
        history.add(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, train_loss, val_loss, lr)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"validation loss became {val_loss} at epoch {epoch}", last_checkpoint)
        improved, stop = schedule.update(val_loss)
        if improved:
            best_params = _copy(params)
            history.best_epoch = epoch
            history.best_val_loss = val_loss
            if checkpoint_path is not None:
                save_model(checkpoint_path, best_params, net_config, seed=config.seed)
                last_checkpoint = str(checkpoint_path)
        history.stopped_epoch = epoch
        if stop:
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"
    log.debug("training stopped at epoch %d (best %d)", history.stopped_epoch, history.best_epoch)
    return best_params, history
