"""Offline training of the prior model and its per-cycle online adaptation."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBuffer, EmptyDataset
from .neural_model import (
    DEFAULT_HIDDEN,
    AdamState,
    DynamicsModel,
    NetworkParams,
    Normalizer,
    adam_step,
    fit_normalizer,
    forward,
    init_params,
    mae_loss_and_gradient,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptationConfig:
    alpha: float = 1e-3
    M: int = 16
    steps_per_cycle: int = 1

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.M < 1:
            raise ValueError("window length M must be >= 1")


class ExperienceBuffer:
    """Ring buffer of the last ``M`` (model input, observed q_dot increment) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._inputs: deque = deque(maxlen=capacity)
        self._deltas: deque = deque(maxlen=capacity)
        self._dts: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._inputs)

    def record(self, model_input, q_dot_prev, q_dot_next, dt: float) -> "ExperienceBuffer":
        if dt <= 0:
            raise ValueError("dt must be positive")
        self._inputs.append(np.array(model_input, dtype=float))
        self._deltas.append(np.asarray(q_dot_next, dtype=float) - np.asarray(q_dot_prev, dtype=float))
        self._dts.append(float(dt))
        return self

    def inputs(self) -> np.ndarray:
        return np.array(self._inputs)

    def deltas(self) -> np.ndarray:
        return np.array(self._deltas)

    def qddot_targets(self) -> np.ndarray:
        """Increments converted to the rad/s^2 units the network predicts."""
        return self.deltas() / np.array(self._dts)[:, None]

    def clear(self) -> None:
        self._inputs.clear()
        self._deltas.clear()
        self._dts.clear()


def record(buffer: ExperienceBuffer, model_input, q_dot_prev, q_dot_next, dt: float) -> ExperienceBuffer:
    return buffer.record(model_input, q_dot_prev, q_dot_next, dt)


def window_batch(model: DynamicsModel, buffer: ExperienceBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (inputs, targets) for the current window."""
    return (model.input_norm.normalize(buffer.inputs()),
            model.output_norm.normalize(buffer.qddot_targets()))


def adapt(model: DynamicsModel, buffer: ExperienceBuffer, cfg: AdaptationConfig) -> NetworkParams:
    """Gradient-descent refit of the prior on the recent window.

    Always starts from ``model.params`` (the prior) and never modifies it.
    """
    if len(buffer) == 0:
        raise EmptyBuffer("adaptation needs at least one recorded transition")
    x, y = window_batch(model, buffer)
    p = model.params
    for _ in range(cfg.steps_per_cycle):
        _, g = mae_loss_and_gradient(p, x, y)
        p = NetworkParams.from_tensors([t - cfg.alpha * gt for t, gt in zip(p.tensors(), g.tensors())])
    return p


# --- offline training -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.1
    scale_floor: float = 1e-3
    seed: int = 0


@dataclass
class TrainResult:
    model: DynamicsModel
    adam: AdamState
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _split_by_trajectory(traj: np.ndarray, val_fraction: float, rng: np.random.Generator):
    ids = np.unique(traj)
    if len(ids) < 2 or val_fraction <= 0:
        return np.ones(len(traj), bool), np.zeros(len(traj), bool)
    n_val = max(1, int(round(val_fraction * len(ids))))
    val_ids = rng.choice(ids, size=n_val, replace=False)
    val = np.isin(traj, val_ids)
    return ~val, val


def meta_train(dataset, cfg: TrainConfig = TrainConfig(), input_norm: Normalizer | None = None,
               resume: tuple[DynamicsModel, AdamState] | None = None) -> TrainResult:
    """Fit the prior by Adam on MAE over the whole dataset.

    ``dataset`` must provide ``model_inputs()``, ``qddot_targets()`` and
    ``trajectory_ids()`` (see :class:`metaguide.pipeline.Dataset`).  A split by
    whole trajectories holds out ``val_fraction`` for early stopping.
    ``resume`` continues from saved weights, normalizers and optimizer state.
    """
    X = np.asarray(dataset.model_inputs(), dtype=float)
    Y = np.asarray(dataset.qddot_targets(), dtype=float)
    if X.shape[0] == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    train_mask, val_mask = _split_by_trajectory(np.asarray(dataset.trajectory_ids()), cfg.val_fraction, rng)

    if resume is not None:
        in_norm, out_norm = resume[0].input_norm, resume[0].output_norm
    else:
        in_norm = input_norm if input_norm is not None else fit_normalizer(X[train_mask], cfg.scale_floor)
        out_norm = fit_normalizer(Y[train_mask], cfg.scale_floor)
    Xn, Yn = in_norm.normalize(X), out_norm.normalize(Y)
    Xt, Yt = Xn[train_mask], Yn[train_mask]
    Xv, Yv = Xn[val_mask], Yn[val_mask]

    if resume is not None:
        params = resume[0].params.copy()
        adam = resume[1] if resume[1] is not None else AdamState.for_params(params, lr=cfg.lr)
    else:
        dims = [X.shape[1], *cfg.hidden, Y.shape[1]]
        params = init_params(dims, rng)
        adam = AdamState.for_params(params, lr=cfg.lr)
    result = TrainResult(DynamicsModel(params, in_norm, out_norm), adam)

    best, best_params, stale = np.inf, params.copy(), 0
    n = Xt.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, g = mae_loss_and_gradient(params, Xt[idx], Yt[idx])
            adam_step(params, adam, g)
            total += loss * len(idx)
        result.train_loss.append(total / n)
        if len(Xv):
            val = float(np.abs(forward(params, Xv) - Yv).mean())
        else:
            val = result.train_loss[-1]
        result.val_loss.append(val)
        log.debug("epoch %d train %.5f val %.5f", epoch, result.train_loss[-1], val)
        if val < best:
            best, best_params, stale, result.best_epoch = val, params.copy(), 0, epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d, val %.5f)", epoch, result.best_epoch, best)
                break
    result.model = DynamicsModel(best_params, in_norm, out_norm,
                                 {"best_epoch": result.best_epoch, "val_mae": best})
    return result
