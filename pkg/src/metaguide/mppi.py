"""Sampling-based path-integral controller driving the learned dynamics model.

One control cycle: adapt the model on recent experience, perturb the current
plan with Gaussian noise, roll every sample through the model, weight samples
by ``exp(-S'/lambda)`` with ``lambda`` proportional to the cost spread, and
move the plan by the weighted noise average.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engagement import A_MAX, STATE_FEATURES, ControlCommand
from .meta import AdaptationConfig, ExperienceBuffer, adapt
from .neural_model import DynamicsModel, NetworkParams

_IX = {k: i for i, k in enumerate(STATE_FEATURES)}
I_R, I_RD = _IX["R"], _IX["R_dot"]
I_TH, I_PH = _IX["theta_L"], _IX["phi_L"]
I_THD, I_PHD = _IX["theta_L_dot"], _IX["phi_L_dot"]


@dataclass(frozen=True)
class CostConfig:
    """Weights of the quadratic LOS tracking cost.

    With ``rate_shaping == 0`` and ``tgo_scaling`` off the state cost is
    ``K1 . e^2 + K2 . rate^2`` (``e`` = LOS angle error).  ``rate_shaping = n``
    replaces the rate by its error against the reference
    ``-n e / max(t_go, n tau_min)``, which drives the LOS error to zero as
    ``t_go^n``.  ``tgo_scaling`` multiplies the rate error by ``t_go`` so the
    term is the LOS drift accumulated before intercept (radians); ``tgo_floor``
    keeps the rate weighted in the last moments before intercept.
    """

    K1: tuple[float, float] = (0.6, 0.5)
    K2: tuple[float, float] = (3.0, 2.0)
    lambda_star: float = 1.0
    control_penalty: float = 0.02
    theta_LD: float = -0.6
    phi_LD: float = 0.8
    terminal_weight: float = 10.0
    rate_shaping: float = 3.0
    tau_min: float = 0.8
    tgo_scaling: bool = True
    tgo_floor: float = 0.0
    tgo_max: float = 20.0
    closing_floor: float = 10.0

    def __post_init__(self):
        if min(*self.K1, *self.K2) < 0 or self.terminal_weight < 0 or self.control_penalty < 0:
            raise ValueError("cost weights must be non-negative")
        if self.lambda_star <= 0:
            raise ValueError("lambda_star must be positive")

    @classmethod
    def plain(cls, **kw) -> "CostConfig":
        """Unshaped quadratic cost: angle error and raw LOS rate."""
        return cls(rate_shaping=0.0, tgo_scaling=False, **kw)


@dataclass(frozen=True)
class MPPIConfig:
    n_samples: int = 1000
    horizon: int = 3
    sigma: tuple[float, float] = (20.0, 20.0)
    dt: float = 0.005
    a_max: float = A_MAX
    sigma_floor: float = 1e-6
    fixed_temperature: Optional[float] = None
    block_size: int = 250
    workers: int = 1

    def __post_init__(self):
        if self.n_samples < 1 or self.horizon < 1:
            raise ValueError("n_samples and horizon must be >= 1")
        if min(self.sigma) < 0:
            raise ValueError("sigma must be non-negative")


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def state_cost(state, cfg: CostConfig) -> np.ndarray:
    """Quadratic LOS-angle / LOS-rate cost of predicted states ``(..., 9)``."""
    x = np.asarray(state, dtype=float)
    e_th = x[..., I_TH] - cfg.theta_LD
    e_ph = _wrap(x[..., I_PH] - cfg.phi_LD)
    r_th = x[..., I_THD]
    r_ph = x[..., I_PHD]
    if cfg.rate_shaping or cfg.tgo_scaling:
        t_go = np.clip(x[..., I_R] / np.maximum(-x[..., I_RD], cfg.closing_floor), 0.0, cfg.tgo_max)
    if cfg.rate_shaping:
        n = cfg.rate_shaping
        denom = np.maximum(t_go, n * cfg.tau_min)
        r_th = r_th + n * e_th / denom
        r_ph = r_ph + n * e_ph / denom
    if cfg.tgo_scaling:
        scale = np.maximum(t_go, cfg.tgo_floor)
        r_th = r_th * scale
        r_ph = r_ph * scale
    return (cfg.K1[0] * e_th ** 2 + cfg.K1[1] * e_ph ** 2
            + cfg.K2[0] * r_th ** 2 + cfg.K2[1] * r_ph ** 2)


def running_cost(predicted_state, cfg: CostConfig, u=None, du=None, sigma=None, lam: float = 0.0):
    """State cost plus the control/noise coupling ``lam * p * u^T Sigma^-1 du``."""
    c = state_cost(predicted_state, cfg)
    if u is not None and du is not None and lam and cfg.control_penalty:
        inv = 1.0 / np.square(np.asarray(sigma, dtype=float))
        c = c + lam * cfg.control_penalty * np.sum(np.asarray(u) * inv * np.asarray(du), axis=-1)
    return c


def terminal_cost(predicted_state, cfg: CostConfig):
    return cfg.terminal_weight * state_cost(predicted_state, cfg)


# --- rollouts ---------------------------------------------------------------

def sample_noise(cfg: MPPIConfig, seed) -> np.ndarray:
    """Gaussian control perturbations, shape ``(N, T, 2)``, from one seeded stream."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cfg.n_samples, cfg.horizon, 2))
    return z * np.asarray(cfg.sigma, dtype=float)


def _rollout_block(model, params, x0, plan, noise, cfg: MPPIConfig, cost: CostConfig, lam):
    n, T = noise.shape[0], noise.shape[1]
    x = np.repeat(x0[None, :], n, axis=0)
    S = np.zeros(n)
    inv = 1.0 / np.square(np.maximum(np.asarray(cfg.sigma, dtype=float), 1e-150))
    dt = cfg.dt
    for t in range(T):
        u = plan[t]
        du = noise[:, t, :]
        v = np.clip(u + du, -cfg.a_max, cfg.a_max)
        qdd = model.qddot(np.concatenate([x, v], axis=1), params)
        x_new = x.copy()
        x_new[:, I_TH] += x[:, I_THD] * dt
        x_new[:, I_PH] += x[:, I_PHD] * dt
        x_new[:, I_THD] += qdd[:, 0] * dt
        x_new[:, I_PHD] += qdd[:, 1] * dt
        x_new[:, I_R] += x[:, I_RD] * dt
        x = x_new
        S += state_cost(x, cost)
        if lam and cost.control_penalty:
            S += lam * cost.control_penalty * (du @ (u * inv))
    S += terminal_cost(x, cost)
    return S


def rollout_costs(model, params, obs_state, plan, noise, cfg: MPPIConfig, cost: CostConfig,
                  lam: float = 0.0, workers: Optional[int] = None) -> np.ndarray:
    """Total cost of every perturbed rollout.

    Samples are evaluated in fixed blocks of ``cfg.block_size`` so the result is
    bit-identical for any ``workers`` count.
    """
    x0 = np.asarray(obs_state, dtype=float)
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (noise.shape[1], 2):
        raise ValueError(f"plan shape {plan.shape} does not match noise {noise.shape}")
    n = noise.shape[0]
    bs = max(1, cfg.block_size)
    blocks = [(i, min(i + bs, n)) for i in range(0, n, bs)]
    out = np.empty(n)
    workers = cfg.workers if workers is None else workers

    def run(b):
        lo, hi = b
        out[lo:hi] = _rollout_block(model, params, x0, plan, noise[lo:hi], cfg, cost, lam)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(run, blocks))
    else:
        for b in blocks:
            run(b)
    return out


# --- weighting and plan update ---------------------------------------------------

def adaptive_temperature(costs_shifted, lambda_star: float, sigma_floor: float = 1e-6) -> float:
    """``lambda_star`` times the population standard deviation of the costs."""
    sd = float(np.std(np.asarray(costs_shifted, dtype=float)))
    return lambda_star * max(sd, sigma_floor)


def importance_weights(costs, lambda_star: float = 1.0, sigma_floor: float = 1e-6,
                       temperature: Optional[float] = None):
    """Softmax weights of the min-shifted costs. Returns ``(weights, lambda)``.

    ``temperature`` fixes lambda; otherwise it adapts to the cost spread.
    """
    S = np.asarray(costs, dtype=float)
    Sp = S - S.min()
    lam = adaptive_temperature(Sp, lambda_star, sigma_floor) if temperature is None else float(temperature)
    e = np.exp(-Sp / lam)
    eta = np.sum(e.astype(np.longdouble))
    w = (e / eta).astype(float)
    return w, lam


def update_plan(plan, noise, weights, a_max: float = A_MAX) -> np.ndarray:
    plan = np.asarray(plan, dtype=float)
    step = np.einsum("n,ntd->td", np.asarray(weights, dtype=float), noise)
    return np.clip(plan + step, -a_max, a_max)


def shift_plan(plan) -> tuple[ControlCommand, np.ndarray]:
    """Pop ``u_0`` for execution; the new last slot repeats the old last command."""
    plan = np.asarray(plan, dtype=float)
    u0 = ControlCommand(float(plan[0, 0]), float(plan[0, 1]))
    new = np.concatenate([plan[1:], plan[-1:]], axis=0)
    return u0, new


# --- control cycle ----------------------------------------------------------------

@dataclass(frozen=True)
class ControllerConfig:
    mppi: MPPIConfig = MPPIConfig()
    cost: CostConfig = CostConfig()
    adaptation: AdaptationConfig = AdaptationConfig()
    adapt: bool = True


@dataclass
class ControlPlan:
    u: np.ndarray
    temperature: float = 0.0

    @classmethod
    def zeros(cls, horizon: int) -> "ControlPlan":
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        return cls(np.zeros((horizon, 2)))

    @property
    def horizon(self) -> int:
        return self.u.shape[0]


@dataclass
class CycleResult:
    command: ControlCommand
    plan: ControlPlan
    params: NetworkParams
    diagnostics: dict = field(default_factory=dict)


def control_cycle(obs_state, model: DynamicsModel, buffer: ExperienceBuffer, plan: ControlPlan,
                  cfg: ControllerConfig, seed,
                  adapt_fn: Callable = adapt) -> CycleResult:
    """One receding-horizon step: adapt, sample, roll out, weight, update, shift."""
    mp = cfg.mppi
    if cfg.adapt and len(buffer):
        params = adapt_fn(model, buffer, cfg.adaptation)
    else:
        params = model.params
    noise = sample_noise(mp, seed)
    lam_prev = plan.temperature if mp.fixed_temperature is None else mp.fixed_temperature
    S = rollout_costs(model, params, obs_state, plan.u, noise, mp, cfg.cost, lam_prev)
    w, lam = importance_weights(S, cfg.cost.lambda_star, mp.sigma_floor, mp.fixed_temperature)
    u = update_plan(plan.u, noise, w, mp.a_max)
    cmd, shifted = shift_plan(u)
    diag = {
        "lambda": lam,
        "cost_min": float(S.min()),
        "cost_mean": float(S.mean()),
        "ess": float(1.0 / np.sum(w * w)),
    }
    return CycleResult(cmd, ControlPlan(shifted, lam), params, diag)


def model_input(obs_features, u) -> np.ndarray:
    return np.concatenate([np.asarray(obs_features, dtype=float), np.asarray(u, dtype=float)])


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w)) if math.isfinite(w.sum()) else 0.0
