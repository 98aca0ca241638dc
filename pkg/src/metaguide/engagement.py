"""Truth kinematics of the 3D interceptor/target engagement.

State is expressed in the rotating line-of-sight (LOS) frame: range ``R``,
LOS elevation/azimuth ``theta_L``/``phi_L``, and the heading angles of each
vehicle's velocity measured relative to the LOS frame.  Lateral accelerations
``a_ym`` (yaw plane) and ``a_zm`` (pitch plane) act normal to the velocity.

Conventions:
    angles [rad], range [m], speeds [m/s], accelerations [m/s^2], time [s].
    Gravity is not modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import SingularGeometry

A_MAX = 200.0
COS_EPS = 1e-6
R_EPS = 0.1
SUBSTEP_RANGE_FRACTION = 0.02
MAX_SUBSTEPS = 4096

# Feature order consumed by the neural dynamics model (controls appended after).
STATE_FEATURES = (
    "R",
    "R_dot",
    "theta_L",
    "phi_L",
    "theta_L_dot",
    "phi_L_dot",
    "V_M",
    "theta_m",
    "phi_m",
)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class EngagementState:
    R: float
    theta_L: float
    phi_L: float
    theta_m: float
    phi_m: float
    theta_t: float
    phi_t: float
    V_M: float
    V_T: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.R, self.theta_L, self.phi_L, self.theta_m, self.phi_m,
             self.theta_t, self.phi_t, self.V_M, self.V_T, self.t]
        )

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "EngagementState":
        return cls(*(float(v) for v in a))


class ControlCommand(NamedTuple):
    a_ym: float
    a_zm: float


class StateDerivative(NamedTuple):
    R_dot: float
    theta_L_dot: float
    phi_L_dot: float
    theta_m_dot: float
    phi_m_dot: float
    theta_t_dot: float
    phi_t_dot: float


@dataclass(frozen=True)
class ActuatorFault:
    """Loss-of-effectiveness fault: commands are scaled by ``eta`` on [t_start, t_end)."""

    eta: float = 1.0
    t_start: float = math.inf
    t_end: float = math.inf

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"actuator gain must be in (0, 1], got {self.eta}")
        if not self.t_start < self.t_end and math.isfinite(self.t_start):
            raise ValueError("fault window must satisfy t_start < t_end")

    def gain(self, t: float) -> float:
        return self.eta if self.t_start <= t < self.t_end else 1.0


NO_FAULT = ActuatorFault()


@dataclass(frozen=True)
class TargetManeuver:
    """Sinusoidal target acceleration ``amplitude * sin(angular_frequency * t)``."""

    amplitude_y: float = 0.0
    amplitude_z: float = 0.0
    angular_frequency: float = 1.0

    def __post_init__(self):
        if self.amplitude_y < 0 or self.amplitude_z < 0:
            raise ValueError("maneuver amplitudes must be non-negative")

    def accel(self, t: float) -> tuple[float, float]:
        s = math.sin(self.angular_frequency * t)
        return self.amplitude_y * s, self.amplitude_z * s


@dataclass(frozen=True)
class SpeedModel:
    """Boost-then-coast interceptor speed with parasite and induced drag.

    drag = drag_coeff_parasite * V^2 + drag_coeff_induced * |a|^2 / V^2
    """

    thrust_accel: float = 25.0
    T_B: float = 3.5
    drag_coeff_parasite: float = 1e-5
    drag_coeff_induced: float = 20.0
    V_min: float = 50.0

    def __post_init__(self):
        if self.T_B < 0 or self.drag_coeff_parasite < 0 or self.drag_coeff_induced < 0:
            raise ValueError("T_B and drag coefficients must be non-negative")
        if self.V_min <= 0:
            raise ValueError("V_min must be positive")


def kinematics_derivative(
    state: EngagementState,
    u: ControlCommand,
    target_accel: tuple[float, float],
    cos_eps: float = COS_EPS,
    r_eps: float = R_EPS,
) -> StateDerivative:
    """Time derivatives of the LOS-frame engagement state (speeds excluded)."""
    R = state.R
    cL = math.cos(state.theta_L)
    cm = math.cos(state.theta_m)
    ct = math.cos(state.theta_t)
    if R < r_eps or abs(cL) < cos_eps or abs(cm) < cos_eps or abs(ct) < cos_eps:
        raise SingularGeometry(
            f"R={R:.6g}, cos(theta_L)={cL:.3g}, cos(theta_m)={cm:.3g}, cos(theta_t)={ct:.3g}"
        )
    sL = math.sin(state.theta_L)
    sm, st = math.sin(state.theta_m), math.sin(state.theta_t)
    cpm, spm = math.cos(state.phi_m), math.sin(state.phi_m)
    cpt, spt = math.cos(state.phi_t), math.sin(state.phi_t)
    VM, VT = state.V_M, state.V_T
    a_yt, a_zt = target_accel

    R_dot = VT * ct * cpt - VM * cm * cpm
    thL_dot = (VT * st - VM * sm) / R
    phL_dot = (VT * ct * spt - VM * cm * spm) / (R * cL)

    thm_dot = u[1] / VM - phL_dot * sL * spm - thL_dot * cpm
    phm_dot = (
        u[0] / (VM * cm)
        + phL_dot * (sm / cm) * cpm * sL
        - thL_dot * (sm / cm) * spm
        - phL_dot * cL
    )
    tht_dot = a_zt / VT - phL_dot * sL * spt - thL_dot * cpt
    pht_dot = (
        a_yt / (VT * ct)
        + phL_dot * (st / ct) * cpt * sL
        - thL_dot * (st / ct) * spt
        - phL_dot * cL
    )
    return StateDerivative(R_dot, thL_dot, phL_dot, thm_dot, phm_dot, tht_dot, pht_dot)


def speed_derivative(state: EngagementState, u: ControlCommand, model: SpeedModel) -> float:
    V = state.V_M
    drag = model.drag_coeff_parasite * V * V + model.drag_coeff_induced * (
        u[0] * u[0] + u[1] * u[1]
    ) / (V * V)
    thrust = model.thrust_accel if state.t < model.T_B else 0.0
    dv = thrust - drag
    if V <= model.V_min and dv < 0.0:
        return 0.0
    return dv


def saturate(u: ControlCommand, a_max: float = A_MAX) -> ControlCommand:
    return ControlCommand(
        min(max(u[0], -a_max), a_max),
        min(max(u[1], -a_max), a_max),
    )


def apply_fault(
    u_c: ControlCommand, fault: ActuatorFault, t: float, a_max: float = A_MAX
) -> ControlCommand:
    """Actuator output for command ``u_c`` at time ``t``: fault gain, then clamp."""
    g = fault.gain(t)
    return saturate(ControlCommand(g * u_c[0], g * u_c[1]), a_max)


def relative_velocity_los(state: EngagementState) -> tuple[float, float, float]:
    """Target-minus-missile velocity in LOS axes; defined at any range."""
    ct, cm = math.cos(state.theta_t), math.cos(state.theta_m)
    VM, VT = state.V_M, state.V_T
    return (
        VT * ct * math.cos(state.phi_t) - VM * cm * math.cos(state.phi_m),
        VT * ct * math.sin(state.phi_t) - VM * cm * math.sin(state.phi_m),
        VT * math.sin(state.theta_t) - VM * math.sin(state.theta_m),
    )


def los_rates(state: EngagementState) -> tuple[float, float, float]:
    """(R_dot, theta_L_dot, phi_L_dot) from the current geometry."""
    d = kinematics_derivative(state, ControlCommand(0.0, 0.0), (0.0, 0.0))
    return d.R_dot, d.theta_L_dot, d.phi_L_dot


def _deriv_vec(y, t, V_T, u, maneuver, speed_model):
    s = EngagementState(y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7], V_T, t)
    d = kinematics_derivative(s, u, maneuver.accel(t))
    return (*d, speed_derivative(s, u, speed_model))


def _rk4(y0, k1, t0, h, VT, u, maneuver, speed_model):
    y = [a + 0.5 * h * b for a, b in zip(y0, k1)]
    k2 = _deriv_vec(y, t0 + 0.5 * h, VT, u, maneuver, speed_model)
    y = [a + 0.5 * h * b for a, b in zip(y0, k2)]
    k3 = _deriv_vec(y, t0 + 0.5 * h, VT, u, maneuver, speed_model)
    y = [a + h * b for a, b in zip(y0, k3)]
    k4 = _deriv_vec(y, t0 + h, VT, u, maneuver, speed_model)
    return [a + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(y0, k1, k2, k3, k4)]


def step(
    state: EngagementState,
    u_c: ControlCommand,
    fault: ActuatorFault,
    maneuver: TargetManeuver,
    speed_model: SpeedModel,
    dt: float,
    a_max: float = A_MAX,
) -> EngagementState:
    """Advance the truth state by ``dt`` with RK4.

    The actuator output (fault gain, then saturation) is evaluated at the
    start of the step and held constant over it.  Far from the target this is
    a single RK4 step; when the range would change by more than
    ``SUBSTEP_RANGE_FRACTION`` of itself the step is split into equal RK4
    substeps, since the ``R_dot / R`` terms of the LOS-frame equations turn
    stiff in the last metres before intercept.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = apply_fault(u_c, fault, state.t, a_max)
    y = (state.R, state.theta_L, state.phi_L, state.theta_m, state.phi_m,
         state.theta_t, state.phi_t, state.V_M)
    t0, VT = state.t, state.V_T
    k1 = _deriv_vec(y, t0, VT, u, maneuver, speed_model)
    n = 1
    if state.R > 0:
        n = min(MAX_SUBSTEPS, max(1, math.ceil(abs(k1[0]) * dt / (SUBSTEP_RANGE_FRACTION * state.R))))
    h = dt / n
    t = t0
    for i in range(n):
        if i:
            k1 = _deriv_vec(y, t, VT, u, maneuver, speed_model)
        y = _rk4(y, k1, t, h, VT, u, maneuver, speed_model)
        t = t0 + (i + 1) * h
    y1 = y
    return EngagementState(
        R=y1[0],
        theta_L=wrap_angle(y1[1]),
        phi_L=wrap_angle(y1[2]),
        theta_m=wrap_angle(y1[3]),
        phi_m=wrap_angle(y1[4]),
        theta_t=wrap_angle(y1[5]),
        phi_t=wrap_angle(y1[6]),
        V_M=max(y1[7], speed_model.V_min),
        V_T=VT,
        t=t0 + dt,
    )


# --- sensing -----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """Observation uncertainty.

    ``uncertainty_channels`` are multiplied by ``1 + uncertainty_amplitude*sin(t)``;
    LOS angles get Gaussian noise of ``los_angle_sigma``; LOS rates get Gaussian
    noise with standard deviation ``los_rate_rel_sigma * |rate|``.
    """

    uncertainty_amplitude: float = 0.0
    uncertainty_channels: tuple[str, ...] = ("R", "R_dot", "theta_m", "phi_m")
    los_angle_sigma: float = 0.0
    los_rate_rel_sigma: float = 0.0

    @classmethod
    def field_default(cls) -> "NoiseConfig":
        """Noise levels of the randomized Monte Carlo scenario."""
        return cls(uncertainty_amplitude=0.15, los_angle_sigma=0.008, los_rate_rel_sigma=0.01)

    @property
    def enabled(self) -> bool:
        return bool(self.uncertainty_amplitude or self.los_angle_sigma or self.los_rate_rel_sigma)


@dataclass(frozen=True)
class Observation:
    R: float
    R_dot: float
    theta_L: float
    phi_L: float
    theta_L_dot: float
    phi_L_dot: float
    V_M: float
    theta_m: float
    phi_m: float
    t: float

    def features(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in STATE_FEATURES])


def observe(state: EngagementState, noise_cfg: NoiseConfig | None = None, rng_seed=None) -> Observation:
    """Measured engagement channels; deterministic for a given ``rng_seed``."""
    R_dot, thL_dot, phL_dot = los_rates(state)
    vals = {
        "R": state.R,
        "R_dot": R_dot,
        "theta_L": state.theta_L,
        "phi_L": state.phi_L,
        "theta_L_dot": thL_dot,
        "phi_L_dot": phL_dot,
        "V_M": state.V_M,
        "theta_m": state.theta_m,
        "phi_m": state.phi_m,
    }
    if noise_cfg is not None and noise_cfg.enabled:
        rng = np.random.default_rng(rng_seed)
        z = rng.standard_normal(4)
        gain = 1.0 + noise_cfg.uncertainty_amplitude * math.sin(state.t)
        for k in noise_cfg.uncertainty_channels:
            vals[k] *= gain
        vals["theta_L"] += noise_cfg.los_angle_sigma * z[0]
        vals["phi_L"] += noise_cfg.los_angle_sigma * z[1]
        vals["theta_L_dot"] += noise_cfg.los_rate_rel_sigma * abs(vals["theta_L_dot"]) * z[2]
        vals["phi_L_dot"] += noise_cfg.los_rate_rel_sigma * abs(vals["phi_L_dot"]) * z[3]
    return Observation(t=state.t, **vals)


def impact_los_angles(state: EngagementState) -> tuple[float, float]:
    """LOS angles of the closing direction (the LOS an on-course hit would have).

    Equal to (theta_L, phi_L) when the LOS rates are zero; unlike the raw LOS it
    stays well defined as the range passes through its minimum.
    """
    cL, sL = math.cos(state.theta_L), math.sin(state.theta_L)
    cp, sp = math.cos(state.phi_L), math.sin(state.phi_L)
    e_L = (cL * cp, cL * sp, sL)
    y_L = (-sp, cp, 0.0)
    z_L = (-sL * cp, -sL * sp, cL)
    a, b, c = relative_velocity_los(state)
    v = [-(a * e + b * y + c * z) for e, y, z in zip(e_L, y_L, z_L)]
    n = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    return math.asin(max(-1.0, min(1.0, v[2] / n))), math.atan2(v[1], v[0])


# --- termination -----------------------------------------------------------------

class Continue(NamedTuple):
    pass


class Hit(NamedTuple):
    miss_distance: float
    t: float
    theta_LT: float
    phi_LT: float


class Diverged(NamedTuple):
    reason: str
    t: float


def closest_approach(ts: Sequence[float], rs: Sequence[float]) -> tuple[float, float]:
    """(t*, R_min) from a parabola through the last three squared ranges.

    R^2 is exactly quadratic in time for unaccelerated relative motion, so
    fitting it (rather than R) stays accurate for near-zero miss distances.
    """
    t = np.asarray(ts[-3:], dtype=float)
    r2 = np.asarray(rs[-3:], dtype=float) ** 2
    if len(t) < 3:
        i = int(np.argmin(r2))
        return float(t[i]), float(math.sqrt(r2[i]))
    c2, c1, c0 = np.polyfit(t - t[1], r2, 2)
    if c2 <= 0:
        i = int(np.argmin(r2))
        return float(t[i]), float(math.sqrt(r2[i]))
    tau = min(max(-c1 / (2 * c2), t[0] - t[1]), t[2] - t[1])
    rmin2 = c0 + c1 * tau + c2 * tau * tau
    rmin2 = min(max(rmin2, 0.0), float(r2.min()))
    return float(t[1] + tau), math.sqrt(rmin2)


@dataclass
class TerminalMonitor:
    """Tracks the range history and decides when an engagement is over.

    ``Hit`` fires when ``R <= R_hit`` or once ``R`` has grown for ``k_increase``
    consecutive steps past its minimum.  ``Diverged`` fires on ``R > R_max`` or
    ``t > t_max``.
    """

    R_hit: float = 0.1
    R_max: float = 20000.0
    t_max: float = 15.0
    k_increase: int = 1
    _ts: list = field(default_factory=list)
    _rs: list = field(default_factory=list)
    _states: list = field(default_factory=list)
    _rising: int = 0

    def check(self, state: EngagementState):
        if self._rs and state.R > self._rs[-1]:
            self._rising += 1
        else:
            self._rising = 0
        self._ts.append(state.t)
        self._rs.append(state.R)
        self._states.append(state)
        if len(self._states) > self.k_increase + 3:
            del self._ts[0], self._rs[0], self._states[0]

        if state.R <= self.R_hit:
            th, ph = impact_los_angles(state)
            return Hit(state.R, state.t, th, ph)
        if self._rising >= self.k_increase and len(self._rs) > self.k_increase + 1:
            j = len(self._rs) - 1 - self.k_increase  # index of the sampled minimum
            lo = max(j - 1, 0)
            t_star, miss = closest_approach(self._ts[lo:j + 2], self._rs[lo:j + 2])
            th, ph = impact_los_angles(self._states[j])
            return Hit(miss, t_star, th, ph)
        if state.R > self.R_max:
            return Diverged("range ceiling exceeded", state.t)
        if state.t > self.t_max:
            return Diverged("time limit exceeded", state.t)
        return Continue()

    def finish_singular(self):
        """Terminal verdict when integration broke down at very short range.

        The miss is the straight-line closest approach from the last valid
        state; over the few milliseconds left the accelerations move the
        relative position by well under a centimetre.
        """
        last = self._states[-1]
        try:
            t_go, miss = straight_line_miss(last)
        except SingularGeometry:
            t_star, miss = closest_approach(self._ts, self._rs)
            t_go = t_star - last.t
        th, ph = impact_los_angles(last)
        return Hit(miss, last.t + t_go, th, ph)


def straight_line_miss(state: EngagementState) -> tuple[float, float]:
    """(time to go, miss distance) of unaccelerated relative motion from ``state``.

    In the LOS frame the relative position is ``(R, 0, 0)`` and the relative
    velocity ``(R_dot, R cos(theta_L) phi_L_dot, R theta_L_dot)``.
    """
    a, b, c = relative_velocity_los(state)
    v2 = a * a + b * b + c * c
    if v2 == 0.0 or a >= 0.0:
        return 0.0, state.R
    return -state.R * a / v2, state.R * math.sqrt(b * b + c * c) / math.sqrt(v2)


def check_terminal(state: EngagementState, R_hit: float, monitor: TerminalMonitor | None = None):
    """Single-shot terminal check; pass a ``TerminalMonitor`` to track history."""
    if monitor is None:
        monitor = TerminalMonitor(R_hit=R_hit)
    return monitor.check(state)


def initial_state(R, theta_L, phi_L, theta_m, phi_m, theta_t, phi_t, V_M, V_T, t=0.0) -> EngagementState:
    return EngagementState(R, wrap_angle(theta_L), wrap_angle(phi_L), wrap_angle(theta_m),
                           wrap_angle(phi_m), wrap_angle(theta_t), wrap_angle(phi_t), V_M, V_T, t)


def with_time(state: EngagementState, t: float) -> EngagementState:
    return replace(state, t=t)
