"""Smart-inverter droop control: VV/VW curves, headroom, and output dynamics.

Each inverter runs three coupled first-order discrete filters: a measurement
filter on bus voltage, and output filters relaxing active and reactive power
toward the droop targets. Curtailment takes precedence: the active-power
target fixes the apparent-power headroom available for VARs before the
reactive target is evaluated.

The droop functions accept either scalars or numpy arrays (broadcasting over
per-inverter curve matrices), so a whole inverter fleet can be stepped in one
vectorized call.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# smallest allowed gap between breakpoints that bound a sloped segment, pu
MIN_GAP = 0.005

# default curve: VAR deadband wide enough to hold the operating band at any
# load/sun level, absorption knee low enough that a shifted fleet can trade
# watts for VAR headroom within the action range
DEFAULT_ETA = (0.95, 0.98, 1.015, 1.04, 1.09)


@dataclass(frozen=True)
class DroopCurve:
    """Five voltage breakpoints (pu) parameterizing the VV/VW piecewise laws.

    Composition bookkeeping (``base``, ``offset``, ``slope_delta``) lets
    offset actions cancel bit-exactly: re-applying the negated offset sums the
    offsets before touching the breakpoints, so +x then -x restores the base.
    """

    eta: tuple[float, float, float, float, float]
    base: tuple[float, float, float, float, float] | None = None
    offset: float = 0.0
    slope_delta: float = 0.0

    def __post_init__(self):
        e = self.eta
        if len(e) != 5:
            raise ValueError("curve needs exactly 5 breakpoints")
        if not (e[0] < e[1] <= e[2] < e[3] < e[4]):
            raise ValueError(f"breakpoints out of order: {e}")
        if not all(0.5 < v < 1.5 for v in e):
            raise ValueError(f"breakpoints outside (0.5, 1.5) pu: {e}")
        if self.base is None:
            object.__setattr__(self, "base", e)

    def as_array(self):
        return np.array(self.eta)


def make_default_curve(eta=DEFAULT_ETA) -> DroopCurve:
    return DroopCurve(tuple(float(v) for v in eta))


def apply_action(curve_default: DroopCurve, offset: float, slope_delta: float,
                 min_gap: float = MIN_GAP) -> DroopCurve:
    """Reparameterize a curve: translate all breakpoints by ``offset`` and
    widen (positive) or collapse (negative) the two sloped VV segments by
    ``slope_delta`` on each side.

    The outer breakpoints move symmetrically: eta1 -> eta1 - slope_delta,
    eta4 -> eta4 + slope_delta. Gaps that would shrink below ``min_gap``
    (including eta5 - eta4, squeezed when eta4 moves up) are clamped.
    """
    total_offset = curve_default.offset + float(offset)
    total_slope = curve_default.slope_delta + float(slope_delta)
    b1, b2, b3, b4, b5 = curve_default.base

    e2 = b2 + total_offset
    e3 = b3 + total_offset
    e5 = b5 + total_offset
    e1 = min(e2 - min_gap, b1 + total_offset - total_slope)
    e4 = min(e5 - min_gap, max(e3 + min_gap, b4 + total_offset + total_slope))

    return DroopCurve(
        eta=(e1, e2, e3, e4, e5),
        base=curve_default.base,
        offset=total_offset,
        slope_delta=total_slope,
    )


def realized_delta(curve_default: DroopCurve, offset: float, slope_delta: float,
                   min_gap: float = MIN_GAP) -> np.ndarray:
    """Breakpoint displacement vector produced by an action (post-clamping)."""
    moved = apply_action(curve_default, offset, slope_delta, min_gap)
    return moved.as_array() - curve_default.as_array()


def volt_watt(curve, v_bar, p_max):
    """Active-power target: full output up to eta4, linear taper to zero at eta5."""
    eta = _eta_of(curve)
    e4, e5 = eta[..., 3], eta[..., 4]
    v_bar = np.asarray(v_bar, dtype=float)
    frac = np.clip((e5 - v_bar) / (e5 - e4), 0.0, 1.0)
    out = frac * np.asarray(p_max, dtype=float)
    return float(out) if out.ndim == 0 else out


def var_headroom(s, u_p):
    """Apparent-power headroom left for VARs once curtailment fixes u_p."""
    s = np.asarray(s, dtype=float)
    u_p = np.asarray(u_p, dtype=float)
    out = np.sqrt(np.maximum(s * s - u_p * u_p, 0.0))
    return float(out) if out.ndim == 0 else out


def volt_var(curve, v_bar, q_avail):
    """Reactive-power target: inject below the deadband, absorb above it.

    Full injection up to eta1, linear to zero at eta2, zero across the
    deadband, linear to full absorption at eta4, full absorption beyond.
    """
    eta = _eta_of(curve)
    e1, e2, e3, e4 = eta[..., 0], eta[..., 1], eta[..., 2], eta[..., 3]
    v_bar = np.asarray(v_bar, dtype=float)
    inj = np.clip((e2 - v_bar) / (e2 - e1), 0.0, 1.0)
    absb = np.clip((v_bar - e3) / (e4 - e3), 0.0, 1.0)
    out = (inj - absb) * np.asarray(q_avail, dtype=float)
    return float(out) if out.ndim == 0 else out


def _eta_of(curve):
    if isinstance(curve, DroopCurve):
        return curve.as_array()
    return np.asarray(curve, dtype=float)


@dataclass(frozen=True)
class InverterState:
    """One inverter's filtered measurement and output state."""

    v_bar: float
    p: float
    q: float
    tau_m: float
    tau_o: float
    s: float
    p_max: float
    curve: DroopCurve
    compromised: bool = False

    def __post_init__(self):
        if not (0.0 < self.tau_m <= 1.0 and 0.0 < self.tau_o <= 1.0):
            raise ValueError("smoothing gains must lie in (0, 1]")
        if not (0.0 <= self.p_max <= self.s):
            raise ValueError("need 0 <= p_max <= s")


def step_inverter(state: InverterState, v_meas: float) -> InverterState:
    """Advance one timestep of the measurement/output dynamics.

    Measurement filter first, then droop targets from the fresh average with
    curtailment precedence, then output filters. With constant input the state
    contracts to (volt_watt(v), volt_var(v)).
    """
    v_bar = state.v_bar + state.tau_m * (v_meas - state.v_bar)
    p_target = volt_watt(state.curve, v_bar, state.p_max)
    q_avail = var_headroom(state.s, p_target)
    q_target = volt_var(state.curve, v_bar, q_avail)
    return replace(
        state,
        v_bar=v_bar,
        p=state.p + state.tau_o * (p_target - state.p),
        q=state.q + state.tau_o * (q_target - state.q),
    )


class InverterBank:
    """Vectorized fleet of inverters sharing the update rule of step_inverter.

    State arrays are indexed by inverter. ``eta`` is an (n, 5) matrix so each
    inverter can carry its own (possibly attacked or agent-shifted) curve.
    """

    def __init__(self, s, tau_m, tau_o, eta):
        self.s = np.asarray(s, dtype=float).copy()
        n = self.s.shape[0]
        self.tau_m = np.broadcast_to(np.asarray(tau_m, dtype=float), (n,)).copy()
        self.tau_o = np.broadcast_to(np.asarray(tau_o, dtype=float), (n,)).copy()
        self.eta = np.array(eta, dtype=float).reshape(n, 5).copy()
        self.v_bar = np.ones(n)
        self.p = np.zeros(n)
        self.q = np.zeros(n)
        self.p_max = np.zeros(n)

    @property
    def n(self):
        return self.s.shape[0]

    def set_curves(self, eta, idx=None):
        if idx is None:
            self.eta[:] = eta
        else:
            self.eta[idx] = eta

    def targets(self, v_bar=None):
        v = self.v_bar if v_bar is None else v_bar
        p_t = volt_watt(self.eta, v, self.p_max)
        q_t = volt_var(self.eta, v, var_headroom(self.s, p_t))
        return p_t, q_t

    def step(self, v_meas):
        self.v_bar += self.tau_m * (v_meas - self.v_bar)
        p_t, q_t = self.targets()
        self.p += self.tau_o * (p_t - self.p)
        self.q += self.tau_o * (q_t - self.q)

    def settle(self, v_meas, rounds=200, tol=1e-12):
        """Drive the fleet to its fixed point for a constant voltage input."""
        for _ in range(rounds):
            p_prev, q_prev = self.p.copy(), self.q.copy()
            self.step(v_meas)
            if (
                np.abs(self.p - p_prev).max() < tol
                and np.abs(self.q - q_prev).max() < tol
            ):
                break
