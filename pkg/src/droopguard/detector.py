"""Streaming voltage-oscillation energy observer.

Chain per monitored bus: first-order high-pass (strips the DC operating
point), square-law with gain, first-order low-pass (extracts the DC of the
squared signal). Both filters are bilinear-transform discretizations of
one-pole analog prototypes, so a sinusoid of amplitude A well inside the
passband settles to an output of c * A^2 / 2.

State is seeded from the first sample so the startup output is exactly zero
rather than a spurious energy spike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# defaults give a 2-20 s oscillation passband at 1 s sampling; the gain is a
# display/reward scale, not a physical constant
DEFAULT_F_HP = 0.02  # Hz
DEFAULT_F_LP = 0.01  # Hz
DEFAULT_GAIN = 100.0
DEFAULT_DT = 1.0  # s


@dataclass
class OscillationFilter:
    """One bus's filter state. ``primed`` is False until the first sample."""

    f_hp: float = DEFAULT_F_HP
    f_lp: float = DEFAULT_F_LP
    c: float = DEFAULT_GAIN
    dt: float = DEFAULT_DT
    prev_v: float = 0.0
    prev_dv: float = 0.0
    prev_w: float = 0.0
    prev_y: float = 0.0
    primed: bool = False

    def __post_init__(self):
        nyquist = 0.5 / self.dt
        if not (0.0 < self.f_lp < self.f_hp < nyquist):
            raise ValueError(
                f"need 0 < f_lp < f_hp < {nyquist} Hz, got f_lp={self.f_lp}, f_hp={self.f_hp}"
            )
        if self.c <= 0.0:
            raise ValueError("square-law gain must be positive")
        # bilinear one-pole LP keeps its output nonnegative only below this cutoff
        if 2.0 * np.pi * self.f_lp * self.dt > 2.0:
            raise ValueError("f_lp too close to Nyquist for a nonnegative energy output")


def detector_step(filt: OscillationFilter, v: float) -> tuple[OscillationFilter, float]:
    """Feed one voltage sample; returns the updated filter and energy y >= 0."""
    if not np.isfinite(v):
        raise ValueError("voltage sample must be finite")
    if not filt.primed:
        filt.prev_v = v
        filt.prev_dv = 0.0
        filt.prev_w = 0.0
        filt.prev_y = 0.0
        filt.primed = True

    a = np.pi * filt.f_hp * filt.dt  # omega*dt/2 of the HP prototype
    dv = (v - filt.prev_v - (a - 1.0) * filt.prev_dv) / (1.0 + a)
    w = filt.c * dv * dv
    b = 2.0 * np.pi * filt.f_lp * filt.dt  # omega*dt of the LP prototype
    y = (b * (w + filt.prev_w) - (b - 2.0) * filt.prev_y) / (2.0 + b)

    filt.prev_v = v
    filt.prev_dv = dv
    filt.prev_w = w
    filt.prev_y = y
    return filt, y


def run_detector(filt: OscillationFilter, samples) -> np.ndarray:
    """Convenience: stream a sequence through, returning all outputs."""
    out = np.empty(len(samples))
    for i, v in enumerate(samples):
        _, out[i] = detector_step(filt, float(v))
    return out


class DetectorBank:
    """Vectorized detector array (one filter per bus), same recurrences."""

    def __init__(self, n, f_hp=DEFAULT_F_HP, f_lp=DEFAULT_F_LP, c=DEFAULT_GAIN, dt=DEFAULT_DT):
        # parameter validation shared with the scalar filter
        OscillationFilter(f_hp=f_hp, f_lp=f_lp, c=c, dt=dt)
        self.a = np.pi * f_hp * dt
        self.b = 2.0 * np.pi * f_lp * dt
        self.c = c
        self.prev_v = np.zeros(n)
        self.prev_dv = np.zeros(n)
        self.prev_w = np.zeros(n)
        self.prev_y = np.zeros(n)
        self.primed = False

    def step(self, v):
        v = np.asarray(v, dtype=float)
        if not self.primed:
            self.prev_v[:] = v
            self.primed = True
        dv = (v - self.prev_v - (self.a - 1.0) * self.prev_dv) / (1.0 + self.a)
        w = self.c * dv * dv
        y = (self.b * (w + self.prev_w) - (self.b - 2.0) * self.prev_y) / (2.0 + self.b)
        self.prev_v = v.copy()
        self.prev_dv = dv
        self.prev_w = w
        self.prev_y = y
        return y


def window_stats(y_samples, history, n: int):
    """Summarize one agent window: (window mean, max over this and the last
    n-1 stored window means).

    ``history`` holds previous window means, most recent last; only its last
    n-1 entries participate.
    """
    y_samples = np.asarray(y_samples, dtype=float)
    if y_samples.size == 0:
        raise ValueError("window_stats needs a non-empty window")
    if n < 1:
        raise ValueError("n must be at least 1")
    y_mean = float(y_samples.mean())
    recent = list(history)[-(n - 1):] if n > 1 else []
    y_max_n = max([y_mean, *recent])
    return y_mean, float(y_max_n)
