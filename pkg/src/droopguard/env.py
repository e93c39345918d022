"""POMDP environment coupling the feeder, inverter fleet, and detectors.

One env step = ``agent_period`` one-second simulation ticks. Each tick sets
the compromised units' curves according to the attack window, advances every
inverter's filters against the previous tick's voltages, solves the power
flow, and feeds the new bus voltages to the oscillation detectors. At the
window boundary the env assembles windowed observations and the reward.

Two operating modes share all code:
  - training (aggregated): one action; observations averaged over the
    uncompromised units (single-agent heuristic);
  - deployment (per-inverter): an action per uncompromised unit, each driven
    by its local observation.
The mode is chosen per call: ``step`` accepts a scalar action or a vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import DetectorBank
from .feeder import FeederModel, PowerFlowError, load_feeder, solve_power_flow
from .inverter import InverterBank, apply_action, var_headroom
from .scenario import (
    STREAM_SCENARIO,
    EpisodeScenario,
    ScenarioConfig,
    generate_scenario,
    resolve_feeder_path,
    rng_for,
)

CURTAIL_EPS = 1e-6  # nighttime threshold below which the curtailment term is 0


class EpisodeAborted(RuntimeError):
    """Power flow failed mid-episode; the episode must be discarded."""


@dataclass(frozen=True)
class ActionSpace:
    """Symmetric offset/slope grids; actions travel as joint indices."""

    action_range: float = 0.05
    bins: int = 11
    encoding: str = "factored"

    @property
    def grid(self):
        return np.linspace(-self.action_range, self.action_range, self.bins)

    @property
    def n_joint(self) -> int:
        return self.bins * self.bins

    @property
    def head_sizes(self):
        return (self.bins, self.bins) if self.encoding == "factored" else (self.n_joint,)

    @property
    def null_action(self) -> int:
        centre = self.bins // 2
        return centre * self.bins + centre

    def decode(self, action: int):
        """Joint index -> (offset, slope_delta) in pu."""
        i, j = divmod(int(action), self.bins)
        g = self.grid
        return float(g[i]), float(g[j])

    def encode(self, i_offset: int, i_slope: int) -> int:
        return int(i_offset) * self.bins + int(i_slope)

    def one_hot(self, action: int):
        v = np.zeros(self.n_joint)
        v[int(action)] = 1.0
        return v

    def bin_distance(self, a: int, b: int):
        """Max per-head bin distance between two joint actions."""
        ai, aj = divmod(int(a), self.bins)
        bi, bj = divmod(int(b), self.bins)
        return max(abs(ai - bi), abs(aj - bj))


def observation_dim(space: ActionSpace) -> int:
    return 3 + space.n_joint


class GridEnv:
    """Simulation environment for one feeder under a droop-curve attack."""

    def __init__(self, config: ScenarioConfig, model: FeederModel | None = None):
        self.config = config
        self.model = model if model is not None else load_feeder(resolve_feeder_path(config))
        self.space = ActionSpace(config.action_range, config.action_bins, config.encoding)
        self.default_curve = config.default_curve()
        self.scenario: EpisodeScenario | None = None
        self.log: dict | None = None

    # ------------------------------------------------------------------ reset
    def reset(self, seed: int, scenario: EpisodeScenario | None = None,
              per_unit: bool = False):
        """Start a fresh episode; returns the aggregated observation (or the
        per-unit observation matrix when ``per_unit``).

        The inverter fleet is settled to its joint equilibrium with the grid
        under step-0 conditions before the clock starts, and detectors are
        seeded so the initial oscillation energy is exactly zero.
        """
        cfg = self.config
        if scenario is None:
            scenario = generate_scenario(cfg, self.model, rng_for(seed, STREAM_SCENARIO))
        self.scenario = scenario
        n_unit = scenario.unit_s.shape[0]

        self.bank = InverterBank(
            scenario.unit_s,
            cfg.tau_m,
            cfg.tau_o,
            np.tile(self.default_curve.as_array(), (n_unit, 1)),
        )
        self.bank.p_max = scenario.solar_profile[0].copy()
        self.u_idx = np.nonzero(scenario.uncompromised)[0]
        self.h_idx = np.nonzero(scenario.compromised)[0]
        self.n_u = len(self.u_idx)

        self.t = 0
        self.v = np.full(self.model.n_bus, cfg.source_voltage)
        self.volt = np.full(self.model.n_bus, complex(cfg.source_voltage))
        self._settle()

        self.detectors = DetectorBank(
            self.model.n_bus, cfg.f_hp, cfg.f_lp, cfg.detector_gain, 1.0
        )
        self.detectors.step(self.v)  # seed: first output is zero by construction

        self.y_window = np.zeros((cfg.agent_period, self.model.n_bus))
        self.y_rings = [[] for _ in range(self.model.n_bus)]
        self.prev_joint = np.full(self.n_u, self.space.null_action, dtype=int)
        self.prev_delta = np.zeros((self.n_u, 5))
        self.log = _new_log()
        self._log_tick(np.zeros(self.model.n_bus), (0.0, 0.0))

        zeros = np.zeros(self.model.n_bus)
        return self._observations(zeros, zeros, per_unit)

    def _settle(self, rounds: int = 400, tol: float = 1e-12):
        """Joint inverter/power-flow fixed point for step-0 conditions."""
        inj_load = self._base_injection(0)
        for _ in range(rounds):
            p_prev, q_prev = self.bank.p.copy(), self.bank.q.copy()
            self.bank.step(self.v[self.scenario.unit_bus])
            inj = inj_load.copy()
            np.add.at(inj, self.scenario.unit_bus, self.bank.p + 1j * self.bank.q)
            sol = solve_power_flow(
                self.model, inj, self.config.source_voltage,
                tol=self.config.pf_tol, max_iter=self.config.pf_max_iter,
                v_init=self.volt,
            )
            self.volt = sol.voltages
            self.v = np.abs(self.volt)
            if (
                np.abs(self.bank.p - p_prev).max() < tol
                and np.abs(self.bank.q - q_prev).max() < tol
            ):
                break

    def _base_injection(self, t: int):
        mult = self.scenario.load_profile[t]
        return -(self.model.p_load * mult + 1j * self.model.q_load * mult)

    # ------------------------------------------------------------------- step
    def step(self, action):
        """Advance one agent period. ``action`` is a joint index (aggregated
        mode) or a vector of joint indices, one per uncompromised unit
        (per-inverter deployment mode).

        Returns (obs, reward, done, info); in per-inverter mode ``obs`` is an
        (n_u, obs_dim) matrix and the reward uses the per-unit action terms.
        """
        cfg = self.config
        scen = self.scenario
        per_unit = np.ndim(action) > 0
        joint = (
            np.asarray(action, dtype=int)
            if per_unit
            else np.full(self.n_u, int(action), dtype=int)
        )
        if joint.shape != (self.n_u,):
            raise ValueError(f"need one action or {self.n_u} per-unit actions")
        if (joint < 0).any() or (joint >= self.space.n_joint).any():
            raise ValueError("action index out of range")

        deltas = np.zeros((self.n_u, 5))
        if per_unit:
            offs = np.empty(self.n_u)
            slos = np.empty(self.n_u)
            for k, a in enumerate(joint):
                off, slo = self.space.decode(a)
                offs[k], slos[k] = off, slo
                curve = apply_action(self.default_curve, off, slo, cfg.min_gap)
                self.bank.set_curves(curve.as_array(), self.u_idx[k])
                deltas[k] = curve.as_array() - self.default_curve.as_array()
            action_trace = (float(offs.mean()), float(slos.mean()))
        else:
            off, slo = self.space.decode(int(action))
            curve = apply_action(self.default_curve, off, slo, cfg.min_gap)
            self.bank.set_curves(curve.as_array(), self.u_idx)
            deltas[:] = curve.as_array() - self.default_curve.as_array()
            action_trace = (off, slo)

        end = min(self.t + cfg.agent_period, cfg.episode_len)
        n_ticks = end - self.t
        for t in range(self.t, end):
            attacked = scen.attack_start <= t < scen.attack_end
            self.bank.set_curves(
                scen.attacked_curve.as_array() if attacked else self.default_curve.as_array(),
                self.h_idx,
            )
            self.bank.p_max = scen.solar_profile[t]
            self.bank.step(self.v[scen.unit_bus])
            inj = self._base_injection(t)
            np.add.at(inj, scen.unit_bus, self.bank.p + 1j * self.bank.q)
            try:
                sol = solve_power_flow(
                    self.model, inj, cfg.source_voltage,
                    tol=cfg.pf_tol, max_iter=cfg.pf_max_iter, v_init=self.volt,
                )
            except PowerFlowError as exc:
                raise EpisodeAborted(f"power flow failed at t={t}: {exc}") from exc
            self.volt = sol.voltages
            self.v = np.abs(self.volt)
            y = self.detectors.step(self.v)
            self.y_window[t - self.t] = y
            self._log_tick(y, action_trace, attacked)
        self.t = end

        window = self.y_window[:n_ticks]
        y_mean_bus = window.mean(axis=0)
        y_max_bus = np.empty(self.model.n_bus)
        for b in range(self.model.n_bus):
            recent = self.y_rings[b][-(cfg.history - 1):] if cfg.history > 1 else []
            y_max_bus[b] = max([y_mean_bus[b], *recent])
            self.y_rings[b].append(float(y_mean_bus[b]))

        reward, parts = self._reward(y_mean_bus, joint, deltas, per_unit)
        obs = self._observations(y_mean_bus, y_max_bus, per_unit)
        self.prev_joint = joint.copy()
        self.prev_delta = deltas.copy()
        done = self.t >= cfg.episode_len
        self._log_window(parts, reward)
        info = {"components": parts, "t": self.t, "y_mean": float(y_mean_bus[self._obs_buses()].mean())}
        return obs, reward, done, info

    # -------------------------------------------------------------- internals
    def _obs_buses(self):
        return self.scenario.unit_bus[self.u_idx]

    def _observations(self, y_mean_bus, y_max_bus, per_unit: bool = False):
        buses = self._obs_buses()
        q_nom = var_headroom(
            self.bank.s[self.u_idx], np.minimum(self.bank.p_max[self.u_idx], self.bank.s[self.u_idx])
        )
        clip = self.config.y_clip

        def squash(y):
            # y features saturate the tanh trunk when the detector gain is
            # large; the declared clip caps them without touching the reward
            return min(y, clip) if clip > 0.0 else y

        if per_unit:
            rows = np.empty((self.n_u, observation_dim(self.space)))
            for k in range(self.n_u):
                rows[k, 0] = squash(y_mean_bus[buses[k]])
                rows[k, 1] = squash(y_max_bus[buses[k]])
                rows[k, 2] = q_nom[k]
                rows[k, 3:] = self.space.one_hot(self.prev_joint[k])
            return rows
        obs = np.empty(observation_dim(self.space))
        obs[0] = squash(y_mean_bus[buses].mean())
        obs[1] = squash(y_max_bus[buses].mean())
        obs[2] = q_nom.mean()
        # aggregated mode keeps one shared previous action
        obs[3:] = self.space.one_hot(int(self.prev_joint[0]))
        return obs

    def _reward(self, y_mean_bus, joint, deltas, per_unit):
        return compute_reward(
            self.config,
            y_mean_bus[self._obs_buses()],
            joint,
            self.prev_joint,
            deltas,
            self.bank.p[self.u_idx],
            self.bank.p_max[self.u_idx],
        )

    def _log_tick(self, y, action_trace, attacked=False):
        scen = self.scenario
        lg = self.log
        att_off, att_slope = _attack_trace(self.default_curve, scen.attacked_curve)
        lg["v"].append(self.v.copy())
        lg["y"].append(np.asarray(y, dtype=float).copy())
        lg["translation"].append(action_trace[0])
        lg["slope"].append(action_trace[1])
        lg["translation_adv"].append(att_off if attacked else 0.0)
        lg["slope_adv"].append(att_slope if attacked else 0.0)
        lg["curtail"].append(
            float(np.maximum(self.bank.p_max[self.u_idx] - self.bank.p[self.u_idx], 0.0).sum())
        )

    def _log_window(self, parts, reward):
        lg = self.log
        lg["component_y"].append(parts["y"])
        lg["component_oa"].append(parts["action_change"])
        lg["component_init"].append(parts["deviation"])
        lg["component_pset_pmax"].append(parts["curtailment"])
        lg["total_reward"].append(reward)
        lg["window_end"].append(self.t)


def compute_reward(config, y_u, joint, prev_joint, deltas, p_u, p_max_u):
    """Reward with its four penalty components (all returned as <= 0 values).

    ``y_u`` holds the window-mean oscillation energy at each uncompromised
    unit's bus; the action penalties use the realized breakpoint displacement
    vectors. Buses with no available sun (p_max below threshold) contribute no
    curtailment penalty.
    """
    comp_y = -config.sigma_y * float(np.mean(y_u)) if len(y_u) else 0.0
    changed = joint != prev_joint
    comp_change = -config.sigma_a * float(np.mean(changed.astype(float)))
    norms = np.sqrt((deltas * deltas).sum(axis=1))
    comp_dev = -config.sigma_0 * float(np.mean(norms))
    # per-unit curtailment ratio, defined as 0 where no sun is available
    lit = p_max_u > CURTAIL_EPS
    ratio = np.zeros_like(p_u)
    ratio[lit] = 1.0 - np.clip(p_u[lit] / p_max_u[lit], 0.0, None)
    comp_curt = -config.sigma_p * float(np.mean(ratio**2))
    total = comp_y + comp_change + comp_dev + comp_curt
    parts = {
        "y": comp_y,
        "action_change": comp_change,
        "deviation": comp_dev,
        "curtailment": comp_curt,
    }
    return total, parts


def _attack_trace(default, attacked):
    """Offset/slope summary of the malicious curve for the episode log."""
    d = attacked.as_array() - default.as_array()
    off = float(d[4])  # eta5 is translation-only
    slope = float(-(d[3] - d[4]))  # how far eta4 collapsed relative to pure translation
    return off, slope


def _new_log():
    return {
        "v": [], "y": [], "translation": [], "slope": [],
        "translation_adv": [], "slope_adv": [], "curtail": [],
        "component_y": [], "component_oa": [], "component_init": [],
        "component_pset_pmax": [], "total_reward": [], "window_end": [],
    }


def log_to_rows(env: GridEnv, bus: int | None = None):
    """Flatten the episode log to per-step CSV rows (schema documented in the
    README). Window-level reward columns repeat the value of the window each
    step belongs to; steps before the first completed window carry zeros.

    ``bus`` selects the voltage/oscillation column; default is the deepest
    uncompromised inverter bus.
    """
    lg = env.log
    if bus is None:
        cand = env.scenario.unit_bus[env.u_idx]
        bus = int(cand[np.argmax(env.model.depth[cand])])
    steps = len(lg["v"]) - 1  # row 0 is the reset snapshot
    rows = []
    widx = 0
    comp = (0.0, 0.0, 0.0, 0.0, 0.0)
    for t in range(1, steps + 1):
        while widx < len(lg["window_end"]) and lg["window_end"][widx] <= t - 1:
            widx += 1
        k = widx - 1
        if 0 <= k < len(lg["total_reward"]):
            comp = (
                lg["component_y"][k],
                lg["component_oa"][k],
                lg["component_init"][k],
                lg["component_pset_pmax"][k],
                lg["total_reward"][k],
            )
        rows.append(
            (
                t - 1,
                float(lg["v"][t][bus]),
                float(lg["y"][t][bus]),
                lg["translation"][t],
                lg["slope"][t],
                lg["translation_adv"][t],
                lg["slope_adv"][t],
                *comp,
            )
        )
    return rows


EPISODE_CSV_HEADER = (
    "step,v,y,translation,slope,translation_adv,slope_adv,"
    "component_y,component_oa,component_init,component_pset_pmax,total_reward"
)
