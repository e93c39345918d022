"""Episode scenario generation and the plain-text config format.

A scenario fixes everything random about one episode: smooth per-bus load
multipliers, the clear-sky solar trajectory (placed at a random position in
the production window of the day), the compromised-inverter selection, the
attack timing, and the malicious curve. Generation is a pure function of the
config and a seed, so any episode can be reproduced exactly.

Config files are INI-style with sections mirroring the config dataclass; the
package ships presets (``train_default``, ``eval_20pct_9am``,
``eval_45pct_noon``, ``eval_45pct_noact``) that can be referenced by name.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .detector import DEFAULT_F_HP, DEFAULT_F_LP, DEFAULT_GAIN
from .inverter import DEFAULT_ETA, MIN_GAP, DroopCurve

# seed-stream purposes; documented split so all runs derive from one root seed
STREAM_SCENARIO = 0
STREAM_INIT = 1
STREAM_SAMPLING = 2
STREAM_SHUFFLE = 3


class ConfigError(Exception):
    """Bad config file or preset; message names the offending section.field."""


@dataclass(frozen=True)
class ScenarioConfig:
    # [episode]
    episode_len: int = 700  # simulation steps, 1 s each
    agent_period: int = 35  # steps between agent interactions
    # [feeder]
    feeder: str = "ieee37_balanced"
    source_voltage: float = 1.015
    pf_tol: float = 1e-8
    pf_max_iter: int = 100
    # [inverter]
    eta_default: tuple = DEFAULT_ETA
    tau_m: float = 0.3
    tau_o: float = 0.3
    min_gap: float = MIN_GAP
    # [solar]
    pv_penetration: float = 0.5
    oversize: float = 0.10
    day_length: int = 43200  # daylight seconds
    day_window: tuple = (1.0 / 6.0, 5.0 / 6.0)  # production window within daylight
    day_position: str = "random"  # "random", "9am", "noon", or seconds offset
    # [load]
    load_band: tuple = (0.7, 1.3)
    load_sigma: float = 0.004  # per-step walk scale before smoothing
    # [attack]
    attack_fraction_range: tuple = (0.15, 0.50)
    attack_window: str = "random"  # "random" or "start,end"
    attack_offset: float = 0.0
    attack_slope: float = 0.0
    per_node: bool = False
    # [detector]
    f_hp: float = DEFAULT_F_HP
    f_lp: float = DEFAULT_F_LP
    detector_gain: float = DEFAULT_GAIN
    # [observation]
    history: int = 5
    y_clip: float = 0.0  # 0 disables; >0 caps the y features fed to the nets
    # [action]
    action_range: float = 0.05
    action_bins: int = 11
    encoding: str = "factored"  # or "joint"
    # [reward]
    sigma_y: float = 15.0
    sigma_a: float = 0.05
    sigma_0: float = 18.0
    sigma_p: float = 80.0
    # [training]
    gamma: float = 0.5
    lam: float = 0.95
    clip: float = 0.1
    lr: float = 1e-3
    batch_size: int = 420
    epochs: int = 4
    minibatch: int = 105
    entropy_coef: float = 0.01
    entropy_decay_iters: int = 150
    value_coef: float = 1.0
    value_scale: float = 1.0  # value net learns V/value_scale internally
    iterations: int = 220
    eval_interval: int = 20
    adv_norm: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not (0 < self.agent_period <= self.episode_len):
            raise ConfigError("episode.agent_period must be in (0, episode_len]")
        lo, hi = self.attack_fraction_range
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError("attack.fraction_range must lie inside (0, 1)")
        if self.attack_window != "random":
            a, b = _parse_window(self.attack_window)
            if not (0 <= a < b <= self.episode_len):
                raise ConfigError("attack.window must lie within the episode")
        if self.encoding not in ("factored", "joint"):
            raise ConfigError("action.encoding must be 'factored' or 'joint'")
        if self.action_bins < 1 or self.action_bins % 2 == 0:
            raise ConfigError("action.bins must be odd so the grid includes 0")
        if self.history < 1:
            raise ConfigError("observation.history must be >= 1")

    @property
    def agent_steps(self) -> int:
        return -(-self.episode_len // self.agent_period)

    def default_curve(self) -> DroopCurve:
        return DroopCurve(tuple(float(v) for v in self.eta_default))


def _parse_window(text):
    a, b = (int(x) for x in str(text).split(","))
    return a, b


@dataclass(frozen=True)
class EpisodeScenario:
    """One episode's randomness, expressed over inverter *units*.

    In the default (global) mode units are exactly the feeder file's
    inverters. In per-node mode every file inverter is split into an
    uncompromised and a compromised unit holding (1-f) and f of its capacity,
    so the compromised share at every bus equals the drawn fraction.
    """

    load_profile: np.ndarray  # (steps, n_bus) multiplier on base load
    solar_profile: np.ndarray  # (steps, n_unit) available p_max in pu
    unit_bus: np.ndarray  # bus index per unit
    unit_s: np.ndarray  # capacity per unit, pu
    compromised: np.ndarray  # bool per unit
    attack_start: int
    attack_end: int
    attacked_curve: DroopCurve
    capacity_fraction: float  # realized compromised share of installed capacity
    day_start: float  # seconds into daylight at episode start

    @property
    def uncompromised(self):
        return ~self.compromised


def attacked_curve(default: DroopCurve, config: ScenarioConfig) -> DroopCurve:
    """Malicious re-dispatch: translate by attack_offset and steepen the VV
    curve by attack_slope.

    Steepening collapses the gaps between the VV breakpoints toward the
    deadband center: both sloped segments shrink toward ``min_gap`` and the
    deadband itself closes, which is what drives the curve toward a
    relay-like characteristic. Offsets preserve the shape exactly.
    """
    off = float(config.attack_offset)
    a = float(config.attack_slope)
    e1, e2, e3, e4, e5 = default.eta
    mid = 0.5 * (e2 + e3) + off
    dead = max(0.0, (e3 - e2) - 2.0 * a)
    r1 = max(config.min_gap, (e2 - e1) - a)
    r2 = max(config.min_gap, (e4 - e3) - a)
    new2 = mid - 0.5 * dead
    new3 = mid + 0.5 * dead
    return DroopCurve((new2 - r1, new2, new3, new3 + r2, e5 + off))


def bundled_feeder_path() -> Path:
    return Path(resources.files("droopguard").joinpath("data/ieee37_balanced.feeder"))


def preset_path(name: str) -> Path:
    p = Path(resources.files("droopguard").joinpath(f"presets/{name}.ini"))
    if not p.exists():
        raise ConfigError(f"unknown preset {name!r}")
    return p


def resolve_feeder_path(config: ScenarioConfig) -> Path:
    p = Path(config.feeder)
    if p.suffix or p.exists():
        return p
    return Path(resources.files("droopguard").joinpath(f"data/{config.feeder}.feeder"))


_SECTION_FIELDS = {
    "episode": ("episode_len", "agent_period"),
    "feeder": ("feeder", "source_voltage", "pf_tol", "pf_max_iter"),
    "inverter": ("eta_default", "tau_m", "tau_o", "min_gap"),
    "solar": ("pv_penetration", "oversize", "day_length", "day_window", "day_position"),
    "load": ("load_band", "load_sigma"),
    "attack": ("attack_fraction_range", "attack_window", "attack_offset",
               "attack_slope", "per_node"),
    "detector": ("f_hp", "f_lp", "detector_gain"),
    "observation": ("history", "y_clip"),
    "action": ("action_range", "action_bins", "encoding"),
    "reward": ("sigma_y", "sigma_a", "sigma_0", "sigma_p"),
    "training": ("gamma", "lam", "clip", "lr", "batch_size", "epochs", "minibatch",
                 "entropy_coef", "entropy_decay_iters", "value_coef", "value_scale",
                 "iterations", "eval_interval", "adv_norm", "rng_seed"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "tuple":
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r} for field {name}") from exc


def load_config(source, overrides=None) -> ScenarioConfig:
    """Load a ScenarioConfig from a preset name or an INI file path.

    ``overrides`` is an optional mapping of field name to raw string value,
    applied after the file (CLI flags use this).
    """
    path = Path(source)
    if not path.exists():
        path = preset_path(str(source))
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"{path}: unknown field {section}.{key}")
            values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    try:
        return ScenarioConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_text(config: ScenarioConfig) -> str:
    lines = []
    for section, names in _SECTION_FIELDS.items():
        lines.append(f"[{section}]")
        for name in names:
            val = getattr(config, name)
            if isinstance(val, tuple):
                val = ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in val)
            lines.append(f"{name} = {val}")
        lines.append("")
    return "\n".join(lines)


def rng_for(config_seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """One documented splitting rule for every random stream in the project."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=config_seed, spawn_key=(purpose, index))
    )


def _smooth_multipliers(rng, steps, n_bus, band, sigma):
    """Per-bus mean-reverting walks, low-passed so per-step moves stay small."""
    lo, hi = band
    m = np.empty((steps, n_bus))
    level = 1.0 + rng.uniform(-0.08, 0.08, size=n_bus)
    drift = rng.uniform(-1.0, 1.0, size=n_bus) * sigma
    for t in range(steps):
        noise = rng.uniform(-1.0, 1.0, size=n_bus) * sigma
        level = level + drift + noise - 0.002 * (level - 1.0)
        np.clip(level, lo, hi, out=level)
        m[t] = level
    return m


def generate_scenario(config: ScenarioConfig, model, rng=None) -> EpisodeScenario:
    """Draw one randomized episode; deterministic for a fixed generator state."""
    if rng is None:
        rng = rng_for(config.rng_seed, STREAM_SCENARIO)
    steps = config.episode_len
    n_bus = model.n_bus
    n_inv = len(model.inverters)
    if n_inv == 0:
        raise ConfigError("feeder declares no inverters; nothing to control")

    load = _smooth_multipliers(rng, steps, n_bus, config.load_band, config.load_sigma)

    # clear-sky bell over the daylight span, episode placed in the production window
    wlo, whi = config.day_window
    if config.day_position == "random":
        day_start = rng.uniform(
            wlo * config.day_length, whi * config.day_length - steps
        )
    elif config.day_position == "9am":
        # daylight 6:00-18:00; centre the episode on 09:00
        day_start = 3.0 * 3600.0 - steps / 2.0
    elif config.day_position == "noon":
        day_start = 6.0 * 3600.0 - steps / 2.0
    else:
        day_start = float(config.day_position)
    t_day = day_start + np.arange(steps)
    bell = np.maximum(0.0, np.sin(np.pi * t_day / config.day_length))

    # each unit's clear-sky peak comes from its own capacity net of the
    # apparent-power oversizing margin; for the bundled feeder this equals
    # pv_penetration times the local nominal load summed over a bus's units
    s = model.inverter_s
    p_rated = s / (1.0 + config.oversize)

    frac_lo, frac_hi = config.attack_fraction_range
    target = rng.uniform(frac_lo, frac_hi)
    total = s.sum()
    if config.per_node:
        f = target
        unit_bus = np.concatenate([model.inverter_bus_idx, model.inverter_bus_idx])
        unit_s = np.concatenate([s * (1.0 - f), s * f])
        unit_rated = np.concatenate([p_rated * (1.0 - f), p_rated * f])
        compromised = np.zeros(2 * n_inv, dtype=bool)
        compromised[n_inv:] = True
        realized = f
    else:
        order = rng.permutation(n_inv)
        compromised = np.zeros(n_inv, dtype=bool)
        acc = 0.0
        for i in order:
            if acc >= target * total:
                break
            if compromised.sum() == n_inv - 1:
                break  # keep U nonempty
            compromised[i] = True
            acc += s[i]
        if not compromised.any():
            raise ConfigError("attack fraction too small: no inverter selected")
        unit_bus = model.inverter_bus_idx.copy()
        unit_s = s.copy()
        unit_rated = p_rated
        realized = acc / total

    solar = bell[:, None] * unit_rated[None, :]

    if config.attack_window == "random":
        # canonical episodes draw start in [100, len-250] with a 250 s attack;
        # shorter (test-scale) episodes shrink proportionally
        lo = min(100, config.episode_len // 7)
        hi = max(lo + 1, config.episode_len - 250 + 1)
        start = int(rng.integers(lo, hi))
        end = min(start + 250, config.episode_len)
    else:
        start, end = _parse_window(config.attack_window)

    return EpisodeScenario(
        load_profile=load,
        solar_profile=solar,
        unit_bus=unit_bus,
        unit_s=unit_s,
        compromised=compromised,
        attack_start=start,
        attack_end=end,
        attacked_curve=attacked_curve(config.default_curve(), config),
        capacity_fraction=float(realized),
        day_start=float(day_start),
    )
