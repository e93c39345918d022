"""Single-episode evaluation runs and their summary statistics.

Evaluation runs the trained policy in deployment mode by default: the same
network acts per-inverter on local observations. A null policy (hold the
default curve) provides the no-defense baseline.
"""
from __future__ import annotations

import numpy as np

from .env import EPISODE_CSV_HEADER, ActionSpace, GridEnv, log_to_rows
from .scenario import ScenarioConfig


def null_policy(space: ActionSpace):
    def act(obs_rows):
        return np.full(len(obs_rows), space.null_action, dtype=int)

    return act


def greedy_policy(trainer, space: ActionSpace):
    """Deterministic per-observation argmax policy from a trained checkpoint."""

    def act(obs_rows):
        out = np.empty(len(obs_rows), dtype=int)
        for k, obs in enumerate(np.atleast_2d(obs_rows)):
            picks = trainer.policy.greedy(obs)
            out[k] = (
                space.encode(picks[0], picks[1])
                if space.encoding == "factored"
                else int(picks[0])
            )
        return out

    return act


def sampling_policy(trainer, space: ActionSpace, rng):
    def act(obs_rows):
        out = np.empty(len(obs_rows), dtype=int)
        for k, obs in enumerate(np.atleast_2d(obs_rows)):
            picks, _ = trainer.policy.sample(obs, rng)
            out[k] = (
                space.encode(picks[0], picks[1])
                if space.encoding == "factored"
                else int(picks[0])
            )
        return out

    return act


def run_episode(config: ScenarioConfig, policy_fn, seed: int, per_unit: bool = True,
                model=None, env: GridEnv | None = None):
    """Roll one episode; returns (env, summary dict).

    ``policy_fn`` maps an (n, obs_dim) observation matrix to n joint action
    indices. With ``per_unit`` False the first row's action is applied fleet
    wide (training-style aggregated control).
    """
    env = env or GridEnv(config, model)
    obs = env.reset(seed, per_unit=per_unit)
    done = False
    total = 0.0
    action_log = []
    while not done:
        actions = np.asarray(policy_fn(np.atleast_2d(obs)), dtype=int)
        step_arg = actions if per_unit else int(actions[0])
        obs, reward, done, info = env.step(step_arg)
        total += reward
        action_log.append(actions.copy())
    summary = summarize(env, total, action_log)
    return env, summary


def summarize(env: GridEnv, total_reward: float, action_log):
    """Episode summary: windowed oscillation stats, curtailment energy, and
    the action-recovery measure used by the acceptance suite."""
    scen = env.scenario
    lg = env.log
    y = np.stack(lg["y"][1:])  # (steps, n_bus)
    u_buses = scen.unit_bus[env.u_idx]
    y_u = y[:, u_buses].mean(axis=1)
    start, end = scen.attack_start, scen.attack_end
    period = env.config.agent_period

    def seg(a, b):
        part = y_u[a:b]
        return (float(part.mean()), float(part.max())) if len(part) else (0.0, 0.0)

    pre = seg(0, start)
    during = seg(start, end)
    post = seg(end, env.config.episode_len)

    curtail_energy = float(np.sum(lg["curtail"][1:]))

    space = env.space
    null = space.null_action
    first_action_w = next(
        (w for w, acts in enumerate(action_log) if np.any(acts != null)), None
    )
    # windows whose simulation span lies after the attack ends
    end_w = -(-end // period)
    recovery_w = None
    for w in range(end_w, len(action_log)):
        if all(space.bin_distance(a, null) <= 1 for a in action_log[w]):
            recovery_w = w - end_w
            break

    return {
        "seed_capacity_fraction": scen.capacity_fraction,
        "attack_window": [int(start), int(end)],
        "y_pre_mean": pre[0], "y_pre_max": pre[1],
        "y_during_mean": during[0], "y_during_max": during[1],
        "y_post_mean": post[0], "y_post_max": post[1],
        "total_reward": float(total_reward),
        "curtailment_energy_pu_s": curtail_energy,
        "first_action_window": first_action_w,
        "windows_to_null_after_attack": recovery_w,
        "reward_components": {
            "y": float(np.sum(lg["component_y"])),
            "action_change": float(np.sum(lg["component_oa"])),
            "deviation": float(np.sum(lg["component_init"])),
            "curtailment": float(np.sum(lg["component_pset_pmax"])),
        },
    }


def write_episode_csv(path, env: GridEnv, bus=None):
    rows = log_to_rows(env, bus)
    lines = [EPISODE_CSV_HEADER]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_bus_log_csv(path, env: GridEnv):
    """Full per-bus voltage and oscillation log (columns v_<id>, y_<id>)."""
    lg = env.log
    idents = [b.ident for b in env.model.buses]
    header = "step," + ",".join(f"v_{i}" for i in idents) + "," + ",".join(
        f"y_{i}" for i in idents
    )
    lines = [header]
    for t in range(1, len(lg["v"])):
        vals = [str(t - 1)]
        vals += [_fmt(x) for x in lg["v"][t]]
        vals += [_fmt(x) for x in lg["y"][t]]
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"
