"""Training loop: rollout collection, advantage estimation, updates,
checkpoints, and the per-iteration metrics curve.

All randomness flows from the config seed through the documented stream
split (scenario stream indexed by a global episode counter, one init stream,
one action-sampling stream, one shuffle stream), so single-threaded runs are
bit-reproducible. With ``threads > 1`` episodes are still assigned their
seeds up front and assembled in episode order, which keeps the collected
batch identical to the sequential one.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ..env import ActionSpace, EpisodeAborted, GridEnv, observation_dim
from ..scenario import (
    STREAM_INIT,
    STREAM_SAMPLING,
    STREAM_SHUFFLE,
    ScenarioConfig,
    config_to_text,
    load_config,
    rng_for,
)
from .nets import Adam, PolicyNetwork, ValueNetwork
from .ppo import RolloutBatch, finalize_batch, ppo_update

CHECKPOINT_VERSION = 1

METRIC_FIELDS = (
    "iteration", "episodes", "mean_return", "surrogate", "value_loss",
    "clip_fraction", "approx_kl", "entropy", "entropy_coef", "aborted_episodes",
)


class Trainer:
    def __init__(self, config: ScenarioConfig, model=None, threads: int = 1):
        self.config = config
        self.space = ActionSpace(config.action_range, config.action_bins, config.encoding)
        n_obs = observation_dim(self.space)
        init_rng = rng_for(config.rng_seed, STREAM_INIT)
        self.policy = PolicyNetwork(n_obs, self.space.head_sizes, rng=init_rng)
        self.value = ValueNetwork(n_obs, rng=init_rng)
        self.optimizer = Adam(self.policy.params() + self.value.params(), lr=config.lr)
        self.sample_rng = rng_for(config.rng_seed, STREAM_SAMPLING)
        self.shuffle_rng = rng_for(config.rng_seed, STREAM_SHUFFLE)
        self.episode_counter = 0
        self.iteration = 0
        self.aborted = 0
        self.threads = max(1, int(threads))
        self._envs = [GridEnv(config, model) for _ in range(self.threads)]
        self._env_proto = self._envs[0]

    # -------------------------------------------------------------- rollouts
    def _joint_action(self, picks):
        if self.config.encoding == "factored":
            return self.space.encode(picks[0], picks[1])
        return int(picks[0])

    def _run_episode(self, env: GridEnv, seed: int, rng):
        obs = env.reset(seed)
        rows = []
        total = 0.0
        done = False
        while not done:
            picks, logp = self.policy.sample(obs, rng)
            v = float(self.value.value(obs[None, :])[0]) * self.config.value_scale
            action = self._joint_action(picks)
            nxt, reward, done, _ = env.step(action)
            rows.append((obs, picks, logp, reward, v, done))
            total += reward
            obs = nxt
        return rows, total

    def _safe_episode(self, env: GridEnv, seed: int):
        """Episode wrapper: per-episode sampling stream, aborts become None."""
        ep_rng = rng_for(self.config.rng_seed, STREAM_SAMPLING, seed + 1)
        try:
            return self._run_episode(env, seed, ep_rng)
        except EpisodeAborted:
            return None

    def collect(self):
        """One batch of at least ``batch_size`` transitions (whole episodes).

        Episodes draw their scenario and action-sampling streams from their
        global index, and the batch is assembled in index order, so the data
        does not depend on how episodes were scheduled across workers.
        """
        cfg = self.config
        rows = []
        ep_returns = []
        while len(rows) < cfg.batch_size:
            need = max(1, (cfg.batch_size - len(rows)) // max(cfg.agent_steps, 1))
            seeds = [self.episode_counter + i for i in range(need)]
            self.episode_counter += need
            if self.threads == 1 or need == 1:
                outcomes = [self._safe_episode(self._envs[0], s) for s in seeds]
            else:
                outcomes = [None] * need

                def worker(w):
                    for i in range(w, need, self.threads):
                        outcomes[i] = self._safe_episode(self._envs[w], seeds[i])

                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    list(pool.map(worker, range(self.threads)))
            n_bad = sum(out is None for out in outcomes)
            self.aborted += n_bad
            if n_bad == len(outcomes) and n_bad >= 8:
                raise RuntimeError(
                    f"persistent environment failures: {n_bad} consecutive episodes aborted"
                )
            for out in outcomes:
                if out is None:
                    continue
                ep, total = out
                rows.extend(ep)
                ep_returns.append(total)

        n_heads = len(self.space.head_sizes)
        obs = np.stack([r[0] for r in rows])
        head_actions = tuple(
            np.array([r[1][h] for r in rows], dtype=int) for h in range(n_heads)
        )
        return RolloutBatch(
            obs=obs,
            head_actions=head_actions,
            logp_old=np.array([r[2] for r in rows]),
            rewards=np.array([r[3] for r in rows]),
            values=np.array([r[4] for r in rows]),
            dones=np.array([r[5] for r in rows], dtype=bool),
            episode_returns=ep_returns,
        )

    # -------------------------------------------------------------- training
    def entropy_coef_now(self):
        cfg = self.config
        if cfg.entropy_decay_iters <= 0:
            return cfg.entropy_coef
        frac = max(0.0, 1.0 - self.iteration / cfg.entropy_decay_iters)
        return cfg.entropy_coef * frac

    def train_iteration(self):
        batch = self.collect()
        finalize_batch(batch, self.config.gamma, self.config.lam, self.config.adv_norm)
        stats = ppo_update(
            self.policy, self.value, self.optimizer, batch, self.config,
            entropy_coef=self.entropy_coef_now(), rng=self.shuffle_rng,
        )
        self.iteration += 1
        record = {
            "iteration": self.iteration,
            "episodes": self.episode_counter,
            "mean_return": float(np.mean(batch.episode_returns)),
            "surrogate": stats["surrogate"],
            "value_loss": stats["value_loss"],
            "clip_fraction": stats["clip_fraction"],
            "approx_kl": stats["approx_kl"],
            "entropy": stats["entropy"],
            "entropy_coef": self.entropy_coef_now(),
            "aborted_episodes": self.aborted,
        }
        return record

    def train(self, out_dir=None, iterations=None, progress=None, patience=60):
        """Run until the iteration budget or a reward plateau.

        The plateau stop compares the 20-iteration moving average against the
        best seen so far; training never stops before 40% of the budget.
        """
        cfg = self.config
        budget = iterations if iterations is not None else cfg.iterations
        history = []
        best_ma = -np.inf
        best_iter = 0
        out_dir = Path(out_dir) if out_dir else None
        for _ in range(budget):
            rec = self.train_iteration()
            history.append(rec)
            if progress:
                progress(rec)
            ma = float(np.mean([r["mean_return"] for r in history[-20:]]))
            if ma > best_ma:
                best_ma = ma
                best_iter = self.iteration
            if out_dir and self.iteration % cfg.eval_interval == 0:
                self.save_checkpoint(out_dir / "checkpoint.npz")
                write_metrics(out_dir / "training_curve.csv", history)
            if (
                self.iteration >= max(40, int(0.4 * budget))
                and self.iteration - best_iter >= patience
            ):
                break
        if out_dir:
            self.save_checkpoint(out_dir / "checkpoint.npz")
            write_metrics(out_dir / "training_curve.csv", history)
        return history

    # ----------------------------------------------------------- persistence
    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for i, p in enumerate(self.policy.params()):
            arrays[f"policy_{i}"] = p
        for i, p in enumerate(self.value.params()):
            arrays[f"value_{i}"] = p
        for i, m in enumerate(self.optimizer.m):
            arrays[f"adam_m_{i}"] = m
        for i, v in enumerate(self.optimizer.v):
            arrays[f"adam_v_{i}"] = v
        meta = {
            "version": CHECKPOINT_VERSION,
            "action_range": self.config.action_range,
            "action_bins": self.config.action_bins,
            "encoding": self.config.encoding,
            "obs_layout": "y_mean, y_max_n, q_avail_nom (pu), prev-action one-hot",
            "y_clip": self.config.y_clip,
            "value_scale": self.config.value_scale,
            "hidden": list(self.policy.net.hidden_sizes),
            "adam_t": self.optimizer.t,
            "iteration": self.iteration,
            "episode_counter": self.episode_counter,
            "config": config_to_text(self.config),
        }
        np.savez(
            path,
            meta=json.dumps(meta),
            sample_rng=json.dumps(_rng_state(self.sample_rng)),
            shuffle_rng=json.dumps(_rng_state(self.shuffle_rng)),
            **arrays,
        )

    @classmethod
    def from_checkpoint(cls, path, config: ScenarioConfig | None = None, model=None):
        data = np.load(Path(path), allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        if config is None:
            config = _config_from_text(meta["config"])
        if (
            config.action_bins != meta["action_bins"]
            or config.encoding != meta["encoding"]
            or abs(config.action_range - meta["action_range"]) > 1e-12
        ):
            raise ValueError(
                "checkpoint/config action-space mismatch: checkpoint has "
                f"{meta['action_bins']} bins over ±{meta['action_range']} ({meta['encoding']}), "
                f"config asks {config.action_bins} over ±{config.action_range} ({config.encoding})"
            )
        trainer = cls(config, model)
        trainer.policy.net.set_params(
            [data[f"policy_{i}"] for i in range(len(trainer.policy.params()))]
        )
        trainer.value.net.set_params(
            [data[f"value_{i}"] for i in range(len(trainer.value.params()))]
        )
        nparams = len(trainer.optimizer.params)
        trainer.optimizer.load_state(
            {
                "t": meta["adam_t"],
                "m": [data[f"adam_m_{i}"] for i in range(nparams)],
                "v": [data[f"adam_v_{i}"] for i in range(nparams)],
            }
        )
        trainer.iteration = meta["iteration"]
        trainer.episode_counter = meta["episode_counter"]
        _set_rng_state(trainer.sample_rng, json.loads(str(data["sample_rng"])))
        _set_rng_state(trainer.shuffle_rng, json.loads(str(data["shuffle_rng"])))
        return trainer


def write_metrics(path, history):
    lines = [",".join(METRIC_FIELDS)]
    for rec in history:
        lines.append(",".join(_fmt(rec[k]) for k in METRIC_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bg": st["bit_generator"], "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]), "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"])}


def _set_rng_state(rng, st):
    rng.bit_generator.state = {
        "bit_generator": st["bg"],
        "state": {"state": int(st["state"]), "inc": int(st["inc"])},
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _config_from_text(text):
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(text)
        name = fh.name
    try:
        return load_config(name)
    finally:
        Path(name).unlink(missing_ok=True)
