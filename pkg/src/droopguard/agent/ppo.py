"""Clipped-surrogate policy optimization over collected rollouts.

The update maximizes the Monte-Carlo estimate of the clipped surrogate
min(r*A, clip(r, 1-eps, 1+eps)*A) plus an entropy bonus, and regresses the
value network on the bootstrapped returns. Gradients are computed
analytically through the categorical heads; a finite-difference test in the
suite pins them down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import log_softmax, softmax


@dataclass
class RolloutBatch:
    """Flat transition arrays plus episode boundaries (done flags)."""

    obs: np.ndarray  # (N, d)
    head_actions: tuple  # per head: (N,) int arrays
    logp_old: np.ndarray  # (N,)
    rewards: np.ndarray  # (N,)
    values: np.ndarray  # (N,)
    dones: np.ndarray  # (N,) bool, True at episode ends
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    adv_normalized: bool = False
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


def compute_gae(rewards, values, dones, gamma, lam):
    """Exponentially weighted advantage estimates, truncated at episode ends.

    Episodes here always terminate (no bootstrapping past a done flag), so
    the tail value after a terminal step is zero.
    """
    n = len(rewards)
    adv = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_value = 0.0
            gae = 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * lam * gae
        adv[t] = gae
    return adv, adv + values


def finalize_batch(batch: RolloutBatch, gamma, lam, normalize=True):
    adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, gamma, lam)
    if normalize:
        std = adv.std()
        adv = (adv - adv.mean()) / (std + 1e-8)
    batch.advantages = adv
    batch.returns = ret
    batch.adv_normalized = normalize
    return batch


def surrogate_and_grads(policy, obs, head_actions, logp_old, adv, clip_eps, entropy_coef):
    """Loss pieces and parameter gradients for one minibatch.

    Returns (metrics, grads) where the loss being minimized is
    -(surrogate + entropy_coef * entropy).
    """
    n = obs.shape[0]
    logits = policy.net.forward(obs, cache=True)
    logps = [log_softmax(z) for z in logits]
    idx = np.arange(n)
    logp_new = sum(lp[idx, a] for lp, a in zip(logps, head_actions))

    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    active = unclipped <= clipped  # gradient flows only through the raw-ratio branch

    # d(-surrogate)/d(logp_new); mean over batch
    dlogp = -(active * ratio * adv) / n

    entropy_total = 0.0
    d_outs = []
    for lp, a in zip(logps, head_actions):
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        onehot[idx, a] = 1.0
        dz = dlogp[:, None] * (onehot - p)
        h = -(p * lp).sum(axis=1)
        entropy_total += h.mean()
        if entropy_coef != 0.0:
            # d(-coef*H)/dz = coef * p * (lp + H)
            dz = dz + entropy_coef * p * (lp + h[:, None]) / n
        d_outs.append(dz)

    grads = policy.net.backward(d_outs)
    metrics = {
        "surrogate": float(surrogate.mean()),
        "entropy": float(entropy_total),
        "clip_fraction": float(np.mean((~active).astype(float))),
        "approx_kl": float(np.mean(logp_old - logp_new)),
    }
    return metrics, grads


def value_loss_and_grads(value_net, obs, returns, coef):
    n = obs.shape[0]
    v = value_net.value(obs, cache=True)
    err = v - returns
    loss = float(np.mean(err**2))
    dv = (2.0 * coef / n) * err
    grads = value_net.net.backward([dv[:, None]])
    return loss, grads


def ppo_update(policy, value_net, optimizer, batch: RolloutBatch, config,
               entropy_coef=None, rng=None):
    """Run the configured epochs of minibatch updates over one batch.

    ``rng`` drives the minibatch shuffle and must come from the run's seed
    stream for reproducibility. On a non-finite loss the update aborts and
    parameters are restored to their pre-update values.
    """
    if batch.advantages is None:
        raise ValueError("batch advantages not computed; call finalize_batch first")
    if entropy_coef is None:
        entropy_coef = config.entropy_coef
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(batch)
    snapshot = [p.copy() for p in optimizer.params]

    stats = {"surrogate": 0.0, "entropy": 0.0, "clip_fraction": 0.0,
             "approx_kl": 0.0, "value_loss": 0.0}
    count = 0
    # the value net regresses returns/value_scale so its head stays O(1)
    vscale = getattr(config, "value_scale", 1.0) or 1.0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            sel = order[start : start + config.minibatch]
            mb_actions = tuple(a[sel] for a in batch.head_actions)
            m, pgrads = surrogate_and_grads(
                policy, batch.obs[sel], mb_actions, batch.logp_old[sel],
                batch.advantages[sel], config.clip, entropy_coef,
            )
            vloss, vgrads = value_loss_and_grads(
                value_net, batch.obs[sel], batch.returns[sel] / vscale, config.value_coef
            )
            total_finite = all(np.isfinite(g).all() for g in pgrads + vgrads)
            if not (np.isfinite(m["surrogate"]) and np.isfinite(vloss) and total_finite):
                for p, saved in zip(optimizer.params, snapshot):
                    np.copyto(p, saved)
                raise ArithmeticError("non-finite loss; parameters restored")
            optimizer.step(pgrads + vgrads)
            for k in ("surrogate", "entropy", "clip_fraction", "approx_kl"):
                stats[k] += m[k]
            stats["value_loss"] += vloss
            count += 1
    for k in stats:
        stats[k] /= max(count, 1)
    return stats
