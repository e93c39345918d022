"""Minimal dense networks with hand-written reverse-mode gradients.

The policy is a tanh MLP trunk with one categorical head per action
dimension; the value function is the same trunk shape with a scalar head.
Everything is plain numpy: forward passes cache activations, backward passes
return parameter gradients in a flat list aligned with ``params()``.
"""
from __future__ import annotations

import numpy as np


def orthogonal(rng, shape, gain=1.0):
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


class MLP:
    """Tanh trunk with linear heads.

    ``head_sizes`` of (11, 11) gives a two-head categorical policy; (1,)
    gives a value network. Output heads start near zero so an untrained
    policy is near-uniform.
    """

    def __init__(self, n_in, head_sizes, hidden=(64, 64, 32), rng=None, head_gain=0.01):
        if rng is None:
            rng = np.random.default_rng(0)
        self.hidden_sizes = tuple(hidden)
        self.head_sizes = tuple(head_sizes)
        self.W = []
        self.b = []
        last = n_in
        for h in hidden:
            self.W.append(orthogonal(rng, (last, h), gain=np.sqrt(2.0)))
            self.b.append(np.zeros(h))
            last = h
        self.Wh = [orthogonal(rng, (last, k), gain=head_gain) for k in head_sizes]
        self.bh = [np.zeros(k) for k in head_sizes]
        self._cache = None

    def params(self):
        return self.W + self.b + self.Wh + self.bh

    def set_params(self, values):
        current = self.params()
        if len(values) != len(current):
            raise ValueError(f"expected {len(current)} parameter arrays, got {len(values)}")
        for dst, src in zip(current, values):
            np.copyto(dst, src)

    def forward(self, x, cache: bool = False):
        """Returns a list of head outputs, one (B, k) array per head."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [x]
        h = x
        for W, b in zip(self.W, self.b):
            h = np.tanh(h @ W + b)
            acts.append(h)
        outs = [h @ Wh + bh for Wh, bh in zip(self.Wh, self.bh)]
        if cache:
            self._cache = acts
        return outs

    def backward(self, d_outs):
        """Gradients of a scalar loss given d(loss)/d(head outputs).

        Must follow a ``forward(..., cache=True)`` on the same inputs.
        Returns gradients aligned with ``params()``.
        """
        acts = self._cache
        h_last = acts[-1]
        gWh = [h_last.T @ d for d in d_outs]
        gbh = [d.sum(axis=0) for d in d_outs]
        dh = sum(d @ Wh.T for d, Wh in zip(d_outs, self.Wh))
        gW = [None] * len(self.W)
        gb = [None] * len(self.b)
        for i in range(len(self.W) - 1, -1, -1):
            dz = dh * (1.0 - acts[i + 1] ** 2)  # tanh'
            gW[i] = acts[i].T @ dz
            gb[i] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ self.W[i].T
        return gW + gb + gWh + gbh


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


class PolicyNetwork:
    """Categorical policy over the action grid (factored heads or one joint)."""

    def __init__(self, n_obs, head_sizes, hidden=(64, 64, 32), rng=None):
        self.net = MLP(n_obs, head_sizes, hidden, rng)
        self.head_sizes = tuple(head_sizes)

    def distributions(self, obs, cache=False):
        return [log_softmax(z) for z in self.net.forward(obs, cache=cache)]

    def sample(self, obs, rng):
        """Sample one action per head for a single observation."""
        logps = self.distributions(obs)
        picks = []
        logp = 0.0
        for lp in logps:
            p = np.exp(lp[0])
            p = p / p.sum()
            u = rng.random()
            k = int(np.searchsorted(np.cumsum(p), u, side="right"))
            k = min(k, len(p) - 1)
            picks.append(k)
            logp += float(lp[0, k])
        return tuple(picks), logp

    def greedy(self, obs):
        logps = self.distributions(obs)
        return tuple(int(lp.argmax(axis=-1)[0]) for lp in logps)

    def log_prob(self, obs, head_actions):
        """Summed log-probability of (B,) per-head action index arrays."""
        logps = self.distributions(obs)
        total = 0.0
        for lp, a in zip(logps, head_actions):
            total = total + lp[np.arange(lp.shape[0]), a]
        return total

    def params(self):
        return self.net.params()


class ValueNetwork:
    def __init__(self, n_obs, hidden=(64, 64, 32), rng=None):
        self.net = MLP(n_obs, (1,), hidden, rng, head_gain=1.0)

    def value(self, obs, cache=False):
        return self.net.forward(obs, cache=cache)[0][:, 0]

    def params(self):
        return self.net.params()


class Adam:
    """Adaptive-moment SGD over a list of parameter arrays (updated in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            np.copyto(dst, src)
        for dst, src in zip(self.v, state["v"]):
            np.copyto(dst, src)
