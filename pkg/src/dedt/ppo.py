"""Clipped-surrogate PPO baseline over the (cos, sin) pair action space."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dt_policy import phases_from_pairs


@dataclass
class PpoConfig:
    rollout: int = 2048
    epochs: int = 4
    clip: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    lr: float = 3e-4
    total_steps: int = 50_000
    minibatch: int = 256
    hidden: int = 128
    init_log_std: float = -0.5
    time_budget: float = 0.0  # seconds, 0 disables

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip ratio must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.rollout < 1 or self.epochs < 1 or self.total_steps < 1 or self.minibatch < 1:
            raise ValueError("rollout, epochs, total_steps and minibatch must be positive")


def _rms_normalize(s: torch.Tensor) -> torch.Tensor:
    return s / s.pow(2).mean(-1, keepdim=True).sqrt().clamp_min(1e-30)


class GaussianPolicy(nn.Module):
    def __init__(self, state_dim: int, N: int, hidden: int = 128, init_log_std: float = -0.5):
        super().__init__()
        self.N = N
        self.mean = nn.Sequential(nn.Linear(state_dim, hidden), nn.Tanh(),
                                  nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 2 * N))
        self.value = nn.Sequential(nn.Linear(state_dim, hidden), nn.Tanh(),
                                   nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 1))
        self.log_std = nn.Parameter(torch.full((2 * N,), init_log_std))

    def dist(self, s):
        s = _rms_normalize(s)
        return torch.distributions.Normal(self.mean(s), self.log_std.exp()), self.value(s)[..., 0]

    @torch.no_grad()
    def act(self, state: np.ndarray, deterministic: bool = True) -> np.ndarray:
        """Phases for one state; the raw 2N output is read as (cos, sin) pairs."""
        d, _ = self.dist(torch.as_tensor(state[None], dtype=torch.float32))
        a = d.mean if deterministic else d.sample()
        return _to_phases(a[0].double().numpy())


def _to_phases(a: np.ndarray) -> np.ndarray:
    pairs = a.reshape(-1, 2).copy()
    # a pair that lands exactly on the origin keeps phase 0
    pairs[np.hypot(pairs[:, 0], pairs[:, 1]) == 0] = (1.0, 0.0)
    return phases_from_pairs(pairs.ravel())


def _gae(rewards, values, dones, last_value, discount, lam):
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        nxt = last_value if t == len(rewards) - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * nxt * live - values[t]
        running = delta + discount * lam * live * running
        adv[t] = running
    return adv, adv + values


def ppo_train(env, cfg: PpoConfig, rng, seed: int = 0, callback=None):
    """Train on ``env`` (a :class:`~dedt.experts.BeamEnv`); returns ``(policy, curve)``.

    ``curve[u]`` is the mean per-slot rate collected during update ``u``.
    Training stops after ``total_steps`` environment steps or when the
    optional wall-clock budget runs out, whichever is first.
    """
    torch.manual_seed(seed)
    N = env.env.N
    state_dim = 2 * N * env.env.M
    policy = GaussianPolicy(state_dim, N, cfg.hidden, cfg.init_log_std)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    curve = []
    steps = 0
    t0 = time.perf_counter()
    state = env.reset()
    while steps < cfg.total_steps:
        n = min(cfg.rollout, cfg.total_steps - steps)
        S = np.zeros((n, state_dim))
        A = np.zeros((n, 2 * N))
        logp = np.zeros(n)
        V = np.zeros(n)
        R = np.zeros(n)
        D = np.zeros(n)
        with torch.no_grad():
            for t in range(n):
                S[t] = state
                d, v = policy.dist(torch.as_tensor(state[None], dtype=torch.float32))
                a = d.sample()
                A[t] = a[0].numpy()
                logp[t] = d.log_prob(a).sum().item()
                V[t] = v.item()
                R[t], state, done = env.step(_to_phases(A[t]))
                D[t] = float(done)
                if done:
                    state = env.reset()
            last = policy.dist(torch.as_tensor(state[None], dtype=torch.float32))[1].item()
        steps += n
        adv, ret = _gae(R, V, D, last, cfg.discount, cfg.gae_lambda)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        St, At, Lt, Gt, Rt = (torch.as_tensor(x, dtype=torch.float32) for x in (S, A, logp, adv, ret))
        for _ in range(cfg.epochs):
            for idx in np.array_split(rng.permutation(n), max(1, n // cfg.minibatch)):
                idx = torch.as_tensor(idx)
                d, v = policy.dist(St[idx])
                ratio = (d.log_prob(At[idx]).sum(-1) - Lt[idx]).exp()
                surr = torch.min(ratio * Gt[idx], ratio.clamp(1 - cfg.clip, 1 + cfg.clip) * Gt[idx])
                loss = (-surr.mean() + cfg.value_coef * (v - Rt[idx]).pow(2).mean()
                        - cfg.entropy_coef * d.entropy().sum(-1).mean())
                if not torch.isfinite(loss):
                    raise FloatingPointError("non-finite PPO loss")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(policy.parameters(), 0.5)
                opt.step()
        curve.append(float(R.mean()))
        if callback is not None:
            callback(len(curve) - 1, policy, curve[-1])
        if cfg.time_budget and time.perf_counter() - t0 > cfg.time_budget:
            break
    return policy, curve


def ppo_evaluate(policy: GaussianPolicy, env, episodes: int) -> np.ndarray:
    """Per-episode mean rates of the deterministic (mean-action) policy."""
    out = np.zeros(episodes)
    for e in range(episodes):
        state = env.reset()
        rates = []
        done = False
        while not done:
            r, state, done = env.step(policy.act(state))
            rates.append(r)
        out[e] = np.mean(rates)
    return out
