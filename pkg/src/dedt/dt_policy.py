"""Decision-transformer beamforming policy.

Actions are stored as per-element ``(cos theta, sin theta)`` pairs (length
2N, interleaved) so the regression target has no 2*pi wrap.  A sequence is
``[tag, R_1, s_1, a_1, R_2, s_2, a_2, ...]``; the action for slot ``t`` is
read from the output at the state token ``s_t``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .experts import wrap_phase

UNKNOWN_TAG = 0


def pairs_from_phases(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1).reshape(*theta.shape[:-1], -1)


def phases_from_pairs(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("action pairs must be finite")
    pairs = a.reshape(*a.shape[:-1], -1, 2)
    if np.any(np.hypot(pairs[..., 0], pairs[..., 1]) == 0):
        raise ValueError("zero-norm action pair has no phase")
    return wrap_phase(np.arctan2(pairs[..., 1], pairs[..., 0]))


def returns_to_go(rewards) -> np.ndarray:
    return np.cumsum(np.asarray(rewards, dtype=float)[::-1])[::-1].copy()


@dataclass(frozen=True, eq=False)
class Trajectory:
    returns_to_go: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    tag: int = UNKNOWN_TAG

    def __len__(self):
        return len(self.rewards)


def build_trajectory(states, actions, rewards, tag: int = UNKNOWN_TAG) -> Trajectory:
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    T = len(rewards)
    if T < 1 or len(states) != T or len(actions) != T:
        raise ValueError(f"length mismatch: {len(states)} states, {len(actions)} actions, {T} rewards")
    return Trajectory(returns_to_go(rewards), states, actions, rewards, tag)


@dataclass
class ReplayBuffer:
    """Expert trajectories sharing N, M and T, each with an environment tag and prompt."""

    trajectories: list = field(default_factory=list)
    prompts: list = field(default_factory=list)

    def add(self, traj: Trajectory, prompt: float | None = None):
        if self.trajectories:
            ref = self.trajectories[0]
            if traj.states.shape != ref.states.shape or traj.actions.shape != ref.actions.shape:
                raise ValueError("trajectory shape differs from the rest of the buffer")
        self.trajectories.append(traj)
        self.prompts.append(float(traj.returns_to_go[0] if prompt is None else prompt))

    def __len__(self):
        return len(self.trajectories)

    def stacked(self):
        """Arrays ``rtg (E,T)``, ``states (E,T,S)``, ``actions (E,T,A)``, ``tags (E,)``."""
        t = self.trajectories
        return (np.stack([x.returns_to_go for x in t]), np.stack([x.states for x in t]),
                np.stack([x.actions for x in t]), np.array([x.tag for x in t], dtype=np.int64))


@dataclass
class DtConfig:
    N: int
    M: int
    hidden: int = 256
    blocks: int = 3
    heads: int = 4
    dropout: float = 0.1
    window: int = 20
    max_T: int = 50
    n_tags: int = 8
    rtg_scale: float = 50.0
    tag_dropout: float = 0.2

    @property
    def state_dim(self) -> int:
        return 2 * self.N * self.M

    @property
    def action_dim(self) -> int:
        return 2 * self.N


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Window of a trajectory prefix; the action of the last slot is absent."""

    returns_to_go: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    tag: int = UNKNOWN_TAG

    def __len__(self):
        return 3 * len(self.states) - 1


def encode_tokens(rtg, states, actions, context_window: int, tag: int = UNKNOWN_TAG) -> TokenSequence:
    """Keep the last ``context_window`` slots of a prefix of length ``len(states)``.

    ``actions`` is a 2-D array; entries from the last slot on are ignored.
    """
    t = len(states)
    if t < 1:
        raise ValueError("prefix must contain at least one slot")
    start = max(0, t - context_window)
    return TokenSequence(
        returns_to_go=np.asarray(rtg[start:t], dtype=float),
        states=np.asarray(states[start:t], dtype=float),
        actions=np.asarray(actions, dtype=float)[start:t - 1],
        timesteps=np.arange(start, t),
        tag=tag,
    )


def normalize_pairs(a: torch.Tensor) -> torch.Tensor:
    pairs = a.reshape(*a.shape[:-1], -1, 2)
    norm = pairs.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    return (pairs / norm).reshape(a.shape)


class DtModel(nn.Module):
    def __init__(self, cfg: DtConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.embed_rtg = nn.Linear(1, h)
        self.embed_state = nn.Linear(cfg.state_dim, h)
        self.embed_action = nn.Linear(cfg.action_dim, h)
        self.embed_timestep = nn.Embedding(cfg.max_T, h)
        self.embed_tag = nn.Embedding(cfg.n_tags, h)
        self.embed_ln = nn.LayerNorm(h)
        self.drop = nn.Dropout(cfg.dropout)
        layer = nn.TransformerEncoderLayer(h, cfg.heads, 4 * h, cfg.dropout, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.blocks, enable_nested_tensor=False)
        self.final_ln = nn.LayerNorm(h)
        self.head = nn.Linear(h, cfg.action_dim)

    def forward(self, rtg, states, actions, timesteps, tags):
        """Shapes ``(B,w)``, ``(B,w,S)``, ``(B,w,A)``, ``(B,w)``, ``(B,)``; returns ``(B,w,A)``.

        ``actions[:, t]`` only influences predictions after slot ``t``.
        """
        B, w, _ = states.shape
        # channel scale varies across environments; the optimal phases do not
        states = states / states.pow(2).mean(-1, keepdim=True).sqrt().clamp_min(1e-30)
        time = self.embed_timestep(timesteps)
        r = self.embed_rtg(rtg[..., None] / self.cfg.rtg_scale) + time
        s = self.embed_state(states) + time
        a = self.embed_action(actions) + time
        seq = torch.stack([r, s, a], dim=2).reshape(B, 3 * w, -1)
        seq = torch.cat([self.embed_tag(tags)[:, None], seq], dim=1)
        seq = self.drop(self.embed_ln(seq))
        L = seq.shape[1]
        causal = torch.triu(torch.full((L, L), float("-inf")), diagonal=1)
        out = self.final_ln(self.blocks(seq, mask=causal))
        state_out = out[:, 2::3][:, :w]
        return normalize_pairs(self.head(state_out))


def _to_torch(*arrays, dtype=torch.float32):
    return [torch.as_tensor(np.asarray(a), dtype=dtype) for a in arrays]


@torch.no_grad()
def dt_forward(model: DtModel, tokens: TokenSequence) -> np.ndarray:
    """Predicted action (2N pairs, unit norm) for the last slot of ``tokens``."""
    w = len(tokens.states)
    if tokens.states.shape[-1] != model.cfg.state_dim:
        raise ValueError(f"state width {tokens.states.shape[-1]} != {model.cfg.state_dim}")
    actions = np.zeros((w, model.cfg.action_dim))
    actions[: w - 1] = tokens.actions
    model.eval()
    rtg, states, acts = _to_torch(tokens.returns_to_go[None], tokens.states[None], actions[None])
    ts = torch.as_tensor(tokens.timesteps[None], dtype=torch.long)
    tags = torch.as_tensor([tokens.tag], dtype=torch.long)
    pred = model(rtg, states, acts, ts, tags)[0, -1].double().numpy()
    pairs = pred.reshape(-1, 2)
    # float32 normalization is only good to ~1e-7
    return (pairs / np.linalg.norm(pairs, axis=1, keepdims=True)).reshape(-1)


def _sample_windows(arrays, window, batch_size, rng):
    rtg, states, actions, tags = arrays
    E, T = rtg.shape
    w = min(window, T)
    ep = rng.integers(0, E, batch_size)
    start = rng.integers(0, T - w + 1, batch_size)
    idx = start[:, None] + np.arange(w)
    rows = ep[:, None]
    return rtg[rows, idx], states[rows, idx], actions[rows, idx], idx, tags[ep]


def action_loss(model, batch, final_only=False, tag_dropout=0.0, rng=None):
    rtg, states, actions, ts, tags = batch
    if tag_dropout > 0:
        tags = np.where(rng.uniform(size=len(tags)) < tag_dropout, UNKNOWN_TAG, tags)
    rtg_t, states_t, actions_t = _to_torch(rtg, states, actions)
    pred = model(rtg_t, states_t, actions_t, torch.as_tensor(ts, dtype=torch.long),
                 torch.as_tensor(tags, dtype=torch.long))
    err = (pred - actions_t) ** 2
    if final_only:
        err = err[:, -1]
    return err.mean()


def make_optimizer(params, lr, weight_decay=1e-4):
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def dt_train(model: DtModel, buffer: ReplayBuffer, iters: int, batch_size: int = 32,
             learning_rate: float = 1e-4, seed: int = 0, final_only: bool = False,
             clip: float = 1.0, callback=None) -> list:
    """Supervised action regression on windows sampled from ``buffer``.

    Returns the per-iteration loss.  ``callback(i, model)`` runs every
    iteration after the update, e.g. for periodic evaluation.
    """
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    arrays = buffer.stacked()
    opt = make_optimizer(model.parameters(), learning_rate)
    history = []
    for i in range(iters):
        model.train()
        batch = _sample_windows(arrays, model.cfg.window, batch_size, rng)
        loss = action_loss(model, batch, final_only, model.cfg.tag_dropout, rng)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite DT loss at iteration {i}")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), clip)
        opt.step()
        history.append(loss.item())
        if callback is not None:
            callback(i, model)
    return history


@torch.no_grad()
def dataset_loss(model: DtModel, buffer: ReplayBuffer) -> float:
    """Deterministic action MSE over consecutive non-overlapping windows of ``buffer``."""
    model.eval()
    rtg, states, actions, tags = buffer.stacked()
    E, T = rtg.shape
    w = min(model.cfg.window, T)
    total, count = 0.0, 0
    for start in range(0, T - w + 1, w):
        idx = np.arange(start, start + w)
        loss = action_loss(model, (rtg[:, idx], states[:, idx], actions[:, idx],
                                   np.tile(idx, (E, 1)), tags))
        total += float(loss) * E
        count += E
    return total / count


def head_parameters(model: DtModel):
    return list(model.head.parameters())


def fine_tune(model: DtModel, buffer: ReplayBuffer, steps: int, batch_size: int = 16,
              learning_rate: float = 1e-3, seed: int = 0, callback=None) -> DtModel:
    """Copy of ``model`` with only the linear action head trained on ``buffer``."""
    tuned = copy.deepcopy(model)
    if steps <= 0:
        return tuned
    head = set(id(p) for p in head_parameters(tuned))
    for p in tuned.parameters():
        p.requires_grad_(id(p) in head)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    arrays = buffer.stacked()
    opt = make_optimizer(head_parameters(tuned), learning_rate)
    for i in range(steps):
        tuned.train()
        batch = _sample_windows(arrays, tuned.cfg.window, batch_size, rng)
        loss = action_loss(tuned, batch, rng=rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if callback is not None:
            callback(i, tuned)
    for p in tuned.parameters():
        p.requires_grad_(True)
    return tuned


@dataclass(frozen=True, eq=False)
class Episode:
    trajectory: Trajectory
    phases: np.ndarray
    rates: np.ndarray
    returns_to_go: np.ndarray


@torch.no_grad()
def dt_rollout(model: DtModel, env, target_return: float, T: int | None = None,
               tag: int = UNKNOWN_TAG) -> Episode:
    """Run one episode in ``env`` (a :class:`~dedt.experts.BeamEnv`).

    The state at each slot is whatever view ``env`` produces (imputed, true
    or random-filled CSI).  The return-to-go starts at ``target_return`` and
    is decremented by each received reward.
    """
    if target_return < 0:
        raise ValueError("target return must be >= 0")
    T = env.env.T if T is None else T
    cfg = model.cfg
    rtg = np.zeros(T + 1)
    rtg[0] = target_return
    states = np.zeros((T, cfg.state_dim))
    actions = np.zeros((T, cfg.action_dim))
    rewards = np.zeros(T)
    phases = np.zeros((T, cfg.N))
    state = env.reset()
    for t in range(T):
        states[t] = state
        tokens = encode_tokens(rtg[: t + 1], states[: t + 1], actions[: t + 1], cfg.window, tag)
        actions[t] = dt_forward(model, tokens)
        phases[t] = phases_from_pairs(actions[t])
        rewards[t], state, done = env.step(phases[t])
        rtg[t + 1] = rtg[t] - rewards[t]
        if done and t < T - 1:
            raise RuntimeError(f"environment ended after {t + 1} of {T} slots")
    traj = Trajectory(rtg[:T].copy(), states, actions, rewards, tag)
    return Episode(traj, phases, rewards, rtg)
