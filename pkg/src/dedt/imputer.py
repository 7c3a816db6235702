"""Training and sampling for the conditional diffusion imputer."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .denoiser import Denoiser, scatter_condition
from .diffusion import (Condition, NoiseSchedule, build_schedule, forward_diffuse, observed_count,
                        reverse_step, vector_to_tokens)


@dataclass
class DmConfig:
    # b range scaled so that a_bar_K matches a 500-step 1e-4..0.02 schedule
    K: int = 100
    b_first: float = 5e-4
    b_last: float = 0.1
    width: int = 64
    heads: int = 4
    layers: int = 2
    dropout: float = 0.0
    batch: int = 64
    steps: int = 4000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    rho_min: float = 0.0
    rho_max: float = 1.0
    snr_db_min: float = 0.0
    snr_db_max: float = 30.0
    noiseless_prob: float = 0.25
    all_k: bool = False

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.K, self.b_first, self.b_last)


def random_conditions(x0: np.ndarray, N: int, M: int, rhos, est_noise_vars, rng):
    """Batched masking: zero-filled condition layout ``(B, N, 2M)`` and indicator ``(B, N)``.

    Sample ``b`` observes ``round(N (1 - rhos[b]))`` elements chosen uniformly
    and adds CN(0, est_noise_vars[b]) per complex entry.
    """
    B = len(x0)
    counts = np.array([observed_count(N, r) for r in np.broadcast_to(rhos, (B,))])
    order = np.argsort(rng.uniform(size=(B, N)), axis=1)
    ranks = np.argsort(order, axis=1)
    indicator = (ranks < counts[:, None]).astype(float)
    tokens = vector_to_tokens(x0, N, M)
    noise = rng.standard_normal(tokens.shape) * np.sqrt(np.broadcast_to(est_noise_vars, (B,)) / 2)[:, None, None]
    return (tokens + noise) * indicator[..., None], indicator


def diffusion_loss(model, x0, cond_full, indicator, k, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Batch mean of ``||eps - eps_hat(x_k, condition, k)||^2``."""
    x_k = forward_diffuse(x0, k, eps, sched)
    t = lambda a: torch.as_tensor(a, dtype=torch.float32)
    eps_hat = model(t(x_k), t(cond_full), t(indicator), torch.as_tensor(k))
    return ((t(eps) - eps_hat) ** 2).sum(-1).mean()


def dm_train_step(model, optimizer, x0, cond_full, indicator, sched: NoiseSchedule, rng,
                  all_k: bool = False) -> float:
    """One optimizer update; returns the pre-update loss.

    By default one step ``k ~ U{1..K}`` is drawn per sample.  ``all_k=True``
    sums the loss over every ``k`` for every sample instead.
    """
    if len(x0) == 0:
        raise ValueError("empty batch")
    model.train()
    if all_k:
        B = len(x0)
        ks = np.repeat(np.arange(1, sched.K + 1), B)
        rep = lambda a: np.tile(a, (sched.K,) + (1,) * (a.ndim - 1))
        eps = rng.standard_normal((sched.K * B, x0.shape[1]))
        loss = diffusion_loss(model, rep(x0), rep(cond_full), rep(indicator), ks, eps, sched) * sched.K
    else:
        k = rng.integers(1, sched.K + 1, len(x0))
        eps = rng.standard_normal(x0.shape)
        loss = diffusion_loss(model, x0, cond_full, indicator, k, eps, sched)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite diffusion loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def impute_csi(model, cond_full, indicator, sched: NoiseSchedule, rng) -> np.ndarray:
    """Ancestral sampling from ``x_K ~ N(0, I)`` down to ``x_0`` for a batch of conditions."""
    model.eval()
    cond_full = np.asarray(cond_full, dtype=float)
    if cond_full.ndim == 2:
        return impute_csi(model, cond_full[None], np.asarray(indicator)[None], sched, rng)[0]
    B = len(cond_full)
    c = torch.as_tensor(cond_full, dtype=torch.float32)
    ind = torch.as_tensor(np.asarray(indicator), dtype=torch.float32)
    x = rng.standard_normal((B, 2 * model.N * model.M))
    for k in range(sched.K, 0, -1):
        eps_hat = model(torch.as_tensor(x, dtype=torch.float32), c, ind,
                        torch.full((B,), k)).double().numpy()
        x = reverse_step(x, eps_hat, k, sched, rng)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sample at diffusion step {k}")
    return x


class DiffusionImputer:
    """Denoiser + schedule + data scale; maps physical partial CSI to full CSI.

    Data are divided by ``scale`` (RMS of the real training entries) before
    they reach the network and multiplied back on output.
    """

    def __init__(self, cfg: DmConfig, N1: int, N2: int, M: int, scale: float = 1.0, seed: int = 0):
        self.cfg = cfg
        self.N1, self.N2, self.M = N1, N2, M
        self.scale = float(scale)
        self.sched = cfg.schedule()
        torch.manual_seed(seed)
        self.model = Denoiser(self.N, M, cfg.width, cfg.heads, cfg.layers, cfg.dropout)
        self.meta = {}

    @property
    def N(self) -> int:
        return self.N1 * self.N2

    def normalize_condition(self, cond: Condition) -> Condition:
        return Condition(cond.N, cond.tokens / self.scale, cond.indices)

    def impute(self, conditions, rng, chunk: int = 512) -> np.ndarray:
        """Full CSI vectors ``(n, 2NM)`` in physical units for a list of conditions."""
        out = []
        for start in range(0, len(conditions), chunk):
            part = conditions[start:start + chunk]
            full, ind = zip(*(scatter_condition(c.tokens / self.scale, c.indices, self.N) for c in part))
            out.append(impute_csi(self.model, np.stack(full), np.stack(ind), self.sched, rng))
        return np.concatenate(out) * self.scale

    def bind(self, rng):
        """Callable ``conditions -> states`` for :class:`~dedt.experts.BeamEnv`."""
        return lambda conditions: self.impute(conditions, rng)

    def train(self, x_train: np.ndarray, rng, steps: int | None = None, callback=None,
              time_budget: float | None = None) -> list:
        """Fit on physical-unit CSI vectors ``(S, 2NM)``; sets ``scale`` from the data."""
        cfg = self.cfg
        steps = cfg.steps if steps is None else steps
        self.scale = float(np.sqrt(np.mean(x_train**2)))
        x = x_train / self.scale
        opt = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        history = []
        t0 = time.perf_counter()
        for i in range(steps):
            batch = x[rng.integers(0, len(x), cfg.batch)]
            rhos = rng.uniform(cfg.rho_min, cfg.rho_max, cfg.batch)
            snr = 10 ** (rng.uniform(cfg.snr_db_min, cfg.snr_db_max, cfg.batch) / 10)
            # normalized complex entries carry variance 2
            noise = np.where(rng.uniform(size=cfg.batch) < cfg.noiseless_prob, 0.0, 2.0 / snr)
            cond, ind = random_conditions(batch, self.N, self.M, rhos, noise, rng)
            history.append(dm_train_step(self.model, opt, batch, cond, ind, self.sched, rng, cfg.all_k))
            if callback is not None:
                callback(i, self)
            if time_budget is not None and time.perf_counter() - t0 > time_budget:
                break
        self.meta.update(steps=len(history), final_loss=history[-1] if history else None)
        return history

    def config_dict(self) -> dict:
        return {"dm": asdict(self.cfg), "N1": self.N1, "N2": self.N2, "M": self.M, "scale": self.scale}


@torch.no_grad()
def validation_loss(imputer: DiffusionImputer, x: np.ndarray, seed: int = 0) -> float:
    """Diffusion loss on physical-unit vectors ``x`` with a fixed draw of masks, k and noise."""
    rng = np.random.default_rng(seed)
    cfg = imputer.cfg
    xn = x / imputer.scale
    B = len(xn)
    rhos = rng.uniform(cfg.rho_min, cfg.rho_max, B)
    cond, ind = random_conditions(xn, imputer.N, imputer.M, rhos, np.zeros(B), rng)
    k = rng.integers(1, imputer.sched.K + 1, B)
    eps = rng.standard_normal(xn.shape)
    imputer.model.eval()
    return diffusion_loss(imputer.model, xn, cond, ind, k, eps, imputer.sched).item()
