"""Expert phase solver, non-learned baselines and the beamforming environment."""

from __future__ import annotations

import numpy as np

from .channel_sim import CorrelationMatrix, EnvConfig, mrt_rate, sample_slots
from .diffusion import Condition, draw_mask, extract_condition, tokens_to_vector, vectorize


def wrap_phase(theta):
    """Map angles onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2 * np.pi)


def random_phases(N: int, rng, size=None) -> np.ndarray:
    shape = (N,) if size is None else (*np.atleast_1d(size), N)
    # -U[-pi, pi) lands on (-pi, pi]
    return -rng.uniform(-np.pi, np.pi, shape)


def _svd_init(H: np.ndarray) -> np.ndarray:
    # align every H_n w with w the dominant right singular vector of H
    _, _, vh = np.linalg.svd(H)
    w = np.conj(vh[:, 0, :])
    return -np.angle(np.einsum("bnm,bm->bn", H, w))


def _coordinate_ascent(H, theta, sweeps, tol, debug):
    B, N, _ = H.shape
    phi = np.exp(1j * theta)
    s = np.einsum("bn,bnm->bm", phi, H)
    obj = np.sum(np.abs(s) ** 2, axis=1)
    active = np.ones(B, dtype=bool)
    for _ in range(sweeps):
        start = obj.copy()
        for n in range(N):
            Hn = H[:, n, :]
            v = s - phi[:, n, None] * Hn
            c = np.sum(Hn * np.conj(v), axis=1)
            new = np.where(np.abs(c) > 0, np.exp(-1j * np.angle(c)), phi[:, n])
            new = np.where(active, new, phi[:, n])
            phi[:, n] = new
            s = v + new[:, None] * Hn
            if debug:
                cur = np.sum(np.abs(s) ** 2, axis=1)
                if np.any(cur < obj - 1e-12 * np.maximum(obj, 1e-300)):
                    raise AssertionError("coordinate update decreased the objective")
                obj = cur
        obj = np.sum(np.abs(s) ** 2, axis=1)
        active &= (obj - start) > tol * np.maximum(start, np.finfo(float).tiny)
        if not active.any():
            break
    return np.angle(phi), obj


def ao_optimize_batch(H, P: float, noise_var: float, sweeps: int = 100, tol: float = 1e-12,
                      restarts: int = 3, rng=None, debug: bool = False):
    """Coordinate-ascent phase optimizer for a batch ``H`` of shape (B, N, M).

    Each coordinate is set to its closed-form maximizer ``-arg(H_n v^H)`` where
    ``v`` is the contribution of all other elements.  The first start is the
    singular-vector alignment heuristic; the remaining ``restarts - 1`` starts
    are random.  Returned phases have ``theta[:, 0] == 0``.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    H = np.asarray(H, dtype=complex)
    rng = np.random.default_rng(0) if rng is None else rng
    B, N, _ = H.shape
    best_theta, best_obj = _coordinate_ascent(H, _svd_init(H), sweeps, tol, debug)
    for _ in range(max(restarts, 1) - 1):
        theta, obj = _coordinate_ascent(H, random_phases(N, rng, B), sweeps, tol, debug)
        better = obj > best_obj
        best_theta[better] = theta[better]
        best_obj = np.where(better, obj, best_obj)
    best_theta = wrap_phase(best_theta - best_theta[:, :1])
    return best_theta, mrt_rate(best_theta, H, P, noise_var)


def ao_optimize(H, P: float, noise_var: float, sweeps: int = 100, tol: float = 1e-12,
                restarts: int = 3, rng=None, debug: bool = False):
    theta, rate = ao_optimize_batch(np.asarray(H)[None], P, noise_var, sweeps, tol,
                                    restarts, rng, debug)
    return theta[0], float(rate[0])


def rc_impute(condition: Condition, entry_variance, rng) -> np.ndarray:
    """Random-channel fill: observed rows copied, masked rows drawn i.i.d.

    ``entry_variance`` is the per-complex-entry variance (scalar or one value
    per antenna).  No spatial correlation is used.
    """
    N, M = condition.N, condition.tokens.shape[-1] // 2
    var = np.broadcast_to(np.asarray(entry_variance, dtype=float), (M,))
    std = np.sqrt(np.concatenate([var, var]) / 2)
    tokens = rng.standard_normal((N, 2 * M)) * std
    tokens[condition.indices] = condition.tokens
    return tokens_to_vector(tokens)


class BeamEnv:
    """Slot-level beamforming environment.

    The reward of a step is the MRT rate of the chosen phases on the current
    true channel.  The returned state is one of three CSI views:

    - ``"true"``: the full cascaded channel,
    - ``"imputed"``: ``imputer(conditions) -> (n, 2NM)`` applied to the partial estimate,
    - ``"random"``: observed rows plus an uncorrelated random fill.

    Channels are i.i.d. across slots and do not depend on actions, so states
    are computed ``prefetch`` slots at a time (batched imputation).
    """

    def __init__(self, env: EnvConfig, corr: CorrelationMatrix | None = None, view: str = "true",
                 rho: float = 0.0, est_snr_db: float | None = None, imputer=None,
                 mask_pattern: str = "random", rng=None, prefetch: int | None = None):
        if view not in ("true", "imputed", "random"):
            raise ValueError(f"unknown view {view!r}")
        if view == "imputed" and imputer is None:
            raise ValueError("imputed view needs an imputer")
        self.env = env
        self.corr = env.correlation() if corr is None else corr
        self.view = view
        self.rho = rho
        self.est_snr_db = est_snr_db
        self.imputer = imputer
        self.mask_pattern = mask_pattern
        self.rng = np.random.default_rng(env.seed) if rng is None else rng
        self.prefetch = env.T if prefetch is None else prefetch
        self.entry_var = env.cascaded_variance()
        self.slot = 0
        self.H = None
        self.observed = None
        self._queue = []

    @property
    def est_noise_var(self) -> float:
        if self.est_snr_db is None:
            return 0.0
        return float(np.mean(self.entry_var)) / 10 ** (self.est_snr_db / 10)

    def _refill(self):
        _, _, H = sample_slots(self.env, self.corr, self.rng, self.prefetch)
        x = vectorize(H)
        conds = []
        for i in range(self.prefetch):
            mask = draw_mask(self.env.N, self.rho, self.rng, self.mask_pattern)
            conds.append(extract_condition(x[i], mask, self.env.M, self.est_noise_var, self.rng))
        if self.view == "true":
            states = x
        elif self.view == "random":
            states = np.stack([rc_impute(c, self.entry_var, self.rng) for c in conds])
        else:
            states = np.asarray(self.imputer(conds))
        self._queue.extend(zip(H, states, (len(c.indices) for c in conds)))

    def _advance(self):
        if not self._queue:
            self._refill()
        self.H, state, self.observed = self._queue.pop(0)
        return state

    def reset(self):
        self.slot = 0
        return self._advance()

    def step(self, phases):
        phases = np.asarray(phases, dtype=float)
        if phases.shape != (self.env.N,):
            raise ValueError(f"expected {self.env.N} phases, got shape {phases.shape}")
        if self.H is None:
            raise RuntimeError("call reset() first")
        reward = float(mrt_rate(phases, self.H, self.env.P, self.env.noise_var))
        self.slot += 1
        done = self.slot >= self.env.T
        state = None if done else self._advance()
        return reward, state, done

    def true_state(self) -> np.ndarray:
        return vectorize(self.H)

    def current_H(self) -> np.ndarray:
        return self.H


def env_reset(env: BeamEnv):
    return env.reset()


def env_step(env: BeamEnv, phases):
    return env.step(phases)


__all__ = [
    "BeamEnv", "ao_optimize", "ao_optimize_batch", "env_reset", "env_step", "random_phases",
    "rc_impute", "wrap_phase",
]
