"""Noise schedule, CSI vectorization, masking and the DDPM forward/reverse steps.

Diffusion steps are 1-based (``k = 1..K``) at the API; arrays are stored
0-based with ``a_bar_at(0) == 1``.

CSI layout: ``x = [Re(vec(H)); Im(vec(H))]`` with ``vec`` stacking the
columns of the ``N x M`` cascaded channel (antenna-major), so
``x[m * N + n] = Re H[n, m]`` and ``x[N*M + m * N + n] = Im H[n, m]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    K: int
    b: np.ndarray
    a_bar: np.ndarray

    def b_at(self, k):
        return self.b[np.asarray(k) - 1]

    def a_bar_at(self, k):
        """Cumulative product at step ``k``; ``k = 0`` gives 1."""
        padded = np.concatenate([[1.0], self.a_bar])
        return padded[np.asarray(k)]

    def posterior_variance(self, k):
        k = np.asarray(k)
        return (1 - self.a_bar_at(k - 1)) / (1 - self.a_bar_at(k)) * self.b_at(k)

    def check_step(self, k):
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise ValueError(f"diffusion step out of range 1..{self.K}: {k}")


def build_schedule(K: int, b_first: float, b_last: float) -> NoiseSchedule:
    """Linear variance schedule from ``b_first`` to ``b_last`` over ``K`` steps."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not (0 < b_first <= b_last < 1):
        raise ValueError(f"need 0 < b_first <= b_last < 1, got {b_first}, {b_last}")
    b = np.array([b_first]) if K == 1 else np.linspace(b_first, b_last, K)
    a_bar = np.empty(K)
    prev = 1.0
    for i in range(K):
        prev = (1.0 - b[i]) * prev
        a_bar[i] = prev
    for arr in (b, a_bar):
        arr.setflags(write=False)
    return NoiseSchedule(K=K, b=b, a_bar=a_bar)


def vectorize(H) -> np.ndarray:
    """Real vector of length 2NM for ``H`` of shape (..., N, M)."""
    H = np.asarray(H)
    flat = np.swapaxes(H, -1, -2).reshape(*H.shape[:-2], -1)
    return np.concatenate([flat.real, flat.imag], axis=-1)


def devectorize(x, N: int, M: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2 * N * M:
        raise ValueError(f"expected length {2 * N * M}, got {x.shape[-1]}")
    half = N * M
    flat = x[..., :half] + 1j * x[..., half:]
    return np.swapaxes(flat.reshape(*x.shape[:-1], M, N), -1, -2)


def vector_to_tokens(x, N: int, M: int) -> np.ndarray:
    """(..., N, 2M) element tokens ``[Re H[n, :], Im H[n, :]]``."""
    H = devectorize(x, N, M)
    return np.concatenate([H.real, H.imag], axis=-1)


def tokens_to_vector(tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    M = tokens.shape[-1] // 2
    return vectorize(tokens[..., :M] + 1j * tokens[..., M:])


@dataclass(frozen=True)
class MaskPattern:
    N: int
    observed: tuple

    def __post_init__(self):
        obs = tuple(sorted(int(i) for i in self.observed))
        if len(set(obs)) != len(obs) or any(i < 0 or i >= self.N for i in obs):
            raise ValueError(f"observed indices must be unique and in [0, {self.N})")
        object.__setattr__(self, "observed", obs)

    @property
    def rho(self) -> float:
        return 1.0 - len(self.observed) / self.N

    @property
    def indicator(self) -> np.ndarray:
        ind = np.zeros(self.N)
        ind[list(self.observed)] = 1.0
        return ind


def observed_count(N: int, rho: float) -> int:
    if not 0 <= rho <= 1:
        raise ValueError(f"mask ratio must lie in [0, 1], got {rho}")
    return int(math.floor(N * (1 - rho) + 0.5))


def draw_mask(N: int, rho: float, rng, pattern: str = "random") -> MaskPattern:
    """Random subset of ``round(N (1 - rho))`` elements, or every ``ceil(1/(1-rho))``-th one."""
    n_obs = observed_count(N, rho)
    if pattern == "random":
        observed = rng.choice(N, size=n_obs, replace=False) if n_obs else ()
    elif pattern == "grid":
        observed = () if rho >= 1 else range(0, N, math.ceil(1 / (1 - rho)))
    else:
        raise ValueError(f"unknown mask pattern {pattern!r}")
    return MaskPattern(N=N, observed=tuple(observed))


@dataclass(frozen=True, eq=False)
class Condition:
    """Partial CSI: one ``2M``-wide token per observed element plus its index."""

    N: int
    tokens: np.ndarray
    indices: np.ndarray

    @property
    def indicator(self) -> np.ndarray:
        ind = np.zeros(self.N)
        ind[self.indices] = 1.0
        return ind

    @property
    def rho(self) -> float:
        return 1.0 - len(self.indices) / self.N

    def full(self) -> np.ndarray:
        """(N, 2M) zero-filled layout with observed rows in place."""
        out = np.zeros((self.N, self.tokens.shape[-1]))
        out[self.indices] = self.tokens
        return out


def extract_condition(x, mask: MaskPattern, M: int, est_noise_var: float, rng) -> Condition:
    """Observed rows of ``x`` plus CN(0, est_noise_var) estimation noise per complex entry."""
    if est_noise_var < 0:
        raise ValueError("est_noise_var must be >= 0")
    idx = np.asarray(mask.observed, dtype=int)
    tokens = vector_to_tokens(x, mask.N, M)[idx]
    if est_noise_var > 0:
        tokens = tokens + rng.standard_normal(tokens.shape) * math.sqrt(est_noise_var / 2)
    return Condition(N=mask.N, tokens=tokens, indices=idx)


def est_noise_var_from_snr(snr_db: float, signal_var: float = 1.0) -> float:
    return signal_var / 10 ** (snr_db / 10)


def forward_diffuse(x0, k, eps, sched: NoiseSchedule):
    """``x_k = sqrt(a_bar_k) x0 + sqrt(1 - a_bar_k) eps``; ``k`` may be per-sample."""
    sched.check_step(k)
    a = sched.a_bar_at(k)
    if np.ndim(a):
        a = np.asarray(a)[..., None]
    return np.sqrt(a) * x0 + np.sqrt(1 - a) * eps


def forward_step(x_prev, k, eps, sched: NoiseSchedule):
    """Single transition ``sqrt(1 - b_k) x_{k-1} + sqrt(b_k) eps``."""
    sched.check_step(k)
    b = sched.b_at(k)
    return np.sqrt(1 - b) * x_prev + np.sqrt(b) * eps


def reverse_step(x_k, eps_hat, k: int, sched: NoiseSchedule, rng=None, z=None):
    """One ancestral denoising step.

    Mean ``(x_k - b_k / sqrt(1 - a_bar_k) * eps_hat) / sqrt(1 - b_k)``, plus
    ``sqrt(Sigma_k) * z`` with ``Sigma_k = (1 - a_bar_{k-1}) / (1 - a_bar_k) * b_k``.
    No noise is added at ``k = 1``.
    """
    sched.check_step(k)
    b = sched.b_at(k)
    mean = (x_k - b / math.sqrt(1 - sched.a_bar_at(k)) * eps_hat) / math.sqrt(1 - b)
    if k == 1:
        return mean
    if z is None:
        z = rng.standard_normal(np.shape(x_k))
    return mean + math.sqrt(sched.posterior_variance(k)) * z


def nmse(x_hat, x_true) -> float:
    x_true = np.asarray(x_true, dtype=float)
    denom = np.sum(x_true**2)
    if denom <= 0:
        raise ValueError("NMSE undefined for an all-zero reference")
    return float(np.sum((np.asarray(x_hat) - x_true) ** 2) / denom)


def average_nmse(x_hat, x_true) -> float:
    """Dataset NMSE ``sum ||x_hat - x||^2 / sum ||x||^2`` over a batch of slots."""
    return nmse(np.asarray(x_hat).ravel(), np.asarray(x_true).ravel())
