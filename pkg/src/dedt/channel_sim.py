"""Spatially correlated RIS channels, cascaded channels and the MRT rate.

Element indexing is 0-based throughout: the element in row ``n1`` and column
``n2`` of the rectangular surface has linear index ``i = n1 * N2 + n2``.

The element area is called ``sigma_area`` and the receiver noise variance
``noise_var``; the two never share a name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSD_TOL = 1e-10


@dataclass(frozen=True)
class RisGeometry:
    """Rectangular RIS with ``N1`` rows and ``N2`` columns in the yz-plane."""

    N1: int
    N2: int
    d1: float
    d2: float
    wavelength: float

    def __post_init__(self):
        if self.N1 < 1 or self.N2 < 1:
            raise ValueError(f"element counts must be >= 1, got N1={self.N1}, N2={self.N2}")
        if not (self.d1 > 0 and self.d2 > 0 and self.wavelength > 0):
            raise ValueError("spacings and wavelength must be positive")

    @property
    def N(self) -> int:
        return self.N1 * self.N2

    def index(self, n1, n2):
        return np.asarray(n1) * self.N2 + np.asarray(n2)

    def coords(self, i):
        i = np.asarray(i)
        return i // self.N2, i % self.N2

    def positions(self) -> np.ndarray:
        """(N, 3) element positions ``[0, n1*d1, n2*d2]``."""
        n1, n2 = self.coords(np.arange(self.N))
        return np.stack([np.zeros(self.N), n1 * self.d1, n2 * self.d2], axis=1)


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    R: np.ndarray
    factor: np.ndarray

    @property
    def N(self) -> int:
        return self.R.shape[0]


def _sinc(x):
    # np.sinc is the normalized sin(pi x)/(pi x)
    return np.sinc(np.asarray(x) / np.pi)


def psd_factor(R: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == R`` for a (possibly singular) PSD ``R``.

    Eigenvalues in ``[-1e-10, 0)`` are clamped to zero; anything more negative
    is rejected.
    """
    w, V = np.linalg.eigh(R)
    if w.min() < -PSD_TOL:
        raise ValueError(f"correlation not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    B = V * np.sqrt(w)
    # B B^T = R; QR of B^T turns the square root into a triangular one
    _, r = np.linalg.qr(B.T)
    L = r.T
    signs = np.where(np.diag(L) < 0, -1.0, 1.0)
    return L * signs


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def correlation_from_matrix(R: np.ndarray) -> CorrelationMatrix:
    R = np.asarray(R, dtype=float)
    return CorrelationMatrix(R=_freeze(R.copy()), factor=_freeze(psd_factor(R)))


def build_correlation(geometry: RisGeometry, model: str = "paper") -> CorrelationMatrix:
    """Spatial correlation of an isotropically illuminated RIS.

    ``model="paper"`` keeps only the horizontal term,
    ``R[i, l] = sinc(2*pi*d2*(n2 - m2)/wavelength)``, so elements sharing a
    column index are fully correlated.  ``model="isotropic"`` uses the full
    element distance, ``sinc(2*pi*|p_i - p_l|/wavelength)``, which is what
    :func:`monte_carlo_correlation` converges to.
    """
    idx = np.arange(geometry.N)
    n1, n2 = geometry.coords(idx)
    k = 2 * np.pi / geometry.wavelength
    dn2 = n2[:, None] - n2[None, :]
    if model == "paper":
        R = _sinc(k * geometry.d2 * dn2)
    elif model == "isotropic":
        dn1 = n1[:, None] - n1[None, :]
        R = _sinc(k * np.hypot(geometry.d1 * dn1, geometry.d2 * dn2))
    else:
        raise ValueError(f"unknown correlation model {model!r}")
    return correlation_from_matrix(R)


def sample_arrival_angles(samples: int, rng: np.random.Generator):
    """Azimuth/elevation pairs with density ``cos(beta) / (2 pi)`` on [-pi/2, pi/2]^2."""
    alpha = rng.uniform(-np.pi / 2, np.pi / 2, samples)
    beta = np.arcsin(2 * rng.uniform(size=samples) - 1)
    return alpha, beta


def array_response(geometry: RisGeometry, alpha, beta) -> np.ndarray:
    """(S, N) array response ``exp(j q(alpha, beta)^T p_i)``."""
    alpha = np.atleast_1d(alpha)
    beta = np.atleast_1d(beta)
    q = (2 * np.pi / geometry.wavelength) * np.stack(
        [np.cos(alpha) * np.cos(beta), np.sin(alpha) * np.cos(beta), np.sin(beta)], axis=1
    )
    return np.exp(1j * q @ geometry.positions().T)


def monte_carlo_correlation(geometry: RisGeometry, samples: int, seed, chunk: int = 50_000):
    """Sample mean of ``gamma gamma^H`` over isotropic arrivals.

    Returns ``(real, imag)`` parts separately; the imaginary part should vanish
    as the sample count grows.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    acc = np.zeros((geometry.N, geometry.N), dtype=complex)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        gamma = array_response(geometry, *sample_arrival_angles(n, rng))
        acc += gamma.T @ gamma.conj()
        done += n
    acc /= samples
    return acc.real, acc.imag


def standard_complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1): real and imaginary parts each N(0, 1/2)."""
    z = rng.standard_normal((*np.atleast_1d(shape), 2))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(0.5)


def sample_correlated_vector(corr: CorrelationMatrix, variance: float, rng, size=None) -> np.ndarray:
    """Draw from CN(0, variance * R); ``size`` prepends batch dimensions."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    shape = (corr.N,) if size is None else (*np.atleast_1d(size), corr.N)
    z = standard_complex_normal(rng, shape)
    return np.sqrt(variance) * (z @ corr.factor.T)


@dataclass(frozen=True)
class EnvConfig:
    """One wireless scenario.

    ``mu_m`` holds the BS-RIS attenuation per BS antenna and ``mu_0`` the
    RIS-user attenuation.  ``P`` and ``noise_var`` are linear (watts).
    """

    geometry: RisGeometry
    M: int
    mu_m: tuple
    mu_0: float
    P: float
    noise_var: float
    T: int
    seed: int = 0
    tag: str = "env"
    correlation_model: str = "paper"

    def __post_init__(self):
        object.__setattr__(self, "mu_m", tuple(float(m) for m in self.mu_m))
        if self.M < 1 or self.T < 1:
            raise ValueError("M and T must be >= 1")
        if len(self.mu_m) != self.M:
            raise ValueError(f"mu_m has {len(self.mu_m)} entries for M={self.M}")
        if self.P <= 0 or self.noise_var <= 0:
            raise ValueError("P and noise_var must be positive")
        if min(self.mu_m) < 0 or self.mu_0 < 0:
            raise ValueError("attenuations must be non-negative")

    @property
    def N(self) -> int:
        return self.geometry.N

    @property
    def sigma_area(self) -> float:
        return self.geometry.d1 * self.geometry.d2

    def cascaded_variance(self) -> np.ndarray:
        """Per-antenna variance ``E|H[n, m]|^2`` of a cascaded entry."""
        return self.sigma_area**2 * self.mu_0 * np.asarray(self.mu_m)

    def correlation(self) -> CorrelationMatrix:
        return build_correlation(self.geometry, self.correlation_model)


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    G: np.ndarray
    h: np.ndarray
    H: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.H is None:
            object.__setattr__(self, "H", cascade(self.h, self.G))


def cascade(h: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``diag(h^H) G`` for single or batched (…, N) / (…, N, M) inputs."""
    return np.conj(h)[..., :, None] * G


def sample_slots(env: EnvConfig, corr: CorrelationMatrix, rng, n: int):
    """Batched draw of ``n`` slots; returns arrays ``G (n,N,M)``, ``h (n,N)``, ``H (n,N,M)``."""
    scale = np.sqrt(env.sigma_area * np.asarray(env.mu_m))
    z = standard_complex_normal(rng, (n, env.M, env.N))
    G = np.swapaxes((z @ corr.factor.T) * scale[None, :, None], 1, 2)
    h = sample_correlated_vector(corr, env.sigma_area * env.mu_0, rng, size=n)
    return G, h, cascade(h, G)


def sample_slot(env: EnvConfig, corr: CorrelationMatrix, rng) -> ChannelRealization:
    G, h, H = sample_slots(env, corr, rng, 1)
    return ChannelRealization(G=G[0], h=h[0], H=H[0])


def cascaded_correlation_stat(env: EnvConfig, corr: CorrelationMatrix, slots: int, rng,
                              chunk: int = 20_000) -> np.ndarray:
    """Empirical normalized correlation of cascaded column entries.

    Averages ``H[i, m] conj(H[l, m])`` over slots and antennas and normalizes by
    the diagonal.  For independent ``h`` and ``G`` the limit is ``R[i, l]**2``.
    """
    if slots < 2:
        raise ValueError("slots must be >= 2")
    acc = np.zeros((env.N, env.N), dtype=complex)
    done = 0
    while done < slots:
        n = min(chunk, slots - done)
        _, _, H = sample_slots(env, corr, rng, n)
        cols = np.swapaxes(H, 1, 2).reshape(-1, env.N)
        acc += cols.T @ cols.conj()
        done += n
    d = np.sqrt(np.real(np.diag(acc)))
    return np.real(acc) / np.outer(d, d)


def effective_gain(phases, H) -> np.ndarray:
    """``||phi^T H||^2`` with ``phi = exp(j phases)``; batched over leading axes."""
    phi = np.exp(1j * np.asarray(phases, dtype=float))
    s = np.einsum("...n,...nm->...m", phi, H)
    return np.sum(np.abs(s) ** 2, axis=-1)


def mrt_rate(phases, H, P: float, noise_var: float, return_precoder: bool = False):
    """Achievable rate ``log2(1 + P ||phi^T H||^2 / noise_var)`` under MRT.

    With ``return_precoder=True`` also returns ``f = sqrt(P) (phi^T H)^H / ||phi^T H||``.
    """
    H = np.asarray(H)
    if not np.all(np.isfinite(H)):
        raise ValueError("cascaded channel has non-finite entries")
    if P <= 0 or noise_var <= 0:
        raise ValueError("P and noise_var must be positive")
    rate = np.log2(1.0 + P * effective_gain(phases, H) / noise_var)
    if not return_precoder:
        return rate
    phi = np.exp(1j * np.asarray(phases, dtype=float))
    s = np.einsum("...n,...nm->...m", phi, H)
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    f = np.sqrt(P) * np.conj(s) / np.where(norm > 0, norm, 1.0)
    return rate, f
