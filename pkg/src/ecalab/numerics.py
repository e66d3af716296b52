"""Batch statistics, homogeneity measures and the seeded generator.

All standard deviations use the population convention (divide by S).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariance

EPS = 1e-12


@dataclass(frozen=True)
class BatchStats:
    mu_y: float
    mu_yhat: float
    sigma_y: float
    sigma_yhat: float
    rho: float  # nan when either sigma is below EPS
    a: np.ndarray  # centered targets
    b: np.ndarray  # centered predictions

    @property
    def S(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class HomogeneityStats:
    sigma_s: np.ndarray
    R_s: np.ndarray
    sigma_tilde: float
    R_tilde: float
    sigma_0: float  # nan unless a regression head was supplied


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def rms(x) -> float:
    x = _as_vector(x)
    return float(np.sqrt(np.mean(x * x)))


def pstd(x) -> float:
    x = _as_vector(x)
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def batch_stats(y, yhat) -> BatchStats:
    y, yhat = _as_vector(y), _as_vector(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise ValueError("batch_stats needs S >= 2")
    mu_y, mu_yhat = float(y.mean()), float(yhat.mean())
    a, b = y - mu_y, yhat - mu_yhat
    sigma_y = float(np.sqrt(np.mean(a * a)))
    sigma_yhat = float(np.sqrt(np.mean(b * b)))
    if sigma_y > EPS and sigma_yhat > EPS:
        rho = float(np.clip(np.mean(a * b) / (sigma_y * sigma_yhat), -1.0, 1.0))
    else:
        rho = float("nan")
    return BatchStats(mu_y, mu_yhat, sigma_y, sigma_yhat, rho, a, b)


def pcc(y, yhat) -> float:
    """Pearson correlation over the batch, clamped to [-1, 1]."""
    st = batch_stats(y, yhat)
    if st.sigma_y <= EPS or st.sigma_yhat <= EPS:
        raise DegenerateVariance(
            f"sigma_y={st.sigma_y:.3g}, sigma_yhat={st.sigma_yhat:.3g} below {EPS}"
        )
    return st.rho


def homogeneity(batch, w=None, c: float = 0.0) -> HomogeneityStats:
    """In-sample dispersion and hull radius per sample, with their RMS values.

    ``sigma_0`` is the std of the mean-pooling predictions ``w @ mu_s + c``
    and is only computed when a head ``w`` is given.
    """
    sigma_s = batch.dispersion
    R_s = batch.radius
    sigma_0 = float("nan")
    if w is not None:
        sigma_0 = pstd(batch.means @ _as_vector(w) + c)
    return HomogeneityStats(sigma_s, R_s, rms(sigma_s), rms(R_s), sigma_0)


class Rng:
    """Seeded counter-based generator (Philox-4x64 via numpy).

    Normal draws use numpy's deterministic ziggurat transform of the
    Philox uniform stream, so a seed fixes every draw on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def child(self, key: int) -> "Rng":
        """Independent stream derived deterministically from (seed, key)."""
        mixed = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0]
        return Rng(int(mixed))
