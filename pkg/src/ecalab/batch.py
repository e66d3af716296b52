"""Padded set-of-elements batch container."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .errors import DimMismatch


@dataclass(eq=False)
class Batch:
    """S samples, each a set of ``n_s`` element embeddings plus a scalar target.

    Ragged samples are stored padded to ``n_max`` with a boolean ``mask``;
    padded rows are zero and never contribute to any statistic.
    """

    embeddings: np.ndarray  # (S, n_max, d)
    targets: np.ndarray  # (S,)
    mask: np.ndarray | None = None  # (S, n_max) bool
    config: Any = None
    w_star: np.ndarray | None = None
    w_perp: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.embeddings.ndim != 3:
            raise DimMismatch(f"embeddings must be (S, n, d), got {self.embeddings.shape}")
        S, n, _ = self.embeddings.shape
        if self.targets.shape[0] != S:
            raise DimMismatch(f"{S} samples but {self.targets.shape[0]} targets")
        if self.mask is None:
            self.mask = np.ones((S, n), dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (S, n):
                raise DimMismatch("mask shape does not match embeddings")
            self.embeddings = np.where(self.mask[..., None], self.embeddings, 0.0)
        if np.any(self.mask.sum(axis=1) < 1):
            raise DimMismatch("every sample needs at least one element")

    @classmethod
    def from_samples(cls, samples: Sequence[np.ndarray], targets, **kw) -> "Batch":
        """Build from a list of ``(n_s, d)`` arrays of possibly different lengths."""
        arrays = [np.atleast_2d(np.asarray(h, dtype=np.float64)) for h in samples]
        dims = {a.shape[1] for a in arrays}
        if len(dims) != 1:
            raise DimMismatch(f"inconsistent embedding dims {sorted(dims)}")
        d = dims.pop()
        n_max = max(a.shape[0] for a in arrays)
        emb = np.zeros((len(arrays), n_max, d))
        mask = np.zeros((len(arrays), n_max), dtype=bool)
        for s, a in enumerate(arrays):
            emb[s, : a.shape[0]] = a
            mask[s, : a.shape[0]] = True
        return cls(emb, targets, mask=mask, **kw)

    @property
    def S(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[2]

    @cached_property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @cached_property
    def ragged(self) -> bool:
        return not bool(self.mask.all())

    @cached_property
    def means(self) -> np.ndarray:
        """In-sample means mu_s, shape (S, d)."""
        return self.embeddings.sum(axis=1) / self.counts[:, None]

    @cached_property
    def centered(self) -> np.ndarray:
        """h_si - mu_s with padded rows zeroed, shape (S, n_max, d)."""
        c = self.embeddings - self.means[:, None, :]
        return np.where(self.mask[..., None], c, 0.0)

    @cached_property
    def deviations(self) -> np.ndarray:
        """||h_si - mu_s||, padded entries zero, shape (S, n_max)."""
        return np.sqrt(np.einsum("snd,snd->sn", self.centered, self.centered))

    @cached_property
    def dispersion(self) -> np.ndarray:
        """In-sample dispersion sigma_s."""
        return np.sqrt((self.deviations**2).sum(axis=1) / self.counts)

    @cached_property
    def radius(self) -> np.ndarray:
        """Convex-hull radius R_s = max_i ||h_si - mu_s||."""
        return self.deviations.max(axis=1)

    def samples(self):
        """Yield ``(embeddings (n_s, d), target)`` per sample."""
        for s in range(self.S):
            yield self.embeddings[s, self.mask[s]], float(self.targets[s])

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            self.embeddings[idx],
            self.targets[idx],
            mask=self.mask[idx],
            config=self.config,
            w_star=self.w_star,
            w_perp=self.w_perp,
        )
