"""Gated-attention set regressor with the optional ECA mechanisms.

Pipeline per sample: linear logits -> softmax (fixed temperature 1, or the
dispersion-aware temperature) -> convex aggregation or scaled residual
aggregation -> linear head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .batch import Batch
from .errors import DimMismatch, InvalidConfig
from .numerics import BatchStats, Rng, batch_stats

_INIT_STREAM, _GAMMA_STREAM = 11, 12


@dataclass(frozen=True)
class EcaConfig:
    use_sra: bool = False
    use_dats: bool = False
    use_dnpl: bool = False
    T_min: float = 0.2
    beta: float = 1.0
    gamma_max: float = 2.0
    clip_gamma: bool = True
    lambda_gamma: float = 0.001
    gamma_hidden: int = 16

    def __post_init__(self):
        if self.T_min <= 0:
            raise InvalidConfig(f"T_min must be > 0, got {self.T_min}")
        if self.beta < 0 or self.lambda_gamma < 0:
            raise InvalidConfig("beta and lambda_gamma must be >= 0")
        if self.gamma_max < 1:
            raise InvalidConfig(f"gamma_max must be >= 1, got {self.gamma_max}")
        if self.gamma_hidden < 1:
            raise InvalidConfig("gamma_hidden must be >= 1")

    @classmethod
    def baseline(cls, **kw) -> "EcaConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "EcaConfig":
        return cls(use_sra=True, use_dats=True, use_dnpl=True, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EcaConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown eca keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    w_attn: np.ndarray
    w: np.ndarray
    c: float
    gamma_head: dict | None = None  # W1 (d, h), b1 (h,), w2 (h,), b2 ()

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @classmethod
    def init(cls, d: int, config: EcaConfig, seed: int) -> "ModelParams":
        rng = Rng(seed)
        base = rng.child(_INIT_STREAM)
        scale = 1 / np.sqrt(d)
        w_attn = base.normal(d, scale=scale)
        w = base.normal(d, scale=scale)
        head = None
        if config.use_sra:
            # output layer starts at zero so gamma_s = 1 + softplus(0) everywhere
            g = rng.child(_GAMMA_STREAM)
            head = {
                "W1": g.normal((d, config.gamma_hidden), scale=scale),
                "b1": np.zeros(config.gamma_hidden),
                "w2": np.zeros(config.gamma_hidden),
                "b2": np.zeros(()),
            }
        return cls(w_attn, w, 0.0, head)

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (the gamma head only when present)."""
        out = {"w_attn": self.w_attn, "w": self.w, "c": np.asarray(self.c, dtype=np.float64)}
        if self.gamma_head is not None:
            out.update({f"gamma.{k}": v for k, v in self.gamma_head.items()})
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        head = None
        if self.gamma_head is not None:
            head = {k: np.array(arrays[f"gamma.{k}"], dtype=np.float64) for k in self.gamma_head}
        return ModelParams(
            np.array(arrays["w_attn"], dtype=np.float64),
            np.array(arrays["w"], dtype=np.float64),
            float(arrays["c"]),
            head,
        )

    def n_parameters(self) -> int:
        return int(sum(np.size(v) for v in self.arrays().values()))

    def copy(self) -> "ModelParams":
        return self.with_arrays(self.arrays())

    def to_checkpoint(self, config: EcaConfig, seed: int, epoch: int) -> dict:
        return {
            "dims": {"d": self.d, "gamma_hidden": None if self.gamma_head is None else config.gamma_hidden},
            "w_attn": self.w_attn.tolist(),
            "w": self.w.tolist(),
            "c": self.c,
            "gamma_head": None
            if self.gamma_head is None
            else {k: np.asarray(v).tolist() for k, v in self.gamma_head.items()},
            "eca_config": config.to_dict(),
            "seed": seed,
            "epoch": epoch,
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "ModelParams":
        head = doc.get("gamma_head")
        if head is not None:
            head = {k: np.asarray(v, dtype=np.float64) for k, v in head.items()}
        return cls(np.asarray(doc["w_attn"], float), np.asarray(doc["w"], float), float(doc["c"]), head)


@dataclass
class ForwardRecord:
    logits: np.ndarray  # (S, n)
    tau: np.ndarray  # (S,)
    alpha: np.ndarray  # (S, n)
    delta_v: np.ndarray  # (S, d)  attention-weighted residual sum_i alpha_si (h_si - mu_s)
    gamma: np.ndarray  # (S,)
    v: np.ndarray  # (S, d)
    yhat: np.ndarray  # (S,)
    stats: BatchStats
    yhat_var: ad.Var | None = None
    gamma_var: ad.Var | None = None
    vars: dict = field(default_factory=dict)


def _check_dim(embeddings: np.ndarray, vec: np.ndarray):
    if embeddings.shape[-1] != vec.shape[0]:
        raise DimMismatch(f"embedding dim {embeddings.shape[-1]} vs parameter dim {vec.shape[0]}")


def score(embeddings, w_attn):
    """Gating logits z_si = h_si . w_attn; ``w_attn`` may be a Var."""
    _check_dim(np.asarray(embeddings), ad._val(w_attn))
    return ad.dot(np.asarray(embeddings, dtype=np.float64), w_attn)


def dats_temperature(batch: Batch, config: EcaConfig) -> np.ndarray:
    """tau_s = T_min + beta * sigma_s, held constant (no gradient)."""
    return config.T_min + config.beta * batch.dispersion


def aggregate(batch: Batch, alpha, gamma=None):
    """Convex aggregation, or scaled residual aggregation when ``gamma`` is given.

    The residual form is written as v + (gamma - 1) * (v - mu), which equals
    mu + gamma * sum_i alpha_i (h_i - mu) and collapses to the convex
    aggregate exactly when gamma == 1.
    """
    v = ad.weighted_sum(alpha, batch.embeddings)
    if gamma is None:
        return v, ad.sub(v, batch.means)
    delta_v = ad.sub(v, batch.means)
    g = ad.reshape(ad.sub(gamma, 1.0), (-1, 1))
    return ad.add(v, ad.mul(g, delta_v)), delta_v


def gamma_head_forward(mu: np.ndarray, head: dict, config: EcaConfig):
    """gamma_s = 1 + softplus(MLP(mu_s)), optionally capped at gamma_max."""
    hidden = ad.tanh(ad.add(ad.dot(mu, head["W1"]), head["b1"]))
    out = ad.add(ad.dot(hidden, head["w2"]), head["b2"])
    gamma = ad.add(ad.softplus(out), 1.0)
    if config.clip_gamma:
        gamma = ad.minimum(gamma, config.gamma_max)
    return gamma


def forward(batch: Batch, params: ModelParams, config: EcaConfig, tape: ad.Tape | None = None,
            logit_shift=None) -> ForwardRecord:
    """Full forward pass recorded on ``tape``.

    Parameters enter the tape as leaves, exposed in ``record.vars``.
    ``logit_shift`` (a Var or array of shape (S, n)) is added to the logits;
    a zero leaf there yields gradients with respect to the logits.
    """
    tape = tape if tape is not None else ad.Tape()
    _check_dim(batch.embeddings, params.w)
    leaves = {name: tape.var(value) for name, value in params.arrays().items()}

    z = score(batch.embeddings, leaves["w_attn"])
    if logit_shift is not None:
        z = ad.add(z, logit_shift)
    if config.use_dats:
        tau = dats_temperature(batch, config)
    else:
        tau = np.ones(batch.S)
    alpha = ad.softmax(z, tau[:, None], mask=None if not batch.ragged else batch.mask)

    gamma_var = None
    if config.use_sra:
        if params.gamma_head is None:
            raise InvalidConfig("SRA enabled but the parameters carry no gamma head")
        head = {k: leaves[f"gamma.{k}"] for k in params.gamma_head}
        gamma_var = gamma_head_forward(batch.means, head, config)
    v, delta_v = aggregate(batch, alpha, gamma_var)
    yhat = ad.add(ad.dot(v, leaves["w"]), leaves["c"])

    gamma = gamma_var.value if gamma_var is not None else np.ones(batch.S)
    return ForwardRecord(
        logits=ad._val(z),
        tau=tau,
        alpha=ad._val(alpha),
        delta_v=ad._val(delta_v),
        gamma=gamma,
        v=ad._val(v),
        yhat=yhat.value,
        stats=batch_stats(batch.targets, yhat.value),
        yhat_var=yhat,
        gamma_var=gamma_var,
        vars=leaves,
    )


def predict(batch: Batch, params: ModelParams, config: EcaConfig) -> np.ndarray:
    return forward(batch, params, config).yhat
