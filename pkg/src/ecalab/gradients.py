"""Closed-form logit gradients of PCC and MSE, plus finite-difference oracles.

The closed forms hold for plain softmax attention (gamma_s = 1, tau = 1):

    d rho / d z_si = (1/S) g_pcc_s L_si
    d MSE / d z_si = (1/S) g_mse_s L_si
    L_si = alpha_si w.(h_si - v_s)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .batch import Batch
from .errors import DegenerateVariance, InvalidConfig
from .model import EcaConfig, ForwardRecord, ModelParams, forward
from .numerics import EPS, batch_stats


@dataclass(frozen=True)
class LogitGradient:
    dPCC: np.ndarray  # (S, n)
    dMSE: np.ndarray  # (S, n)
    local: np.ndarray  # L_si, (S, n)
    g_pcc: np.ndarray  # (S,)
    g_mse: np.ndarray  # (S,)


def softmax_jacobian_times(h: np.ndarray, alpha: np.ndarray, i: int) -> np.ndarray:
    """d v / d z_i = alpha_i (h_i - v) with v = sum_j alpha_j h_j."""
    h = np.asarray(h, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    v = alpha @ h
    return alpha[i] * (h[i] - v)


def global_factors(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample global scalars (g_pcc, g_mse) of the logit gradients."""
    st = batch_stats(y, yhat)
    if st.sigma_y <= EPS or st.sigma_yhat <= EPS:
        raise DegenerateVariance("global PCC factor needs both sigmas above 1e-12")
    rho = float(np.mean(st.a * st.b)) / (st.sigma_y * st.sigma_yhat)
    g_pcc = (st.a / st.sigma_y - rho * st.b / st.sigma_yhat) / st.sigma_yhat
    g_mse = 2.0 * (np.asarray(yhat, float) - np.asarray(y, float))
    return g_pcc, g_mse


def local_factors(batch: Batch, alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    v = np.einsum("sn,snd->sd", alpha, batch.embeddings)
    diff = batch.embeddings - v[:, None, :]
    L = alpha * (diff @ w)
    return np.where(batch.mask, L, 0.0)


def _require_plain(record: ForwardRecord):
    if not (np.all(record.gamma == 1.0) and np.all(record.tau == 1.0)):
        raise InvalidConfig("closed-form logit gradients need gamma_s = 1 and tau_s = 1")


def logit_gradients(batch: Batch, record: ForwardRecord, w: np.ndarray) -> LogitGradient:
    _require_plain(record)
    g_pcc, g_mse = global_factors(batch.targets, record.yhat)
    L = local_factors(batch, record.alpha, np.asarray(w, float))
    S = batch.S
    return LogitGradient(g_pcc[:, None] * L / S, g_mse[:, None] * L / S, L, g_pcc, g_mse)


def pcc_grad_logits(batch: Batch, record: ForwardRecord, w) -> np.ndarray:
    return logit_gradients(batch, record, w).dPCC


def mse_grad_logits(batch: Batch, record: ForwardRecord, w) -> np.ndarray:
    _require_plain(record)
    g_mse = 2.0 * (record.yhat - batch.targets)
    L = local_factors(batch, record.alpha, np.asarray(w, float))
    return g_mse[:, None] * L / batch.S


def finite_diff(fn: Callable[[np.ndarray], float], z, h_rel: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step h_rel * max(1, |z_i|)."""
    z = np.array(z, dtype=np.float64)
    grad = np.zeros_like(z)
    flat, gflat = z.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        x0 = flat[k]
        h = h_rel * max(1.0, abs(x0))
        flat[k] = x0 + h
        f_plus = fn(z)
        flat[k] = x0 - h
        f_minus = fn(z)
        flat[k] = x0
        gflat[k] = (f_plus - f_minus) / (2 * h)
    return grad


def reference_predictions(batch: Batch, params: ModelParams, config: EcaConfig,
                          logits: np.ndarray | None = None) -> np.ndarray:
    """Straight-line numpy forward pass, sample by sample (no tape)."""
    out = np.empty(batch.S)
    for s, (h, _) in enumerate(batch.samples()):
        n = h.shape[0]
        mu = h.sum(axis=0) / n
        z = h @ params.w_attn if logits is None else logits[s, :n]
        tau = 1.0
        if config.use_dats:
            tau = config.T_min + config.beta * np.sqrt(((h - mu) ** 2).sum() / n)
        e = np.exp((z - z.max()) / tau)
        alpha = e / e.sum()
        v = alpha @ h
        if config.use_sra:
            head = params.gamma_head
            pre = np.tanh(mu @ head["W1"] + head["b1"]) @ head["w2"] + head["b2"]
            gamma = 1.0 + np.logaddexp(0.0, pre)
            if config.clip_gamma:
                gamma = min(gamma, config.gamma_max)
            v = mu + gamma * (alpha @ (h - mu))
        out[s] = v @ params.w + params.c
    return out


def autodiff_logit_grads(batch: Batch, params: ModelParams, config: EcaConfig,
                         objective: str = "pcc") -> np.ndarray:
    """Gradient of rho ('pcc') or MSE ('mse') w.r.t. the logits via the tape."""
    tape = ad.Tape()
    shift = tape.var(np.zeros(batch.mask.shape))
    rec = forward(batch, params, config, tape=tape, logit_shift=shift)
    if objective == "pcc":
        loss = losses.pearson(batch.targets, rec.yhat_var)
    elif objective == "mse":
        loss = losses.mse_loss(batch.targets, rec.yhat_var)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return np.where(batch.mask, tape.backward(loss)[shift], 0.0)


def _dense_predictions(batch: Batch, params: ModelParams, config: EcaConfig, z: np.ndarray) -> np.ndarray:
    """Tape-free padded forward pass with plain numpy (no SRA)."""
    if config.use_sra:
        raise InvalidConfig("dense oracle covers convex aggregation only")
    tau = config.T_min + config.beta * batch.dispersion if config.use_dats else np.ones(batch.S)
    u = np.where(batch.mask, z / tau[:, None], -np.inf)
    e = np.exp(u - u.max(axis=1, keepdims=True))
    alpha = e / e.sum(axis=1, keepdims=True)
    v = np.einsum("sn,snd->sd", alpha, batch.embeddings)
    return v @ params.w + params.c


def finite_diff_logit_grads(batch: Batch, params: ModelParams, config: EcaConfig,
                            objective: str = "pcc", h_rel: float = 1e-5) -> np.ndarray:
    z0 = np.einsum("snd,d->sn", batch.embeddings, params.w_attn)
    y = batch.targets
    dense = not config.use_sra

    def fn(z):
        if dense:
            yhat = _dense_predictions(batch, params, config, z)
        else:
            yhat = reference_predictions(batch, params, config, logits=z)
        if objective == "pcc":
            a, b = y - y.mean(), yhat - yhat.mean()
            return float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))
        return float(np.mean((yhat - y) ** 2))

    g = finite_diff(fn, z0, h_rel=h_rel)
    return np.where(batch.mask, g, 0.0)


def tolerance_score(a, b, rtol: float, atol: float) -> float:
    """max |a - b| / (rtol |b| + atol); the pair agrees when this is <= 1."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / (rtol * np.abs(b) + atol), initial=0.0))


def three_way_check(batch: Batch, params: ModelParams, rtol_ad: float = 1e-8, rtol_fd: float = 1e-5,
                    atol_fd: float = 1e-7, atol_ad: float = 1e-12) -> dict:
    """Closed form vs tape vs finite differences for rho and MSE logit gradients.

    Each comparison reports a tolerance score; 1 is the pass line.
    """
    config = EcaConfig()
    rec = forward(batch, params, config)
    closed = logit_gradients(batch, rec, params.w)
    out = {"passed": True}
    for name, cf in (("pcc", closed.dPCC), ("mse", closed.dMSE)):
        auto = autodiff_logit_grads(batch, params, config, name)
        fd = finite_diff_logit_grads(batch, params, config, name)
        s_ad = tolerance_score(cf, auto, rtol_ad, atol_ad)
        s_fd = tolerance_score(cf, fd, rtol_fd, atol_fd)
        out[f"{name}_closed_vs_autodiff"] = s_ad
        out[f"{name}_closed_vs_fd"] = s_fd
        out["passed"] &= bool(s_ad <= 1.0 and s_fd <= 1.0)
    return out
