"""Regression losses on the tape and the MSE mean/std/correlation split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateVariance
from .numerics import EPS, batch_stats


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    pcc: float
    pcc_loss: float
    dnpl: float
    gamma_reg: float
    total: float
    sigma_yhat_snapshot: float


def mse_loss(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    return ad.mean(ad.square(ad.sub(yhat, y)))


def _centered_yhat(yhat):
    return ad.sub(yhat, ad.mean(yhat))


def sigma_of(yhat):
    """Population std of the predictions, on the tape."""
    return ad.sqrt(ad.mean(ad.square(_centered_yhat(yhat))))


def pearson(y, yhat):
    """rho(y, yhat) on the tape; y is a constant."""
    y = np.asarray(y, dtype=np.float64)
    a = y - y.mean()
    sigma_y = float(np.sqrt(np.mean(a * a)))
    b = _centered_yhat(yhat)
    var_b = ad.mean(ad.square(b))
    if sigma_y <= EPS or float(np.sqrt(ad._val(var_b))) <= EPS:
        raise DegenerateVariance("pcc loss needs sigma_y and sigma_yhat above 1e-12")
    cov = ad.mean(ad.mul(b, a))
    return ad.div(cov, ad.scale(ad.sqrt(var_b), sigma_y))


def pcc_loss(y, yhat):
    return ad.sub(1.0, pearson(y, yhat))


def dnpl(y, yhat):
    """StopGrad(sigma_yhat) * (1 - rho)."""
    return ad.mul(ad.stop_grad(sigma_of(yhat)), pcc_loss(y, yhat))


def gamma_reg(gammas, lambda_gamma: float):
    """(lambda_gamma / S) * sum_s (gamma_s - 1)^2."""
    g = ad.sub(gammas, 1.0)
    return ad.scale(ad.mean(ad.square(g)), lambda_gamma)


def total_loss(y, yhat, lambda_pcc: float, use_dnpl: bool = False, gammas=None,
               lambda_gamma: float = 0.0):
    """MSE + lambda_pcc * (DNPL or 1 - rho) [+ gamma regulariser].

    Returns the scalar Var and a LossBreakdown of the forward values.
    """
    mse = mse_loss(y, yhat)
    rho = pearson(y, yhat)
    corr_loss = ad.sub(1.0, rho)
    sigma = float(np.sqrt(np.mean((ad._val(yhat) - ad._val(yhat).mean()) ** 2)))
    if use_dnpl:
        corr_term = ad.mul(ad.stop_grad(sigma_of(yhat)), corr_loss)
    else:
        corr_term = corr_loss
    total = ad.add(mse, ad.scale(corr_term, lambda_pcc))
    reg_value = 0.0
    if gammas is not None:
        reg = gamma_reg(gammas, lambda_gamma)
        total = ad.add(total, reg)
        reg_value = float(ad._val(reg))
    breakdown = LossBreakdown(
        mse=float(ad._val(mse)),
        pcc=float(ad._val(rho)),
        pcc_loss=float(ad._val(corr_loss)),
        dnpl=sigma * float(ad._val(corr_loss)),
        gamma_reg=reg_value,
        total=float(ad._val(total)),
        sigma_yhat_snapshot=sigma,
    )
    return total, breakdown


def mse_decompose(y, yhat) -> tuple[float, float, float]:
    """(mean-matching, std-matching, weighted-correlation) terms summing to MSE.

    With constant predictions the correlation term is defined as 0.
    """
    st = batch_stats(y, yhat)
    mean_term = (st.mu_yhat - st.mu_y) ** 2
    std_term = (st.sigma_yhat - st.sigma_y) ** 2
    if st.sigma_y <= EPS or st.sigma_yhat <= EPS:
        corr_term = 0.0
    else:
        # 2 sigma_y sigma_yhat (1 - rho), written without dividing by the sigmas
        corr_term = max(0.0, 2.0 * (st.sigma_y * st.sigma_yhat - float(np.mean(st.a * st.b))))
    return mean_term, std_term, corr_term
