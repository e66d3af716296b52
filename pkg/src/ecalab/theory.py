"""Live validators: each check evaluates one bound on real data.

Every check returns a BoundReport.  A report passes when its precondition
holds and the observed quantity does not exceed the bound (1e-9 slack).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .batch import Batch
from .errors import DegenerateVariance, ZeroMseGradient
from .gradients import LogitGradient, global_factors
from .numerics import EPS, Rng, batch_stats, homogeneity, pcc, rms

TOL = 1e-9


@dataclass
class BoundReport:
    bound_name: str
    observed: float
    bound_value: float
    precondition_met: bool
    context: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.bound_value - self.observed

    @property
    def passed(self) -> bool:
        return bool(self.precondition_met and self.observed <= self.bound_value + TOL)

    @property
    def violated(self) -> bool:
        """Precondition holds yet the bound fails: a genuine counterexample."""
        return bool(self.precondition_met and not self.observed <= self.bound_value + TOL)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(slack=self.slack, passed=self.passed, violated=self.violated)
        return d


def grad_ratio_bound(sigma_y: float, sigma_yhat: float) -> float:
    """Ceiling on r_global for rho in [0, 1]; contains no batch size."""
    return 1.0 / (2.0 * np.sqrt(sigma_y) * sigma_yhat**1.5)


def grad_ratio(y, yhat) -> tuple[float, float, float]:
    """(r_global, RMS g_pcc, RMS g_mse)."""
    g_pcc, g_mse = global_factors(y, yhat)
    num, den = rms(g_pcc), rms(g_mse)
    if den == 0.0:
        raise ZeroMseGradient("all residuals are zero; the ratio is undefined")
    return num / den, num, den


def check_grad_ratio(y, yhat, context=None) -> BoundReport:
    """PCC/MSE global-gradient ratio against its sigma ceiling.

    Also confirms the identity RMS(g_pcc) = sqrt(1 - rho^2) / sigma_yhat.
    """
    st = batch_stats(y, yhat)
    if st.sigma_y <= EPS or st.sigma_yhat <= EPS:
        raise DegenerateVariance("ratio check needs both sigmas above 1e-12")
    ctx = dict(context or {})
    bound = grad_ratio_bound(st.sigma_y, st.sigma_yhat)
    g_pcc, g_mse = global_factors(y, yhat)
    rms_pcc, rms_mse = rms(g_pcc), rms(g_mse)
    identity = np.sqrt(max(0.0, 1 - st.rho**2)) / st.sigma_yhat
    ctx.update(rho=st.rho, rms_pcc=rms_pcc, rms_mse=rms_mse, identity_error=abs(rms_pcc - identity))
    if rms_mse == 0.0:
        if rms_pcc == 0.0:
            ctx["ratio_defined"] = False
            return BoundReport("grad_ratio", 0.0, bound, 0.0 <= st.rho <= 1.0, ctx)
        raise ZeroMseGradient("all residuals are zero; the ratio is undefined")
    observed = rms_pcc / rms_mse
    return BoundReport("grad_ratio", observed, bound, bool(0.0 <= st.rho <= 1.0), ctx)


def pcc_grad_magnitude_bound(batch: Batch, sigma_yhat: float, w) -> np.ndarray:
    """Per-sample ceiling (1/sigma_yhat) 4 sqrt(n_s (S-1)) / S ||w|| sigma_s."""
    S = batch.S
    return (4.0 * np.sqrt(batch.counts * (S - 1)) / S) * np.linalg.norm(w) * batch.dispersion / sigma_yhat


def check_pcc_grad_bound(batch: Batch, sigma_yhat: float, grads: LogitGradient, w,
                         context=None) -> BoundReport:
    """Every |d rho / d z_si| against its sample's ceiling.

    Reported as the worst per-entry excess: observed - bound is the maximum
    of |dPCC_si| - bound_s over all (s, i).
    """
    bound_s = pcc_grad_magnitude_bound(batch, sigma_yhat, w)
    excess = np.abs(grads.dPCC) - bound_s[:, None]
    excess = np.where(batch.mask, excess, -np.inf)
    s, i = np.unravel_index(np.argmax(excess), excess.shape)
    ctx = dict(context or {})
    ctx.update(worst_sample=int(s), worst_element=int(i), violations=int(np.sum(excess > TOL)))
    return BoundReport("pcc_grad_magnitude", float(abs(grads.dPCC[s, i])), float(bound_s[s]), True, ctx)


def correlation_perturbation_bound(n_norm: float, delta_norm: float) -> float:
    return 2.0 * delta_norm / (n_norm - delta_norm)


def cosine(u, v) -> float:
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def pcc_gain_bound(R_tilde: float, sigma_0: float, w_norm: float) -> float:
    return 2.0 * R_tilde / (sigma_0 / w_norm - R_tilde)


def check_pcc_gain(batch: Batch, w, c: float, attention_weights, gammas=None,
                   context=None) -> BoundReport:
    """PCC gain over mean pooling against the convex-aggregation ceiling.

    With ``gammas`` the aggregate is the scaled residual form, which is not
    convex; the report then records whether the gain escapes the ceiling
    (``context['escape']``) instead of certifying it.
    """
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(attention_weights, dtype=np.float64)
    w_norm = float(np.linalg.norm(w))
    hs = homogeneity(batch, w, c)
    y = batch.targets
    ybar = batch.means @ w + c
    residual = np.einsum("sn,snd->sd", alpha, batch.centered)
    convex = gammas is None
    scale = 1.0 if convex else np.asarray(gammas, dtype=np.float64)[:, None]
    delta = (scale * residual) @ w
    yhat = ybar + delta
    rho0 = pcc(y, ybar)
    rho = pcc(y, yhat)

    # ingredient lemmas: per-sample perturbation and centred perturbation norm
    per_sample_excess = np.abs(residual @ w) - w_norm * hs.R_s
    db = delta - delta.mean()
    ctx = dict(context or {})
    ctx.update(
        rho=rho,
        rho0=rho0,
        R_tilde=hs.R_tilde,
        sigma_0=hs.sigma_0,
        w_norm=w_norm,
        perturbation_lemma_ok=bool(np.all(per_sample_excess <= TOL * (1 + w_norm * hs.R_s))),
        perturbation_norm=float(np.linalg.norm(db)),
        perturbation_norm_bound=float(np.sqrt(batch.S) * w_norm * hs.R_tilde),
        convex=convex,
    )
    precondition = bool(w_norm > 0 and hs.R_tilde < hs.sigma_0 / w_norm)
    bound = pcc_gain_bound(hs.R_tilde, hs.sigma_0, w_norm) if precondition else float("inf")
    observed = abs(rho - rho0)
    ctx["escape"] = bool(not convex and precondition and observed > bound + TOL)
    return BoundReport("pcc_gain" if convex else "pcc_gain_sra", observed, bound, precondition, ctx)


def check_scaling_invariance(y, yhat, m: float, n: float, context=None) -> BoundReport:
    """|pcc(y, m yhat + n) - sign(m) pcc(y, yhat)| against 1e-9."""
    lhs = pcc(y, m * np.asarray(yhat, float) + n)
    rhs = np.sign(m) * pcc(y, yhat)
    ctx = dict(context or {})
    ctx.update(m=m, n=n)
    return BoundReport("scaling_invariance", abs(lhs - rhs), 1e-9, m != 0, ctx)


def chunked_grad_ratio(y, yhat, chunk: int) -> float:
    """r_global from g-factors computed chunk by chunk with population statistics."""
    y = np.asarray(y, float)
    yhat = np.asarray(yhat, float)
    st = batch_stats(y, yhat)
    rho = float(np.mean(st.a * st.b)) / (st.sigma_y * st.sigma_yhat)
    parts_pcc, parts_mse = [], []
    for start in range(0, y.size, chunk):
        sl = slice(start, start + chunk)
        a = y[sl] - st.mu_y
        b = yhat[sl] - st.mu_yhat
        parts_pcc.append((a / st.sigma_y - rho * b / st.sigma_yhat) / st.sigma_yhat)
        parts_mse.append(2.0 * (yhat[sl] - y[sl]))
    return rms(np.concatenate(parts_pcc)) / rms(np.concatenate(parts_mse))


def check_batch_independence(y, yhat, sizes=(32, 64, 128), context=None) -> BoundReport:
    """Population r_global and its bound do not depend on how samples are chunked."""
    full, _, _ = grad_ratio(y, yhat)
    st = batch_stats(y, yhat)
    bound = grad_ratio_bound(st.sigma_y, st.sigma_yhat)
    if y is not None and len(y) < max(sizes):
        raise ValueError(f"need at least {max(sizes)} samples, got {len(y)}")
    ratios = {int(k): chunked_grad_ratio(y, yhat, k) for k in sizes}
    spread = max(abs(r - full) for r in ratios.values())
    ctx = dict(context or {})
    ctx.update(full=full, chunked=ratios, bound=bound)
    return BoundReport("batch_independence", spread, TOL * max(1.0, full), True, ctx)


# --- randomized sweeps -----------------------------------------------------


def random_batch(rng: Rng, S=None, n_range=(2, 10), d=None, ragged=True, spread=(0.05, 1.0)) -> Batch:
    """Random set-regression batch for Monte-Carlo sweeps.

    Sample centres are standard normal; element offsets are normal with a
    per-sample scale drawn from ``spread``, divided by sqrt(d).
    """
    S = int(rng.integers(4, 33)) if S is None else S
    d = int(rng.integers(2, 17)) if d is None else d
    if ragged:
        ns = rng.integers(n_range[0], n_range[1] + 1, size=S)
    else:
        ns = np.full(S, n_range[1])
    scales = rng.uniform(S, low=spread[0], high=spread[1]) / np.sqrt(d)
    samples = [rng.normal(d) + scales[s] * rng.normal((int(ns[s]), d)) for s in range(S)]
    y = rng.normal(S)
    return Batch.from_samples(samples, y)


def dirichlet_weights(rng: Rng, mask: np.ndarray) -> np.ndarray:
    """Uniform draws from each sample's simplex (padding gets weight 0)."""
    alphas = np.zeros(mask.shape)
    for s, row in enumerate(mask):
        alphas[s, row] = rng.dirichlet(np.ones(int(row.sum())))
    return alphas


def gain_draw(r: Rng, ctx: dict | None = None) -> BoundReport:
    # tight samples relative to the spread of centres, so the precondition usually holds
    batch = random_batch(r, spread=(0.01, 0.6))
    w = r.normal(batch.d)
    alphas = dirichlet_weights(r, batch.mask)
    # targets correlated with mean pooling keep rho0 away from the degenerate case
    y = batch.means @ w + r.normal(batch.S) * r.uniform(low=0.1, high=2.0) * np.linalg.norm(w)
    batch = Batch(batch.embeddings, y, mask=batch.mask)
    return check_pcc_gain(batch, w, float(r.normal()), alphas, context=ctx or {})


def gain_sweep(seed: int, draws: int, max_tries: int | None = None) -> list[BoundReport]:
    """``draws`` convex-gain reports whose precondition holds (others are skipped)."""
    rng = Rng(seed)
    out: list[BoundReport] = []
    k = 0
    max_tries = max_tries or 20 * draws
    while len(out) < draws and k < max_tries:
        rep = gain_draw(rng.child(k), {"draw": k, "seed": seed})
        if rep.precondition_met:
            out.append(rep)
        k += 1
    return out


def sweep(seed: int, sweeps: int) -> list[BoundReport]:
    """Monte-Carlo pass over every convex-regime check.

    Each draw builds a random batch and plain-softmax model state, then runs
    the ratio, magnitude, gain and scaling checks on it.
    """
    from .gradients import logit_gradients
    from .model import EcaConfig, ModelParams, forward

    rng = Rng(seed)
    config = EcaConfig()
    reports: list[BoundReport] = []
    k = 0
    while k < sweeps:
        r = rng.child(k)
        batch = random_batch(r)
        params = ModelParams(r.normal(batch.d) * 2.0, r.normal(batch.d), float(r.normal()), None)
        rec = forward(batch, params, config)
        ctx = {"draw": k, "seed": seed}
        y = batch.targets
        # pick a target sign so half the draws sit in rho >= 0
        if rec.stats.rho < 0 and r.uniform() < 0.5:
            batch = Batch(batch.embeddings, -y, mask=batch.mask)
            rec = forward(batch, params, config)
        reports.append(check_grad_ratio(batch.targets, rec.yhat, ctx))
        grads = logit_gradients(batch, rec, params.w)
        reports.append(check_pcc_grad_bound(batch, rec.stats.sigma_yhat, grads, params.w, ctx))
        reports.append(gain_draw(r.child(1), ctx))
        m = float(r.normal() * 3)
        reports.append(check_scaling_invariance(batch.targets, rec.yhat, m, float(r.normal() * 5), ctx))
        k += 1
    return reports
