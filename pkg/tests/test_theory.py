import numpy as np
import pytest

from ecalab.batch import Batch
from ecalab.errors import ZeroMseGradient
from ecalab.gradients import logit_gradients
from ecalab.model import EcaConfig, ModelParams, forward
from ecalab.numerics import Rng
from ecalab.theory import (
    check_batch_independence,
    check_grad_ratio,
    check_pcc_gain,
    check_pcc_grad_bound,
    check_scaling_invariance,
    correlation_perturbation_bound,
    cosine,
    gain_sweep,
    grad_ratio_bound,
    pcc_gain_bound,
    random_batch,
    sweep,
)


def test_ratio_bound_formula():
    assert grad_ratio_bound(4.0, 1.0) == pytest.approx(0.25)
    assert grad_ratio_bound(1.0, 4.0) == pytest.approx(1 / 16)


def test_grad_ratio_perfect_fit_and_negative_rho():
    y = Rng(0).normal(20)
    rep = check_grad_ratio(y, 2 * y + 1)
    assert rep.observed == pytest.approx(0.0, abs=1e-12) and rep.passed
    rep = check_grad_ratio(y, -y)
    assert not rep.precondition_met and not rep.violated
    with pytest.raises(ZeroMseGradient):
        check_grad_ratio(y, y.copy())


def test_grad_ratio_identity(np_rng):
    for _ in range(50):
        y, yhat = np_rng.normal(size=30), np_rng.normal(size=30) * 3
        rep = check_grad_ratio(y, yhat)
        assert rep.context["identity_error"] < 1e-12


def test_magnitude_bound_identical_elements():
    h = np.repeat(Rng(1).normal((5, 1, 3)), 4, axis=1)
    b = Batch(h, Rng(2).normal(5))
    p = ModelParams(Rng(3).normal(3), Rng(4).normal(3), 0.0, None)
    rec = forward(b, p, EcaConfig())
    rep = check_pcc_grad_bound(b, rec.stats.sigma_yhat, logit_gradients(b, rec, p.w), p.w)
    assert rep.observed == pytest.approx(0.0, abs=1e-14)
    assert rep.passed


def test_magnitude_bound_one_hot_adversary():
    # one distinct element per sample, scorer pointing at it: near-one-hot attention
    rng = Rng(5)
    for k in range(30):
        r = rng.child(k)
        S, n, d = 12, 4, 3
        h = np.repeat(r.normal((S, 1, d)), n, axis=1)
        h[:, 0] += r.normal((S, d)) * 2
        b = Batch(h, r.normal(S))
        w_attn = (h[:, 0] - h[:, 1]).mean(axis=0) * 30
        p = ModelParams(w_attn, r.normal(d), 0.0, None)
        rec = forward(b, p, EcaConfig())
        rep = check_pcc_grad_bound(b, rec.stats.sigma_yhat, logit_gradients(b, rec, p.w), p.w)
        assert rep.context["violations"] == 0


def test_gain_uniform_weights_is_zero():
    b = random_batch(Rng(6), spread=(0.01, 0.3))
    w = Rng(7).normal(b.d)
    alpha = np.where(b.mask, 1.0, 0.0) / b.counts[:, None]
    rep = check_pcc_gain(b, w, 0.3, alpha)
    assert rep.observed == pytest.approx(0.0, abs=1e-12)
    assert rep.context["perturbation_lemma_ok"]


def test_gain_precondition_reported():
    b = random_batch(Rng(8), spread=(5.0, 10.0))
    w = Rng(9).normal(b.d)
    alpha = np.where(b.mask, 1.0, 0.0) / b.counts[:, None]
    rep = check_pcc_gain(b, w, 0.0, alpha)
    assert not rep.precondition_met
    assert rep.bound_value == np.inf
    assert pcc_gain_bound(0.1, 1.0, 1.0) == pytest.approx(0.2 / 0.9)


def test_gain_sra_records_escape_flag():
    b = random_batch(Rng(10), spread=(0.01, 0.3))
    w = Rng(11).normal(b.d)
    alpha = np.where(b.mask, Rng(12).uniform(b.mask.shape), 0.0)
    alpha /= alpha.sum(axis=1, keepdims=True)
    rep = check_pcc_gain(b, w, 0.0, alpha, gammas=np.full(b.S, 1.7))
    assert rep.bound_name == "pcc_gain_sra"
    assert "escape" in rep.context and not rep.context["convex"]


def test_gain_sweep_no_violations():
    reports = gain_sweep(0, 200)
    assert len(reports) == 200
    assert not any(r.violated for r in reports)
    assert all(r.context["perturbation_lemma_ok"] for r in reports)


def test_correlation_perturbation_lemma():
    rng = Rng(13)
    for k in range(500):
        r = rng.child(k)
        d = int(r.integers(2, 20))
        m, n = r.normal(d), r.normal(d) * r.uniform(low=0.5, high=3)
        delta = r.normal(d)
        delta *= r.uniform(low=0.0, high=0.99) * np.linalg.norm(n) / np.linalg.norm(delta)
        change = abs(cosine(m, n + delta) - cosine(m, n))
        assert change <= correlation_perturbation_bound(np.linalg.norm(n), np.linalg.norm(delta)) + 1e-12


def test_scaling_invariance_examples():
    y, yhat = Rng(14).normal(9), Rng(15).normal(9)
    assert check_scaling_invariance(y, yhat, 1.0, 0.0).passed
    rep = check_scaling_invariance(y, yhat, -1.0, 0.0)
    assert rep.passed and rep.observed < 1e-15


def test_batch_independence():
    r = Rng(16)
    y, yhat = r.normal(300), r.normal(300) + 0.2 * np.arange(300) / 300
    rep = check_batch_independence(y, yhat, (32, 64, 128))
    assert rep.passed
    assert len({round(v, 12) for v in rep.context["chunked"].values()}) == 1
    with pytest.raises(ValueError):
        check_batch_independence(y[:50], yhat[:50], (32, 64, 128))


def test_sweep_clean():
    reports = sweep(3, 100)
    assert not any(r.violated for r in reports)
    assert {r.bound_name for r in reports} == {"grad_ratio", "pcc_grad_magnitude", "pcc_gain", "scaling_invariance"}


def test_report_dict():
    rep = check_scaling_invariance(Rng(0).normal(5), Rng(1).normal(5), 2.0, 1.0)
    d = rep.to_dict()
    assert d["passed"] and d["slack"] == pytest.approx(rep.bound_value - rep.observed)
