from dataclasses import replace

import numpy as np
import pytest

from ecalab.dgp import (
    DgpConfig,
    calibrate_eta,
    directions,
    generate,
    load_dataset,
    measure_sigma_tilde,
    save_dataset,
)
from ecalab.errors import InvalidConfig, Unreachable
from ecalab.numerics import Rng, homogeneity

SMALL = dict(N_train=200, N_val=40)


def test_defaults():
    c = DgpConfig()
    assert (c.D, c.K, c.N_train, c.N_val) == (16, 10, 2000, 300)
    assert (c.sigma_B, c.sigma_floor, c.sigma_label) == (1.0, 0.01, 0.01)
    assert c.noise_level == c.eta / 2
    assert replace(c, nu=0.3).noise_level == 0.3


def test_config_validation_and_roundtrip():
    with pytest.raises(InvalidConfig):
        DgpConfig(K=1)
    with pytest.raises(InvalidConfig):
        DgpConfig(sigma_floor=-1)
    with pytest.raises(InvalidConfig):
        DgpConfig.from_dict({"bogus": 1})
    c = DgpConfig(eta=0.7, seed=3)
    assert DgpConfig.from_dict(c.to_dict()) == c


def test_directions_orthonormal():
    w, p = directions(16, Rng(0))
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert np.linalg.norm(p) == pytest.approx(1.0)
    assert abs(w @ p) < 1e-15


def test_no_contrast_case():
    c = DgpConfig(eta=0.0, nu=0.0, sigma_floor=0.0, eta_jitter=0.0, gamma_star=3.0, **SMALL)
    train, _ = generate(c)
    np.testing.assert_array_equal(train.embeddings, np.repeat(train.embeddings[:, :1], c.K, axis=1))
    np.testing.assert_allclose(train.dispersion, 0.0, atol=1e-14)
    resid = train.targets - train.means @ train.w_star
    assert np.std(resid) < 5 * c.sigma_label


def test_key_element_offset():
    c = DgpConfig(eta=2.0, sigma_floor=0.0, **SMALL)
    train, _ = generate(c)
    key = train.embeddings[:, -1] - train.embeddings[:, 0]
    np.testing.assert_allclose(key @ train.w_star, train.meta["eta_s"], atol=1e-12)
    np.testing.assert_allclose(key @ train.w_perp, c.noise_level, atol=1e-12)


def test_generate_deterministic_and_seed_sensitive():
    a, _ = generate(DgpConfig(seed=5, **SMALL))
    b, _ = generate(DgpConfig(seed=5, **SMALL))
    c, _ = generate(DgpConfig(seed=6, **SMALL))
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert not np.array_equal(a.targets, c.targets)


def test_calibration_hits_levels():
    prev = 0.0
    for level in (0.10, 0.24, 0.42, 0.73):
        cfg = DgpConfig(seed=1)
        eta = calibrate_eta(level, cfg)
        assert eta > prev
        prev = eta
        train, _ = generate(replace(cfg, eta=eta))
        assert homogeneity(train).sigma_tilde == pytest.approx(level, rel=0.10)


def test_calibration_floor_and_unreachable():
    cfg = DgpConfig(eta_jitter=0.0, seed=2)
    floor = measure_sigma_tilde(replace(cfg, eta=0.0))
    assert calibrate_eta(floor, cfg) == 0.0
    with pytest.raises(Unreachable):
        calibrate_eta(floor / 2, cfg)


def test_floor_scales_with_sigma_floor():
    ratios = []
    for seed in range(10):
        base = DgpConfig(eta=0.0, nu=0.0, eta_jitter=0.0, seed=seed)
        ratios.append(measure_sigma_tilde(replace(base, sigma_floor=0.02)) / measure_sigma_tilde(base))
    assert np.median(ratios) == pytest.approx(2.0, rel=0.15)


def test_dataset_roundtrip(tmp_path):
    cfg = DgpConfig(eta=0.5, N_train=20, N_val=5, seed=9)
    train, val = generate(cfg)
    path = tmp_path / "d.json"
    save_dataset(path, train, val)
    t2, v2 = load_dataset(path)
    np.testing.assert_array_equal(t2.embeddings, train.embeddings)
    np.testing.assert_array_equal(v2.targets, val.targets)
    assert t2.config == cfg
    first = path.read_bytes()
    save_dataset(path, *generate(cfg))
    assert path.read_bytes() == first
