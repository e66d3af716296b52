"""Synthetic set-regression data with controllable in-sample homogeneity.

Each sample has K elements in R^D: K-1 background elements scattered
around a sample centre and one key element pushed along a signal
direction w* (plus a fixed offset along an orthogonal noise direction).
The target projects the centre onto w* and adds an extrapolated copy of
the key's signal strength.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .batch import Batch
from .errors import InvalidConfig, Unreachable
from .numerics import Rng, homogeneity

_TRAIN_STREAM, _VAL_STREAM, _CALIB_STREAM = 1, 2, 3
CALIBRATION_SAMPLES = 512


@dataclass(frozen=True)
class DgpConfig:
    D: int = 16
    K: int = 10
    N_train: int = 2000
    N_val: int = 300
    eta: float = 0.25
    nu: float | None = None  # None -> eta / 2
    gamma_star: float = 15.0
    sigma_B: float = 1.0
    sigma_floor: float = 0.01
    sigma_label: float = 0.01
    # Per-sample spread of the key strength: eta_s = eta + eta_jitter * N(0, 1).
    # 0 gives a key strength shared by every sample.
    eta_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.D < 2 or self.K < 2:
            raise InvalidConfig(f"need D >= 2 and K >= 2, got D={self.D}, K={self.K}")
        if self.N_train < 2 or self.N_val < 0:
            raise InvalidConfig("need N_train >= 2 and N_val >= 0")
        if self.gamma_star < 1:
            raise InvalidConfig(f"gamma_star must be >= 1, got {self.gamma_star}")
        for name in ("sigma_B", "sigma_floor", "sigma_label", "eta_jitter"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.eta < 0 or (self.nu is not None and self.nu < 0):
            raise InvalidConfig("eta and nu must be >= 0")

    @property
    def noise_level(self) -> float:
        return self.eta / 2 if self.nu is None else self.nu

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown dgp keys: {sorted(unknown)}")
        return cls(**d)


def directions(D: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Unit signal direction and a unit direction orthogonal to it."""
    w_star = rng.normal(D)
    w_star /= np.linalg.norm(w_star)
    w_perp = rng.normal(D)
    # two Gram-Schmidt passes keep |w*.w_perp| at rounding level
    for _ in range(2):
        w_perp -= (w_perp @ w_star) * w_star
        w_perp /= np.linalg.norm(w_perp)
    return w_star, w_perp


def _split(config: DgpConfig, n: int, w_star, w_perp, rng: Rng) -> Batch:
    D, K = config.D, config.K
    mu = rng.normal((n, D), scale=config.sigma_B)
    eps = rng.normal((n, K, D), scale=config.sigma_floor)
    eta_s = config.eta + config.eta_jitter * rng.normal(n)
    label_noise = rng.normal(n, scale=config.sigma_label)

    h = mu[:, None, :] + eps
    h[:, K - 1, :] += eta_s[:, None] * w_star + config.noise_level * w_perp
    y = mu @ w_star + config.gamma_star * eta_s + label_noise
    return Batch(h, y, config=config, w_star=w_star, w_perp=w_perp, meta={"eta_s": eta_s})


def generate(config: DgpConfig) -> tuple[Batch, Batch]:
    """Train and validation batches; fully determined by ``config.seed``."""
    rng = Rng(config.seed)
    w_star, w_perp = directions(config.D, rng)
    train = _split(config, config.N_train, w_star, w_perp, rng.child(_TRAIN_STREAM))
    val = _split(config, config.N_val, w_star, w_perp, rng.child(_VAL_STREAM))
    return train, val


def measure_sigma_tilde(config: DgpConfig, n: int = CALIBRATION_SAMPLES) -> float:
    """RMS in-sample dispersion of a fresh calibration batch."""
    rng = Rng(config.seed)
    w_star, w_perp = directions(config.D, rng)
    batch = _split(config, n, w_star, w_perp, rng.child(_CALIB_STREAM))
    return homogeneity(batch).sigma_tilde


def calibrate_eta(target_sigma_tilde: float, config: DgpConfig, rel_tol: float = 0.02) -> float:
    """Bisect eta until the calibration batch hits the target sigma_tilde.

    The calibration batch uses common random numbers across eta values, so
    the measured sigma_tilde is monotone in eta.
    """

    def measure(eta):
        return measure_sigma_tilde(replace(config, eta=eta))

    floor = measure(0.0)
    if target_sigma_tilde < floor * (1 - rel_tol):
        raise Unreachable(
            f"target sigma_tilde {target_sigma_tilde} is below the eta=0 floor {floor:.4f}"
        )
    if abs(floor - target_sigma_tilde) <= rel_tol * target_sigma_tilde:
        return 0.0
    lo, hi = 0.0, 1.0
    while measure(hi) < target_sigma_tilde:
        lo, hi = hi, hi * 2
        if hi > 1e6:
            raise Unreachable(f"no eta reaches sigma_tilde {target_sigma_tilde}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if measure(mid) < target_sigma_tilde:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 * hi:
            break
    return 0.5 * (lo + hi)


# --- dataset file format ---------------------------------------------------


def to_json(train: Batch, val: Batch) -> dict:
    config = train.config
    hs = homogeneity(train)
    header = {
        "config": config.to_dict(),
        "w_star": train.w_star.tolist(),
        "w_perp": train.w_perp.tolist(),
        "sigma_tilde": hs.sigma_tilde,
        "R_tilde": hs.R_tilde,
    }
    rows = []
    for split, batch in (("train", train), ("val", val)):
        for s, (h, y) in enumerate(batch.samples()):
            rows.append({"sample_id": s, "split": split, "embeddings": h.tolist(), "target": y})
    return {"header": header, "rows": rows}


def save_dataset(path, train: Batch, val: Batch) -> None:
    Path(path).write_text(json.dumps(to_json(train, val)))


def load_dataset(path) -> tuple[Batch, Batch]:
    doc = json.loads(Path(path).read_text())
    header = doc["header"]
    config = DgpConfig.from_dict(header["config"])
    w_star = np.asarray(header["w_star"])
    w_perp = np.asarray(header["w_perp"])
    out = {}
    for split in ("train", "val"):
        rows = sorted((r for r in doc["rows"] if r["split"] == split), key=lambda r: r["sample_id"])
        if rows:
            out[split] = Batch.from_samples(
                [r["embeddings"] for r in rows],
                [r["target"] for r in rows],
                config=config,
                w_star=w_star,
                w_perp=w_perp,
            )
        else:
            out[split] = None
    return out["train"], out["val"]
