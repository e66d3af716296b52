"""Adam, the joint-objective training loop and per-epoch trace collection."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .batch import Batch
from .errors import DegenerateVariance, DivergenceDetected, InvalidConfig
from .gradients import logit_gradients
from .model import EcaConfig, ForwardRecord, ModelParams, forward
from .numerics import EPS, Rng
from .theory import check_pcc_gain, grad_ratio_bound, pcc_grad_magnitude_bound

log = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "epoch", "split", "mse", "pcc", "sigma_yhat", "sigma_y", "mean_gamma", "mean_tau",
    "r_global", "r_global_bound", "grad_norm_attn", "grad_norm_head", "slack_cor1", "slack_cor2",
]
# appended after the fixed schema; consumers read columns by name
EXTRA_COLUMNS = ["total_loss", "rho0", "pcc_gain", "pcc_gain_bound", "gain_precondition", "escape"]

_SHUFFLE_STREAM = 21


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 1000
    lambda_pcc: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    eca: EcaConfig = field(default_factory=EcaConfig)
    checkpoint_every: int | None = None
    plateau_window: int = 50
    plateau_threshold: float = 0.002
    track_bounds: bool = True

    def __post_init__(self):
        if isinstance(self.eca, dict):
            self.eca = EcaConfig.from_dict(self.eca)
        if not self.lr >= 0:
            raise InvalidConfig(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2 (PCC needs two samples)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eca"] = self.eca.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with bias-corrected moments; parameters are a dict of arrays."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            if g.shape != np.shape(p):
                raise ValueError(f"gradient shape {g.shape} != parameter shape {np.shape(p)} for {k}")
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def adam_step(params, grads, state: Adam, lr: float | None = None):
    if lr is not None:
        state.lr = lr
    return state.step(params, grads)


@dataclass
class TrainingTrace:
    rows: list[dict] = field(default_factory=list)
    plateau_epoch: int | None = None
    config: dict = field(default_factory=dict)

    def series(self, key: str, split: str = "train") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["split"] == split], dtype=float)

    def final(self, key: str, split: str = "val") -> float:
        return float(self.series(key, split)[-1])

    @property
    def n_epochs(self) -> int:
        return len({r["epoch"] for r in self.rows})

    @property
    def escape_epochs(self) -> list[int]:
        return [r["epoch"] for r in self.rows if r["split"] == "train" and r["escape"]]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS + EXTRA_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(r[k]) for k in TRACE_COLUMNS + EXTRA_COLUMNS})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "TrainingTrace":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                row = {}
                for k, v in r.items():
                    if k == "split":
                        row[k] = v
                    elif k == "epoch":
                        row[k] = int(v)
                    elif k in ("gain_precondition", "escape"):
                        row[k] = v == "1"
                    else:
                        row[k] = float(v)
                rows.append(row)
        trace = cls(rows)
        trace.plateau_epoch = plateau_epoch(trace.series("pcc"))
        return trace


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def plateau_epoch(pcc, window: int = 50, threshold: float = 0.002) -> int | None:
    """First epoch t whose PCC gain over the next ``window`` epochs is below ``threshold``."""
    pcc = np.asarray(pcc, dtype=float)
    for t in range(len(pcc) - window):
        if pcc[t + window] - pcc[t] < threshold:
            return t
    return None


def _epoch_metrics(batch: Batch, rec: ForwardRecord, params: ModelParams, eca: EcaConfig,
                   track_bounds: bool) -> dict:
    st = rec.stats
    row = {
        "mse": float(np.mean((rec.yhat - batch.targets) ** 2)),
        "pcc": st.rho,
        "sigma_yhat": st.sigma_yhat,
        "sigma_y": st.sigma_y,
        "mean_gamma": float(np.mean(rec.gamma)),
        "mean_tau": float(np.mean(rec.tau)),
    }
    nan = float("nan")
    row.update(r_global=nan, r_global_bound=nan, slack_cor1=nan, slack_cor2=nan, rho0=nan,
               pcc_gain=nan, pcc_gain_bound=nan, gain_precondition=False, escape=False)
    if not track_bounds or st.sigma_yhat <= EPS or st.sigma_y <= EPS:
        return row
    from .gradients import global_factors

    g_pcc, g_mse = global_factors(batch.targets, rec.yhat)
    rms_mse = float(np.sqrt(np.mean(g_mse**2)))
    if rms_mse > 0:
        row["r_global"] = float(np.sqrt(np.mean(g_pcc**2))) / rms_mse
    row["r_global_bound"] = grad_ratio_bound(st.sigma_y, st.sigma_yhat)
    if 0.0 <= st.rho <= 1.0:
        row["slack_cor1"] = row["r_global_bound"] - row["r_global"]
    if np.all(rec.gamma == 1.0) and np.all(rec.tau == 1.0):
        lg = logit_gradients(batch, rec, params.w)
        bound_s = pcc_grad_magnitude_bound(batch, st.sigma_yhat, params.w)
        slack = bound_s[:, None] - np.abs(lg.dPCC)
        row["slack_cor2"] = float(np.min(np.where(batch.mask, slack, np.inf)))
    try:
        gain = check_pcc_gain(batch, params.w, params.c, rec.alpha,
                              gammas=rec.gamma if eca.use_sra else None)
    except DegenerateVariance:
        return row
    row.update(
        rho0=gain.context["rho0"],
        pcc_gain=gain.observed,
        pcc_gain_bound=gain.bound_value,
        gain_precondition=gain.precondition_met,
        escape=gain.context["escape"],
    )
    return row


def _grad_dict(grads: ad.Gradients, rec: ForwardRecord) -> dict[str, np.ndarray]:
    return {k: grads[v] for k, v in rec.vars.items()}


def _step_loss(batch: Batch, params: ModelParams, config: TrainConfig, tape: ad.Tape):
    eca = config.eca
    rec = forward(batch, params, eca, tape=tape)
    total, br = losses.total_loss(
        batch.targets,
        rec.yhat_var,
        config.lambda_pcc,
        use_dnpl=eca.use_dnpl,
        gammas=rec.gamma_var,
        lambda_gamma=eca.lambda_gamma,
    )
    return rec, total, br


def train(config: TrainConfig, train_batch: Batch, val_batch: Batch | None = None,
          params: ModelParams | None = None, checkpoint_dir=None):
    """Train from ``params`` (or a seeded init) and return (trace, final params).

    Each epoch row records the state *before* that epoch's update, so
    epoch 0 is the initialisation.
    """
    eca = config.eca
    if params is None:
        params = ModelParams.init(train_batch.d, eca, config.seed)
    adam = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    trace = TrainingTrace(config=config.to_dict())
    shuffle_rng = Rng(config.seed).child(_SHUFFLE_STREAM)

    for epoch in range(config.epochs):
        tape = ad.Tape()
        try:
            rec, total, br = _step_loss(train_batch, params, config, tape)
        except DegenerateVariance as exc:
            raise DivergenceDetected(f"epoch {epoch}: {exc}", trace) from exc
        if not all(math.isfinite(x) for x in (br.total, br.mse, br.pcc)):
            raise DivergenceDetected(f"non-finite loss at epoch {epoch}", trace)
        grads = _grad_dict(tape.backward(total), rec)

        row = {"epoch": epoch, "split": "train", "total_loss": br.total}
        row.update(_epoch_metrics(train_batch, rec, params, eca, config.track_bounds))
        row["grad_norm_attn"] = float(np.linalg.norm(grads["w_attn"]))
        row["grad_norm_head"] = float(np.sqrt(np.sum(grads["w"] ** 2) + grads["c"] ** 2))
        trace.rows.append(row)
        if val_batch is not None:
            vrec = forward(val_batch, params, eca)
            vrow = {"epoch": epoch, "split": "val", "total_loss": float("nan"),
                    "grad_norm_attn": float("nan"), "grad_norm_head": float("nan")}
            vrow.update(_epoch_metrics(val_batch, vrec, params, eca, config.track_bounds))
            trace.rows.append(vrow)

        if config.batch_size is None or config.batch_size >= train_batch.S:
            params = params.with_arrays(adam.step(params.arrays(), grads))
        else:
            order = shuffle_rng.permutation(train_batch.S)
            for start in range(0, train_batch.S, config.batch_size):
                idx = order[start:start + config.batch_size]
                if idx.size < 2:
                    continue
                mb_tape = ad.Tape()
                try:
                    mrec, mtotal, mbr = _step_loss(train_batch.subset(idx), params, config, mb_tape)
                except DegenerateVariance as exc:
                    raise DivergenceDetected(f"epoch {epoch}: {exc}", trace) from exc
                if not math.isfinite(mbr.total):
                    raise DivergenceDetected(f"non-finite mini-batch loss at epoch {epoch}", trace)
                params = params.with_arrays(adam.step(params.arrays(), _grad_dict(mb_tape.backward(mtotal), mrec)))

        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{epoch + 1:05d}.json", params, config, epoch + 1)

    trace.plateau_epoch = plateau_epoch(trace.series("pcc"), config.plateau_window, config.plateau_threshold)
    return trace, params


def save_checkpoint(path, params: ModelParams, config: TrainConfig, epoch: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params.to_checkpoint(config.eca, config.seed, epoch)))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    return ModelParams.from_checkpoint(doc), doc


def variant(config: TrainConfig, name: str) -> TrainConfig:
    """Named model variants of the homogeneity study."""
    flags = {
        "baseline": dict(use_sra=False, use_dats=False, use_dnpl=False),
        "eca": dict(use_sra=True, use_dats=True, use_dnpl=True),
        "eca_no_sra": dict(use_sra=False, use_dats=True, use_dnpl=True),
        "eca_no_dats": dict(use_sra=True, use_dats=False, use_dnpl=True),
        "eca_no_dnpl": dict(use_sra=True, use_dats=True, use_dnpl=False),
    }
    if name not in flags:
        raise InvalidConfig(f"unknown variant {name!r}; choose from {sorted(flags)}")
    return replace(config, eca=replace(config.eca, **flags[name]))
