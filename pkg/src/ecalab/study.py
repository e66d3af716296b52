"""Multi-run experiment drivers: homogeneity levels and batch-size ablation."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dgp import DgpConfig, calibrate_eta, generate
from .numerics import pcc
from .theory import TOL
from .train import TrainConfig, plateau_epoch, train, variant

log = logging.getLogger(__name__)

LEVELS = (0.10, 0.24, 0.42, 0.73)
VARIANTS = ("baseline", "eca", "eca_no_sra", "eca_no_dats", "eca_no_dnpl")
BATCH_SIZES = (32, 64, 128)


@dataclass
class RunSummary:
    level: float
    seed: int
    variant: str
    batch_size: int | None
    eta: float
    final_val_pcc: float
    final_val_mse: float
    final_train_pcc: float
    final_train_mse: float
    plateau_epoch: int | None
    mse_at_plateau: float
    sigma_yhat_0: float
    sigma_yhat_200: float
    final_mean_gamma: float
    max_pcc_gain: float
    min_gain_bound: float
    escape_epochs: int
    worst_slack_cor1: float
    worst_slack_cor2: float
    rho0_val: float
    epochs: int
    ratio_violations: int  # train epochs with r_global above its ceiling (any rho)
    bound_monotone: bool  # ceiling non-increasing in sigma_yhat across epochs
    bound_first: float
    bound_last: float

    @property
    def mse_drop_after_plateau(self) -> float:
        """Relative train-MSE decrease from the plateau epoch to the end."""
        if self.plateau_epoch is None or not self.mse_at_plateau > 0:
            return float("nan")
        return (self.mse_at_plateau - self.final_train_mse) / self.mse_at_plateau


@dataclass
class StudyReport:
    runs: list[RunSummary] = field(default_factory=list)
    rho0: dict = field(default_factory=dict)  # level -> mean-pooling val PCC (median over seeds)

    def select(self, **kw) -> list[RunSummary]:
        return [r for r in self.runs if all(getattr(r, k) == v for k, v in kw.items())]

    def median(self, attr: str, **kw) -> float:
        vals = [getattr(r, attr) for r in self.select(**kw)]
        vals = [np.nan if v is None else v for v in vals]
        return float(np.median(np.asarray(vals, float))) if vals else float("nan")

    def levels(self) -> list[float]:
        return sorted({r.level for r in self.runs})

    def variants(self) -> list[str]:
        return [v for v in VARIANTS if self.select(variant=v)]

    def summary_rows(self) -> list[dict]:
        rows = []
        for lv in self.levels():
            for v in self.variants():
                if not self.select(level=lv, variant=v):
                    continue
                rows.append({
                    "level": lv,
                    "variant": v,
                    "median_val_pcc": self.median("final_val_pcc", level=lv, variant=v),
                    "median_val_mse": self.median("final_val_mse", level=lv, variant=v),
                    "median_plateau_epoch": self.median("plateau_epoch", level=lv, variant=v),
                    "rho0": self.rho0.get(lv, float("nan")),
                    "seeds": len(self.select(level=lv, variant=v)),
                })
        return rows

    def to_json(self) -> str:
        doc = {
            "runs": [dict(vars(r), mse_drop_after_plateau=r.mse_drop_after_plateau) for r in self.runs],
            "rho0": {str(k): v for k, v in self.rho0.items()},
            "summary": self.summary_rows(),
        }
        return json.dumps(doc, indent=1, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(RunSummary.__dataclass_fields__) + ["mse_drop_after_plateau"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.runs:
            w.writerow([getattr(r, c) for c in cols])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "study.json").write_text(self.to_json())
        (out / "study.csv").write_text(self.to_csv())
        buf = io.StringIO()
        rows = self.summary_rows()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        (out / "summary.csv").write_text(buf.getvalue())


def level_data(level: float, dgp: DgpConfig, seed: int):
    cfg = replace(dgp, seed=seed)
    cfg = replace(cfg, eta=calibrate_eta(level, cfg))
    return cfg, generate(cfg)


def _summarise(level, seed, name, batch_size, cfg, trace, val) -> RunSummary:
    tr_mse = trace.series("mse")
    sig = trace.series("sigma_yhat")
    pe = trace.plateau_epoch
    gain = trace.series("pcc_gain")
    bound = trace.series("pcc_gain_bound")
    ratio = trace.series("r_global")
    rbound = trace.series("r_global_bound")
    order = np.argsort(sig, kind="stable")
    return RunSummary(
        level=level,
        seed=seed,
        variant=name,
        batch_size=batch_size,
        eta=cfg.eta,
        final_val_pcc=trace.final("pcc", "val"),
        final_val_mse=trace.final("mse", "val"),
        final_train_pcc=trace.final("pcc", "train"),
        final_train_mse=float(tr_mse[-1]),
        plateau_epoch=pe,
        mse_at_plateau=float(tr_mse[pe]) if pe is not None else float("nan"),
        sigma_yhat_0=float(sig[0]),
        sigma_yhat_200=float(sig[min(200, sig.size - 1)]),
        final_mean_gamma=trace.final("mean_gamma", "train"),
        max_pcc_gain=float(np.nanmax(gain)) if np.isfinite(gain).any() else float("nan"),
        min_gain_bound=float(np.nanmin(bound)) if np.isfinite(bound).any() else float("nan"),
        escape_epochs=len(trace.escape_epochs),
        worst_slack_cor1=_nanmin(trace.series("slack_cor1")),
        worst_slack_cor2=_nanmin(trace.series("slack_cor2")),
        rho0_val=pcc(val.targets, val.means @ val.w_star) if val.S > 1 else float("nan"),
        epochs=trace.n_epochs,
        ratio_violations=int(np.sum(ratio > rbound + TOL)),
        bound_monotone=bool(np.all(np.diff(rbound[order]) <= TOL)),
        bound_first=float(rbound[0]),
        bound_last=float(rbound[-1]),
    )


def _nanmin(x) -> float:
    x = np.asarray(x, float)
    return float(np.nanmin(x)) if np.isfinite(x).any() else float("nan")


def _job(args):
    level, seed, name, batch_size, dgp, base, trace_dir = args
    cfg, (tr, va) = level_data(level, dgp, seed)
    tc = replace(variant(replace(base, seed=seed), name), batch_size=batch_size)
    trace, _ = train(tc, tr, va)
    if trace_dir is not None:
        tag = f"level{level:.2f}_seed{seed}_{name}" + (f"_bs{batch_size}" if batch_size else "")
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
        trace.to_csv(Path(trace_dir) / f"{tag}.csv")
    return _summarise(level, seed, name, batch_size, cfg, trace, va)


def _run_jobs(jobs, n_workers):
    if n_workers is None or n_workers <= 1 or len(jobs) <= 1:
        out = []
        for j in jobs:
            out.append(_job(j))
            r = out[-1]
            log.info("level=%.2f seed=%d %s bs=%s val_pcc=%.4f", r.level, r.seed, r.variant, r.batch_size,
                     r.final_val_pcc)
        return out
    with ProcessPoolExecutor(n_workers) as pool:
        return list(pool.map(_job, jobs))


def run_homogeneity_study(levels=LEVELS, seeds=range(5), base: TrainConfig | None = None,
                          dgp: DgpConfig | None = None, variants=VARIANTS, jobs: int | None = 1,
                          trace_dir=None) -> StudyReport:
    """Train every (level, seed, variant) and collect final metrics.

    Each run trains on data generated for that seed; the mean-pooling PCC
    on the true signal direction is recorded per level as a reference line.
    """
    base = base or TrainConfig()
    dgp = dgp or DgpConfig()
    work = [(lv, s, v, None, dgp, base, trace_dir) for lv in levels for s in seeds for v in variants]
    report = StudyReport(_run_jobs(work, jobs))
    for lv in levels:
        report.rho0[lv] = float(np.median([r.rho0_val for r in report.select(level=lv)]))
    return report


def run_batch_size_study(level: float = 0.10, seeds=range(5), sizes=BATCH_SIZES,
                         base: TrainConfig | None = None, dgp: DgpConfig | None = None,
                         name: str = "baseline", jobs: int | None = 1, trace_dir=None) -> StudyReport:
    base = base or TrainConfig()
    dgp = dgp or DgpConfig()
    work = [(level, s, name, int(b), dgp, base, trace_dir) for s in seeds for b in sizes]
    return StudyReport(_run_jobs(work, jobs))


def plateau_spread(report: StudyReport) -> list[float]:
    """Per-seed max - min plateau epoch across batch sizes (no plateau counts as the run length)."""
    out = []
    for s in sorted({r.seed for r in report.runs}):
        pes = [r.plateau_epoch if r.plateau_epoch is not None else r.epochs for r in report.select(seed=s)]
        out.append(float(max(pes) - min(pes)))
    return out


__all__ = [
    "LEVELS", "VARIANTS", "BATCH_SIZES", "RunSummary", "StudyReport", "level_data",
    "run_homogeneity_study", "run_batch_size_study", "plateau_spread", "plateau_epoch",
]
