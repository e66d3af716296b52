"""Run configuration: JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dgp import DgpConfig
from .errors import InvalidConfig
from .model import EcaConfig
from .train import TrainConfig

SEED_ENV = "ECA_SEED"


@dataclass
class OutputConfig:
    out_dir: str = "runs"
    trace_name: str = "trace.csv"
    checkpoint_name: str = "model.json"


@dataclass
class RunConfig:
    dgp: DgpConfig = field(default_factory=DgpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def eca(self) -> EcaConfig:
        return self.train.eca

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        eca = d.pop("eca")
        return {"dgp": self.dgp.to_dict(), "train": d, "eca": eca, "output": vars(self.output).copy()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"dgp", "train", "eca", "output"}
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        train = dict(doc.get("train", {}))
        if "eca" in train:
            raise InvalidConfig("put ECA options in the top-level 'eca' section")
        train["eca"] = EcaConfig.from_dict(doc.get("eca", {}))
        out = doc.get("output", {})
        bad = set(out) - {f.name for f in fields(OutputConfig)}
        if bad:
            raise InvalidConfig(f"unknown output keys: {sorted(bad)}")
        return cls(DgpConfig.from_dict(doc.get("dgp", {})), TrainConfig.from_dict(train), OutputConfig(**out))


def _coerce(raw: str):
    """Parse an override value: JSON when it parses, else the bare string."""
    low = raw.strip().lower()
    if low in ("on", "true", "yes"):
        return True
    if low in ("off", "false", "no"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings to a config dict (validated later)."""
    doc = {k: dict(v) for k, v in doc.items()}
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        if key.count(".") != 1:
            raise InvalidConfig(f"override key {key!r} must be section.key")
        section, name = key.split(".")
        if section not in doc:
            raise InvalidConfig(f"unknown config section {section!r}")
        if name not in doc[section]:
            raise InvalidConfig(f"unknown key {key!r}")
        doc[section][name] = _coerce(raw)
    return doc


def load_run_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults <- JSON file <- overrides <- ECA_SEED (seeds both data and training)."""
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise InvalidConfig(f"{path}: top level must be an object")
        for section, values in user.items():
            if section not in doc:
                raise InvalidConfig(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise InvalidConfig(f"section {section!r} must be an object")
            bad = set(values) - set(doc[section])
            if bad:
                raise InvalidConfig(f"unknown keys in {section!r}: {sorted(bad)}")
            doc[section].update(values)
    doc = apply_overrides(doc, overrides)
    try:
        config = RunConfig.from_dict(doc)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise InvalidConfig(f"{SEED_ENV} must be an integer") from exc
        config = replace(config, dgp=replace(config.dgp, seed=seed), train=replace(config.train, seed=seed))
    return config
