"""Run configuration: one JSON document, every key defaulted from DEFAULTS, unknown keys rejected."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .cohort import Mode, TaskConfig, config_hash
from .errors import ConfigError
from .fusion import FusionConfig, ModelConfig
from .s4 import EncoderConfig
from .synthgen import SynthConfig
from .trainer import TrainerConfig

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "input_dir": None,  # None -> <work_dir>/cohort
        "work_dir": "work",
    },
    "task": {
        "mode": "ESTIMATION",
        "horizon_s": None,
        "vitals_window_s": 1800,
        "estimation_lab_window_s": 3600,
        "min_pos": 10,
        "min_neg": 10,
        "split_ratio": [18, 1, 1],
        "working_rate_hz": 100,
    },
    "synth": {
        "n_patients": 500,
        "records_per_patient": 4,
        "n_labels": 4,
        "signal_strength": 0.8,
        "missing_rate_tabular": 0.2,
        "lab_event_rate": 1.0,
        "prevalence": 0.3,
        "sampling_rate_hz": 500,
    },
    "encoder": {
        "model_dim": 32,
        "n_blocks": 4,
        "state_size": 8,
        "segment_len": 250,
        "ff_mult": 2,
        "dropout": 0.1,
        "dt_min": 0.001,
        "dt_max": 0.1,
    },
    "fusion": {
        "fusion_proj_dim": 16,
        "prelu_init": 0.25,
    },
    "trainer": {
        "learning_rate": 1e-3,
        "weight_decay": 1e-3,
        "epochs": 20,
        "batch_size": 32,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "precision": "float32",
    },
    "eval": {
        "n_bootstrap": 1000,
        "ci_level": 0.95,
        "workers": 1,
    },
    "runtime": {
        "threads": 1,
        "deterministic": False,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


class RunConfig:
    def __init__(self, data: dict | None = None):
        self.data = _merge(DEFAULTS, data or {})
        self._validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls(data)

    def override(self, section: str | None, key: str, value) -> None:
        if value is None:
            return
        target = self.data if section is None else self.data[section]
        target[key] = value
        self._validate()

    def _validate(self) -> None:
        try:
            self.task_config()
            self.synth_config()
            self.model_config(1)
            self.trainer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.data["task"]["mode"] not in (m.value for m in Mode):
            raise ConfigError(f"task.mode must be ESTIMATION or MONITORING")
        if self.data["runtime"]["threads"] < 1 or self.data["eval"]["workers"] < 1:
            raise ConfigError("threads and workers must be >= 1")

    # -- typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def work_dir(self) -> Path:
        return Path(self.data["paths"]["work_dir"])

    @property
    def input_dir(self) -> Path:
        d = self.data["paths"]["input_dir"]
        return Path(d) if d else self.work_dir / "cohort"

    @property
    def task_tag(self) -> str:
        t = self.data["task"]
        return "estimation" if t["mode"] == "ESTIMATION" else f"monitoring_{t['horizon_s']}"

    @property
    def task_dir(self) -> Path:
        return self.work_dir / self.task_tag

    def task_config(self) -> TaskConfig:
        t = {k: v for k, v in self.data["task"].items() if k != "working_rate_hz"}
        return TaskConfig(**t)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **self.data["synth"])

    def model_config(self, n_labels: int, feature_dim: int | None = None) -> ModelConfig:
        enc = EncoderConfig(seed=self.seed, **self.data["encoder"])
        extra = {} if feature_dim is None else {"feature_dim": feature_dim}
        fus = FusionConfig(latent_dim=enc.model_dim, n_labels=n_labels, **self.data["fusion"], **extra)
        return ModelConfig(enc, fus)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(seed=self.seed, **self.data["trainer"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("runtime")
        return config_hash(d)
