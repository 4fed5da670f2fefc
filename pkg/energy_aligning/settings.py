import json
import logging
from dataclasses import asdict
from typing import Any

from energy_aligning.aligning import MODE_PER_CLUSTER
from energy_aligning.config import (
    DEFAULT_CANDIDATE_CLUSTERS,
    DEFAULT_COSINE_SCALE,
    DEFAULT_JITTER_SCALE,
    DEFAULT_LAMBDA_BASE,
    DEFAULT_MOMENTUM,
    DEFAULT_REPLICATION,
    DEFAULT_SAMPLES_PER_CLASS,
    DEFAULT_TEMPERATURE,
    DEFAULT_WEIGHT_DECAY_FACTOR,
    FEW_SHOT_THRESHOLD,
    MANY_SHOT_THRESHOLD,
)
from energy_aligning.data import BenchmarkSplits, DataConfig, load_benchmark, make_benchmark
from energy_aligning.errors import ConfigurationError
from energy_aligning.model import HEAD_LINEAR, ModelConfig
from energy_aligning.services.lt_harness import LtConfig
from energy_aligning.services.sampling import SOURCE_TRAIN, EaConfig
from energy_aligning.training import CilConfig, SgdConfig

logger = logging.getLogger(__name__)

MODE_LT = "train-lt"
MODE_CIL = "train-cil"

# Flat keys shared by both recipes
COMMON_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "classes": 10,
    "dim": 8,
    "spread": 2.5,
    "sigma": 1.0,
    "n_test": 100,
    "n_validation": 20,
    "hidden_dims": [],
    "head": HEAD_LINEAR,
    "cosine_scale": DEFAULT_COSINE_SCALE,
    "lr": 0.1,
    "optimizer": "sgd-momentum",
    "momentum": DEFAULT_MOMENTUM,
    "weight_decay": 5e-4,
    "batch_size": 32,
    "epochs": 30,
    "temperature": DEFAULT_TEMPERATURE,
    "energy_aligning": True,
    "samples_per_class": DEFAULT_SAMPLES_PER_CLASS,
    "jitter_scale": DEFAULT_JITTER_SCALE,
    "replication": DEFAULT_REPLICATION,
    "ea_source": SOURCE_TRAIN,
    # CSV splits replace the synthetic benchmark when set
    "train_csv": None,
    "test_csv": None,
    "validation_csv": None,
}

MODE_DEFAULTS: dict[str, dict[str, Any]] = {
    MODE_LT: {
        "n_train": 500,
        "imbalance_ratio": 100.0,
        "schedule": "cosine",
        "milestones": [],
        "lr_decay": 0.1,
        "warmup_epochs": 0,
        "candidate_clusters": list(DEFAULT_CANDIDATE_CLUSTERS),
        "num_clusters": None,
        "shift_mode": MODE_PER_CLUSTER,
        "many_threshold": MANY_SHOT_THRESHOLD,
        "few_threshold": FEW_SHOT_THRESHOLD,
        "topk": 5,
    },
    MODE_CIL: {
        "n_train": 100,
        "n_test": 50,
        "imbalance_ratio": 1.0,
        "schedule": "step",
        "milestones": [20],
        "lr_decay": 0.1,
        "warmup_epochs": 0,
        "steps": 5,
        "classes_per_step": None,
        "lambda_base": DEFAULT_LAMBDA_BASE,
        "weight_decay_factor": DEFAULT_WEIGHT_DECAY_FACTOR,
        "memory": 50,
        "class_order_seed": 0,
    },
}


class RunSettings:
    """Resolved configuration of one run: defaults, then a JSON file, then flag overrides."""

    def __init__(self, mode: str = MODE_LT) -> None:
        if mode not in MODE_DEFAULTS:
            raise ConfigurationError(f"unknown run mode {mode!r}")
        self.mode = mode
        self.defaults = {**COMMON_DEFAULTS, **MODE_DEFAULTS[mode]}
        self.settings = self.defaults.copy()

    def load(self, path: str) -> None:
        """Merge a JSON object of flat keys over the current settings."""
        try:
            with open(path, "r") as f:
                loaded = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            logger.error("Error loading run config %s: %s", path, e)
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        self.update(loaded)

    def update(self, overrides: dict[str, Any]) -> None:
        """Apply overrides; ``None`` values leave a key untouched."""
        unknown = sorted(set(overrides) - set(self.defaults))
        if unknown:
            raise ConfigurationError(f"unknown config keys for {self.mode}: {', '.join(unknown)}")
        self.settings.update({k: v for k, v in overrides.items() if v is not None})

    def get(self, key: str, fallback: Any = None) -> Any:
        """Return the value for *key*, falling back to the default, then *fallback*."""
        val = self.settings.get(key)
        if val is None:
            val = self.defaults.get(key)
        return fallback if val is None else val

    def resolved(self) -> dict[str, Any]:
        """Fully resolved configuration, sorted by key."""
        if self.settings.get("seed") is None:
            raise ConfigurationError("a seed is required")
        return {"mode": self.mode, **{k: self.settings[k] for k in sorted(self.settings)}}

    def _typed(self, key: str, kind: type) -> Any:
        value = self.get(key)
        if kind is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            if value in (0, 1):
                return bool(value)
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        try:
            return kind(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{key}: expected {kind.__name__}, got {value!r}") from e

    def _optional(self, key: str, kind: type) -> Any:
        return None if self.get(key) is None else self._typed(key, kind)

    def _sequence(self, key: str, kind: type) -> tuple:
        values = self.get(key, [])
        if not isinstance(values, (list, tuple)):
            values = [values]
        try:
            return tuple(kind(v) for v in values)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{key}: expected a list of {kind.__name__}, got {values!r}") from e

    def _build(self, factory: Any, **kwargs: Any) -> Any:
        try:
            return factory(**kwargs)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid {factory.__name__} settings: {e}") from e

    def data_config(self) -> DataConfig:
        return self._build(
            DataConfig,
            class_count=self._typed("classes", int),
            dim=self._typed("dim", int),
            spread=self._typed("spread", float),
            sigma=self._typed("sigma", float),
            n_train=self._typed("n_train", int),
            n_test=self._typed("n_test", int),
            n_validation=self._typed("n_validation", int),
            imbalance_ratio=self._typed("imbalance_ratio", float),
            seed=self._typed("seed", int),
        )

    def benchmark(self) -> BenchmarkSplits:
        """Splits from ``train_csv``/``test_csv`` when given, else the synthetic benchmark."""
        train_csv, test_csv = self.get("train_csv"), self.get("test_csv")
        if train_csv is None and test_csv is None:
            if self.get("validation_csv") is not None:
                raise ConfigurationError("validation_csv needs train_csv and test_csv")
            return make_benchmark(self.data_config())
        if train_csv is None or test_csv is None:
            raise ConfigurationError("train_csv and test_csv must be given together")
        logger.info("Reading CSV splits; synthetic data keys are ignored")
        return load_benchmark(str(train_csv), str(test_csv), self.get("validation_csv"))

    def model_config(self) -> ModelConfig:
        return self._build(
            ModelConfig,
            hidden_dims=self._sequence("hidden_dims", int),
            head=self.get("head"),
            cosine_scale=self._typed("cosine_scale", float),
        )

    def sgd_config(self) -> SgdConfig:
        return self._build(
            SgdConfig,
            learning_rate=self._typed("lr", float),
            schedule=self.get("schedule"),
            milestones=self._sequence("milestones", int),
            decay_factor=self._typed("lr_decay", float),
            warmup_epochs=self._typed("warmup_epochs", int),
            optimizer=self.get("optimizer"),
            momentum=self._typed("momentum", float),
            weight_decay=self._typed("weight_decay", float),
            batch_size=self._typed("batch_size", int),
            epochs=self._typed("epochs", int),
            seed=self._typed("seed", int),
            temperature=self._typed("temperature", float),
        )

    def ea_config(self) -> EaConfig:
        return self._build(
            EaConfig,
            samples_per_class=self._typed("samples_per_class", int),
            jitter_scale=self._typed("jitter_scale", float),
            replication=self._typed("replication", int),
            source=self.get("ea_source"),
            seed=self._typed("seed", int),
        )

    def lt_config(self) -> LtConfig:
        self._require(MODE_LT)
        return self._build(
            LtConfig,
            candidate_clusters=self._sequence("candidate_clusters", int),
            num_clusters=self._optional("num_clusters", int),
            shift_mode=self.get("shift_mode"),
            many_threshold=self._typed("many_threshold", int),
            few_threshold=self._typed("few_threshold", int),
            energy_aligning=self._typed("energy_aligning", bool),
            topk=self._typed("topk", int),
        )

    def cil_config(self) -> CilConfig:
        self._require(MODE_CIL)
        return self._build(
            CilConfig,
            steps=self._typed("steps", int),
            classes_per_step=self._optional("classes_per_step", int),
            lambda_base=self._typed("lambda_base", float),
            weight_decay_base=self._typed("weight_decay", float),
            weight_decay_factor=self._typed("weight_decay_factor", float),
            memory=self._typed("memory", int),
            energy_aligning=self._typed("energy_aligning", bool),
            class_order_seed=self._typed("class_order_seed", int),
        )

    def _require(self, mode: str) -> None:
        if self.mode != mode:
            raise ConfigurationError(f"{mode} settings requested from a {self.mode} run")

    def describe(self) -> dict[str, Any]:
        """Typed views as plain dicts, for logging."""
        views = {"data": self.data_config(), "model": self.model_config(), "sgd": self.sgd_config(),
                 "ea": self.ea_config()}
        views["recipe"] = self.lt_config() if self.mode == MODE_LT else self.cil_config()
        return {name: asdict(view) for name, view in views.items()}
