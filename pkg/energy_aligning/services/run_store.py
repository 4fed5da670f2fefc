"""Persist a run directory: resolved config, per-step checkpoints and shifts, metrics and CSV exports."""

from __future__ import annotations

import json
import logging
import math
import os
from typing import Any

import numpy as np
import pandas as pd

from energy_aligning.aligning import ShiftVector
from energy_aligning.config import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    CONFUSION_FILE,
    CONFUSION_LOG_FILE,
    ENERGY_FILE,
    METRICS_FILE,
    SHIFTS_FILE,
    TRACES_FILE,
)
from energy_aligning.errors import ParseError
from energy_aligning.metrics import EnergyDiagnostic, confusion_frame, confusion_log1p
from energy_aligning.model import MlpClassifier
from energy_aligning.training import LossTrace

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays to plain JSON values; NaN becomes ``None``."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) else value
    return value


def write_json(path: str, data: Any) -> None:
    """Deterministic JSON: sorted keys, four-space indent, trailing newline."""
    try:
        with open(path, "w") as f:
            json.dump(to_jsonable(data), f, indent=4, sort_keys=True, allow_nan=False)
            f.write("\n")
    except OSError as e:
        logger.error("Error writing %s: %s", path, e)
        raise


def read_json(path: str) -> Any:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        logger.error("Error loading %s: %s", path, e)
        raise ParseError(f"cannot read {path}: {e}") from e


class RunStore:
    """Handles the files of one run directory."""

    def __init__(self, root: str) -> None:
        """Initialize the store, creating ``root`` if needed.

        Args:
            root: Run directory path.
        """
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def step_dir(self, step: int) -> str:
        path = self.path(f"step_{step}")
        os.makedirs(path, exist_ok=True)
        return path

    def write_config(self, config: dict[str, Any]) -> str:
        path = self.path(CONFIG_FILE)
        write_json(path, config)
        return path

    def write_metrics(self, metrics: dict[str, Any]) -> str:
        path = self.path(METRICS_FILE)
        write_json(path, metrics)
        logger.info("Wrote metrics to %s", path)
        return path

    def write_step(self, step: int, model: MlpClassifier, shifts: ShiftVector) -> None:
        """Store the checkpoint and shift scalars of incremental step ``step`` (1-based)."""
        directory = self.step_dir(step)
        model.save_checkpoint(os.path.join(directory, CHECKPOINT_FILE))
        write_json(os.path.join(directory, SHIFTS_FILE), shifts.to_dict())

    def write_traces(self, trace: LossTrace) -> str:
        path = self.path(TRACES_FILE)
        trace.to_frame().to_csv(path, index=False)
        return path

    def write_energy(self, diagnostic: EnergyDiagnostic) -> str:
        path = self.path(ENERGY_FILE)
        diagnostic.to_frame().to_csv(path, index=False)
        return path

    def write_confusion(self, matrix: np.ndarray) -> None:
        """Write the confusion counts and their ``log1p`` view."""
        confusion_frame(matrix).to_csv(self.path(CONFUSION_FILE))
        confusion_frame(confusion_log1p(matrix)).to_csv(self.path(CONFUSION_LOG_FILE))

    def load_config(self) -> dict[str, Any]:
        return read_json(self.path(CONFIG_FILE))

    def load_metrics(self) -> dict[str, Any]:
        return read_json(self.path(METRICS_FILE))

    def load_shifts(self, step: int) -> ShiftVector:
        return ShiftVector.from_dict(read_json(self.path(f"step_{step}", SHIFTS_FILE)))

    def load_checkpoint(self, step: int) -> MlpClassifier:
        return MlpClassifier.load_checkpoint(self.path(f"step_{step}", CHECKPOINT_FILE))

    def load_traces(self) -> pd.DataFrame:
        try:
            return pd.read_csv(self.path(TRACES_FILE))
        except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError) as e:
            logger.error("Error loading traces: %s", e)
            raise ParseError(f"cannot read traces: {e}") from e
