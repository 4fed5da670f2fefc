"""Numerically stable log-sum-exp, softmax and the Monte Carlo free-energy estimator.

A classifier logit ``f(x)[y]`` doubles as a negative energy ``-E(x, y)``. The
negative free energy of class ``y`` is the log of the integral of ``exp(f(x)[y])``
over inputs; on a sampling set drawn uniformly from the region of interest it is
estimated by the log-sum-exp of the class column. The ``log(S * q)`` factor of the
Monte Carlo estimator is shared by all classes and is dropped: only differences
between classes are meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from energy_aligning.errors import ContractViolation

logger = logging.getLogger(__name__)


def _as_finite_vector(values: Sequence[float] | np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractViolation(f"{what}: input is empty")
    if np.isnan(arr).any():
        raise ContractViolation(f"{what}: input contains NaN")
    if not np.isfinite(arr).all():
        raise ContractViolation(f"{what}: input contains infinite values")
    return arr


@dataclass(frozen=True, eq=False)
class LogitMatrix:
    """S x C raw classifier outputs over a sampling set.

    Row ``s`` column ``y`` is ``f(x_s)[y]``. Values are held in double precision
    regardless of the precision they were produced in, and are read-only.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ContractViolation(f"LogitMatrix needs a 2-D array, got {arr.ndim}-D")
        if arr.shape[0] < 1:
            raise ContractViolation("LogitMatrix needs at least one sample")
        if arr.shape[1] < 2:
            raise ContractViolation("LogitMatrix needs at least two classes")
        if not np.isfinite(arr).all():
            raise ContractViolation("LogitMatrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def sample_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def class_count(self) -> int:
        return int(self.values.shape[1])

    def column(self, j: int) -> np.ndarray:
        """Return the logits of class ``j`` over all samples."""
        if not 0 <= j < self.class_count:
            raise ContractViolation(f"class index {j} outside [0, {self.class_count})")
        return self.values[:, j]

    def shifted(self, alphas: np.ndarray) -> "LogitMatrix":
        """Return a new matrix with ``alphas`` added to every row."""
        return LogitMatrix(self.values + np.asarray(alphas, dtype=np.float64)[None, :])


def log_sum_exp(values: Sequence[float] | np.ndarray) -> float:
    """Return ``log(sum(exp(values)))`` with the maximum subtracted before exponentiation.

    Args:
        values: Non-empty sequence of finite reals.

    Returns:
        The log-sum-exp, at least ``max(values)`` and at most ``max(values) + log(n)``.

    Raises:
        ContractViolation: If the input is empty or holds NaN/infinite entries.
    """
    arr = _as_finite_vector(values, "log_sum_exp")
    return float(special.logsumexp(arr))


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return the probability vector ``exp(z) / sum(exp(z))``.

    Invariant under adding a constant to all logits.
    """
    arr = _as_finite_vector(logits, "softmax")
    return special.softmax(arr)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a batch of logits."""
    return special.softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a batch of logits."""
    return special.log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def neg_free_energy(logits: LogitMatrix, class_index: int) -> float:
    """Estimate the negative free energy of one class (up to a shared constant).

    Args:
        logits: Logits of the sampling set.
        class_index: Class ``j`` with ``0 <= j < C``.

    Returns:
        Log-sum-exp of column ``j`` over the samples.
    """
    return float(special.logsumexp(logits.column(class_index)))


def neg_free_energies(logits: LogitMatrix) -> np.ndarray:
    """Vector of :func:`neg_free_energy` for every class."""
    return special.logsumexp(logits.values, axis=0)
