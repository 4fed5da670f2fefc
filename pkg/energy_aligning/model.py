"""Desk-scale logit producers: rectifier MLPs with an affine or cosine head.

Weights are stored input-major (``W`` has shape ``fan_in x fan_out``), so a batch
``X`` of shape ``N x D`` maps to ``X @ W + b``. Gradients are exact and computed by
hand; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from energy_aligning.config import CHECKPOINT_FORMAT, COSINE_EPS, DEFAULT_COSINE_SCALE
from energy_aligning.errors import ConfigurationError, ContractViolation, ParseError

logger = logging.getLogger(__name__)

HEAD_LINEAR = "linear"
HEAD_COSINE = "cosine"
HEADS = (HEAD_LINEAR, HEAD_COSINE)

# (dW, db) per layer; db is None for the cosine head
Gradients = list[tuple[np.ndarray, np.ndarray | None]]


class MlpClassifier:
    """Stack of affine layers with rectifier activations and a classification head.

    The head is either affine (``h @ W + b``) or cosine
    (``scale * <w_c, h> / (|w_c| |h|)``, no bias).
    """

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray | None],
        head: str = HEAD_LINEAR,
        scale: float = DEFAULT_COSINE_SCALE,
        seed: int = 0,
        step: int = 0,
    ) -> None:
        """Initialize the classifier from explicit parameters.

        Args:
            weights: One ``fan_in x fan_out`` matrix per layer.
            biases: One bias vector per layer; the last entry is ``None`` for the
                cosine head.
            head: ``"linear"`` or ``"cosine"``.
            scale: Cosine-head logit scale ``s``.
            seed: Seed the parameters were drawn with (kept for checkpoints).
            step: Number of optimizer updates applied so far.
        """
        if head not in HEADS:
            raise ContractViolation(f"unknown head {head!r}")
        if len(weights) == 0 or len(weights) != len(biases):
            raise ContractViolation("weights and biases must describe the same layers")
        if head == HEAD_COSINE and scale <= 0:
            raise ContractViolation("cosine scale must be positive")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [None if b is None else np.array(b, dtype=np.float64) for b in biases]
        self.head = head
        self.scale = float(scale)
        self.seed = int(seed)
        self.step = int(step)
        self.frozen = False
        self._validate()

    def _validate(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2:
                raise ContractViolation(f"layer {i} weight must be a matrix")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ContractViolation(f"layer {i} input width does not chain")
            is_head = i == len(self.weights) - 1
            if b is None:
                if not (is_head and self.head == HEAD_COSINE):
                    raise ContractViolation(f"layer {i} is missing its bias")
            elif is_head and self.head == HEAD_COSINE:
                raise ContractViolation("the cosine head has no bias")
            elif b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {i} bias shape mismatch")
        if not all(np.isfinite(p).all() for p in self.parameters()):
            raise ContractViolation("parameters must be finite")
        if self.head == HEAD_COSINE and (np.linalg.norm(self.weights[-1], axis=0) == 0).any():
            raise ContractViolation("cosine head weight vectors must be non-zero")

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def class_count(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [int(w.shape[1]) for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in layer order (``W0, b0, W1, b1, ...``), by reference."""
        params: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            if b is not None:
                params.append(b)
        return params

    def decay_mask(self) -> list[bool]:
        """Whether weight decay applies to each entry of :meth:`parameters`."""
        mask: list[bool] = []
        for b in self.biases:
            mask.append(True)
            if b is not None:
                mask.append(False)
        return mask

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        batch = arr if arr.ndim == 2 else arr.reshape(1, -1)
        if batch.shape[1] != self.input_dim:
            raise ContractViolation(
                f"input dimension {batch.shape[1]} does not match model dimension {self.input_dim}"
            )
        if not np.isfinite(batch).all():
            raise ContractViolation("inputs must be finite")
        return batch

    def _hidden(self, batch: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        inputs = [batch]
        pre = []
        h = batch
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ w + b
            pre.append(a)
            h = np.maximum(a, 0.0)
            inputs.append(h)
        return inputs, pre

    def _head_forward(self, h: np.ndarray) -> np.ndarray:
        w = self.weights[-1]
        if self.head == HEAD_LINEAR:
            return h @ w + self.biases[-1]
        h_norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), COSINE_EPS)
        w_norm = np.linalg.norm(w, axis=0, keepdims=True)
        cos = (h / h_norm) @ (w / w_norm)
        return self.scale * np.clip(cos, -1.0, 1.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for one feature vector (``C``) or a batch (``N x C``)."""
        batch = self._check_input(x)
        inputs, _ = self._hidden(batch)
        logits = self._head_forward(inputs[-1])
        return logits if np.ndim(x) == 2 else logits[0]

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> Gradients:
        """Gradients of a scalar loss given ``dL/dlogits``, summed over the batch.

        Args:
            x: One feature vector or an ``N x D`` batch.
            upstream: ``dL/dlogits`` with the same leading shape as the logits.

        Returns:
            ``(dW, db)`` per layer, ``db`` is ``None`` for the cosine head.
        """
        batch = self._check_input(x)
        g = np.asarray(upstream, dtype=np.float64).reshape(batch.shape[0], self.class_count)
        inputs, pre = self._hidden(batch)
        h = inputs[-1]
        w = self.weights[-1]
        grads: Gradients = []

        if self.head == HEAD_LINEAR:
            grads.append((h.T @ g, g.sum(axis=0)))
            dh = g @ w.T
        else:
            h_norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), COSINE_EPS)
            w_norm = np.linalg.norm(w, axis=0, keepdims=True)
            u = h / h_norm
            v = w / w_norm
            du = self.scale * (g @ v.T)
            dv = self.scale * (u.T @ g)
            dw = (dv - v * np.sum(v * dv, axis=0, keepdims=True)) / w_norm
            dh = (du - u * np.sum(u * du, axis=1, keepdims=True)) / h_norm
            grads.append((dw, None))

        for layer in range(len(self.weights) - 2, -1, -1):
            da = dh * (pre[layer] > 0.0)
            grads.append((inputs[layer].T @ da, da.sum(axis=0)))
            dh = da @ self.weights[layer].T
        grads.reverse()
        return grads

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            head=self.head,
            scale=self.scale,
            seed=self.seed,
            step=self.step,
        )

    def frozen_copy(self) -> "MlpClassifier":
        """Deep, read-only snapshot safe to share as a distillation teacher."""
        snapshot = self.copy()
        for p in snapshot.parameters():
            p.setflags(write=False)
        snapshot.frozen = True
        return snapshot

    def expand_classes(self, extra: int, seed: int) -> "MlpClassifier":
        """Return a copy with ``extra`` new output units appended after the existing ones."""
        if extra < 1:
            raise ContractViolation("expand_classes needs at least one new class")
        grown = self.copy()
        rng = np.random.default_rng(seed)
        fan_in = grown.weights[-1].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        grown.weights[-1] = np.hstack([grown.weights[-1], rng.uniform(-bound, bound, (fan_in, extra))])
        if grown.biases[-1] is not None:
            grown.biases[-1] = np.concatenate([grown.biases[-1], np.zeros(extra)])
        grown._validate()
        logger.debug("Expanded head from %d to %d classes", self.class_count, grown.class_count)
        return grown

    def header(self) -> dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "dims": self.dims,
            "head": self.head,
            "scale": self.scale,
            "seed": self.seed,
            "step": self.step,
        }

    def save_checkpoint(self, path: str) -> None:
        """Write a JSON header line followed by the little-endian float64 parameter blob."""
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.parameters())
        with open(path, "wb") as f:
            f.write(header + b"\n" + blob)
        logger.info("Saved checkpoint (%d parameters) to %s", self.parameter_count(), path)

    @classmethod
    def load_checkpoint(cls, path: str) -> "MlpClassifier":
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            logger.error("Error reading checkpoint %s: %s", path, e)
            raise ParseError(f"cannot read checkpoint {path}: {e}") from e
        head_line, sep, blob = raw.partition(b"\n")
        if not sep:
            raise ParseError(f"{path}: checkpoint header is not terminated")
        try:
            header = json.loads(head_line.decode("utf-8"))
            dims = [int(d) for d in header["dims"]]
            head = header["head"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}: malformed checkpoint header: {e}") from e
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ParseError(f"{path}: unsupported checkpoint format {header.get('format')!r}")

        values = np.frombuffer(blob, dtype="<f8")
        weights, biases = [], []
        offset = 0
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            has_bias = not (i == len(dims) - 2 and head == HEAD_COSINE)
            need = fan_in * fan_out + (fan_out if has_bias else 0)
            if offset + need > values.size:
                raise ParseError(f"{path}: parameter blob is truncated")
            weights.append(values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            offset += fan_in * fan_out
            if has_bias:
                biases.append(values[offset:offset + fan_out].copy())
                offset += fan_out
            else:
                biases.append(None)
        if offset != values.size:
            raise ParseError(f"{path}: parameter blob has trailing data")
        return cls(weights, biases, head=head, scale=header.get("scale", DEFAULT_COSINE_SCALE),
                   seed=header.get("seed", 0), step=header.get("step", 0))


def init_params(
    dims: Sequence[int],
    head: str = HEAD_LINEAR,
    seed: int = 0,
    scale: float = DEFAULT_COSINE_SCALE,
) -> MlpClassifier:
    """Seeded initialization with uniform fan-in scaling.

    Each weight is drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases start
    at zero.

    Args:
        dims: ``[D, hidden..., C]``.
        head: ``"linear"`` or ``"cosine"``.
        seed: Generator seed; equal seeds give bit-identical parameters.
        scale: Cosine-head scale.

    Raises:
        ContractViolation: If fewer than two dims are given or any is below 1.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ContractViolation(f"invalid layer dimensions {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        is_head = i == len(dims) - 2
        biases.append(None if is_head and head == HEAD_COSINE else np.zeros(fan_out))
    return MlpClassifier(weights, biases, head=head, scale=scale, seed=seed)


def forward_logits(model: MlpClassifier, x: np.ndarray) -> np.ndarray:
    """Logits of ``model`` for one feature vector or a batch."""
    return model.forward(x)


def backward(model: MlpClassifier, x: np.ndarray, upstream: np.ndarray) -> Gradients:
    """Parameter gradients of ``model`` for ``dL/dlogits = upstream``."""
    return model.backward(x, upstream)


def flatten_gradients(grads: Gradients) -> np.ndarray:
    """Concatenate gradients in :meth:`MlpClassifier.parameters` order."""
    parts: list[np.ndarray] = []
    for dw, db in grads:
        parts.append(dw.ravel())
        if db is not None:
            parts.append(db.ravel())
    return np.concatenate(parts)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shared by both harnesses: hidden widths and head type."""

    hidden_dims: tuple[int, ...] = ()
    head: str = HEAD_LINEAR
    cosine_scale: float = DEFAULT_COSINE_SCALE

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if any(int(h) < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden widths must be positive")
        if self.cosine_scale <= 0:
            raise ConfigurationError("cosine_scale must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def build(self, input_dim: int, class_count: int, seed: int) -> MlpClassifier:
        return init_params([input_dim, *self.hidden_dims, class_count], self.head, seed, self.cosine_scale)
