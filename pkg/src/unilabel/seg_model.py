"""Pixel encoder, segmentation heads and losses.

The encoder is a two-layer tanh perceptron standing in for a real
segmentation backbone.  Everything here works on row-major batches: one
pixel per row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Var, as_matrix, matmul, _logsumexp_rows
from .errors import ConfigurationError, DataError, ShapeError
from .taxonomy import MappingMatrix

__all__ = [
    "DEFAULT_HIDDEN",
    "DEFAULT_LAMBDA_CE",
    "DEFAULT_LAMBDA_ORTH",
    "PixelBatch",
    "EncoderParams",
    "MultiHeadParams",
    "encode_pixels",
    "multihead_loss",
    "unified_logits",
    "map_logits",
    "mapped_ce_loss",
    "orthogonality_loss",
    "combined_loss",
    "encode_on_tape",
]

DEFAULT_HIDDEN = 32
DEFAULT_LAMBDA_CE = 1.0
DEFAULT_LAMBDA_ORTH = 0.1


@dataclass(frozen=True)
class PixelBatch:
    """Pixels of one dataset.  ``true_classes`` is only known for planted data."""

    dataset_id: int
    observations: np.ndarray
    labels: np.ndarray
    true_classes: Optional[np.ndarray] = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.intp)
        if obs.ndim != 2 or lab.ndim != 1 or obs.shape[0] != lab.size:
            raise ShapeError(f"observations {obs.shape} vs labels {lab.shape}")
        if lab.size == 0:
            raise DataError("a pixel batch needs at least one pixel")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "labels", lab)
        if self.true_classes is not None:
            object.__setattr__(self, "true_classes", np.asarray(self.true_classes, dtype=np.intp))

    def __len__(self):
        return self.labels.size

    def check_labels(self, n_classes: int):
        if self.labels.min() < 0 or self.labels.max() >= n_classes:
            raise IndexError(
                f"dataset {self.dataset_id}: label outside [0, {n_classes})"
            )


@dataclass
class EncoderParams:
    a1: np.ndarray  # H x D_obs
    a2: np.ndarray  # D x H

    @classmethod
    def init(cls, d_obs: int, hidden: int, d_embed: int, rng: np.random.Generator):
        a1 = rng.standard_normal((hidden, d_obs)) / np.sqrt(d_obs)
        a2 = rng.standard_normal((d_embed, hidden)) / np.sqrt(hidden)
        return cls(a1, a2)

    def groups(self) -> dict:
        return {"enc_a1": self.a1, "enc_a2": self.a2}

    def copy(self):
        return EncoderParams(self.a1.copy(), self.a2.copy())


@dataclass
class MultiHeadParams:
    heads: list  # per dataset, |L_i| x D

    @classmethod
    def init(cls, sizes: Sequence[int], d_embed: int, rng: np.random.Generator):
        return cls([rng.standard_normal((s, d_embed)) * 0.01 for s in sizes])

    def groups(self) -> dict:
        return {f"head_{i}": w for i, w in enumerate(self.heads)}

    def head(self, dataset_id: int) -> np.ndarray:
        if not 0 <= dataset_id < len(self.heads):
            raise ConfigurationError(f"no segmentation head for dataset {dataset_id}")
        return self.heads[dataset_id]


def encode_pixels(batch, enc: EncoderParams) -> np.ndarray:
    """``p = A_2 tanh(A_1 o)`` for every pixel; returns pixels x D."""
    obs = batch.observations if isinstance(batch, PixelBatch) else as_matrix(batch)
    if obs.shape[1] != enc.a1.shape[1]:
        raise ShapeError(f"observation width {obs.shape[1]} != encoder input {enc.a1.shape[1]}")
    return matmul(np.tanh(matmul(obs, enc.a1.T)), enc.a2.T)


def encode_on_tape(tape: Tape, obs: np.ndarray, a1: Var, a2: Var) -> Var:
    o = tape.const(obs)
    h = tape.tanh(tape.matmul(o, tape.transpose(a1)))
    return tape.matmul(h, tape.transpose(a2))


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    rows = np.arange(labels.size)
    return float(np.mean(_logsumexp_rows(logits) - logits[rows, labels]))


def multihead_loss(pixels: np.ndarray, batch: PixelBatch, heads: MultiHeadParams) -> float:
    """Mean cross-entropy of the dataset's own head."""
    w = heads.head(batch.dataset_id)
    batch.check_labels(w.shape[0])
    return _mean_ce(matmul(pixels, w.T), batch.labels)


def unified_logits(pixels: np.ndarray, x_u: np.ndarray) -> np.ndarray:
    """Row ``k`` is ``X_u p_k``: one score per unified node."""
    pixels, x_u = np.asarray(pixels, float), np.asarray(x_u, float)
    if pixels.shape[1] != x_u.shape[1]:
        raise ShapeError(f"pixel width {pixels.shape[1]} != unified embedding width {x_u.shape[1]}")
    return matmul(pixels, x_u.T)


def map_logits(u: np.ndarray, mapping) -> np.ndarray:
    """Dataset-space logits ``s = M^T u`` per pixel.

    ``mapping`` may be a :class:`MappingMatrix` or a continuous N x |L_i|
    block; merged classes receive the sum of their members' logits.
    """
    m = mapping.as_float() if isinstance(mapping, MappingMatrix) else np.asarray(mapping, float)
    if m.ndim != 2 or m.shape[0] != u.shape[1]:
        raise ShapeError(f"mapping {m.shape} does not match {u.shape[1]} unified nodes")
    return matmul(u, m)


def mapped_ce_loss(s: np.ndarray, batch: PixelBatch) -> float:
    s = np.asarray(s, float)
    batch.check_labels(s.shape[1])
    return _mean_ce(s, batch.labels)


def orthogonality_loss(x_u: np.ndarray) -> float:
    """``-sum_i p_ii log p_ii`` with ``p_i = softmax(X_u x_i)``."""
    g = matmul(x_u, np.asarray(x_u, float).T)
    logd = np.diag(g) - _logsumexp_rows(g)
    d = np.exp(logd)
    return float(-np.sum(d * logd))


def combined_loss(l_ce: float, l_orth: float, lambda_ce: float = DEFAULT_LAMBDA_CE,
                  lambda_orth: float = DEFAULT_LAMBDA_ORTH) -> float:
    if not (np.isfinite(lambda_ce) and np.isfinite(lambda_orth)) or lambda_ce < 0 or lambda_orth < 0:
        raise ConfigurationError("loss weights must be finite and non-negative")
    return lambda_ce * l_ce + lambda_orth * l_orth
