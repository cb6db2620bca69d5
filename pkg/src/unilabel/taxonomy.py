"""Label spaces, the unified label space and boolean mapping matrices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ConfigurationError

__all__ = [
    "LabelDef",
    "DatasetTaxonomy",
    "UnifiedTaxonomy",
    "MappingMatrix",
    "MappingReport",
    "validate_mapping",
    "mapping_from_assignment",
]


@dataclass(frozen=True)
class LabelDef:
    name: str
    text_embedding: np.ndarray
    description: str = ""

    def __post_init__(self):
        emb = np.asarray(self.text_embedding, dtype=np.float64).ravel()
        emb.setflags(write=False)
        object.__setattr__(self, "text_embedding", emb)

    def __eq__(self, other):
        return (
            isinstance(other, LabelDef)
            and self.name == other.name
            and self.description == other.description
            and np.array_equal(self.text_embedding, other.text_embedding)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetTaxonomy:
    """One source label space.  Label order is the column order everywhere."""

    dataset_id: int
    labels: tuple
    name: str = ""

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ConfigurationError(f"dataset {self.dataset_id} has no labels")
        names = [l.name for l in labels]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigurationError(
                f"dataset {self.dataset_id}: duplicate label names {dup}"
            )
        dims = {l.text_embedding.size for l in labels}
        if len(dims) != 1:
            raise ShapeError(
                f"dataset {self.dataset_id}: embedding lengths differ {sorted(dims)}"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def label_names(self) -> list[str]:
        return [l.name for l in self.labels]

    @property
    def embedding_dim(self) -> int:
        return self.labels[0].text_embedding.size

    def embeddings(self) -> np.ndarray:
        return np.stack([l.text_embedding for l in self.labels])


@dataclass(frozen=True)
class UnifiedTaxonomy:
    node_count: int
    node_names: Optional[tuple] = None

    def check_covers(self, taxonomies: Sequence[DatasetTaxonomy]):
        need = max(len(t) for t in taxonomies)
        if self.node_count < need:
            raise ConfigurationError(
                f"{self.node_count} unified nodes cannot cover a dataset "
                f"with {need} classes"
            )


@dataclass(frozen=True)
class MappingMatrix:
    """Boolean N x |L_i| mapping from unified nodes to one dataset's classes."""

    dataset_id: int
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ShapeError(f"mapping bits must be 2-D, got shape {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def shape(self):
        return self.bits.shape

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def assignment(self) -> list:
        """Per-node class index, or None for an all-zero row."""
        out = []
        for n, row in enumerate(self.bits):
            hits = np.flatnonzero(row)
            if hits.size > 1:
                raise ValueError(f"node {n} is linked to {hits.size} classes")
            out.append(int(hits[0]) if hits.size else None)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, MappingMatrix)
            and self.dataset_id == other.dataset_id
            and np.array_equal(self.bits, other.bits)
        )

    __hash__ = None


@dataclass(frozen=True)
class MappingReport:
    bad_rows: tuple = ()
    empty_cols: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.bad_rows and not self.empty_cols

    def __bool__(self):
        return self.ok


def validate_mapping(m: MappingMatrix, taxonomy: DatasetTaxonomy | None = None,
                     node_count: int | None = None) -> MappingReport:
    """List every row linked to more than one class and every uncovered class."""
    bits = m.bits
    if taxonomy is not None and bits.shape[1] != len(taxonomy):
        raise ShapeError(
            f"mapping has {bits.shape[1]} columns, dataset has {len(taxonomy)} classes"
        )
    if node_count is not None and bits.shape[0] != node_count:
        raise ShapeError(f"mapping has {bits.shape[0]} rows, expected {node_count}")
    rows = bits.sum(axis=1)
    cols = bits.sum(axis=0)
    return MappingReport(
        bad_rows=tuple(int(i) for i in np.flatnonzero(rows > 1)),
        empty_cols=tuple(int(j) for j in np.flatnonzero(cols == 0)),
    )


def mapping_from_assignment(assign: Sequence, classes: int, dataset_id: int = 0) -> MappingMatrix:
    bits = np.zeros((len(assign), classes), dtype=bool)
    for n, c in enumerate(assign):
        if c is None:
            continue
        if not 0 <= c < classes:
            raise IndexError(f"node {n} assigned to class {c}, only {classes} classes")
        bits[n, c] = True
    return MappingMatrix(dataset_id, bits)
