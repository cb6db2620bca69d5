"""The label graph: node features, learnable adjacency and GraphSAGE layers.

Node order is fixed: the first ``|L|`` rows are dataset labels in
(dataset, label) order, the last ``N`` rows are the unified nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tape, Var, as_matrix, matmul, row_softmax, tanh_map
from .errors import ShapeError, StateError
from .taxonomy import DatasetTaxonomy

__all__ = [
    "NUM_LAYERS",
    "GraphLayout",
    "LabelGraphParams",
    "GraphActivation",
    "assemble_node_features",
    "normalize_adjacency",
    "adjacency_block",
    "gnn_forward",
    "graph_on_tape",
    "gnn_backward",
    "GRAPH_GROUPS",
]

NUM_LAYERS = 3
GRAPH_GROUPS = ("raw_weights", "layer_0", "layer_1", "layer_2",
                "unified_inputs", "dataset_embeddings")


@dataclass(frozen=True)
class GraphLayout:
    """Static structure derived from the taxonomies."""

    sizes: tuple
    text: np.ndarray
    owner: np.ndarray

    @classmethod
    def from_taxonomies(cls, taxonomies: Sequence[DatasetTaxonomy]) -> "GraphLayout":
        dims = {t.embedding_dim for t in taxonomies}
        if len(dims) != 1:
            raise ShapeError(f"text embedding widths differ across datasets: {sorted(dims)}")
        text = np.concatenate([t.embeddings() for t in taxonomies], axis=0)
        owner = np.concatenate(
            [np.full(len(t), k, dtype=np.intp) for k, t in enumerate(taxonomies)]
        )
        return cls(tuple(len(t) for t in taxonomies), text, owner)

    @property
    def n_labels(self) -> int:
        return int(sum(self.sizes))

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum((0,) + self.sizes)

    def columns(self, dataset_id: int) -> slice:
        off = self.offsets
        return slice(int(off[dataset_id]), int(off[dataset_id + 1]))


@dataclass
class LabelGraphParams:
    raw_weights: np.ndarray
    layer_weights: list
    unified_inputs: np.ndarray
    dataset_embeddings: np.ndarray

    @classmethod
    def init(cls, n_unified: int, sizes: Sequence[int], d_text: int, d_embed: int,
             rng: np.random.Generator, raw_weights=None,
             gain: float = 1.0) -> "LabelGraphParams":
        """Seeded initialization.

        Layer weights are N(0, gain^2 / (2 D_k)), unified node inputs N(0, 1/D_0),
        dataset embeddings start at zero, raw adjacency logits at zero unless
        ``raw_weights`` is given.
        """
        L = int(sum(sizes))
        widths = [d_text] + [d_embed] * NUM_LAYERS
        layers = [
            gain * rng.standard_normal((widths[k + 1], 2 * widths[k])) / np.sqrt(2 * widths[k])
            for k in range(NUM_LAYERS)
        ]
        unified = rng.standard_normal((n_unified, d_text)) / np.sqrt(d_text)
        if raw_weights is None:
            raw_weights = np.zeros((n_unified, L))
        raw_weights = as_matrix(raw_weights, "raw_weights")
        if raw_weights.shape != (n_unified, L):
            raise ShapeError(f"raw_weights {raw_weights.shape} != {(n_unified, L)}")
        return cls(raw_weights.copy(), layers, unified, np.zeros((len(sizes), d_text)))

    @property
    def n_unified(self) -> int:
        return self.raw_weights.shape[0]

    def groups(self) -> dict:
        g = {"raw_weights": self.raw_weights}
        for k, w in enumerate(self.layer_weights):
            g[f"layer_{k}"] = w
        g["unified_inputs"] = self.unified_inputs
        g["dataset_embeddings"] = self.dataset_embeddings
        return g

    @classmethod
    def from_groups(cls, g: dict) -> "LabelGraphParams":
        layers = [g[f"layer_{k}"] for k in range(NUM_LAYERS)]
        return cls(g["raw_weights"], layers, g["unified_inputs"], g["dataset_embeddings"])

    def copy(self) -> "LabelGraphParams":
        return LabelGraphParams.from_groups({k: v.copy() for k, v in self.groups().items()})


@dataclass(frozen=True)
class GraphActivation:
    layers: tuple
    adjacency: np.ndarray
    n_labels: int

    @property
    def x_u(self) -> np.ndarray:
        return self.layers[-1][self.n_labels:]


def assemble_node_features(taxonomies, params: LabelGraphParams) -> np.ndarray:
    """Dataset-label rows are text embedding plus the dataset embedding;
    unified rows are the learnable unified inputs."""
    layout = taxonomies if isinstance(taxonomies, GraphLayout) else GraphLayout.from_taxonomies(taxonomies)
    d = params.dataset_embeddings
    if layout.text.shape[1] != d.shape[1] or params.unified_inputs.shape[1] != d.shape[1]:
        raise ShapeError(
            f"feature widths differ: text {layout.text.shape[1]}, dataset embedding "
            f"{d.shape[1]}, unified inputs {params.unified_inputs.shape[1]}"
        )
    if d.shape[0] != len(layout.sizes):
        raise ShapeError(f"{d.shape[0]} dataset embeddings for {len(layout.sizes)} datasets")
    return np.concatenate([layout.text + d[layout.owner], params.unified_inputs], axis=0)


def adjacency_block(raw_weights, sizes: Sequence[int]) -> np.ndarray:
    """Unified-row x dataset-column block after per-dataset row softmax."""
    w = as_matrix(raw_weights, "raw_weights")
    if sum(sizes) != w.shape[1]:
        raise ShapeError(f"dataset sizes {list(sizes)} do not tile {w.shape[1]} columns")
    out = np.empty_like(w)
    lo = 0
    for s in sizes:
        out[:, lo:lo + s] = row_softmax(w[:, lo:lo + s])
        lo += s
    return out


def normalize_adjacency(raw_weights, sizes: Sequence[int]) -> np.ndarray:
    """Full symmetric ``(|L|+N)`` square adjacency with only the learnable
    unified/dataset blocks non-zero."""
    block = adjacency_block(raw_weights, sizes)
    n, L = block.shape
    full = np.zeros((L + n, L + n))
    full[L:, :L] = block
    full[:L, L:] = block.T
    return full


def gnn_forward(x0, m_a, params) -> GraphActivation:
    """GraphSAGE stack ``X <- tanh([X | M_a X] W^T)``.

    ``params`` is a :class:`LabelGraphParams` or a plain sequence of layer
    weights; any number of layers is accepted.
    """
    weights = params.layer_weights if isinstance(params, LabelGraphParams) else list(params)
    x = as_matrix(x0, "x0")
    m_a = as_matrix(m_a, "adjacency")
    if m_a.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"adjacency {m_a.shape} does not match {x.shape[0]} nodes")
    layers = [x]
    for k, w in enumerate(weights):
        if w.shape[1] != 2 * x.shape[1]:
            raise ShapeError(f"layer {k} weight {w.shape} expects input width {w.shape[1] // 2}, got {x.shape[1]}")
        h = np.concatenate([x, matmul(m_a, x)], axis=1)
        x = tanh_map(matmul(h, w.T))
        layers.append(x)
    n_unified = params.n_unified if isinstance(params, LabelGraphParams) else 0
    n_labels = x.shape[0] - n_unified
    return GraphActivation(tuple(layers), m_a, n_labels)


def graph_on_tape(tape: Tape, layout: GraphLayout, params: LabelGraphParams,
                  trainable=GRAPH_GROUPS):
    """Record the graph forward pass; returns ``(x_u, block)`` vars where
    ``block`` is the normalized N x |L| adjacency block."""
    g = params.groups()
    v = {name: tape.leaf(name, g[name], name in trainable) for name in GRAPH_GROUPS}
    L = layout.n_labels
    text = tape.const(layout.text)
    rows = tape.add_row_embeddings(text, v["dataset_embeddings"], layout.owner)
    x = tape.concat_rows(rows, v["unified_inputs"])
    block = tape.block_softmax(v["raw_weights"], layout.sizes)
    m_a = tape.mirror_block(block, L)
    for k in range(NUM_LAYERS):
        h = tape.concat_cols(x, tape.matmul(m_a, x))
        x = tape.tanh(tape.matmul(h, tape.transpose(v[f"layer_{k}"])))
    x_u = tape.row_slice(x, L, L + params.n_unified)
    return x_u, block


def gnn_backward(tape: Tape, x_u: Var, upstream) -> dict:
    """Parameter gradients given ``dLoss/dX_u``; frozen groups are absent."""
    if not isinstance(x_u, Var) or x_u.tape is not tape:
        raise StateError("X_u was not produced by this tape")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x_u.shape:
        raise StateError(f"upstream gradient {upstream.shape} does not match X_u {x_u.shape}")
    return tape.backward(x_u, seed=upstream)
