"""Choosing the number of unified nodes from cross-dataset head agreement.

After the multi-head warm-up every dataset head is evaluated on every other
dataset.  Candidate merges (one class per dataset at most) are scored by how
much IoU a class loses when predicted through another dataset's head, and a
set partition of all dataset classes is chosen that minimizes total merge
cost plus ``lambda`` per unified node.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, InfeasibleError
from .seg_model import EncoderParams, MultiHeadParams, PixelBatch, encode_pixels

__all__ = [
    "DEFAULT_LAMBDA",
    "DEFAULT_IOU_FLOOR",
    "DEFAULT_C_INIT",
    "DEFAULT_EXACT_LIMIT",
    "CrossIoUTable",
    "MergeTuple",
    "BudgetSelection",
    "iou_matrix",
    "compute_cross_head_iou",
    "merge_cost",
    "enumerate_tuples",
    "select_budget",
    "init_adjacency_from_selection",
]

DEFAULT_LAMBDA = 0.5
DEFAULT_IOU_FLOOR = 0.2
DEFAULT_C_INIT = 10.0
DEFAULT_EXACT_LIMIT = 24


def iou_matrix(truth: np.ndarray, pred: np.ndarray, n_truth: int, n_pred: int) -> np.ndarray:
    """``out[c, b] = IoU(truth == c, pred == b)``; 0 where the union is empty."""
    conf = np.zeros((n_truth, n_pred))
    np.add.at(conf, (np.asarray(truth), np.asarray(pred)), 1.0)
    union = conf.sum(axis=1, keepdims=True) + conf.sum(axis=0, keepdims=True) - conf
    return np.divide(conf, union, out=np.zeros_like(conf), where=union > 0)


@dataclass
class CrossIoUTable:
    """``pair[(h, k)][c, b]``: IoU of head ``h`` predicting its class ``b``
    against class ``c`` of dataset ``k``.  ``native[k][c]`` is the diagonal
    of ``pair[(k, k)]``."""

    sizes: tuple
    pair: dict

    def native(self, k: int) -> np.ndarray:
        return np.diag(self.pair[(k, k)]).copy()

    def best(self, h: int, k: int, c: int) -> tuple:
        """Head ``h``'s best-matching class for class ``c`` of dataset ``k``."""
        row = self.pair[(h, k)][c]
        b = int(np.argmax(row))
        return b, float(row[b])


def compute_cross_head_iou(encoder: EncoderParams, heads: MultiHeadParams,
                           batches: Sequence[PixelBatch]) -> CrossIoUTable:
    """Evaluate every head on every dataset's evaluation pixels."""
    sizes = tuple(w.shape[0] for w in heads.heads)
    by_dataset = {}
    for b in batches:
        if len(b) == 0:
            raise DataError(f"empty evaluation batch for dataset {b.dataset_id}")
        by_dataset.setdefault(b.dataset_id, []).append(b)
    pair = {}
    for k in range(len(sizes)):
        if k not in by_dataset:
            raise DataError(f"no evaluation pixels for dataset {k}")
        pix = np.concatenate([encode_pixels(b, encoder) for b in by_dataset[k]])
        truth = np.concatenate([b.labels for b in by_dataset[k]])
        for h, w in enumerate(heads.heads):
            pred = np.argmax(pix @ w.T, axis=1)
            pair[(h, k)] = iou_matrix(truth, pred, sizes[k], sizes[h])
    return CrossIoUTable(sizes, pair)


@dataclass(frozen=True)
class MergeTuple:
    """One candidate unified node: a class index (or None) per dataset."""

    members: tuple
    cost: float = 0.0

    def __post_init__(self):
        if all(m is None for m in self.members):
            raise ValueError("a merge tuple needs at least one member")

    def slots(self):
        return [(k, c) for k, c in enumerate(self.members) if c is not None]


def merge_cost(members, table: CrossIoUTable) -> float:
    """Sum, over every member class, of its native IoU minus the IoU achieved
    by each other member's head predicting that member's class."""
    if isinstance(members, MergeTuple):
        members = members.members
    slots = [(k, c) for k, c in enumerate(members) if c is not None]
    native = {k: table.native(k) for k, _ in slots}
    cost = 0.0
    for k, c in slots:
        for h, b in slots:
            if h != k:
                cost += native[k][c] - table.pair[(h, k)][c, b]
    return float(cost)


def enumerate_tuples(table: CrossIoUTable, floor: float = DEFAULT_IOU_FLOOR) -> list:
    """All tuples whose member pairs agree above ``floor`` in both directions.

    Singletons are always included.
    """
    K = len(table.sizes)

    def compatible(k, c, h, b):
        return table.pair[(h, k)][c, b] > floor and table.pair[(k, h)][b, c] > floor

    out = []

    def grow(k, chosen):
        if k == K:
            if any(c is not None for c in chosen):
                out.append(MergeTuple(tuple(chosen), merge_cost(tuple(chosen), table)))
            return
        grow(k + 1, chosen + [None])
        for c in range(table.sizes[k]):
            if all(compatible(k, c, h, b) for h, b in enumerate(chosen) if b is not None):
                grow(k + 1, chosen + [c])

    grow(0, [])
    return out


@dataclass
class BudgetSelection:
    tuples: list
    sizes: tuple
    objective: float
    optimal: bool
    lam: float

    @property
    def n_nodes(self) -> int:
        return len(self.tuples)

    def assignment(self) -> list:
        """Per dataset, the unified node of each class."""
        out = [[None] * s for s in self.sizes]
        for n, t in enumerate(self.tuples):
            for k, c in t.slots():
                out[k][c] = n
        return out


def _label_index(sizes):
    off = np.cumsum((0,) + tuple(sizes))
    return lambda k, c: int(off[k]) + c


def select_budget(tuples: Sequence[MergeTuple], sizes: Sequence[int],
                  lam: float = DEFAULT_LAMBDA,
                  exact_limit: int = DEFAULT_EXACT_LIMIT) -> BudgetSelection:
    """Pick tuples covering every dataset class exactly once, minimizing
    ``sum(cost) + lam * (number of tuples)``.

    Exact memoized search over covered-label bitmasks when the total label
    count is at most ``exact_limit``; otherwise greedy pairwise merging from
    singletons, reported with ``optimal=False``.
    """
    sizes = tuple(int(s) for s in sizes)
    idx = _label_index(sizes)
    total = sum(sizes)
    masks = []
    for t in tuples:
        if len(t.members) != len(sizes):
            raise ValueError(f"tuple {t.members} does not have {len(sizes)} slots")
        m = 0
        for k, c in t.slots():
            if not 0 <= c < sizes[k]:
                raise IndexError(f"tuple {t.members}: class {c} out of range for dataset {k}")
            m |= 1 << idx(k, c)
        masks.append(m)
    covered = 0
    for m in masks:
        covered |= m
    if covered != (1 << total) - 1:
        missing = [j for j in range(total) if not covered >> j & 1]
        raise InfeasibleError(f"labels {missing} appear in no feasible tuple")
    if total <= exact_limit:
        return _select_exact(tuples, masks, sizes, total, lam)
    return _select_greedy(tuples, masks, sizes, lam)


def _select_exact(tuples, masks, sizes, total, lam):
    full = (1 << total) - 1
    by_low = [[] for _ in range(total)]
    for i, m in enumerate(masks):
        low = (m & -m).bit_length() - 1
        by_low[low].append(i)
    memo = {full: (0.0, None)}

    def solve(mask):
        hit = memo.get(mask)
        if hit is not None:
            return hit[0]
        free = ~mask & full
        j = (free & -free).bit_length() - 1
        best, choice = np.inf, None
        for i in by_low[j]:
            if masks[i] & mask:
                continue
            v = tuples[i].cost + lam + solve(mask | masks[i])
            if v < best:
                best, choice = v, i
        memo[mask] = (best, choice)
        return best

    objective = solve(0)
    if not np.isfinite(objective):
        raise InfeasibleError("no exact cover of the dataset classes exists")
    chosen, mask = [], 0
    while mask != full:
        i = memo[mask][1]
        chosen.append(tuples[i])
        mask |= masks[i]
    return BudgetSelection(_ordered(chosen, sizes), sizes, float(objective), True, lam)


def _select_greedy(tuples, masks, sizes, lam):
    by_mask = {}
    for t, m in zip(tuples, masks):
        by_mask.setdefault(m, t)
    idx = _label_index(sizes)
    groups = []
    for k, s in enumerate(sizes):
        for c in range(s):
            m = 1 << idx(k, c)
            if m not in by_mask:
                raise InfeasibleError(f"greedy fallback needs singleton for dataset {k} class {c}")
            groups.append(m)
    while True:
        best = None
        for a, b in itertools.combinations(range(len(groups)), 2):
            u = groups[a] | groups[b]
            t = by_mask.get(u)
            if t is None:
                continue
            delta = t.cost - by_mask[groups[a]].cost - by_mask[groups[b]].cost - lam
            if delta < -1e-12 and (best is None or delta < best[0]):
                best = (delta, a, b)
        if best is None:
            break
        _, a, b = best
        merged = groups[a] | groups[b]
        groups = [g for i, g in enumerate(groups) if i not in (a, b)] + [merged]
    chosen = [by_mask[g] for g in groups]
    objective = sum(t.cost for t in chosen) + lam * len(chosen)
    return BudgetSelection(_ordered(chosen, sizes), sizes, float(objective), False, lam)


def _ordered(chosen, sizes):
    idx = _label_index(sizes)
    return sorted(chosen, key=lambda t: min(idx(k, c) for k, c in t.slots()))


def init_adjacency_from_selection(selection: BudgetSelection,
                                  c_init: float = DEFAULT_C_INIT) -> np.ndarray:
    """Raw adjacency logits: ``c_init`` on selected edges, 0 elsewhere."""
    sizes = selection.sizes
    idx = _label_index(sizes)
    raw = np.zeros((selection.n_nodes, sum(sizes)))
    for n, t in enumerate(selection.tuples):
        for k, c in t.slots():
            raw[n, idx(k, c)] = c_init
    return raw
