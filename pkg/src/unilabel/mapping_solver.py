"""Discrete label mappings from a continuous adjacency block.

Pipeline per dataset: entropic unbalanced optimal transport on the score
block, per-node argmax, then greedy repair so that every class is covered.
:func:`brute_force_mapping` enumerates all feasible mappings of small
instances and serves as the exact reference.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, InfeasibleError, ShapeError
from .taxonomy import MappingMatrix, mapping_from_assignment

__all__ = [
    "DEFAULT_EPSILON",
    "DEFAULT_TAU",
    "DEFAULT_MAX_ITERS",
    "DEFAULT_TOL",
    "DEFAULT_MOMENTUM",
    "TransportProblem",
    "TransportPlan",
    "uot_transport",
    "assign_argmax",
    "greedy_repair",
    "SolveResult",
    "solve_mappings",
    "brute_force_mapping",
    "mapping_score",
]

DEFAULT_EPSILON = 0.05
DEFAULT_TAU = 1.0
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-9
DEFAULT_MOMENTUM = 0.5

BRUTE_FORCE_MAX_NODES = 8
BRUTE_FORCE_MAX_CLASSES = 5


@dataclass
class TransportProblem:
    """``scores`` is |L_i| x N (classes by unified nodes)."""

    scores: np.ndarray
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    epsilon: float = DEFAULT_EPSILON
    tau: float = DEFAULT_TAU
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.size == 0:
            raise ShapeError(f"score matrix must be non-empty 2-D, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("score matrix has non-finite entries")
        c, n = s.shape
        self.scores = s
        self.alpha = np.full(n, 1.0 / n) if self.alpha is None else np.asarray(self.alpha, float)
        self.beta = np.full(c, 1.0 / c) if self.beta is None else np.asarray(self.beta, float)
        if self.alpha.shape != (n,) or self.beta.shape != (c,):
            raise ShapeError(
                f"marginals {self.alpha.shape}/{self.beta.shape} do not fit scores {s.shape}"
            )
        if np.any(self.alpha < 0) or np.any(self.beta < 0):
            raise ValueError("marginals must be non-negative")
        if not (self.epsilon > 0 and self.tau > 0):
            raise ValueError("epsilon and tau must be positive")


@dataclass
class TransportPlan:
    q: np.ndarray
    converged: bool
    iterations: int


def uot_transport(problem: TransportProblem) -> TransportPlan:
    """Generalized Sinkhorn scaling for KL-relaxed entropic transport.

    The kernel is ``exp(+S / eps)`` because the scores are affinities.
    Scalings are iterated in the log domain; the fixed point is the same as
    that of ``u <- (alpha / K^T v)^f``, ``v <- (beta / K u)^f`` with
    ``f = tau / (tau + eps)``.
    """
    p = problem
    log_k = p.scores / p.epsilon
    f = p.tau / (p.tau + p.epsilon)
    with np.errstate(divide="ignore"):
        log_a = np.log(p.alpha)
        log_b = np.log(p.beta)
    log_u = np.zeros(log_k.shape[1])
    log_v = np.zeros(log_k.shape[0])
    converged = False
    it = 0
    for it in range(1, p.max_iters + 1):
        new_u = f * (log_a - _lse(log_k + log_v[:, None], axis=0))
        new_v = f * (log_b - _lse(log_k + new_u[None, :], axis=1))
        du = _max_change(new_u, log_u)
        dv = _max_change(new_v, log_v)
        log_u, log_v = new_u, new_v
        if max(du, dv) < p.tol:
            converged = True
            break
    q = np.exp(log_v[:, None] + log_k + log_u[None, :])
    return TransportPlan(q, converged, it)


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(mx + np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)), axis=axis)


def _max_change(new, old) -> float:
    fin = np.isfinite(new) & np.isfinite(old)
    if not np.array_equal(np.isfinite(new), np.isfinite(old)):
        return np.inf
    return float(np.max(np.abs(new[fin] - old[fin]), initial=0.0))


def assign_argmax(q) -> list:
    """Each unified node (column) takes its best class; lowest index on ties."""
    q = q.q if isinstance(q, TransportPlan) else np.asarray(q, float)
    return [int(j) for j in np.argmax(q, axis=0)]


def greedy_repair(assign: Sequence, q) -> list:
    """Move nodes onto uncovered classes until every class is covered.

    For each uncovered class in ascending order, unified nodes are ranked by
    their transport mass to that class (stable, lowest index first on ties)
    and the first node that can leave its current class without uncovering
    it is moved.  Unassigned nodes are always free to move.
    """
    q = q.q if isinstance(q, TransportPlan) else np.asarray(q, float)
    n_classes, n_nodes = q.shape
    if len(assign) != n_nodes:
        raise ShapeError(f"{len(assign)} assignments for {n_nodes} nodes")
    if n_classes > n_nodes:
        raise InfeasibleError(f"{n_classes} classes cannot be covered by {n_nodes} nodes")
    assign = list(assign)
    counts = np.zeros(n_classes, dtype=int)
    for c in assign:
        if c is not None:
            counts[c] += 1
    for j in range(n_classes):
        if counts[j] > 0:
            continue
        for n in np.argsort(-q[j], kind="stable"):
            cur = assign[n]
            if cur is None or counts[cur] > 1:
                if cur is not None:
                    counts[cur] -= 1
                assign[n] = j
                counts[j] += 1
                break
        else:  # pragma: no cover - impossible while n_classes <= n_nodes
            raise InfeasibleError(f"no donor node found for class {j}")
    return assign


@dataclass
class SolveResult:
    mappings: list
    betas: list
    plans: list = field(default_factory=list)


def solve_mappings(blocks: Sequence[np.ndarray], momentum: float = DEFAULT_MOMENTUM,
                   betas: Optional[Sequence[np.ndarray]] = None, *,
                   epsilon: float = DEFAULT_EPSILON, tau: float = DEFAULT_TAU,
                   max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> SolveResult:
    """Solve one mapping per dataset block (each N x |L_i|).

    ``betas`` carries the class marginals between calls; the returned betas
    are ``momentum * beta + (1 - momentum) * row sums of Q``.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    mappings, new_betas, plans = [], [], []
    for i, block in enumerate(blocks):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2:
            raise ShapeError(f"block {i} must be 2-D, got {block.shape}")
        n, c = block.shape
        if c > n:
            raise InfeasibleError(f"dataset {i}: {c} classes but only {n} unified nodes")
        beta = np.full(c, 1.0 / c) if betas is None or betas[i] is None else np.asarray(betas[i], float)
        plan = uot_transport(TransportProblem(block.T, None, beta, epsilon, tau, max_iters, tol))
        assign = greedy_repair(assign_argmax(plan), plan)
        mappings.append(mapping_from_assignment(assign, c, dataset_id=i))
        beta_bar = plan.q.sum(axis=1)
        new_betas.append(momentum * beta + (1.0 - momentum) * beta_bar)
        plans.append(plan)
    return SolveResult(mappings, new_betas, plans)


def mapping_score(scores, mapping) -> float:
    """Sum of the |L_i| x N score entries selected by a mapping."""
    bits = mapping.bits if isinstance(mapping, MappingMatrix) else np.asarray(mapping, bool)
    return float(np.sum(np.asarray(scores, float).T[bits]))


def brute_force_mapping(scores, dataset_id: int = 0, return_score: bool = False):
    """Exhaustive optimum over all mappings that satisfy both constraints.

    Every unified node goes to one class or to none; every class must be
    hit.  Among maximizers the lexicographically first assignment wins, with
    classes ordered ``0 < 1 < ... < none``.
    """
    s = np.asarray(scores, dtype=np.float64)
    c, n = s.shape
    if n > BRUTE_FORCE_MAX_NODES or c > BRUTE_FORCE_MAX_CLASSES:
        raise CapacityError(
            f"brute force limited to N<={BRUTE_FORCE_MAX_NODES}, |L|<={BRUTE_FORCE_MAX_CLASSES}; got N={n}, |L|={c}"
        )
    if c > n:
        raise InfeasibleError(f"{c} classes cannot be covered by {n} nodes")
    # rows enumerate in lexicographic order; value c encodes "none"
    grid = np.array(list(itertools.product(range(c + 1), repeat=n)), dtype=np.intp)
    padded = np.vstack([s, np.zeros((1, n))])
    totals = padded[grid, np.arange(n)].sum(axis=1)
    covered = np.ones(len(grid), dtype=bool)
    for j in range(c):
        covered &= (grid == j).any(axis=1)
    totals = np.where(covered, totals, -np.inf)
    best = int(np.argmax(totals))
    assign = [None if a == c else int(a) for a in grid[best]]
    m = mapping_from_assignment(assign, c, dataset_id=dataset_id)
    return (m, float(totals[best])) if return_score else m
