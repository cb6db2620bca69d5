"""Dense float64 matrix kernels and a small reverse-mode tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
kernels never broadcast: operand shapes must agree exactly.  The
:class:`Tape` records one loss evaluation and replays it backwards; it only
knows the handful of primitives the label-graph model needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

__all__ = [
    "as_matrix",
    "matmul",
    "row_softmax",
    "tanh_map",
    "cross_entropy_from_logits",
    "finite_difference_gradient",
    "Tape",
    "Var",
]


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated strictly left to right over the inner index.

    Every output entry is ``((0 + a_i0 b_0j) + a_i1 b_1j) + ...`` regardless
    of the other dimensions, so dropping a zero row of ``b`` (or any row of
    ``a``) leaves the remaining entries bitwise unchanged.

    >>> matmul(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
    array([[1., 2.],
           [3., 4.]])
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax of every row, shifted by the row maximum."""
    m = np.asarray(m, dtype=np.float64)
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def tanh_map(m: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(m, dtype=np.float64))


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=-1, keepdims=True)))[..., 0]


def cross_entropy_from_logits(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` in log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= int(target) < z.size:
        raise IndexError(f"target {target} out of range for {z.size} logits")
    return float(_logsumexp_rows(z[None, :])[0] - z[int(target)])


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for j in range(x.size):
        orig = x[j]
        x[j] = orig + h
        fp = float(f(x))
        x[j] = orig - h
        fm = float(f(x))
        x[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {j}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class Var:
    """Handle to one value recorded on a :class:`Tape`."""

    tape: "Tape"
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class _Record:
    tag: str
    out: int
    inputs: tuple
    backward: Callable


class Tape:
    """Records primitive operations for one forward pass.

    Parameters registered with :meth:`param` receive gradients; values
    registered with :meth:`const` (including frozen parameters) do not.
    :meth:`backward` walks the records in reverse and never mutates the
    tape, so it can be replayed.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._needs_grad: list[bool] = []
        self._records: list[_Record] = []
        self._params: dict[str, int] = {}

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def _push(self, value, needs_grad) -> Var:
        self._values.append(value)
        self._needs_grad.append(bool(needs_grad))
        return Var(self, len(self._values) - 1)

    def _check(self, *vs: Var):
        for v in vs:
            if not isinstance(v, Var) or v.tape is not self:
                raise StateError("operand was not recorded on this tape")

    def _op(self, tag, value, inputs: Sequence[Var], backward) -> Var:
        needs = any(self._needs_grad[v.index] for v in inputs)
        out = self._push(value, needs)
        if needs:
            self._records.append(
                _Record(tag, out.index, tuple(v.index for v in inputs), backward)
            )
        return out

    # leaves ---------------------------------------------------------------
    def param(self, name: str, value) -> Var:
        if name in self._params:
            raise StateError(f"parameter {name!r} registered twice")
        v = self._push(np.array(value, dtype=np.float64), True)
        self._params[name] = v.index
        return v

    def const(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64), False)

    def leaf(self, name: str, value, trainable: bool) -> Var:
        return self.param(name, value) if trainable else self.const(value)

    # primitives -----------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        av, bv = a.value, b.value
        return self._op(
            "matmul", matmul(av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g)
        )

    def add(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
        return self._op("add", a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, a: Var, c: float) -> Var:
        self._check(a)
        c = float(c)
        return self._op("scale", a.value * c, (a,), lambda g: (g * c,))

    def tanh(self, a: Var) -> Var:
        self._check(a)
        y = np.tanh(a.value)
        return self._op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def transpose(self, a: Var) -> Var:
        self._check(a)
        return self._op("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def concat_cols(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat row mismatch: {a.shape} | {b.shape}")
        k = a.shape[1]
        return self._op(
            "concat",
            np.concatenate([a.value, b.value], axis=1),
            (a, b),
            lambda g: (g[:, :k], g[:, k:]),
        )

    def row_slice(self, a: Var, lo: int, hi: int) -> Var:
        self._check(a)
        shape = a.shape

        def back(g):
            full = np.zeros(shape)
            full[lo:hi] = g
            return (full,)

        return self._op("row_slice", a.value[lo:hi].copy(), (a,), back)

    def col_slice(self, a: Var, lo: int, hi: int) -> Var:
        self._check(a)
        shape = a.shape

        def back(g):
            full = np.zeros(shape)
            full[:, lo:hi] = g
            return (full,)

        return self._op("col_slice", a.value[:, lo:hi].copy(), (a,), back)

    def block_softmax(self, w: Var, sizes: Sequence[int]) -> Var:
        """Row softmax applied independently to consecutive column blocks."""
        self._check(w)
        sizes = [int(s) for s in sizes]
        if sum(sizes) != w.shape[1]:
            raise ShapeError(f"block sizes {sizes} do not tile {w.shape[1]} columns")
        bounds = np.cumsum([0] + sizes)
        y = np.empty_like(w.value)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            y[:, lo:hi] = row_softmax(w.value[:, lo:hi])

        def back(g):
            gw = np.empty_like(g)
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                yb, gb = y[:, lo:hi], g[:, lo:hi]
                gw[:, lo:hi] = yb * (gb - (gb * yb).sum(axis=1, keepdims=True))
            return (gw,)

        return self._op("block_softmax", y, (w,), back)

    def mirror_block(self, p: Var, n_labels: int) -> Var:
        """Place an (N x L) block below the diagonal of an (L+N) square matrix
        and its transpose above it; everything else is zero."""
        self._check(p)
        n, L = p.shape
        if L != n_labels:
            raise ShapeError(f"block has {L} columns, expected {n_labels}")
        full = np.zeros((L + n, L + n))
        full[L:, :L] = p.value
        full[:L, L:] = p.value.T

        def back(g):
            return (g[L:, :L] + g[:L, L:].T,)

        return self._op("mirror_block", full, (p,), back)

    def add_row_embeddings(self, base: Var, emb: Var, owner: np.ndarray) -> Var:
        """``base[r] + emb[owner[r]]`` for every row ``r``."""
        self._check(base, emb)
        owner = np.asarray(owner, dtype=np.intp)
        if base.shape[0] != owner.size or base.shape[1] != emb.shape[1]:
            raise ShapeError(
                f"row embedding mismatch: base {base.shape}, emb {emb.shape}, "
                f"{owner.size} owners"
            )
        k = emb.shape[0]

        def back(g):
            ge = np.zeros((k, g.shape[1]))
            np.add.at(ge, owner, g)
            return (g, ge)

        return self._op("add_rows", base.value + emb.value[owner], (base, emb), back)

    def concat_rows(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"concat column mismatch: {a.shape} / {b.shape}")
        k = a.shape[0]
        return self._op(
            "concat_rows",
            np.concatenate([a.value, b.value], axis=0),
            (a, b),
            lambda g: (g[:k], g[k:]),
        )

    def mean_cross_entropy(self, logits: Var, targets) -> Var:
        """Mean over rows of ``-log softmax(row)[target]``; returns 1x1."""
        self._check(logits)
        z = logits.value
        t = np.asarray(targets, dtype=np.intp)
        if t.ndim != 1 or t.size != z.shape[0] or t.size == 0:
            raise ShapeError(f"{t.size} targets for logits of shape {z.shape}")
        if t.min() < 0 or t.max() >= z.shape[1]:
            raise IndexError(f"target out of range for {z.shape[1]} classes")
        rows = np.arange(t.size)
        lse = _logsumexp_rows(z)
        loss = float(np.mean(lse - z[rows, t]))

        def back(g):
            p = np.exp(z - lse[:, None])
            p[rows, t] -= 1.0
            return (p * (g[0, 0] / t.size),)

        return self._op("mean_ce", np.array([[loss]]), (logits,), back)

    def diag_softmax_entropy(self, gram: Var) -> Var:
        """``-sum_i p_ii log p_ii`` with ``p = row_softmax(gram)``; 1x1."""
        self._check(gram)
        G = gram.value
        if G.shape[0] != G.shape[1]:
            raise ShapeError(f"gram matrix must be square, got {G.shape}")
        P = row_softmax(G)
        d = np.diag(P).copy()
        logd = np.diag(G) - _logsumexp_rows(G)
        val = float(-np.sum(d * logd))

        def back(g):
            # d(-p log p)/dG_ij = -(log p_i + 1) p_i (delta_ij - P_ij)
            coef = -(logd + 1.0) * d
            gG = -coef[:, None] * P
            gG[np.diag_indices_from(gG)] += coef
            return (gG * g[0, 0],)

        return self._op("diag_entropy", np.array([[val]]), (gram,), back)

    def weighted_sum(self, terms: Sequence[Var], weights: Sequence[float]) -> Var:
        """``sum_k weights[k] * terms[k]`` over equally shaped terms."""
        self._check(*terms)
        if len(terms) != len(weights) or not terms:
            raise ShapeError("terms and weights must be non-empty and equal length")
        shape = terms[0].shape
        if any(t.shape != shape for t in terms):
            raise ShapeError("weighted_sum terms differ in shape")
        ws = [float(w) for w in weights]
        out = np.zeros(shape)
        for t, w in zip(terms, ws):
            out = out + w * t.value
        return self._op(
            "weighted_sum", out, tuple(terms), lambda g: tuple(g * w for w in ws)
        )

    # reverse pass ---------------------------------------------------------
    def backward(self, out: Var, seed=None) -> dict[str, np.ndarray]:
        """Gradients of ``out`` (seeded by ``seed`` or ones) for every
        registered parameter reachable from it."""
        self._check(out)
        g0 = np.ones_like(out.value) if seed is None else np.asarray(seed, float)
        if g0.shape != out.shape:
            raise ShapeError(f"seed shape {g0.shape} != output shape {out.shape}")
        grads: dict[int, np.ndarray] = {out.index: g0}
        for rec in reversed(self._records):
            g = grads.get(rec.out)
            if g is None:
                continue
            for idx, gi in zip(rec.inputs, rec.backward(g)):
                if not self._needs_grad[idx]:
                    continue
                prev = grads.get(idx)
                grads[idx] = gi if prev is None else prev + gi
        result = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            result[name] = np.zeros_like(self._values[idx]) if g is None else g
        return result
