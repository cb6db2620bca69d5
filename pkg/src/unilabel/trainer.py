"""Three-stage alternating training, pruning and unseen-dataset adaptation.

Stages, in order: multi-head warm-up, then ``cycles`` rounds of
(graph training with the continuous adjacency, segmentation training with
solved boolean mappings), then a final segmentation stage in which the
unified embedding ``X_u`` is trained directly and inactive links are pruned
part-way through.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .autodiff import Tape
from .errors import ConfigurationError, DataError, IntegrityError
from .label_graph import (
    GRAPH_GROUPS,
    GraphLayout,
    LabelGraphParams,
    adjacency_block,
    assemble_node_features,
    gnn_forward,
    graph_on_tape,
    normalize_adjacency,
)
from .mapping_solver import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERS,
    DEFAULT_MOMENTUM,
    DEFAULT_TAU,
    DEFAULT_TOL,
    TransportProblem,
    assign_argmax,
    greedy_repair,
    solve_mappings,
    uot_transport,
)
from .node_budget import (
    DEFAULT_C_INIT,
    DEFAULT_EXACT_LIMIT,
    DEFAULT_IOU_FLOOR,
    DEFAULT_LAMBDA,
    compute_cross_head_iou,
    enumerate_tuples,
    init_adjacency_from_selection,
    select_budget,
)
from .seg_model import (
    DEFAULT_HIDDEN,
    DEFAULT_LAMBDA_CE,
    DEFAULT_LAMBDA_ORTH,
    EncoderParams,
    MultiHeadParams,
    PixelBatch,
    combined_loss,
    encode_on_tape,
    encode_pixels,
    map_logits,
    mapped_ce_loss,
    orthogonality_loss,
    unified_logits,
)
from .taxonomy import DatasetTaxonomy, MappingMatrix, mapping_from_assignment

log = logging.getLogger(__name__)

__all__ = [
    "Stage",
    "Schedule",
    "ModelDims",
    "SolverParams",
    "BudgetParams",
    "TrainState",
    "PixelSource",
    "init_state",
    "run_stage_multihead",
    "init_unified_head",
    "run_stage_gnn",
    "run_stage_seg",
    "run_stage_final",
    "run_pipeline",
    "PipelineResult",
    "prune_inactive_nodes",
    "adapt_unseen_dataset",
    "predict_unified",
    "dataset_logits",
    "gnn_objective_on_tape",
    "gnn_objective_value",
    "param_checksum",
]


class Stage(str, Enum):
    MULTIHEAD = "MH"
    GNN = "GNN"
    SEG = "SEG"
    FINAL = "FINAL"
    DONE = "DONE"


@dataclass
class Schedule:
    multihead_iters: int = 2000
    gnn_iters: int = 500
    seg_iters: int = 500
    cycles: int = 3
    final_iters: int = 2000
    lr_multihead: float = 0.01
    lr_gnn: float = 0.005
    lr_seg: float = 0.01
    lr_final: float = 0.01
    momentum: float = 0.9
    warmup_frac: float = 0.05
    lambda_ce: float = DEFAULT_LAMBDA_CE
    lambda_orth: float = DEFAULT_LAMBDA_ORTH
    mu: float = DEFAULT_MOMENTUM
    pixels_per_dataset: int = 64
    eval_pixels: int = 512
    prune_at: float = 0.75
    seed: int = 0

    def validate(self):
        for name in ("multihead_iters", "gnn_iters", "seg_iters", "final_iters",
                     "pixels_per_dataset", "eval_pixels"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.cycles < 1:
            raise ConfigurationError("cycles must be >= 1")
        if self.pixels_per_dataset < 1 or self.eval_pixels < 1:
            raise ConfigurationError("pixel counts must be positive")
        if not 0.0 <= self.prune_at <= 1.0 or not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError("prune_at and mu must lie in [0, 1]")
        if self.lambda_ce < 0 or self.lambda_orth < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class ModelDims:
    d_text: int = 32
    d_embed: int = 16
    hidden: int = DEFAULT_HIDDEN
    d_obs: int = 12


@dataclass
class SolverParams:
    epsilon: float = DEFAULT_EPSILON
    tau: float = DEFAULT_TAU
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL


@dataclass
class BudgetParams:
    lam: float = DEFAULT_LAMBDA
    iou_floor: float = DEFAULT_IOU_FLOOR
    c_init: float = DEFAULT_C_INIT
    exact_limit: int = DEFAULT_EXACT_LIMIT
    node_count: Optional[int] = None    # None: choose from head agreement


class PixelSource(Protocol):
    def sample(self, dataset_id: int, pixels: int, rng) -> PixelBatch: ...


@dataclass
class TrainState:
    layout: GraphLayout
    encoder: EncoderParams
    heads: Optional[MultiHeadParams]
    graph: Optional[LabelGraphParams] = None
    x_u: Optional[np.ndarray] = None
    mappings: Optional[list] = None
    betas: Optional[list] = None
    stage: Stage = Stage.MULTIHEAD
    step: int = 0
    rng: np.random.Generator = None
    trace: list = field(default_factory=list)
    history: list = field(default_factory=list)
    sink: Optional[Callable] = field(default=None, repr=False, compare=False)
    last_prune: Optional["PruneReport"] = field(default=None, repr=False, compare=False)

    @property
    def n_datasets(self) -> int:
        return len(self.layout.sizes)

    @property
    def n_unified(self) -> int:
        if self.x_u is not None:
            return self.x_u.shape[0]
        return self.graph.n_unified if self.graph is not None else 0

    def unified_embedding(self) -> np.ndarray:
        """Current ``X_u``: the free matrix once it exists, else the graph output."""
        if self.x_u is not None:
            return self.x_u
        if self.graph is None:
            raise ConfigurationError("no unified head has been initialized")
        x0 = assemble_node_features(self.layout, self.graph)
        m_a = normalize_adjacency(self.graph.raw_weights, self.layout.sizes)
        return gnn_forward(x0, m_a, self.graph).x_u


def param_checksum(state: TrainState) -> str:
    """SHA-256 over every parameter array, in a fixed order."""
    h = hashlib.sha256()
    groups = dict(state.encoder.groups())
    if state.heads is not None:
        groups.update(state.heads.groups())
    if state.graph is not None:
        groups.update({f"graph.{k}": v for k, v in state.graph.groups().items()})
    if state.x_u is not None:
        groups["x_u"] = state.x_u
    for name in sorted(groups):
        h.update(name.encode())
        h.update(np.ascontiguousarray(groups[name], dtype=np.float64).tobytes())
    return h.hexdigest()


# optimizer -----------------------------------------------------------------

class _Momentum:
    """SGD with heavy-ball momentum and linear warm-up; updates in place."""

    def __init__(self, lr, momentum, total_steps, warmup_frac):
        self.lr = lr
        self.momentum = momentum
        self.warmup = max(1, math.ceil(warmup_frac * total_steps)) if total_steps else 1
        self.t = 0
        self.velocity = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup)
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= lr * v


# losses --------------------------------------------------------------------

def gnn_objective_on_tape(tape: Tape, layout: GraphLayout, graph: LabelGraphParams,
                          encoder: EncoderParams, batches: Sequence[PixelBatch],
                          lambda_ce: float, lambda_orth: float,
                          trainable=GRAPH_GROUPS):
    """Combined loss with continuous mappings; returns ``(loss, ce, orth)`` vars.

    The cross-entropy term is averaged over the given batches.  Encoder
    groups ``enc_a1``/``enc_a2`` are differentiated only if listed in
    ``trainable``.
    """
    x_u, block = graph_on_tape(tape, layout, graph, trainable)
    a1 = tape.leaf("enc_a1", encoder.a1, "enc_a1" in trainable)
    a2 = tape.leaf("enc_a2", encoder.a2, "enc_a2" in trainable)
    x_ut = tape.transpose(x_u)
    terms = []
    for b in batches:
        pix = encode_on_tape(tape, b.observations, a1, a2)
        cols = layout.columns(b.dataset_id)
        s = tape.matmul(tape.matmul(pix, x_ut), tape.col_slice(block, cols.start, cols.stop))
        terms.append(tape.mean_cross_entropy(s, b.labels))
    ce = tape.weighted_sum(terms, [1.0 / len(terms)] * len(terms))
    orth = tape.diag_softmax_entropy(tape.matmul(x_u, x_ut))
    return tape.weighted_sum([ce, orth], [lambda_ce, lambda_orth]), ce, orth


def gnn_objective_value(layout, graph, encoder, batches, lambda_ce, lambda_orth) -> float:
    """The same objective evaluated without the tape, via the plain kernels."""
    x0 = assemble_node_features(layout, graph)
    m_a = normalize_adjacency(graph.raw_weights, layout.sizes)
    x_u = gnn_forward(x0, m_a, graph).x_u
    block = adjacency_block(graph.raw_weights, layout.sizes)
    ces = []
    for b in batches:
        s = map_logits(unified_logits(encode_pixels(b, encoder), x_u), block[:, layout.columns(b.dataset_id)])
        ces.append(mapped_ce_loss(s, b))
    return combined_loss(float(np.mean(ces)), orthogonality_loss(x_u), lambda_ce, lambda_orth)


def _discrete_loss(tape, x_u_var, a1, a2, batches, mappings):
    x_ut = tape.transpose(x_u_var)
    terms = []
    for b in batches:
        pix = encode_on_tape(tape, b.observations, a1, a2)
        m = tape.const(mappings[b.dataset_id].as_float())
        terms.append(tape.mean_cross_entropy(tape.matmul(tape.matmul(pix, x_ut), m), b.labels))
    return tape.weighted_sum(terms, [1.0 / len(terms)] * len(terms))


# state ---------------------------------------------------------------------

def _sub_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag])))


def init_state(taxonomies: Sequence[DatasetTaxonomy], dims: ModelDims, seed: int) -> TrainState:
    layout = GraphLayout.from_taxonomies(taxonomies)
    if layout.text.shape[1] != dims.d_text:
        raise ConfigurationError(
            f"text embeddings have width {layout.text.shape[1]}, config says {dims.d_text}"
        )
    init = _sub_rng(seed, 1)
    enc = EncoderParams.init(dims.d_obs, dims.hidden, dims.d_embed, init)
    heads = MultiHeadParams.init(layout.sizes, dims.d_embed, init)
    return TrainState(layout, enc, heads, rng=_sub_rng(seed, 2))


def _sample(state: TrainState, source: PixelSource, pixels: int) -> list:
    return [source.sample(i, pixels, state.rng) for i in range(state.n_datasets)]


def _record(state, stage, **losses):
    state.trace.append(stage.value)
    entry = {"step": state.step, "stage": stage.value, **losses}
    state.history.append(entry)
    if state.sink is not None:
        state.sink(entry)
    state.step += 1


def run_stage_multihead(state: TrainState, source: PixelSource, iters: int,
                        schedule: Schedule) -> TrainState:
    """Warm up encoder and per-dataset heads on each dataset's own labels."""
    if state.stage is not Stage.MULTIHEAD:
        raise ConfigurationError(f"multi-head stage entered from {state.stage}")
    params = {**state.encoder.groups(), **state.heads.groups()}
    opt = _Momentum(schedule.lr_multihead, schedule.momentum, iters, schedule.warmup_frac)
    for _ in range(iters):
        batches = _sample(state, source, schedule.pixels_per_dataset)
        tape = Tape()
        a1 = tape.param("enc_a1", state.encoder.a1)
        a2 = tape.param("enc_a2", state.encoder.a2)
        terms = []
        for b in batches:
            w = tape.param(f"head_{b.dataset_id}", state.heads.head(b.dataset_id))
            pix = encode_on_tape(tape, b.observations, a1, a2)
            terms.append(tape.mean_cross_entropy(tape.matmul(pix, tape.transpose(w)), b.labels))
        loss = tape.weighted_sum(terms, [1.0 / len(terms)] * len(terms))
        opt.step(params, tape.backward(loss))
        _record(state, Stage.MULTIHEAD, loss=float(loss.value[0, 0]))
    state.stage = Stage.GNN
    return state


def init_unified_head(state: TrainState, n_unified: int, dims: ModelDims,
                      raw_weights=None) -> TrainState:
    """Discard the multi-head heads and create the label graph."""
    if n_unified < max(state.layout.sizes):
        raise ConfigurationError(
            f"{n_unified} unified nodes cannot cover a dataset with {max(state.layout.sizes)} classes"
        )
    init = _sub_rng(int(state.rng.integers(2**32)), 3)
    state.graph = LabelGraphParams.init(n_unified, state.layout.sizes, dims.d_text,
                                        dims.d_embed, init, raw_weights)
    state.heads = None
    state.x_u = None
    state.betas = [np.full(s, 1.0 / s) for s in state.layout.sizes]
    return state


def run_stage_gnn(state: TrainState, source: PixelSource, iters: int,
                  schedule: Schedule) -> TrainState:
    """Train only the label graph through continuous adjacency mappings."""
    if state.stage is not Stage.GNN or state.graph is None:
        raise ConfigurationError(f"graph stage entered from {state.stage}")
    params = state.graph.groups()
    opt = _Momentum(schedule.lr_gnn, schedule.momentum, iters, schedule.warmup_frac)
    for _ in range(iters):
        batches = _sample(state, source, schedule.pixels_per_dataset)
        tape = Tape()
        loss, ce, orth = gnn_objective_on_tape(
            tape, state.layout, state.graph, state.encoder, batches,
            schedule.lambda_ce, schedule.lambda_orth)
        opt.step(params, tape.backward(loss))
        _record(state, Stage.GNN, loss=float(loss.value[0, 0]),
                ce=float(ce.value[0, 0]), orth=float(orth.value[0, 0]))
    state.stage = Stage.SEG
    return state


def solve_state_mappings(state: TrainState, schedule: Schedule, solver: SolverParams) -> TrainState:
    block = adjacency_block(state.graph.raw_weights, state.layout.sizes)
    blocks = [block[:, state.layout.columns(i)] for i in range(state.n_datasets)]
    res = solve_mappings(blocks, schedule.mu, state.betas, epsilon=solver.epsilon,
                         tau=solver.tau, max_iters=solver.max_iters, tol=solver.tol)
    state.mappings = res.mappings
    state.betas = res.betas
    return state


def run_stage_seg(state: TrainState, source: PixelSource, iters: int, schedule: Schedule,
                  solver: SolverParams, final: bool = False, solve: bool = True) -> TrainState:
    """Train the encoder (and ``X_u`` when ``final``) with boolean mappings.

    Mappings are solved from the current adjacency on entry unless
    ``solve`` is False, and stay fixed for the whole stage.
    """
    expected = Stage.FINAL if final else Stage.SEG
    if state.stage is not expected:
        raise ConfigurationError(f"segmentation stage entered from {state.stage}")
    if solve:
        solve_state_mappings(state, schedule, solver)
    if state.mappings is None:
        raise ConfigurationError("segmentation stage needs solved mappings")
    if final and state.x_u is None:
        state.x_u = state.unified_embedding().copy()
    x_u_fixed = None if final else state.unified_embedding()
    params = dict(state.encoder.groups())
    if final:
        params["x_u"] = state.x_u
    lr = schedule.lr_final if final else schedule.lr_seg
    opt = _Momentum(lr, schedule.momentum, iters, schedule.warmup_frac)
    for _ in range(iters):
        batches = _sample(state, source, schedule.pixels_per_dataset)
        tape = Tape()
        a1 = tape.param("enc_a1", state.encoder.a1)
        a2 = tape.param("enc_a2", state.encoder.a2)
        x_u = tape.param("x_u", state.x_u) if final else tape.const(x_u_fixed)
        loss = _discrete_loss(tape, x_u, a1, a2, batches, state.mappings)
        opt.step(params, tape.backward(loss))
        _record(state, expected, loss=float(loss.value[0, 0]))
    if not final:
        state.stage = Stage.GNN
    return state


def run_stage_final(state: TrainState, source: PixelSource, iters: int, schedule: Schedule,
                    solver: SolverParams) -> TrainState:
    """Final stage: mappings kept from the last solve, ``X_u`` trained freely,
    inactive links pruned after ``prune_at`` of the iterations."""
    if state.stage is not Stage.FINAL:
        raise ConfigurationError(f"final stage entered from {state.stage}")
    before = int(round(schedule.prune_at * iters))
    run_stage_seg(state, source, before, schedule, solver, final=True, solve=False)
    eval_rng = _sub_rng(schedule.seed, 4)
    evals = [source.sample(i, schedule.eval_pixels, eval_rng) for i in range(state.n_datasets)]
    prune_inactive_nodes(state, evals)
    run_stage_seg(state, source, iters - before, schedule, solver, final=True, solve=False)
    state.stage = Stage.DONE
    return state


# inference -----------------------------------------------------------------

def predict_unified(state: TrainState, batch) -> np.ndarray:
    """Index of the highest-scoring unified node for every pixel."""
    u = unified_logits(encode_pixels(batch, state.encoder), state.unified_embedding())
    return np.argmax(u, axis=1)


def dataset_logits(state: TrainState, batch: PixelBatch, mapping=None) -> np.ndarray:
    m = state.mappings[batch.dataset_id] if mapping is None else mapping
    return map_logits(unified_logits(encode_pixels(batch, state.encoder), state.unified_embedding()), m)


# pruning -------------------------------------------------------------------

@dataclass
class PruneReport:
    removed_links: list
    removed_nodes: list
    kept_nodes: list
    link_pruned_mappings: list   # mappings after link removal, before row deletion


def prune_inactive_nodes(state: TrainState, eval_batches: Sequence[PixelBatch]) -> PruneReport:
    """Remove links never used by a correct arg-max prediction, then delete
    unified nodes left without links.

    A link (node, class) of dataset ``i`` is active when some evaluation
    pixel of dataset ``i`` labelled ``class`` has ``node`` as its arg-max
    unified node.  A class none of whose links is active keeps the mapped
    node with the largest summed unified logit over its pixels.
    """
    if state.mappings is None:
        raise ConfigurationError("pruning needs solved mappings")
    x_u = state.unified_embedding()
    active = [np.zeros(m.shape, dtype=bool) for m in state.mappings]
    logit_sum = [np.zeros(m.shape) for m in state.mappings]
    for b in eval_batches:
        u = unified_logits(encode_pixels(b, state.encoder), x_u)
        best = np.argmax(u, axis=1)
        bits = state.mappings[b.dataset_id].bits
        hit = bits[best, b.labels]
        active[b.dataset_id][best[hit], b.labels[hit]] = True
        np.add.at(logit_sum[b.dataset_id].T, b.labels, u)
    removed_links, pruned = [], []
    for i, m in enumerate(state.mappings):
        if np.any(m.bits.sum(axis=0) == 0):
            raise IntegrityError(f"dataset {i}: mapping already leaves a class uncovered")
        keep = m.bits & active[i]
        for c in np.flatnonzero(keep.sum(axis=0) == 0):
            # no link of this class was ever active: keep its strongest mapped node
            nodes = np.flatnonzero(m.bits[:, c])
            keep[nodes[np.argmax(logit_sum[i][nodes, c])], c] = True
        for n, c in zip(*np.nonzero(m.bits & ~keep)):
            removed_links.append((i, int(n), int(c)))
        pruned.append(MappingMatrix(i, keep))
    used = np.zeros(state.n_unified, dtype=bool)
    for m in pruned:
        used |= m.bits.any(axis=1)
    kept = np.flatnonzero(used)
    state.mappings = [MappingMatrix(m.dataset_id, m.bits[kept]) for m in pruned]
    if state.x_u is None:
        state.x_u = x_u.copy()
    state.x_u = state.x_u[kept].copy()
    if state.graph is not None:
        g = state.graph
        state.graph = LabelGraphParams(g.raw_weights[kept].copy(), g.layer_weights,
                                       g.unified_inputs[kept].copy(), g.dataset_embeddings)
    report = PruneReport(removed_links, [int(n) for n in np.flatnonzero(~used)],
                         [int(n) for n in kept], pruned)
    log.info("pruned %d links and %d nodes", len(removed_links), len(report.removed_nodes))
    state.last_prune = report
    return report


# unseen datasets -----------------------------------------------------------

@dataclass
class AdaptReport:
    mapping: MappingMatrix
    scores: np.ndarray
    unseen_classes: list
    dropped_links: list


def adapt_unseen_dataset(state: TrainState, taxonomy: DatasetTaxonomy,
                         batches: Sequence[PixelBatch], solver: SolverParams = SolverParams(),
                         min_share: float = 0.05) -> AdaptReport:
    """Map the frozen unified space onto a new label space.

    Co-occurrence of arg-max unified node and ground-truth class, normalized
    per class, is solved like an adjacency block.  Links carrying less than
    ``min_share`` of their class's pixels are dropped unless the class would
    lose coverage.  No model parameter is touched.
    """
    if not batches:
        raise DataError("adaptation needs at least one labelled batch")
    n_cls = len(taxonomy)
    n = state.n_unified
    counts = np.zeros((n_cls, n))
    for b in batches:
        b.check_labels(n_cls)
        np.add.at(counts, (b.labels, predict_unified(state, b)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    scores = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    plan = uot_transport(TransportProblem(scores, epsilon=solver.epsilon, tau=solver.tau,
                                          max_iters=solver.max_iters, tol=solver.tol))
    assign = greedy_repair(assign_argmax(plan), plan)
    per_class = np.bincount([c for c in assign if c is not None], minlength=n_cls)
    dropped = []
    for node in np.argsort(scores.max(axis=0), kind="stable"):
        c = assign[node]
        if c is not None and scores[c, node] < min_share and per_class[c] > 1:
            assign[node] = None
            per_class[c] -= 1
            dropped.append((int(node), int(c)))
    unseen = [int(c) for c in np.flatnonzero(totals[:, 0] == 0)]
    return AdaptReport(mapping_from_assignment(assign, n_cls, taxonomy.dataset_id),
                       scores, unseen, dropped)


# pipeline ------------------------------------------------------------------

@dataclass
class PipelineResult:
    state: TrainState
    mappings: list
    report: dict


def run_pipeline(taxonomies: Sequence[DatasetTaxonomy], source: PixelSource,
                 schedule: Schedule = Schedule(), dims: ModelDims = ModelDims(),
                 solver: SolverParams = SolverParams(), budget: BudgetParams = BudgetParams(),
                 on_stage: Optional[Callable] = None,
                 sink: Optional[Callable] = None) -> PipelineResult:
    """Multi-head warm-up, node budget, (graph, seg) x cycles, final stage.

    ``sink`` receives every per-step log entry as it is recorded.
    """
    schedule.validate()
    state = init_state(taxonomies, dims, schedule.seed)
    state.sink = sink
    run_stage_multihead(state, source, schedule.multihead_iters, schedule)
    budget_report = None
    if budget.node_count is None:
        eval_rng = _sub_rng(schedule.seed, 5)
        evals = [source.sample(i, schedule.eval_pixels, eval_rng) for i in range(state.n_datasets)]
        table = compute_cross_head_iou(state.encoder, state.heads, evals)
        tuples = enumerate_tuples(table, budget.iou_floor)
        sel = select_budget(tuples, state.layout.sizes, budget.lam, budget.exact_limit)
        raw = init_adjacency_from_selection(sel, budget.c_init)
        init_unified_head(state, sel.n_nodes, dims, raw)
        budget_report = {
            "n_nodes": sel.n_nodes,
            "objective": sel.objective,
            "optimal": sel.optimal,
            "tuples": [{"members": list(t.members), "cost": t.cost} for t in sel.tuples],
        }
    else:
        init_unified_head(state, budget.node_count, dims)
    if on_stage:
        on_stage(state)
    for _ in range(schedule.cycles):
        run_stage_gnn(state, source, schedule.gnn_iters, schedule)
        run_stage_seg(state, source, schedule.seg_iters, schedule, solver)
        if on_stage:
            on_stage(state)
    state.stage = Stage.FINAL
    run_stage_final(state, source, schedule.final_iters, schedule, solver)
    report = {
        "budget": budget_report,
        "n_unified": state.n_unified,
        "pruned": {
            "links": [list(x) for x in state.last_prune.removed_links],
            "nodes": state.last_prune.removed_nodes,
        },
        "steps": state.step,
    }
    return PipelineResult(state, state.mappings, report)
