import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from unilabel.autodiff import Tape, cross_entropy_from_logits, finite_difference_gradient
from unilabel.errors import ConfigurationError, DataError, ShapeError
from unilabel.label_graph import GRAPH_GROUPS, GraphLayout, LabelGraphParams
from unilabel.seg_model import (
    EncoderParams,
    MultiHeadParams,
    PixelBatch,
    combined_loss,
    encode_on_tape,
    encode_pixels,
    map_logits,
    mapped_ce_loss,
    multihead_loss,
    orthogonality_loss,
    unified_logits,
)
from unilabel.synth import DatasetSpec, WorldConfig, generate_world, planted_mappings
from unilabel.taxonomy import DatasetTaxonomy, LabelDef, MappingMatrix
from unilabel.trainer import (
    ModelDims,
    Schedule,
    SolverParams,
    Stage,
    gnn_objective_on_tape,
    gnn_objective_value,
    init_state,
    init_unified_head,
    run_stage_multihead,
    run_stage_seg,
)


def batch(obs, labels, dataset_id=0):
    return PixelBatch(dataset_id, np.asarray(obs, float), np.asarray(labels))


def test_batch_invariants():
    with pytest.raises(DataError):
        batch(np.zeros((0, 3)), [])
    with pytest.raises(ShapeError):
        batch(np.zeros((2, 3)), [0])


def test_encoder_zero_and_identity():
    rng = np.random.default_rng(0)
    obs = rng.uniform(-0.05, 0.05, size=(5, 4))
    assert not encode_pixels(obs, EncoderParams(np.zeros((3, 4)), np.zeros((2, 3)))).any()
    p = encode_pixels(batch(obs, [0] * 5), EncoderParams(np.eye(4), np.eye(4)))
    assert np.allclose(p, np.tanh(obs), atol=1e-15)
    with pytest.raises(ShapeError):
        encode_pixels(obs, EncoderParams(np.eye(3), np.eye(3)))


def test_encoder_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    enc = EncoderParams.init(4, 5, 3, rng)
    obs = rng.normal(size=(6, 4))
    seed = rng.normal(size=(6, 3))
    tape = Tape()
    out = encode_on_tape(tape, obs, tape.param("a1", enc.a1), tape.param("a2", enc.a2))
    grads = tape.backward(out, seed)
    for name, base in (("a1", enc.a1), ("a2", enc.a2)):
        def f(flat, name=name):
            e = EncoderParams(enc.a1.copy(), enc.a2.copy())
            setattr(e, name, flat.reshape(base.shape))
            return float(np.sum(encode_pixels(obs, e) * seed))
        fd = finite_difference_gradient(f, base.ravel())
        assert np.max(np.abs(grads[name].ravel() - fd)) / np.max(np.abs(fd)) < 1e-5


def test_multihead_loss_examples():
    rng = np.random.default_rng(2)
    b = batch(rng.normal(size=(9, 3)), rng.integers(0, 4, 9))
    heads = MultiHeadParams([np.zeros((4, 3))])
    assert multihead_loss(rng.normal(size=(9, 3)), b, heads) == pytest.approx(math.log(4), rel=1e-14)
    one = batch([[1.0, 2.0, 3.0]], [2])
    loss = multihead_loss(np.array([[1.0, 2.0, 3.0]]), one, MultiHeadParams([np.eye(3)]))
    assert loss == pytest.approx(cross_entropy_from_logits([1, 2, 3], 2), rel=1e-15)
    with pytest.raises(ConfigurationError):
        multihead_loss(np.zeros((1, 3)), batch([[0.0]], [0], dataset_id=3), heads)


def test_unified_logits_examples():
    rng = np.random.default_rng(3)
    x_u = rng.normal(size=(5, 4))
    assert not unified_logits(np.zeros((3, 4)), x_u).any()
    p = rng.normal(size=(3, 4))
    assert np.array_equal(unified_logits(p, np.eye(4)), p)
    ref = [[sum(x_u[n, d] * p[k, d] for d in range(4)) for n in range(5)] for k in range(3)]
    assert np.max(np.abs(unified_logits(p, x_u) - np.array(ref))) < 1e-12
    with pytest.raises(ShapeError):
        unified_logits(p, np.eye(3))


def test_map_logits_examples():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(6, 3))
    assert np.array_equal(map_logits(u, MappingMatrix(0, np.eye(3))), u)
    merged = MappingMatrix(0, [[1, 0], [1, 0], [0, 1]])
    s = map_logits(u, merged)
    assert np.array_equal(s[:, 0], u[:, 0] + u[:, 1]) and np.array_equal(s[:, 1], u[:, 2])
    block = np.array([[0.7, 0.3], [0.0, 1.0], [0.5, 0.5]])
    dense = np.array([[sum(u[k, n] * block[n, c] for n in range(3)) for c in range(2)] for k in range(6)])
    assert np.max(np.abs(map_logits(u, block) - dense)) < 1e-12
    with pytest.raises(ShapeError):
        map_logits(u, np.ones((4, 2)))


def test_regime_equivalence_and_zero_row_pruning():
    rng = np.random.default_rng(5)
    u = rng.normal(size=(20, 6))
    bits = np.zeros((6, 3), bool)
    bits[[0, 2, 3, 5], [1, 0, 2, 0]] = True
    m = MappingMatrix(0, bits)
    assert np.array_equal(map_logits(u, m), map_logits(u, bits.astype(float)))
    keep = [0, 2, 3, 5]
    assert np.array_equal(map_logits(u, m), map_logits(u[:, keep], MappingMatrix(0, bits[keep])))


def test_mapped_ce_examples():
    b = batch(np.zeros((4, 1)), [0, 1, 2, 1])
    assert mapped_ce_loss(np.zeros((4, 3)), b) == pytest.approx(math.log(3), rel=1e-14)
    with pytest.raises(IndexError):
        mapped_ce_loss(np.zeros((4, 2)), b)
    rng = np.random.default_rng(6)
    p = rng.normal(size=(8, 4))
    x_u = rng.normal(size=(3, 4))
    b = batch(np.zeros((8, 1)), rng.integers(0, 3, 8))
    via_map = mapped_ce_loss(map_logits(unified_logits(p, x_u), MappingMatrix(0, np.eye(3))), b)
    assert via_map == multihead_loss(p, b, MultiHeadParams([x_u]))


def test_orthogonality_examples():
    assert orthogonality_loss(np.array([[2.0, -1.0]])) == 0.0
    x_u = np.array([[math.sqrt(10), 0.0], [0.0, math.sqrt(10)]])
    getcontext().prec = 60
    p = Decimal(10).exp() / (Decimal(10).exp() + 1)
    ref = float(-2 * p * p.ln())
    assert orthogonality_loss(x_u) == pytest.approx(ref, rel=1e-10)


def test_orthogonality_decreases_past_crossover():
    # for orthonormal rows scaled by a, p_ii = e^(a^2) / (e^(a^2) + N - 1)
    n = 4
    losses, pii = [], []
    for a in np.linspace(0.5, 5, 40):
        losses.append(orthogonality_loss(a * np.eye(n)))
        pii.append(math.exp(a * a) / (math.exp(a * a) + n - 1))
    past = [l for l, p in zip(losses, pii) if p > 1 / math.e]
    assert all(x > y for x, y in zip(past, past[1:]))
    assert past[-1] < 1e-6
    assert min(losses) >= 0.0


def test_combined_loss_examples():
    assert combined_loss(2.0, 3.0, 1.5, 0.0) == 3.0
    assert combined_loss(2.0, 3.0, 0.0, 0.0) == 0.0
    assert combined_loss(2.0, 3.0, 1.0, 0.5) == 3.5
    with pytest.raises(ConfigurationError):
        combined_loss(1.0, 1.0, -1.0, 0.0)


def test_full_gradient_matches_finite_differences_on_micro_instance():
    rng = np.random.default_rng(7)
    ts = [DatasetTaxonomy(k, [LabelDef(f"{k}{j}", rng.normal(size=4)) for j in range(3)]) for k in range(2)]
    layout = GraphLayout.from_taxonomies(ts)
    graph = LabelGraphParams.init(4, layout.sizes, 4, 5, rng, raw_weights=rng.normal(size=(4, 6)))
    graph.dataset_embeddings[:] = rng.normal(scale=0.2, size=(2, 4))
    enc = EncoderParams.init(3, 4, 5, rng)
    batches = [batch(rng.normal(size=(5, 3)), rng.integers(0, 3, 5), k) for k in range(2)]
    groups = {**graph.groups(), "enc_a1": enc.a1, "enc_a2": enc.a2}
    tape = Tape()
    loss, _, _ = gnn_objective_on_tape(tape, layout, graph, enc, batches, 1.0, 0.3,
                                       trainable=GRAPH_GROUPS + ("enc_a1", "enc_a2"))
    assert loss.value[0, 0] == pytest.approx(gnn_objective_value(layout, graph, enc, batches, 1.0, 0.3), rel=1e-12)
    grads = tape.backward(loss)
    for name, base in groups.items():
        def f(flat, name=name):
            g = {k: v.copy() for k, v in groups.items()}
            g[name] = flat.reshape(base.shape)
            e = EncoderParams(g.pop("enc_a1"), g.pop("enc_a2"))
            return gnn_objective_value(layout, LabelGraphParams.from_groups(g), e, batches, 1.0, 0.3)
        fd = finite_difference_gradient(f, base.ravel())
        err = np.max(np.abs(grads[name].ravel() - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert err < 1e-4, name


def _micro_world(sigma=0.1):
    cfg = WorldConfig(n_true=3, d_obs=4, d_text=6, sigma=sigma, datasets=(
        DatasetSpec(((0,), (1,), (2,))), DatasetSpec(((0, 1), (2,)))))
    return generate_world(cfg, 11)


def test_multihead_stage_fits_separable_world():
    world = _micro_world()
    dims = ModelDims(d_text=6, d_embed=4, hidden=8, d_obs=4)
    sched = Schedule(multihead_iters=300, pixels_per_dataset=32, lr_multihead=0.1)
    state = run_stage_multihead(init_state(world.taxonomies, dims, 0), world, 300, sched)
    rng = np.random.default_rng(1)
    for k in range(2):
        b = world.sample(k, 200, rng)
        assert multihead_loss(encode_pixels(b, state.encoder), b, state.heads) < 0.1


def test_mapped_ce_with_planted_mapping_after_training():
    world = _micro_world()
    dims = ModelDims(d_text=6, d_embed=4, hidden=8, d_obs=4)
    sched = Schedule(pixels_per_dataset=32, lr_final=0.1)
    state = init_unified_head(init_state(world.taxonomies, dims, 0), 3, dims)
    state.mappings = planted_mappings(world)
    state.stage = Stage.FINAL
    run_stage_seg(state, world, 400, sched, SolverParams(), final=True, solve=False)
    rng = np.random.default_rng(2)
    for k in range(2):
        b = world.sample(k, 200, rng)
        s = map_logits(unified_logits(encode_pixels(b, state.encoder), state.x_u), state.mappings[k])
        assert mapped_ce_loss(s, b) < 0.05
