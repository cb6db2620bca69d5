"""
How many unified nodes?
=======================

Train per-dataset heads briefly, measure how well each head predicts the
other datasets' classes, and pick the cheapest set partition of all labels,
paying a fixed price per unified node.
"""
import numpy as np

from unilabel.node_budget import compute_cross_head_iou, enumerate_tuples, select_budget
from unilabel.synth import canonical_config, generate_world
from unilabel.trainer import ModelDims, Schedule, init_state, run_stage_multihead

world = generate_world(canonical_config(), seed=0)
schedule = Schedule(multihead_iters=600)
state = init_state(world.taxonomies, ModelDims(), seed=0)
run_stage_multihead(state, world, schedule.multihead_iters, schedule)

rng = np.random.default_rng(1)
evals = [world.sample(i, 512, rng) for i in range(world.n_datasets)]
table = compute_cross_head_iou(state.encoder, state.heads, evals)
print("native IoU per dataset:", [np.round(table.native(k), 2).tolist() for k in range(3)])

tuples = enumerate_tuples(table)
print(f"\n{len(tuples)} candidate merges")
for lam in (0.0, 0.25, 0.5, 1.0, 2.0):
    sel = select_budget(tuples, state.layout.sizes, lam)
    print(f"lambda {lam:4.2f}: {sel.n_nodes:2d} nodes, objective {sel.objective:.3f}")

# the hidden truth has ten classes; a budget can only merge labels one-to-one
# across datasets, so sub/superclass pairs stay split
sel = select_budget(tuples, state.layout.sizes, 0.5)
for t in sel.tuples:
    print("  ", t.members, f"cost {t.cost:.2f}")
