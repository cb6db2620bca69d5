"""
Training the unified head end to end
====================================

A shortened schedule: multi-head warm-up, node budget, alternating graph and
segmentation stages, final training with pruning.  Then the frozen model is
mapped onto a dataset it never saw.
"""
import dataclasses

import numpy as np

from unilabel.cli import RunConfig, build_data, evaluate
from unilabel.synth import DatasetSpec, canonical_config, generate_world
from unilabel.trainer import adapt_unseen_dataset, param_checksum, run_pipeline

cfg = RunConfig(seed=0)
s = cfg.schedule
s.multihead_iters, s.gnn_iters, s.seg_iters, s.cycles, s.final_iters = 800, 200, 200, 2, 800
cfg.validate()
data = build_data(cfg)

result = run_pipeline(data.taxonomies, data.source, cfg.schedule, cfg.model, cfg.solver, cfg.budget)
print("steps run:", result.state.step)
print("budget chose", result.report["budget"]["n_nodes"], "nodes;",
      "pruning removed", result.report["pruned"]["nodes"])

metrics = evaluate(result.state, data)
u = metrics["unified"]
print(f"recovery F1 {u['recovery_f1']:.3f}, unified mIoU {u['miou']:.3f}")
for block in metrics["datasets"]:
    print(f"  {block['name']}: mIoU {block['miou']:.3f}")

# same hidden classes, coarser labels: vehicles, people, ground, backdrop
coarse = DatasetSpec(((0, 1, 2), (3, 4), (5, 6, 7), (8, 9)), ("movers", "people", "ground", "backdrop"))
base = canonical_config()
world = generate_world(dataclasses.replace(base, datasets=base.datasets + (coarse,)), 0)

before = param_checksum(result.state)
rep = adapt_unseen_dataset(result.state, world.taxonomies[3], [world.sample(3, 2000, np.random.default_rng(9))])
print("\nnew dataset mapping:", rep.mapping.assignment())
print("parameters untouched:", param_checksum(result.state) == before)
