"""
From soft adjacency to a discrete label mapping
===============================================

A learned adjacency block says, for each unified node, how much it leans to
each class of one dataset.  The solver turns it into a mapping where every
node feeds at most one class and every class is fed by at least one node.
"""
import numpy as np

from unilabel.mapping_solver import brute_force_mapping, mapping_score, solve_mappings

rng = np.random.default_rng(3)
raw = rng.normal(scale=2.0, size=(6, 3))
block = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
print("adjacency block (nodes x classes)\n", np.round(block, 3))

result = solve_mappings([block])
mapping = result.mappings[0]
print("\nsolver assignment:", mapping.assignment())
print("class marginals for the next call:", np.round(result.betas[0], 3))

# exhaustive search is affordable at this size
oracle, best = brute_force_mapping(block.T, return_score=True)
print("exhaustive optimum:", oracle.assignment())
print(f"score {mapping_score(block.T, mapping):.3f} vs optimum {best:.3f}")

# the transport step spreads mass evenly over classes, so on lopsided
# blocks it can trade a little score for balance
