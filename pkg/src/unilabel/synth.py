"""Planted taxonomy worlds, pixel sampling, recovery scoring and mIoU.

A world has ``n_true`` hidden classes, each with a prototype observation
vector.  Every dataset sees a subset of them through its own label space:
a dataset class is a set of hidden classes (a merge when the set has more
than one member), and hidden classes absent from every set are omitted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from .errors import ConfigurationError, DataError
from .seg_model import PixelBatch
from .taxonomy import DatasetTaxonomy, LabelDef, MappingMatrix

__all__ = [
    "DatasetSpec",
    "WorldConfig",
    "PlantedWorld",
    "canonical_config",
    "generate_world",
    "check_world",
    "sample_batch",
    "RecoveryScore",
    "planted_mappings",
    "recovery_score",
    "miou",
    "text_clustering_mappings",
    "text_clustering_sweep",
]


@dataclass(frozen=True)
class DatasetSpec:
    """Each entry of ``classes`` is the tuple of hidden classes it covers."""

    classes: tuple
    names: Optional[tuple] = None


@dataclass(frozen=True)
class WorldConfig:
    n_true: int = 10
    datasets: tuple = ()
    d_obs: int = 12
    d_text: int = 32
    sigma: float = 0.3
    text_noise: float = 0.1
    # ((dataset_a, class_x), (dataset_b, class_y)): y's text embedding copies x's
    confounders: tuple = ()
    class_power: float = 0.0  # 0 -> uniform over visible classes


def canonical_config(sigma: float = 0.3) -> WorldConfig:
    """Ten hidden classes seen by three datasets of 8, 7 and 6 classes.

    Every dataset omits one hidden class and merges some; every pair of
    hidden classes is told apart by at least one dataset that sees both.
    The 'road' labels of datasets 0 and 2 share a text embedding although
    the second also covers hidden class 7.
    """
    d0 = DatasetSpec(((0, 1), (2,), (3,), (4,), (5,), (6,), (7,), (8,)),
                     ("vehicle", "person", "rider", "pole", "sign", "road", "lane_marking", "sky"))
    d1 = DatasetSpec(((1,), (2, 3), (4, 5), (6,), (7,), (8,), (9,)),
                     ("truck", "human", "pole", "road", "lane_marking", "sky", "building"))
    d2 = DatasetSpec(((0,), (1,), (2,), (3, 4), (6, 7), (8, 9)),
                     ("car", "truck", "person", "rider", "road", "background"))
    return WorldConfig(n_true=10, datasets=(d0, d1, d2), sigma=sigma,
                       confounders=(((0, 5), (2, 4)),))


@dataclass(frozen=True)
class PlantedWorld:
    config: WorldConfig
    prototypes: np.ndarray          # n_true x d_obs
    true_maps: tuple                # per dataset: array n_true -> class or -1
    taxonomies: tuple
    class_weights: np.ndarray       # n_true, sampling weight before visibility

    @property
    def n_true(self) -> int:
        return self.prototypes.shape[0]

    @property
    def n_datasets(self) -> int:
        return len(self.true_maps)

    @property
    def sigma(self) -> float:
        return self.config.sigma

    def visible(self, dataset_id: int) -> np.ndarray:
        return np.flatnonzero(self.true_maps[dataset_id] >= 0)

    def sample(self, dataset_id: int, pixels: int, rng) -> PixelBatch:
        return sample_batch(self, dataset_id, pixels, rng)


def check_world(world: PlantedWorld) -> list:
    """Human-readable list of invariant violations (empty when valid)."""
    problems = []
    seen = np.zeros(world.n_true, dtype=bool)
    for i, tmap in enumerate(world.true_maps):
        n_cls = len(world.taxonomies[i])
        if tmap.shape != (world.n_true,):
            problems.append(f"dataset {i}: true map has shape {tmap.shape}")
            continue
        for c in range(n_cls):
            if not np.any(tmap == c):
                problems.append(f"dataset {i} class {c} has no hidden member")
        if np.any(tmap >= n_cls):
            problems.append(f"dataset {i}: true map points past its classes")
        seen |= tmap >= 0
    for t in np.flatnonzero(~seen):
        problems.append(f"hidden class {t} appears in no dataset")
    return problems


def generate_world(config: WorldConfig, seed: int) -> PlantedWorld:
    if config.n_true < 2 or len(config.datasets) < 2:
        raise ConfigurationError("a world needs at least 2 hidden classes and 2 datasets")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((config.n_true, config.d_obs))
    proj = rng.standard_normal((config.d_text, config.d_obs)) / np.sqrt(config.d_obs)
    seeds = protos @ proj.T
    true_maps, embeddings = [], []
    for i, spec in enumerate(config.datasets):
        if not spec.classes:
            raise ConfigurationError(f"dataset {i} has no classes")
        tmap = np.full(config.n_true, -1, dtype=np.intp)
        embs = []
        for c, members in enumerate(spec.classes):
            members = tuple(members)
            if not members:
                raise ConfigurationError(f"dataset {i} class {c} has no hidden members")
            for t in members:
                if not 0 <= t < config.n_true:
                    raise ConfigurationError(f"dataset {i} class {c}: hidden class {t} out of range")
                if tmap[t] >= 0:
                    raise ConfigurationError(f"dataset {i}: hidden class {t} in two classes")
                tmap[t] = c
            embs.append(seeds[list(members)].mean(axis=0)
                        + config.text_noise * rng.standard_normal(config.d_text))
        true_maps.append(tmap)
        embeddings.append(embs)
    for (a, x), (b, y) in config.confounders:
        embeddings[b][y] = embeddings[a][x] + 0.01 * config.text_noise * rng.standard_normal(config.d_text)
    taxonomies = []
    for i, spec in enumerate(config.datasets):
        names = spec.names or tuple("+".join(f"h{t}" for t in m) for m in spec.classes)
        labels = tuple(
            LabelDef(names[c], embeddings[i][c], f"An image of {names[c]} from the dataset d{i}")
            for c in range(len(spec.classes))
        )
        taxonomies.append(DatasetTaxonomy(i, labels, name=f"d{i}"))
    ranks = rng.permutation(config.n_true) + 1.0
    weights = ranks ** (-config.class_power)
    world = PlantedWorld(config, protos, tuple(true_maps), tuple(taxonomies), weights)
    problems = check_world(world)
    if problems:
        raise ConfigurationError("; ".join(problems))
    return world


def sample_batch(world: PlantedWorld, dataset_id: int, pixels: int, seed) -> PixelBatch:
    """Pick visible hidden classes, add isotropic noise to their prototypes."""
    if not 0 <= dataset_id < world.n_datasets:
        raise ConfigurationError(f"world has no dataset {dataset_id}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    vis = world.visible(dataset_id)
    w = world.class_weights[vis]
    true = vis[rng.choice(vis.size, size=pixels, p=w / w.sum())]
    obs = world.prototypes[true] + world.sigma * rng.standard_normal((pixels, world.prototypes.shape[1]))
    labels = world.true_maps[dataset_id][true]
    return PixelBatch(dataset_id, obs, labels, true)


@dataclass(frozen=True)
class RecoveryScore:
    precision: float
    recall: float
    f1: float
    node_to_true: tuple = ()    # per learned node: matched hidden class or None


def planted_mappings(world: PlantedWorld) -> list:
    """The ground-truth mappings, one unified node per hidden class."""
    out = []
    for i, tmap in enumerate(world.true_maps):
        bits = np.zeros((world.n_true, len(world.taxonomies[i])), dtype=bool)
        for t, c in enumerate(tmap):
            if c >= 0:
                bits[t, c] = True
        out.append(MappingMatrix(i, bits))
    return out


def _edges(mappings):
    return {(n, i, int(c)) for i, m in enumerate(mappings)
            for n, c in zip(*np.nonzero(_bits(m)))}


def _bits(m):
    return m.bits if isinstance(m, MappingMatrix) else np.asarray(m, dtype=bool)


def recovery_score(learned: Sequence, world: PlantedWorld, labels=None) -> RecoveryScore:
    """Edge precision/recall/F1 after matching learned nodes to hidden classes.

    Nodes are matched one-to-one by maximum edge agreement.  ``labels``
    optionally restricts scoring to edges touching the given
    ``(dataset, class)`` pairs.
    """
    if len(learned) != world.n_datasets:
        raise DataError(f"{len(learned)} mappings for {world.n_datasets} datasets")
    n_nodes = _bits(learned[0]).shape[0]
    agree = np.zeros((n_nodes, world.n_true))
    for i, m in enumerate(learned):
        bits = _bits(m)
        tmap = world.true_maps[i]
        for t in range(world.n_true):
            if tmap[t] >= 0:
                agree[:, t] += bits[:, tmap[t]]
    rows, cols = linear_sum_assignment(agree, maximize=True)
    node_to_true = [None] * n_nodes
    for r, c in zip(rows, cols):
        node_to_true[r] = int(c)
    relabel = {n: (("true", t) if t is not None else ("extra", n)) for n, t in enumerate(node_to_true)}
    learned_edges = {(relabel[n], i, c) for n, i, c in _edges(learned)}
    planted_edges = {(("true", t), i, c) for t, i, c in _edges(planted_mappings(world))}
    if labels is not None:
        keep = {(int(i), int(c)) for i, c in labels}
        learned_edges = {e for e in learned_edges if (e[1], e[2]) in keep}
        planted_edges = {e for e in planted_edges if (e[1], e[2]) in keep}
    hit = len(learned_edges & planted_edges)
    p = hit / len(learned_edges) if learned_edges else 0.0
    r = hit / len(planted_edges) if planted_edges else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RecoveryScore(p, r, f1, tuple(node_to_true))


def miou(predictions, truth, classes: int):
    """Mean IoU over classes present in the prediction or the truth.

    Returns ``(mean, per_class)`` where absent classes are NaN in
    ``per_class``.

    >>> miou([0, 1, 1, 1], [0, 0, 1, 1], 2)[0]
    0.5833333333333333
    """
    pred = np.asarray(predictions, dtype=np.intp)
    true = np.asarray(truth, dtype=np.intp)
    if pred.size == 0 or pred.shape != true.shape:
        raise DataError(f"need equal non-empty inputs, got {pred.shape} and {true.shape}")
    inter = np.bincount(true[pred == true], minlength=classes)[:classes].astype(float)
    area_p = np.bincount(pred[(pred >= 0) & (pred < classes)], minlength=classes)[:classes]
    area_t = np.bincount(true[(true >= 0) & (true < classes)], minlength=classes)[:classes]
    union = area_p + area_t - inter
    per_class = np.full(classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    return float(np.mean(per_class[present])), per_class


def text_clustering_mappings(taxonomies: Sequence[DatasetTaxonomy], threshold: float) -> list:
    """Label-space unification from text embeddings alone.

    Labels whose cosine similarity chains above ``threshold`` share one
    unified node (single linkage, i.e. DBSCAN with one-point cores).
    """
    emb = np.concatenate([t.embeddings() for t in taxonomies])
    owner = np.concatenate([[i] * len(t) for i, t in enumerate(taxonomies)])
    local = np.concatenate([np.arange(len(t)) for t in taxonomies])
    if len(emb) > 1:
        z = linkage(pdist(emb, metric="cosine"), method="single")
        clusters = fcluster(z, t=1.0 - threshold, criterion="distance") - 1
    else:
        clusters = np.zeros(1, dtype=int)
    n = int(clusters.max()) + 1
    out = []
    for i, t in enumerate(taxonomies):
        bits = np.zeros((n, len(t)), dtype=bool)
        sel = owner == i
        bits[clusters[sel], local[sel]] = True
        out.append(MappingMatrix(i, bits))
    return out


def text_clustering_sweep(world: PlantedWorld, thresholds=None, labels=None) -> list:
    """``(threshold, overall score, restricted score)`` over a threshold sweep."""
    thresholds = np.linspace(0.5, 0.999, 60) if thresholds is None else thresholds
    out = []
    for th in thresholds:
        maps = text_clustering_mappings(world.taxonomies, float(th))
        overall = recovery_score(maps, world)
        restricted = recovery_score(maps, world, labels=labels) if labels is not None else None
        out.append((float(th), overall, restricted))
    return out
