"""On-disk formats: taxonomy JSON, matrix sidecars, mapping files, pixel
files and the training checkpoint.

Matrix sidecar layout: 8-byte magic, u32 rows, u32 cols, then row-major
little-endian floats.  ``UNISEGF1`` holds float32 (adjacency dumps),
``UNISEGD1`` float64 (checkpoints, which must round-trip exactly).
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, IntegrityError, ParseError, ShapeError
from .label_graph import GraphLayout, LabelGraphParams
from .seg_model import EncoderParams, MultiHeadParams, PixelBatch
from .taxonomy import DatasetTaxonomy, LabelDef, MappingMatrix, UnifiedTaxonomy
from .trainer import Stage, TrainState

__all__ = [
    "MAGIC_F32",
    "MAGIC_F64",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "taxonomies_to_json",
    "taxonomies_from_json",
    "save_taxonomies",
    "load_taxonomies",
    "write_matrix",
    "read_matrix",
    "save_matrix",
    "load_matrix",
    "mapping_to_json",
    "mapping_from_json",
    "save_mapping",
    "load_mapping",
    "unified_taxonomy_json",
    "save_pixels",
    "load_pixels",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "write_json",
]

MAGIC_F32 = b"UNISEGF1"
MAGIC_F64 = b"UNISEGD1"
CHECKPOINT_MAGIC = b"UNISEGCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")


def write_json(path, obj):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, "<document>", f"invalid JSON: {exc}") from None


# taxonomies ----------------------------------------------------------------

def taxonomies_to_json(taxonomies: Sequence[DatasetTaxonomy]) -> dict:
    return {
        "datasets": [
            {
                "id": t.dataset_id,
                "name": t.name,
                "labels": [
                    {"name": l.name, "description": l.description,
                     "embedding": [float(x) for x in l.text_embedding]}
                    for l in t.labels
                ],
            }
            for t in taxonomies
        ]
    }


def _require(obj, key, kind, path, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(path, f"{where}{key}", "missing")
    val = obj[key]
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise ParseError(path, f"{where}{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def taxonomies_from_json(doc, path="<memory>") -> list:
    datasets = _require(doc, "datasets", list, path, "")
    if not datasets:
        raise ParseError(path, "datasets", "must not be empty")
    out = []
    for i, d in enumerate(datasets):
        where = f"datasets[{i}]."
        did = _require(d, "id", int, path, where)
        if did != i:
            raise ParseError(path, f"{where}id", f"expected {i} (datasets are listed in id order)")
        name = d.get("name", "") if isinstance(d, dict) else ""
        labels = []
        for j, l in enumerate(_require(d, "labels", list, path, where)):
            lw = f"{where}labels[{j}]."
            emb = _require(l, "embedding", list, path, lw)
            if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb):
                raise ParseError(path, f"{lw}embedding", "entries must be numbers")
            labels.append(LabelDef(_require(l, "name", str, path, lw), np.array(emb, dtype=np.float64),
                                   l.get("description", "")))
        try:
            out.append(DatasetTaxonomy(did, labels, name))
        except ConfigurationError as exc:
            raise ParseError(path, f"{where}labels", str(exc)) from None
    dims = {t.embedding_dim for t in out}
    if len(dims) != 1:
        raise ShapeError(f"{path}: embedding lengths differ across datasets: {sorted(dims)}")
    return out


def save_taxonomies(taxonomies, path):
    write_json(path, taxonomies_to_json(taxonomies))


def load_taxonomies(paths) -> list:
    """Load one or more taxonomy files; datasets are renumbered in file order."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out = []
    for p in paths:
        for t in taxonomies_from_json(_read_json(p), str(p)):
            out.append(DatasetTaxonomy(len(out), t.labels, t.name))
    return out


# matrices ------------------------------------------------------------------

def write_matrix(buf, m, precision: str = "f32"):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"only 2-D matrices can be stored, got {m.shape}")
    magic, dt = (MAGIC_F32, "<f4") if precision == "f32" else (MAGIC_F64, "<f8")
    buf.write(_HEADER.pack(magic, m.shape[0], m.shape[1]))
    buf.write(np.ascontiguousarray(m, dtype=dt).tobytes())


def read_matrix(buf) -> np.ndarray:
    head = buf.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise IntegrityError("truncated matrix header")
    magic, rows, cols = _HEADER.unpack(head)
    if magic == MAGIC_F32:
        dt = "<f4"
    elif magic == MAGIC_F64:
        dt = "<f8"
    else:
        raise IntegrityError(f"bad matrix magic {magic!r}")
    size = rows * cols * np.dtype(dt).itemsize
    data = buf.read(size)
    if len(data) != size:
        raise IntegrityError(f"truncated matrix body: {len(data)} of {size} bytes")
    return np.frombuffer(data, dtype=dt).reshape(rows, cols).astype(np.float64)


def save_matrix(path, m, precision: str = "f32"):
    with open(path, "wb") as fh:
        write_matrix(fh, m, precision)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        m = read_matrix(fh)
        if fh.read(1):
            raise IntegrityError(f"{path}: trailing bytes after matrix")
    return m


# mappings and unified taxonomy ----------------------------------------------

def mapping_to_json(m: MappingMatrix, taxonomy: DatasetTaxonomy = None) -> dict:
    doc = {
        "dataset_id": m.dataset_id,
        "n_unified": m.shape[0],
        "n_classes": m.shape[1],
        "links": [[int(n), int(c)] for n, c in zip(*np.nonzero(m.bits))],
    }
    if taxonomy is not None:
        doc["classes"] = taxonomy.label_names
    return doc


def mapping_from_json(doc, path="<memory>") -> MappingMatrix:
    n = _require(doc, "n_unified", int, path, "")
    c = _require(doc, "n_classes", int, path, "")
    bits = np.zeros((n, c), dtype=bool)
    for k, link in enumerate(_require(doc, "links", list, path, "")):
        if (not isinstance(link, list) or len(link) != 2
                or not all(isinstance(x, int) for x in link)
                or not (0 <= link[0] < n and 0 <= link[1] < c)):
            raise ParseError(path, f"links[{k}]", "expected [node, class] within bounds")
        bits[link[0], link[1]] = True
    return MappingMatrix(_require(doc, "dataset_id", int, path, ""), bits)


def save_mapping(m, path, taxonomy=None):
    write_json(path, mapping_to_json(m, taxonomy))


def load_mapping(path) -> MappingMatrix:
    return mapping_from_json(_read_json(path), str(path))


def unified_taxonomy_json(mappings, taxonomies) -> dict:
    """Each unified node is named after the dataset labels it links to."""
    n = mappings[0].shape[0]
    nodes = []
    for node in range(n):
        links = []
        for m, t in zip(mappings, taxonomies):
            for c in np.flatnonzero(m.bits[node]):
                links.append({"dataset": t.dataset_id, "label": t.label_names[c]})
        name = "|".join(sorted({l["label"] for l in links})) or f"node_{node}"
        nodes.append({"id": node, "name": name, "links": links})
    return {"n_unified": n, "nodes": nodes}


def unified_from_json(doc) -> UnifiedTaxonomy:
    return UnifiedTaxonomy(doc["n_unified"], tuple(n["name"] for n in doc["nodes"]))


# pixels --------------------------------------------------------------------

def save_pixels(batch: PixelBatch, path):
    arrays = {"dataset_id": np.array(batch.dataset_id), "observations": batch.observations,
              "labels": batch.labels}
    if batch.true_classes is not None:
        arrays["true_classes"] = batch.true_classes
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_pixels(path, dataset_id=None) -> PixelBatch:
    with np.load(path) as z:
        for key in ("observations", "labels"):
            if key not in z:
                raise ParseError(path, key, "missing array")
        did = int(z["dataset_id"]) if dataset_id is None and "dataset_id" in z else dataset_id
        return PixelBatch(0 if did is None else did, z["observations"], z["labels"],
                          z["true_classes"] if "true_classes" in z else None)


# checkpoint ----------------------------------------------------------------
# magic, u32 version, u32 matrix count, then per matrix: u16 name length,
# name, float64 sidecar block; finally u64 length + JSON trailer.

def _state_matrices(state: TrainState) -> dict:
    mats = {"layout.text": state.layout.text}
    mats.update({f"encoder.{k}": v for k, v in state.encoder.groups().items()})
    if state.heads is not None:
        mats.update(state.heads.groups())
    if state.graph is not None:
        mats.update({f"graph.{k}": v for k, v in state.graph.groups().items()})
    if state.x_u is not None:
        mats["x_u"] = state.x_u
    for i, m in enumerate(state.mappings or []):
        mats[f"mapping.{i}"] = m.bits.astype(np.float64)
    for i, b in enumerate(state.betas or []):
        mats[f"beta.{i}"] = np.asarray(b, dtype=np.float64)[None, :]
    return mats


def checkpoint_bytes(state: TrainState, extra: dict = None) -> bytes:
    mats = _state_matrices(state)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(mats)))
    for name in sorted(mats):
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_matrix(buf, mats[name], "f64")
    trailer = {
        "sizes": list(state.layout.sizes),
        "stage": state.stage.value,
        "step": state.step,
        "n_heads": len(state.heads.heads) if state.heads is not None else 0,
        "n_mappings": len(state.mappings or []),
        "n_betas": len(state.betas or []),
        "rng": state.rng.bit_generator.state if state.rng is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(trailer, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes):
    """Returns ``(state, extra)``."""
    buf = io.BytesIO(data)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise IntegrityError("not a checkpoint file")
    version, count = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    mats = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", buf.read(2))
        name = buf.read(length).decode()
        mats[name] = read_matrix(buf)
    head = buf.read(8)
    if len(head) != 8:
        raise IntegrityError("checkpoint trailer missing")
    (length,) = struct.unpack("<Q", head)
    blob = buf.read(length)
    if len(blob) != length or buf.read(1):
        raise IntegrityError("checkpoint trailer has the wrong length")
    meta = json.loads(blob)
    sizes = tuple(meta["sizes"])
    owner = np.concatenate([np.full(s, k, dtype=np.intp) for k, s in enumerate(sizes)])
    layout = GraphLayout(sizes, mats["layout.text"], owner)
    encoder = EncoderParams(mats["encoder.enc_a1"], mats["encoder.enc_a2"])
    heads = None
    if meta["n_heads"]:
        heads = MultiHeadParams([mats[f"head_{i}"] for i in range(meta["n_heads"])])
    graph = None
    if "graph.raw_weights" in mats:
        graph = LabelGraphParams.from_groups(
            {k[len("graph."):]: v for k, v in mats.items() if k.startswith("graph.")})
    mappings = [MappingMatrix(i, mats[f"mapping.{i}"] > 0.5) for i in range(meta["n_mappings"])] or None
    betas = [mats[f"beta.{i}"][0] for i in range(meta["n_betas"])] or None
    rng = None
    if meta["rng"] is not None:
        bg = np.random.PCG64()
        bg.state = meta["rng"]
        rng = np.random.Generator(bg)
    state = TrainState(layout, encoder, heads, graph, mats.get("x_u"), mappings, betas,
                       Stage(meta["stage"]), meta["step"], rng)
    return state, meta["extra"]


def save_checkpoint(state, path, extra=None):
    Path(path).write_bytes(checkpoint_bytes(state, extra))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
