"""Run configuration, result export and the ``unilabel`` command line."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fileio
from .errors import ConfigurationError, DataError, ParseError, ShapeError
from .mapping_solver import solve_mappings
from .node_budget import (
    compute_cross_head_iou,
    enumerate_tuples,
    init_adjacency_from_selection,
    select_budget,
)
from .seg_model import PixelBatch
from .synth import (
    canonical_config,
    generate_world,
    miou,
    planted_mappings,
    recovery_score,
    sample_batch,
)
from .taxonomy import validate_mapping
from .trainer import (
    BudgetParams,
    ModelDims,
    Schedule,
    SolverParams,
    adapt_unseen_dataset,
    dataset_logits,
    init_state,
    predict_unified,
    run_pipeline,
    run_stage_multihead,
)

__all__ = [
    "DataConfig",
    "RunConfig",
    "ArraySource",
    "build_data",
    "evaluate",
    "export_results",
    "command_dispatch",
    "main",
]

EVAL_SEED_TAG = 6


@dataclass
class DataConfig:
    """Either a synthetic planted world or taxonomy + pixel files."""

    synthetic: bool = True
    world_seed: Optional[int] = None     # None: use the run seed
    sigma: float = 0.3
    taxonomies: list = field(default_factory=list)
    pixels: list = field(default_factory=list)
    eval_pixels: list = field(default_factory=list)
    report_pixels: int = 2000


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: Schedule = field(default_factory=Schedule)
    model: ModelDims = field(default_factory=ModelDims)
    solver: SolverParams = field(default_factory=SolverParams)
    budget: BudgetParams = field(default_factory=BudgetParams)
    seed: int = 0
    out: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def provenance(self) -> dict:
        """The settings that determine a run's results; the output location is not one."""
        doc = self.to_dict()
        doc.pop("out")
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            if name not in doc:
                continue
            val = doc[name]
            default = getattr(cls(), name)
            if dataclasses.is_dataclass(default):
                kwargs[name] = _section(type(default), val, name)
            else:
                kwargs[name] = _scalar(val, default, name, f.type)
        cfg = cls(**kwargs)
        d = cfg.data
        d.taxonomies = [str(base_dir / p) for p in d.taxonomies]
        d.pixels = [str(base_dir / p) for p in d.pixels]
        d.eval_pixels = [str(base_dir / p) for p in d.eval_pixels]
        cfg.validate()
        return cfg

    def validate(self):
        self.schedule.seed = self.seed
        self.schedule.validate()
        d = self.data
        if not d.synthetic:
            if not d.taxonomies or not d.pixels:
                raise ConfigurationError("file data needs 'taxonomies' and 'pixels'")
            for p in d.taxonomies + d.pixels + d.eval_pixels:
                if not Path(p).is_file():
                    raise ConfigurationError(f"referenced file does not exist: {p}")
        if d.sigma <= 0 or d.report_pixels < 1:
            raise ConfigurationError("sigma and report_pixels must be positive")
        s = self.solver
        if s.epsilon <= 0 or s.tau <= 0 or s.max_iters < 1 or s.tol <= 0:
            raise ConfigurationError("solver parameters must be positive")
        b = self.budget
        if b.lam < 0 or not 0 <= b.iou_floor < 1 or b.exact_limit < 0:
            raise ConfigurationError("budget parameters out of range")
        if b.node_count is not None and b.node_count < 1:
            raise ConfigurationError("node_count must be positive")
        m = self.model
        if min(m.d_text, m.d_embed, m.hidden, m.d_obs) < 1:
            raise ConfigurationError("model widths must be positive")


def _scalar(val, default, where, annotation=None):
    if val is None:
        if default is None or "Optional" in str(annotation):
            return None
        raise ConfigurationError(f"{where} may not be null")
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, int) or (default is None and "int" in str(annotation)):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(default, float):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        val = float(val) if ok else val
    elif isinstance(default, list):
        ok = isinstance(val, list) and all(isinstance(x, str) for x in val)
    else:
        ok = isinstance(val, str)
    if not ok:
        raise ConfigurationError(f"{where}: unexpected value {val!r}")
    return val


def _section(kind, doc, where):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    default = kind()
    return kind(**{k: _scalar(v, getattr(default, k), f"{where}.{k}", fields[k].type)
                   for k, v in doc.items()})


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, "<document>", f"invalid JSON: {exc}") from None
    return RunConfig.from_dict(doc, path.parent)


# data ----------------------------------------------------------------------

class ArraySource:
    """Samples pixels uniformly, with replacement, from fixed arrays."""

    def __init__(self, batches):
        self.batches = {b.dataset_id: b for b in batches}

    def sample(self, dataset_id, pixels, rng):
        b = self.batches.get(dataset_id)
        if b is None:
            raise DataError(f"no pixels for dataset {dataset_id}")
        idx = rng.integers(len(b), size=pixels)
        tc = b.true_classes[idx] if b.true_classes is not None else None
        return PixelBatch(dataset_id, b.observations[idx], b.labels[idx], tc)


@dataclass
class Data:
    taxonomies: list
    source: object
    eval_batches: list
    world: object = None


def build_data(cfg: RunConfig) -> Data:
    d = cfg.data
    if d.synthetic:
        world = generate_world(canonical_config(d.sigma), cfg.seed if d.world_seed is None else d.world_seed)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, EVAL_SEED_TAG])))
        evals = [sample_batch(world, i, d.report_pixels, rng) for i in range(world.n_datasets)]
        return Data(list(world.taxonomies), world, evals, world)
    taxonomies = fileio.load_taxonomies(d.taxonomies)
    train = [fileio.load_pixels(p, i) for i, p in enumerate(d.pixels)]
    if len(train) != len(taxonomies):
        raise ConfigurationError(f"{len(train)} pixel files for {len(taxonomies)} datasets")
    for b, t in zip(train, taxonomies):
        b.check_labels(len(t))
    evals = [fileio.load_pixels(p, i) for i, p in enumerate(d.eval_pixels)] or train
    return Data(taxonomies, ArraySource(train), evals)


# evaluation and export -----------------------------------------------------

def evaluate(state, data: Data) -> dict:
    """One metrics block per dataset plus a unified block."""
    blocks = []
    for b in data.eval_batches:
        pred = np.argmax(dataset_logits(state, b), axis=1)
        n_cls = state.mappings[b.dataset_id].shape[1]
        mean, per = miou(pred, b.labels, n_cls)
        blocks.append({"dataset": b.dataset_id, "name": data.taxonomies[b.dataset_id].name,
                       "miou": mean, "per_class": [None if np.isnan(x) else x for x in per],
                       "pixel_accuracy": float(np.mean(pred == b.labels))})
    unified = {"n_unified": state.n_unified}
    if data.world is not None:
        score = recovery_score(state.mappings, data.world)
        n2t = np.array([-1 if x is None else x for x in score.node_to_true])
        preds = np.concatenate([n2t[predict_unified(state, b)] for b in data.eval_batches])
        truth = np.concatenate([b.true_classes for b in data.eval_batches])
        unified.update(recovery_precision=score.precision, recovery_recall=score.recall,
                       recovery_f1=score.f1, miou=miou(preds, truth, data.world.n_true)[0],
                       node_to_true=list(score.node_to_true))
    return {"datasets": blocks, "unified": unified}


def loss_curve(history, every=50) -> list:
    """Mean loss per ``every`` steps within each stage run."""
    out, chunk = [], []
    for h in history:
        if chunk and (h["stage"] != chunk[0]["stage"] or len(chunk) == every):
            out.append({"step": chunk[0]["step"], "stage": chunk[0]["stage"],
                        "loss": float(np.mean([c["loss"] for c in chunk]))})
            chunk = []
        chunk.append(h)
    if chunk:
        out.append({"step": chunk[0]["step"], "stage": chunk[0]["stage"],
                    "loss": float(np.mean([c["loss"] for c in chunk]))})
    return out


def export_results(state, mappings, report: dict, out_dir, taxonomies, config: RunConfig = None):
    """Unified taxonomy, per-dataset mappings, report and checkpoint."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    fileio.write_json(out / "unified_taxonomy.json", fileio.unified_taxonomy_json(mappings, taxonomies))
    for m, t in zip(mappings, taxonomies):
        fileio.save_mapping(m, out / f"mapping_{m.dataset_id}.json", t)
    fileio.write_json(out / "report.json", report)
    extra = {"config": config.provenance()} if config is not None else {}
    fileio.save_checkpoint(state, out / "checkpoint.ckpt", extra)
    fileio.save_taxonomies(taxonomies, out / "taxonomies.json")


@contextmanager
def _run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"{out} is in use by another run (remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# commands ------------------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.out:
        raise ConfigurationError("train needs --out or 'out' in the config")
    out = Path(cfg.out)
    data = build_data(cfg)
    with _run_lock(out), open(out / "log.jsonl", "w") as log_fh:
        t0 = time.monotonic()

        def sink(entry):
            log_fh.write(json.dumps({**entry, "time": round(time.monotonic() - t0, 6)}) + "\n")

        result = run_pipeline(data.taxonomies, data.source, cfg.schedule, cfg.model,
                              cfg.solver, cfg.budget, sink=sink)
        report = {"config": cfg.provenance(), "metrics": evaluate(result.state, data),
                  "loss_curve": loss_curve(result.state.history), **result.report}
        export_results(result.state, result.mappings, report, out, data.taxonomies, cfg)
    print(json.dumps(report["metrics"]["unified"], sort_keys=True))
    return 0


def cmd_synth_gen(args) -> int:
    cfg = _config_from_args(args)
    if not args.out:
        raise ConfigurationError("synth-gen needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if cfg.data.world_seed is None else cfg.data.world_seed
    world = generate_world(canonical_config(cfg.data.sigma), seed)
    fileio.save_taxonomies(world.taxonomies, out / "taxonomies.json")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    for i in range(world.n_datasets):
        fileio.save_pixels(sample_batch(world, i, args.pixels, rng), out / f"pixels_{i}.npz")
        fileio.save_pixels(sample_batch(world, i, args.pixels, rng), out / f"eval_{i}.npz")
    fileio.write_json(out / "planted.json", {
        "seed": seed, "sigma": cfg.data.sigma, "n_true": world.n_true,
        "true_maps": [m.tolist() for m in world.true_maps],
    })
    for m in planted_mappings(world):
        fileio.save_mapping(m, out / f"planted_mapping_{m.dataset_id}.json", world.taxonomies[m.dataset_id])
    return 0


def cmd_solve_mapping(args) -> int:
    taxonomies = fileio.load_taxonomies(args.taxonomies)
    block = fileio.load_matrix(args.adjacency)
    sizes = [len(t) for t in taxonomies]
    if block.shape[1] != sum(sizes):
        raise ShapeError(f"adjacency has {block.shape[1]} columns, taxonomies have {sum(sizes)} labels")
    off = np.cumsum([0] + sizes)
    res = solve_mappings([block[:, off[i]:off[i + 1]] for i in range(len(sizes))], args.mu)
    reports = []
    for m, t in zip(res.mappings, taxonomies):
        rep = validate_mapping(m, t)
        reports.append({"dataset": t.dataset_id, "valid": rep.ok,
                        "bad_rows": list(rep.bad_rows), "empty_cols": list(rep.empty_cols)})
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            fileio.save_mapping(m, Path(args.out) / f"mapping_{m.dataset_id}.json", t)
    print(json.dumps({"mappings": reports}, sort_keys=True))
    return 0 if all(r["valid"] for r in reports) else 1


def cmd_select_budget(args) -> int:
    cfg = _config_from_args(args)
    data = build_data(cfg)
    state = init_state(data.taxonomies, cfg.model, cfg.seed)
    run_stage_multihead(state, data.source, cfg.schedule.multihead_iters, cfg.schedule)
    table = compute_cross_head_iou(state.encoder, state.heads, data.eval_batches)
    b = cfg.budget
    sel = select_budget(enumerate_tuples(table, b.iou_floor), state.layout.sizes, b.lam, b.exact_limit)
    doc = {"n_nodes": sel.n_nodes, "objective": sel.objective, "optimal": sel.optimal,
           "tuples": [{"members": list(t.members), "cost": t.cost} for t in sel.tuples]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fileio.write_json(out / "budget.json", doc)
        fileio.save_matrix(out / "init_adjacency.f32mat", init_adjacency_from_selection(sel, b.c_init))
    print(json.dumps(doc, sort_keys=True))
    return 0


def _load_run(args):
    state, extra = fileio.load_checkpoint(args.checkpoint)
    if "config" not in extra:
        raise ConfigurationError(f"{args.checkpoint} carries no run configuration")
    cfg = RunConfig.from_dict(extra["config"])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return state, cfg


def cmd_eval(args) -> int:
    state, cfg = _load_run(args)
    if state.mappings is None:
        raise ConfigurationError("checkpoint has no mappings to evaluate")
    metrics = evaluate(state, build_data(cfg))
    if args.dataset is not None:
        blocks = [b for b in metrics["datasets"] if b["dataset"] == args.dataset]
        if not blocks:
            raise ConfigurationError(f"no dataset {args.dataset} in this run")
        metrics = {"datasets": blocks, "unified": metrics["unified"]}
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_adapt(args) -> int:
    state, _ = _load_run(args)
    taxonomy = fileio.load_taxonomies(args.taxonomies)[0]
    batches = [fileio.load_pixels(p, taxonomy.dataset_id) for p in args.pixels]
    rep = adapt_unseen_dataset(state, taxonomy, batches, min_share=args.min_share)
    doc = {"mapping": fileio.mapping_to_json(rep.mapping, taxonomy),
           "unseen_classes": rep.unseen_classes, "dropped_links": [list(x) for x in rep.dropped_links]}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        fileio.save_mapping(rep.mapping, Path(args.out) / "adapted_mapping.json", taxonomy)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_export_taxonomy(args) -> int:
    state, cfg = _load_run(args)
    if state.mappings is None:
        raise ConfigurationError("checkpoint has no mappings")
    taxonomies = build_data(cfg).taxonomies
    doc = fileio.unified_taxonomy_json(state.mappings, taxonomies)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        fileio.write_json(Path(args.out) / "unified_taxonomy.json", doc)
    else:
        print(json.dumps(doc, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unilabel", description="Unified label space construction.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True, seed=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON")
        if out:
            sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")

    sp = sub.add_parser("synth-gen", help="write a planted world as dataset files")
    common(sp)
    sp.add_argument("--pixels", type=int, default=4000, help="pixels per dataset file")
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("train", help="run the full training pipeline")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("solve-mapping", help="discrete mappings from an adjacency block")
    common(sp, config=False, seed=False)
    sp.add_argument("--adjacency", required=True, help="N x |L| matrix sidecar")
    sp.add_argument("--taxonomies", required=True, nargs="+")
    sp.add_argument("--mu", type=float, default=Schedule().mu)
    sp.set_defaults(func=cmd_solve_mapping)

    sp = sub.add_parser("select-budget", help="choose the unified node count")
    common(sp)
    sp.set_defaults(func=cmd_select_budget)

    sp = sub.add_parser("eval", help="metrics for a checkpoint")
    common(sp, config=False, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("adapt", help="map a frozen model onto a new dataset")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--taxonomies", required=True)
    sp.add_argument("--pixels", required=True, nargs="+")
    sp.add_argument("--min-share", type=float, default=0.05)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("export-taxonomy", help="write the unified taxonomy of a checkpoint")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_export_taxonomy)
    return p


def command_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # argparse reports usage errors with status 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, DataError, ShapeError, OSError, ValueError,
            IndexError, RuntimeError) as exc:
        print(f"unilabel {args.command}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(command_dispatch())
