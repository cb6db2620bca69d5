import dataclasses
import json

import numpy as np
import pytest

from unilabel import fileio
from unilabel.cli import RunConfig, command_dispatch, load_config
from unilabel.errors import ConfigurationError
from unilabel.taxonomy import validate_mapping

TINY = {
    "seed": 1,
    "schedule": {"multihead_iters": 40, "gnn_iters": 10, "seg_iters": 10, "cycles": 1,
                 "final_iters": 20, "pixels_per_dataset": 16, "eval_pixels": 64},
    "data": {"report_pixels": 200},
}


def write_config(tmp_path, doc=TINY):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert command_dispatch(["train", "--config", str(cfg), "--out", str(tmp / "out")]) == 0
    return tmp / "out", cfg


def test_config_defaults_match_documented_values():
    expected = {
        "schedule": dict(multihead_iters=2000, gnn_iters=500, seg_iters=500, cycles=3, final_iters=2000,
                         lr_multihead=0.01, lr_gnn=0.005, lr_seg=0.01, lr_final=0.01, momentum=0.9,
                         warmup_frac=0.05, lambda_ce=1.0, lambda_orth=0.1, mu=0.5,
                         pixels_per_dataset=64, eval_pixels=512, prune_at=0.75, seed=0),
        "model": dict(d_text=32, d_embed=16, hidden=32, d_obs=12),
        "solver": dict(epsilon=0.05, tau=1.0, max_iters=500, tol=1e-9),
        "budget": dict(lam=0.5, iou_floor=0.2, c_init=10.0, exact_limit=24, node_count=None),
    }
    cfg = RunConfig()
    for section, values in expected.items():
        obj = getattr(cfg, section)
        assert {f.name for f in dataclasses.fields(obj)} == set(values), section
        for name, val in values.items():
            assert getattr(obj, name) == val, f"{section}.{name}"


def test_config_round_trip_and_strictness(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.schedule.multihead_iters == 40 and cfg.schedule.seed == 1
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigurationError, match="unknown"):
        RunConfig.from_dict({"schedul": {}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"schedule": {"cycles": "three"}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"schedule": {"cycles": 0}})
    with pytest.raises(ConfigurationError, match="does not exist"):
        RunConfig.from_dict({"data": {"synthetic": False, "taxonomies": ["nope.json"], "pixels": ["p.npz"]}})


def test_usage_errors_exit_two(capsys):
    assert command_dispatch(["frobnicate"]) == 2
    assert command_dispatch(["train", "--bogus"]) == 2
    assert command_dispatch([]) == 2
    assert "usage" in capsys.readouterr().err


def test_handled_errors_exit_one_with_diagnostic(tmp_path, capsys):
    assert command_dispatch(["train"]) == 1
    assert "needs --out" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert command_dispatch(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_train_writes_artifacts(trained):
    out, _ = trained
    names = {p.name for p in out.iterdir()}
    assert {"unified_taxonomy.json", "report.json", "checkpoint.ckpt", "taxonomies.json",
            "log.jsonl", "mapping_0.json", "mapping_1.json", "mapping_2.json"} <= names
    assert "run.lock" not in names
    taxonomies = fileio.load_taxonomies(out / "taxonomies.json")
    for i, t in enumerate(taxonomies):
        assert validate_mapping(fileio.load_mapping(out / f"mapping_{i}.json"), t).ok
    report = json.loads((out / "report.json").read_text())
    assert len(report["metrics"]["datasets"]) == 3 and "recovery_f1" in report["metrics"]["unified"]
    assert report["config"]["seed"] == 1 and report["loss_curve"]
    lines = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
    assert len(lines) == report["steps"]
    assert {"step", "stage", "loss", "time"} <= set(lines[0])


def test_train_is_reproducible(trained, tmp_path):
    out, cfg = trained
    assert command_dispatch(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("checkpoint.ckpt", "report.json", "unified_taxonomy.json", "mapping_0.json"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_re_export_is_byte_identical(trained, tmp_path):
    from unilabel.cli import build_data, export_results
    out, _ = trained
    state, extra = fileio.load_checkpoint(out / "checkpoint.ckpt")
    cfg = RunConfig.from_dict(extra["config"])
    report = json.loads((out / "report.json").read_text())
    taxonomies = build_data(cfg).taxonomies
    export_results(state, state.mappings, report, tmp_path, taxonomies, cfg)
    for name in ("checkpoint.ckpt", "report.json", "unified_taxonomy.json", "taxonomies.json",
                 "mapping_1.json"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_eval_prints_metrics_block(trained, capsys):
    out, _ = trained
    capsys.readouterr()
    assert command_dispatch(["eval", "--checkpoint", str(out / "checkpoint.ckpt"), "--dataset", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [b["dataset"] for b in doc["datasets"]] == [1]
    report = json.loads((out / "report.json").read_text())
    assert doc["unified"] == report["metrics"]["unified"]
    assert command_dispatch(["eval", "--checkpoint", str(out / "checkpoint.ckpt"), "--dataset", "9"]) == 1


def test_export_taxonomy(trained, tmp_path):
    out, _ = trained
    assert command_dispatch(["export-taxonomy", "--checkpoint", str(out / "checkpoint.ckpt"),
                             "--out", str(tmp_path)]) == 0
    assert (tmp_path / "unified_taxonomy.json").read_bytes() == (out / "unified_taxonomy.json").read_bytes()


def test_synth_gen_then_solve_mapping(tmp_path, capsys):
    world_dir = tmp_path / "world"
    assert command_dispatch(["synth-gen", "--out", str(world_dir), "--seed", "3", "--pixels", "50"]) == 0
    taxonomies = fileio.load_taxonomies(world_dir / "taxonomies.json")
    assert len(taxonomies) == 3
    assert fileio.load_pixels(world_dir / "pixels_2.npz").observations.shape == (50, 12)
    rng = np.random.default_rng(0)
    fileio.save_matrix(tmp_path / "a.f32mat", rng.random((9, sum(len(t) for t in taxonomies))))
    capsys.readouterr()
    rc = command_dispatch(["solve-mapping", "--adjacency", str(tmp_path / "a.f32mat"),
                           "--taxonomies", str(world_dir / "taxonomies.json"), "--out", str(tmp_path / "m")])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert all(r["valid"] for r in doc["mappings"])
    for i, t in enumerate(taxonomies):
        assert validate_mapping(fileio.load_mapping(tmp_path / "m" / f"mapping_{i}.json"), t).ok
    fileio.save_matrix(tmp_path / "bad.f32mat", np.ones((9, 3)))
    assert command_dispatch(["solve-mapping", "--adjacency", str(tmp_path / "bad.f32mat"),
                             "--taxonomies", str(world_dir / "taxonomies.json")]) == 1


def test_file_backed_training_and_adapt(tmp_path, capsys):
    world_dir = tmp_path / "world"
    assert command_dispatch(["synth-gen", "--out", str(world_dir), "--seed", "2", "--pixels", "300"]) == 0
    doc = dict(TINY, data={"synthetic": False, "taxonomies": ["world/taxonomies.json"],
                           "pixels": [f"world/pixels_{i}.npz" for i in range(3)],
                           "eval_pixels": [f"world/eval_{i}.npz" for i in range(3)]})
    cfg = write_config(tmp_path, doc)
    assert command_dispatch(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert "recovery_f1" not in report["metrics"]["unified"]
    capsys.readouterr()
    one = tmp_path / "one.json"
    full = json.loads((world_dir / "taxonomies.json").read_text())
    one.write_text(json.dumps({"datasets": full["datasets"][:1]}))
    rc = command_dispatch(["adapt", "--checkpoint", str(tmp_path / "run" / "checkpoint.ckpt"),
                           "--taxonomies", str(one), "--pixels", str(world_dir / "eval_0.npz")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mapping"]["n_classes"] == 8


def test_select_budget_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    capsys.readouterr()
    assert command_dispatch(["select-budget", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_nodes"] >= 8 and doc["optimal"]
    raw = fileio.load_matrix(tmp_path / "b" / "init_adjacency.f32mat")
    assert raw.shape == (doc["n_nodes"], 21)


def test_locked_output_directory_refused(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "run.lock").touch()
    assert command_dispatch(["train", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 1
