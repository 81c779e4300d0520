import json

import numpy as np
import pytest

from genpano.cli import DEFAULTS, RunConfig, build_parser, main
from genpano.errors import ConfigError
from genpano.scene_io import load_panorama

TINY = {
    "scene": {"pano_dims": [256, 512]},
    "backbone": {"channels": [8, 16], "d_ctx": 16, "heads": 2, "ctx_hidden": 8,
                 "pretrain": {"steps": 2, "batch_size": 2, "texture_dims": [128, 128]}},
    "train": {"iterations": 3, "batch_size": 2, "crop_size": 64, "checkpoint_every": 0},
    "generation": {"tile": 64, "steps": 2},
    "selection": {"seeds": 2},
}


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_cfg):
    ws = tmp_path_factory.mktemp("ws") / "run"
    base = ["--workspace", str(ws), "--config", tiny_cfg]
    codes = {cmd: main([cmd] + base) for cmd in ("synth", "layout", "train", "select", "evaluate")}
    return ws, codes, base


# -- configuration -------------------------------------------------------

def test_precedence_and_provenance():
    rc = RunConfig.resolve({"generation": {"guidance": 2.0, "overlap": 0.3}}, {"generation.guidance": 3.0})
    assert rc.get("generation.guidance") == 3.0 and rc.provenance["generation.guidance"] == "flag"
    assert rc.get("generation.overlap") == 0.3 and rc.provenance["generation.overlap"] == "file"
    assert rc.get("generation.steps") == 50 and rc.provenance["generation.steps"] == "default"
    assert rc.provenance["backbone.codec"] == "default"
    assert DEFAULTS["generation"]["guidance"] == 1.5


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig.resolve({"generation": {"gudiance": 2.0}})


def test_flags_map_to_config_keys():
    args = build_parser().parse_args(["select", "--guidance", "2", "--seeds", "4", "--tiles", "64"])
    v = vars(args)
    assert v["generation.guidance"] == 2.0 and v["selection.seeds"] == 4 and v["generation.tile"] == 64


# -- exit codes ------------------------------------------------------------

def test_missing_workspace_is_config_error(monkeypatch, capsys):
    monkeypatch.delenv("GENPANO_WORKSPACE", raising=False)
    assert main(["synth"]) == 1
    assert "workspace" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--workspace", str(tmp_path / "w"), "--config", str(bad)]) == 1
    assert main(["synth", "--workspace", str(tmp_path / "w"), "--config", str(tmp_path / "none.json")]) == 3


def test_missing_inputs(tmp_path):
    assert main(["layout", "--workspace", str(tmp_path)]) == 3
    assert main(["generate", "--workspace", str(tmp_path)]) == 2


# -- end to end ------------------------------------------------------------

def test_pipeline_runs(pipeline):
    ws, codes, _ = pipeline
    assert codes == {c: 0 for c in codes}
    for f in ("scene/groundtruth.png", "manifest.json", "sparse/view_01.png", "checkpoints/base.safetensors",
              "checkpoints/final.safetensors", "checkpoints/loss.csv", "select/selected.png",
              "select/scores.csv", "eval/report.json", "eval/report.csv"):
        assert (ws / f).exists(), f
    img, _ = load_panorama(ws / "select" / "selected.png")
    assert img.shape == (256, 512, 3)


def test_run_config_records_provenance(pipeline):
    ws, _, _ = pipeline
    rc = json.loads((ws / "select" / "run_config.json").read_text())
    assert rc["command"] == "select"
    assert rc["config"]["generation"]["tile"] == 64
    assert rc["provenance"]["generation.tile"] == "file"
    assert rc["provenance"]["generation.guidance"] == "default"


def test_existing_output_needs_force(pipeline, capsys):
    ws, _, base = pipeline
    assert main(["evaluate"] + base) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["evaluate", "--force"] + base) == 0


def test_generate_is_reproducible(pipeline):
    ws, _, base = pipeline
    assert main(["generate", "--seed", "3"] + base) == 0
    a = load_panorama(ws / "generate" / "seed_003" / "panorama.png")[0]
    assert main(["generate", "--seed", "3", "--force"] + base) == 0
    b = load_panorama(ws / "generate" / "seed_003" / "panorama.png")[0]
    assert np.array_equal(a, b)


def test_workspace_from_environment(pipeline, monkeypatch, tiny_cfg):
    ws, _, _ = pipeline
    monkeypatch.setenv("GENPANO_WORKSPACE", str(ws))
    assert main(["evaluate", "--force", "--config", tiny_cfg]) == 0


def test_manifest_mismatch(pipeline, tmp_path):
    ws, _, base = pipeline
    manifest = json.loads((ws / "manifest.json").read_text())
    saved = json.dumps(manifest)
    manifest["posenc"]["f_max"] = 10.0
    (ws / "manifest.json").write_text(json.dumps(manifest))
    try:
        assert main(["generate", "--seed", "5"] + base) == 2
    finally:
        (ws / "manifest.json").write_text(saved)
