import json

import numpy as np
import pytest

from drivelm.cli import main
from drivelm.dataset import read_record

TINY = ["--preset", "planning", "--set", "data.n_seq=4", "--set", "tokenizer.D=16", "--set", "tokenizer.iters=3",
        "--set", "codec.M=4", "--set", "model.vocab=28", "--set", "model.width=16", "--set", "model.layers=1",
        "--set", "model.heads=2", "--set", "train.steps=3", "--set", "train.eval_every=3",
        "--set", "eval.n_scenarios=2"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", *TINY, "--out", str(root / "d")]) == 0
    assert main(["fit", *TINY, "--data", str(root / "d")]) == 0
    assert main(["train", *TINY, "--data", str(root / "d"), "--out", str(root / "m")]) == 0
    nopos = TINY + ["--set", "train.action_positions=false"]
    assert main(["train", *nopos, "--data", str(root / "d"), "--out", str(root / "v")]) == 0
    return root


def test_gen_data_byte_identical(pipeline, tmp_path):
    assert main(["gen-data", *TINY, "--out", str(tmp_path / "d")]) == 0
    for name in ["raw.json", "raw/seq_00002.npz", "scenarios/seq_00001.json"]:
        assert (tmp_path / "d" / name).read_bytes() == (pipeline / "d" / name).read_bytes(), name
    stamp = json.loads((tmp_path / "d" / "stamp.json").read_text())
    assert stamp["config_digest"] == json.loads((pipeline / "d" / "stamp.json").read_text())["config_digest"]


def test_train_outputs(pipeline):
    for name in ["model.dgck", "codebook.dgcb", "codec.json", "train_log.json", "stamp.json", "config.json"]:
        assert (pipeline / "m" / name).exists(), name
    assert json.loads((pipeline / "m" / "train_log.json").read_text())["steps"] == 3


def test_generate(pipeline, tmp_path):
    out = tmp_path / "g"
    assert main(["generate", *TINY, "--checkpoint", str(pipeline / "m"), "--data", str(pipeline / "d"),
                 "--total-frames", "5", "--dump-frames", "--out", str(out)]) == 0
    toks, acts, tpf = read_record(out / "rollout.dgsq")
    assert tpf == 19 and toks.size == 5 * 19 and acts.shape == (5, 3)
    assert len(list((out / "frames").glob("*.png"))) == 8 + 5


def test_plan(pipeline, tmp_path):
    scen = pipeline / "d" / "scenarios" / "seq_00000.json"
    assert main(["plan", *TINY, "--checkpoint", str(pipeline / "m"), "--scenario", str(scen),
                 "--out", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p" / "trajectory.json").read_text())
    assert len(doc["actions"]) == 8 and len(doc["poses"]) == 8 and 0 <= doc["scores"]["pdms"] <= 1
    assert np.all(np.array(doc["bins"]) < 4)


def test_evaluate_and_ablate(pipeline, tmp_path, capsys):
    assert main(["evaluate", *TINY, "--checkpoint", str(pipeline / "m"), "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(rep["per_scenario"]) == 2
    assert main(["ablate", *TINY, "--checkpoint", str(pipeline / "m"), "--variant", str(pipeline / "v"),
                 "--out", str(tmp_path / "a")]) == 0
    table = (tmp_path / "a" / "table.txt").read_text()
    rows = [line.split("|")[0].strip() for line in table.splitlines()[2:]]
    assert rows == ["model", "copy-x", "copy-y", "copy-theta", "copy-all", "const-vel", "no-action-posemb"]
    assert "PDMS" in capsys.readouterr().out


def test_errors_are_records(pipeline, tmp_path, capsys):
    out = tmp_path / "x"
    out.mkdir()
    assert main(["train", *TINY, "--set", "model.context=10", "--data", str(pipeline / "d"), "--out", str(out)]) == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["ok"] is False and any("model.context" in p for p in rec["problems"])
    assert json.loads((out / "error.json").read_text())["error"] == "ConfigError"
    assert main(["plan", *TINY, "--checkpoint", str(tmp_path / "nope"), "--scenario", "missing.json",
                 "--out", str(out)]) == 1
    assert main(["ablate", *TINY, "--checkpoint", str(pipeline / "m"), "--which", "no-action-posemb",
                 "--out", str(out)]) == 1
    assert "variant" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]
    # a variant trained with positions is refused
    assert main(["ablate", *TINY, "--checkpoint", str(pipeline / "m"), "--which", "no-action-posemb",
                 "--variant", str(pipeline / "m"), "--out", str(out)]) == 1


def test_env_config(pipeline, tmp_path, monkeypatch):
    from drivelm.config import apply_overrides, preset
    cfg = apply_overrides(preset("planning"), [a for a in TINY[3::2]] + ["seed=7"])
    cfg.save(tmp_path / "c.json")
    monkeypatch.setenv("DRIVELM_CONFIG", str(tmp_path / "c.json"))
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "config.json").read_text())["seed"] == 7
