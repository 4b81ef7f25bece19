import csv
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedunlearn import config
from fedunlearn.cli import EXIT_ARTIFACTS, EXIT_CONFIG, EXIT_CRYPTO, EXIT_DATA, EXIT_OK, main
from fedunlearn.fedsim import ConfigInvalid

TINY = """
[data]
source = "blobs"
num_classes = 4
n = 400
dim = 8
spread = 0.1

[federation]
num_clients = 3
rounds = 5
kappa = 8
unlearn_start = 3
unlearn_window = 2
dirichlet_alpha = 1.0
hidden = [6]

[forget]
mode = "class"
classes = [3]

[run]
retrain_seed_b = 1
"""


# --- config -------------------------------------------------------------------------


def test_defaults_validate():
    cfg = config.ExperimentConfig().validate()
    assert cfg.federation.kappa == 64 and cfg.train.batch_size == 64


def test_roundtrip_value_identical():
    cfg = config.loads(TINY)
    assert config.loads(config.dumps(cfg)) == cfg


@given(st.integers(1, 50), st.integers(2, 128), st.floats(0.05, 1.0), st.sampled_from(["sample", "class"]))
def test_roundtrip_property(n, kappa, rho, mode):
    cfg = config.from_dict(
        {"federation": {"num_clients": n, "kappa": kappa, "participation": rho, "num_unlearn_clients": 1},
         "forget": {"mode": mode}}
    )
    assert config.loads(config.dumps(cfg)) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "[federation]\nkapa = 3\n",
        "[fed]\nkappa = 3\n",
        "[federation]\nkappa = \"3\"\n",
        "[federation]\nrounds = 10\nunlearn_start = 10\n",
        "[forget]\nmode = \"everything\"\n",
        "[data]\nsource = \"idx\"\n",
        "not toml = = 1",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigInvalid):
        config.loads(text)


def test_env_override():
    env = {"FEDUNLEARN_FEDERATION_KAPPA": "16", "FEDUNLEARN_FORGET_MODE": "sample", "PATH": "/bin"}
    cfg = config.loads(TINY, environ=env)
    assert cfg.federation.kappa == 16 and cfg.forget.mode == "sample"
    with pytest.raises(ConfigInvalid):
        config.loads(TINY, environ={"FEDUNLEARN_NOPE_X": "1"})


# --- CLI ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["run", "--config", str(cfg), "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def test_run_layout(tiny_run):
    root, _ = tiny_run
    run = root / "run"
    for name in ("config.toml", "rounds.jsonl", "metrics.json", "retrain_rounds.jsonl"):
        assert (run / name).exists()
    for name in ("final.ckpt", "retrain.ckpt", "retrain_b.ckpt"):
        assert (run / "checkpoints" / name).exists()
    assert len(list((run / "checkpoints" / "rounds").glob("*.ckpt"))) == 5
    metrics = json.loads((run / "metrics.json").read_text())
    assert {"efu", "retrain", "retrain_b", "epsilon", "epsilon_retrain_pair"} <= set(metrics)
    assert len((run / "rounds.jsonl").read_text().splitlines()) == 5


def test_run_deterministic(tiny_run):
    root, cfg = tiny_run
    assert main(["run", "--config", str(cfg), "--out", str(root / "again")]) == EXIT_OK
    a = json.loads((root / "run" / "metrics.json").read_text())["efu"]["metadata"]["digest"]
    b = json.loads((root / "again" / "metrics.json").read_text())["efu"]["metadata"]["digest"]
    assert a == b
    assert (root / "run" / "checkpoints" / "final.ckpt").read_bytes() == (root / "again" / "checkpoints" / "final.ckpt").read_bytes()


def test_analyze_reports(tiny_run):
    root, _ = tiny_run
    run = root / "run"
    assert main(["analyze", str(run)]) == EXIT_OK
    rep = run / "reports"
    with open(rep / "drift.csv") as fh:
        assert len(list(csv.reader(fh))) - 1 == 5 - 1
    with open(rep / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "Acc", "Acc_f"] and len(rows) == 3
    for name in ("comm.csv", "timing.csv", "timing_summary.json", "indistinguishability.json", "epsilon.json"):
        assert (rep / name).exists()
    assert json.loads((rep / "indistinguishability.json").read_text())["ciphertext_lengths_equal"]


def test_analyze_against_itself_is_zero(tiny_run):
    root, _ = tiny_run
    run = root / "run"
    out = root / "self_reports"
    assert main(["analyze", str(run), "--counterfactual", str(run), "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "epsilon.json").read_text())["epsilon"] == 0.0


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[federation]\nrounds = 5\nunlearn_start = 5\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"

    assert main(["analyze", str(tmp_path / "nothing")]) == EXIT_ARTIFACTS

    idx = tmp_path / "idx"
    idx.mkdir()
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "test-images-idx3-ubyte", "test-labels-idx1-ubyte"):
        (idx / name).write_bytes(b"\x00\x00\x08\x03\x00")
    assert main(["datagen", "--source", "idx", "--path", str(idx), "--out", str(tmp_path / "b")]) == EXIT_DATA

    crypto = tmp_path / "crypto.toml"
    crypto.write_text(TINY + "\n[crypto]\nsecurity_level = 77\n")
    assert main(["run", "--config", str(crypto), "--out", str(tmp_path / "c")]) == EXIT_CRYPTO


def test_datagen_blobs_and_idx(tmp_path):
    assert main(["datagen", "--source", "blobs", "--out", str(tmp_path / "blobs")]) == EXIT_OK
    assert (tmp_path / "blobs" / "bundle.npz").exists()
    assert main(["datagen", "--idx", "--out", str(tmp_path / "idx")]) == EXIT_OK
    assert (tmp_path / "idx" / "train-images-idx3-ubyte").exists()
    assert main(["datagen", "--source", "idx", "--path", str(tmp_path / "idx"), "--out", str(tmp_path / "b2")]) == EXIT_OK
