import csv
import json
import statistics

import numpy as np
import pytest

from cbdistill.cli import main
from cbdistill.config import RunConfig, default_composition, load_config
from cbdistill.data import ConfigError, load
from cbdistill.eval import CSV_HEADER
from cbdistill.model import load_model

TINY = ["profile.num_classes=4", "profile.head_count=30", "profile.tail_count=5",
        "profile.feature_dim=6", "profile.test_per_class=10",
        "epochs_stage1=2", "epochs_stage2=2", "batch_size=32"]


def sets(*extra):
    out = []
    for kv in list(TINY) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


# --- config ----------------------------------------------------------------

def test_defaults():
    cfg = load_config()
    assert (cfg.method, cfg.alpha, cfg.beta, cfg.temperature, cfg.gamma, cfg.K) == \
        ("cbd", 0.4, 100.0, 2.0, 16.0, 4)


def test_toml_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('method = "crt"\nalpha = 0.2\n[profile]\nnum_classes = 5\n')
    cfg = load_config(p, ["alpha=0.6", "profile.head_count=50"])
    assert cfg.method == "crt" and cfg.alpha == 0.6
    assert cfg.profile.num_classes == 5 and cfg.profile.head_count == 50


@pytest.mark.parametrize("override, fragment", [
    ("alpha=1.5", "alpha"), ("method='resnet'", "method"), ("bogus=1", "bogus"),
    ("profile.bogus=1", "bogus"), ("K=0", "K"),
])
def test_invalid_config(override, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, [override])


def test_default_composition():
    assert default_composition(1) == ["data_aug"]
    assert default_composition(2) == ["standard", "data_aug"]
    assert default_composition(4) == ["standard", "standard", "data_aug", "data_aug"]
    assert RunConfig(method="cbd").validate().teachers() == ["standard"]


def test_digest_tracks_values():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig().digest() != RunConfig(alpha=0.5).digest()


# --- synth -----------------------------------------------------------------

def test_synth_files_and_determinism(tmp_path, capsys):
    args = ["synth", "--classes", "20", "--head", "200", "--tail", "5", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train = load(tmp_path / "a" / "train.csv")
    assert train.class_counts[0] == 200 and train.class_counts[-1] == 5
    assert "train counts: 200" in capsys.readouterr().out
    assert not list(tmp_path.rglob("*.partial"))


def test_synth_one_class_is_usage_error(tmp_path):
    assert main(["synth", "--classes", "1", "--out", str(tmp_path)]) == 2


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 2


# --- train -----------------------------------------------------------------

def test_train_writes_outputs(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), *sets("method='cbd'")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["method"] == "cbd" and report["config"]["alpha"] == 0.4
    for name in ("report.json", "report.csv", "model.npz", "teacher_0.npz"):
        assert (tmp_path / name).exists()
    _, meta = load_model(tmp_path / "model.npz")
    assert meta["config_hash"]


def test_train_invalid_alpha(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "alpha=1.5"]) == 2
    assert "alpha" in capsys.readouterr().err


def test_train_unknown_key_named(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "learning_rate=0.1"]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_nan_exit_one(tmp_path):
    assert main(["train", "--out", str(tmp_path), *sets("method='instance'", "lr0=1e308")]) == 1


def test_train_reports_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / d), *sets("method='crt'")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "model.npz").read_bytes() == (tmp_path / "b" / "model.npz").read_bytes()


def test_train_from_dataset_dir(tmp_path):
    assert main(["synth", "--classes", "3", "--head", "20", "--tail", "4", "--dim", "5",
                 "--test-per-class", "5", "--out", str(tmp_path / "data")]) == 0
    p = tmp_path / "c.toml"
    p.write_text(f'method = "instance"\nepochs_stage1 = 2\ndataset_path = "{tmp_path / "data"}"\n'
                 'split_thresholds = {many = 10, few = 5}\n')
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    r = json.loads((tmp_path / "o" / "report.json").read_text())
    assert r["split_thresholds"] == {"many": 10, "few": 5}
    assert main(["train", "--config", str(p), "--set", "profile=false", "--out", str(tmp_path)]) == 2


def test_teacher_ensemble_method(tmp_path):
    assert main(["train", "--out", str(tmp_path), *sets("method='teacher_ensemble'", "K=2")]) == 0
    r = json.loads((tmp_path / "report.json").read_text())
    assert r["ncm_overall_acc"] is None
    assert (tmp_path / "teacher_1.npz").exists()


# --- ablate ----------------------------------------------------------------

def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ablate_alpha_rows(tmp_path):
    assert main(["ablate", "--axis", "alpha", "--grid", "0,1", "--modes", "feature,classifier",
                 "--out", str(tmp_path), *sets()]) == 0
    rows = read_rows(tmp_path / "sweep_alpha.csv")
    assert rows[0] == ["alpha", "distill_mode", *CSV_HEADER]
    assert len(rows) - 1 == 2 * 2
    assert {r[1] for r in rows[1:]} == {"feature", "classifier"}


def test_ablate_beta_default_grid(tmp_path):
    assert main(["ablate", "--axis", "beta", "--out", str(tmp_path),
                 *sets("epochs_stage1=1", "epochs_stage2=1")]) == 0
    values = [float(r[0]) for r in read_rows(tmp_path / "sweep_beta.csv")[1:]]
    assert values == [1.0, 10.0, 100.0, 1000.0]


def test_ablate_multi_axis_is_usage_error(tmp_path):
    assert main(["ablate", "--axis", "alpha", "--axis", "beta", "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--axis", "alpha,beta", "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--axis", "gamma", "--out", str(tmp_path)]) == 2


def test_ensemble_grid_covers_k1_to_k4():
    from cbdistill.cli import COMPOSITION_GRID
    assert {len(c) for c in COMPOSITION_GRID} == {1, 2, 3, 4}


# --- suite / report ----------------------------------------------------------

def test_suite_counts_and_aggregate(tmp_path):
    assert main(["suite", "--seeds", "0", "1", "--methods", "instance,class_balanced",
                 "--out", str(tmp_path), *sets()]) == 0
    runs = sorted((tmp_path / "runs").glob("*.json"))
    assert len(runs) == 4 and len(list((tmp_path / "runs").glob("*.csv"))) == 4
    agg = read_rows(tmp_path / "aggregate.csv")
    header, body = agg[0], {r[0]: r for r in agg[1:]}
    assert header[:4] == ["method", "n", "overall_acc_mean", "overall_acc_std"]
    vals = [json.loads(p.read_text())["overall_acc"] for p in runs if p.name.startswith("instance")]
    assert float(body["instance"][2]) == pytest.approx(np.mean(vals), abs=1e-12)
    assert float(body["instance"][3]) == pytest.approx(statistics.stdev(vals), abs=1e-12)


def test_single_seed_std_is_zero(tmp_path):
    assert main(["suite", "--seeds", "3", "--methods", "instance", "--out", str(tmp_path), *sets()]) == 0
    row = read_rows(tmp_path / "aggregate.csv")[1]
    assert row[1] == "1" and float(row[3]) == 0.0
    assert main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "agg2.csv")]) == 0
    assert read_rows(tmp_path / "agg2.csv") == read_rows(tmp_path / "aggregate.csv")


def test_suite_unknown_method(tmp_path):
    assert main(["suite", "--methods", "dino", "--out", str(tmp_path)]) == 2
