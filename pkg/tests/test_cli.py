import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from goldood.cli import main
from goldood.data import DatasetBundle, OodSet, load_dataset, save_dataset

from conftest import TOY_CONFIG


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["make-sbm", str(root / "base"), "--seed", "0"]) == 0
    assert main(["prepare", str(root / "base"), str(root / "data"), "--recipe", "feature", "--seed", "100"]) == 0
    return root


def test_prepare_is_idempotent(toy_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["prepare", str(toy_dir / "base"), str(out), "--recipe", "feature", "--seed", "100"]) == 0
    assert tree(out) == tree(toy_dir / "data")
    assert main(["prepare", str(toy_dir / "base"), str(out), "--recipe", "feature", "--seed", "100"]) == 0
    assert tree(out) == tree(toy_dir / "data")


def test_prepare_rejects_bad_class_set(toy_dir, tmp_path, capsys):
    code = main(["prepare", str(toy_dir / "base"), str(tmp_path / "x"), "--recipe", "leaveout", "--left-out", "0,1"])
    assert code == 2
    assert "left-out classes must be a proper subset" in capsys.readouterr().err


def test_prepare_leaveout(toy_dir, tmp_path):
    out = tmp_path / "lo"
    assert main(["prepare", str(toy_dir / "base"), str(out), "--recipe", "leaveout", "--left-out", "1"]) == 0
    bundle = load_dataset(out)
    assert bundle.id_graph.num_classes == 1 and set(bundle.ood_sets) == {"leaveout"}


def test_usage_errors(toy_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2
    data, out = str(toy_dir / "data"), str(tmp_path / "r")
    assert main(["train", data, out, "--set", "no.such.key=1"]) == 2
    assert main(["train", data, out, "--set", "train.M1"]) == 2
    assert main(["train", data, out, "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", data, out, "--method", "gnnsafe_pp"]) == 2
    assert main(["train", data, out, "--method", "gnnsafe_pp", "--exposure", "nope"]) == 2
    assert main(["train", data, out, "--method", "energy", "--exposure", "feature"]) == 2
    assert main(["train", str(tmp_path / "nowhere"), out]) == 2
    assert "gnnsafe_pp" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(toy_dir, tmp_path):
    args = ["train", str(toy_dir / "data"), str(tmp_path / "r"), "--set", "train.lr_gnn=1e200", "--set", "train.rounds=1"]
    assert main(args) == 3


@pytest.fixture(scope="module")
def gold_run(toy_dir):
    out = toy_dir / "gold"
    start = time.perf_counter()
    code = main(["train", str(toy_dir / "data"), str(out), "--seed", "0"])
    return code, out, time.perf_counter() - start


def test_train_gold_with_defaults(gold_run):
    code, out, seconds = gold_run
    assert code == 0 and seconds < 120
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "gold" and len(manifest["history"]) == 10
    meta = json.loads((out / "checkpoint.json").read_text())
    assert meta["generator"] == "ldm"
    with np.load(out / "checkpoint.npz") as ckpt:
        assert {n.split(".")[0] for n in ckpt.files} == {"gcn", "det", "ldm"}


def test_train_is_reproducible(toy_dir, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", str(toy_dir / "data"), str(out), "--config", str(TOY_CONFIG), "--set", "train.rounds=2"]) == 0
        runs.append(out)
    a, b = (json.loads((r / "manifest.json").read_text()) for r in runs)
    assert a["config_hash"] == b["config_hash"]
    assert sha(runs[0] / "checkpoint.npz") == sha(runs[1] / "checkpoint.npz")
    a.pop("timing"), b.pop("timing")
    assert a == b
    assert (runs[0] / "checkpoint.json").read_bytes() == (runs[1] / "checkpoint.json").read_bytes()


def test_eval_outputs(gold_run, toy_dir, tmp_path):
    _, ckpt, _ = gold_run
    for name in ("e1", "e2"):
        assert main(["eval", str(ckpt), str(toy_dir / "data"), str(tmp_path / name)]) == 0
    assert tree(tmp_path / "e1") == tree(tmp_path / "e2")
    report = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert set(report["subsets"]) == {"feature"}
    assert report["average"] == report["subsets"]["feature"]
    assert sorted(tree(tmp_path / "e1")) == ["hist_feature_energy.csv", "hist_feature_transformed.csv", "report.json"]
    header = (tmp_path / "e1" / "hist_feature_energy.csv").read_text().splitlines()[0]
    assert header == "bin_left,bin_right,count_id,count_ood,count_pood"
    rows = (tmp_path / "e1" / "hist_feature_energy.csv").read_text().splitlines()[1:]
    assert sum(int(r.split(",")[4]) for r in rows) > 0  # p-OOD column is filled


def test_eval_average_over_subsets(toy_dir, tmp_path):
    data = tmp_path / "two"
    assert main(["prepare", str(toy_dir / "data"), str(tmp_path / "one"), "--recipe", "structure", "--seed", "1"]) == 0
    # prepare on a dataset that already has OOD sets keeps them
    bundle = load_dataset(tmp_path / "one")
    assert set(bundle.ood_sets) == {"feature", "structure"}
    save_dataset(bundle, data)
    run = tmp_path / "run"
    assert main(["train", str(data), str(run), "--method", "energy", "--set", "train.baseline_epochs=30"]) == 0
    assert main(["eval", str(run), str(data), str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    for key in ("auroc", "aupr", "fpr95"):
        mean = np.mean([report["subsets"][s][key] for s in ("feature", "structure")])
        assert report["average"][key] == pytest.approx(mean)


def test_eval_perfect_separation(toy_dir, tmp_path):
    # a bias-free GCN maps all-zero features to uniform softmax, the largest possible MSP score
    bundle = load_dataset(toy_dir / "base")
    g = bundle.id_graph
    zeros = g.replace(features=np.zeros_like(g.features), masks={})
    save_dataset(DatasetBundle(g, {"blank": OodSet(zeros, np.arange(g.n))}), tmp_path / "data")
    run = tmp_path / "run"
    assert main(["train", str(tmp_path / "data"), str(run), "--method", "msp", "--set", "train.baseline_epochs=50"]) == 0
    assert main(["eval", str(run), str(tmp_path / "data"), str(tmp_path / "ev")]) == 0
    block = json.loads((tmp_path / "ev" / "report.json").read_text())["subsets"]["blank"]
    assert block["auroc"] == 100.0 and block["fpr95"] == 0.0


def test_eval_feature_mismatch(gold_run, tmp_path, capsys):
    _, ckpt, _ = gold_run
    assert main(["make-sbm", str(tmp_path / "b"), "--dim", "8", "--n-per-class", "20"]) == 0
    assert main(["prepare", str(tmp_path / "b"), str(tmp_path / "d"), "--recipe", "feature"]) == 0
    assert main(["eval", str(ckpt), str(tmp_path / "d"), str(tmp_path / "ev")]) == 2
    assert "features" in capsys.readouterr().err


def test_gnnsafe_pp_with_exposure(toy_dir, tmp_path):
    args = ["train", str(toy_dir / "data"), str(tmp_path / "r"), "--method", "gnnsafe_pp", "--exposure", "feature",
            "--set", "train.baseline_epochs=20"]
    assert main(args) == 0
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["exposure"] == "feature"


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "goldood.cli", "prepare", str(tmp_path / "none"), str(tmp_path / "o"),
                           "--recipe", "feature"], capture_output=True, text=True)
    assert proc.returncode == 2 and "does not exist" in proc.stderr
