import csv
import hashlib
import json

import pytest
import yaml

from chebgnn.cli import DEFAULTS, MANIFEST_SCHEMA, main, parse_override, resolve_config

TINY = ["--set", "dataset.n_graphs=24", "--set", "dataset.sbm.max_size=8"]
TRAIN = ["--set", "model.arch=7 -E8 -ChN8 -L6", "--set", "train.max_epochs=2", "--set", "train.seeds=[1, 2]"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def dataset(tmp_path):
    assert main(["generate", "-o", str(tmp_path / "gen"), *TINY]) == 0
    return tmp_path / "gen" / "dataset.jsonl"


class TestConfig:
    def test_precedence(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text(yaml.safe_dump({"train": {"max_epochs": 7, "lr0": 0.01}, "seed": 3}))
        cfg = resolve_config(f, ["train.max_epochs=9"], {"seed": 5})
        assert cfg["train"]["max_epochs"] == 9  # CLI beats file
        assert cfg["train"]["lr0"] == 0.01  # file beats default
        assert cfg["train"]["batch_size"] == DEFAULTS["train"]["batch_size"]
        assert cfg["seed"] == 5

    def test_override_parsing(self):
        assert parse_override("train.seeds=[1, 2]") == {"train": {"seeds": [1, 2]}}
        assert parse_override("model.arch=7 -E8 -L6") == {"model": {"arch": "7 -E8 -L6"}}

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["params", "--set", "model.bogus=1"]) == 1
        assert "unknown config key 'model.bogus'" in capsys.readouterr().err

    def test_yaml_exponent_strings(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("train:\n  min_lr: 1e-5\n  max_epochs: 1\n")
        out = tmp_path / "o"
        assert main(["params", "-c", str(f), "-o", str(out)]) == 0


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "-o", str(tmp_path / name), *TINY, "--seed", "4"]) == 0
        assert digest(tmp_path / "a" / "dataset.jsonl") == digest(tmp_path / "b" / "dataset.jsonl")

    def test_defaults_vocab_and_count(self, dataset):
        lines = dataset.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["input_dim"] == 7 and header["n_graphs"] == 24 and len(lines) == 25

    def test_manifest(self, dataset):
        m = json.loads((dataset.parent / "manifest.json").read_text())
        assert m["schema"] == MANIFEST_SCHEMA and m["command"] == "generate"
        assert m["artifacts"]["dataset.jsonl"] == digest(dataset)
        assert m["config"]["dataset"]["n_graphs"] == 24

    def test_pattern(self, tmp_path):
        out = tmp_path / "p"
        assert main(["generate", "-o", str(out), "--set", "dataset.kind=pattern", "--set", "dataset.n_graphs=4"]) == 0
        assert json.loads((out / "dataset.jsonl").read_text().splitlines()[0])["input_dim"] == 3


class TestTrainEval:
    def test_train_outputs_and_rerun(self, tmp_path, dataset, capsys):
        out = tmp_path / "tr"
        assert main(["train", "--dataset", str(dataset), "-o", str(out), *TRAIN]) == 0
        with open(out / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["seed"] for r in rows] == ["1", "2"]
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["per_seed"]) == 2 and "mean" in summary and "std" in summary
        assert "+-" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"checkpoint_seed1.npz", "epochs_seed2.csv", "summary.json"} <= set(manifest["artifacts"])
        assert manifest["inputs"]["dataset.path"] == digest(dataset)

        # the manifest alone reproduces every artifact, serially or in worker processes
        for name, extra in (("again", []), ("parallel", ["--set", "train.workers=2"])):
            assert main(["train", "-c", str(out / "manifest.json"), "-o", str(tmp_path / name), *extra]) == 0
            again = json.loads((tmp_path / name / "manifest.json").read_text())
            assert again["artifacts"] == manifest["artifacts"]

    def test_eval(self, tmp_path, dataset, capsys):
        out = tmp_path / "tr"
        main(["train", "--dataset", str(dataset), "-o", str(out), *TRAIN])
        capsys.readouterr()
        for name in ("e1", "e2"):
            assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(out), "-o", str(tmp_path / name)]) == 0
        e1 = json.loads((tmp_path / "e1" / "eval.json").read_text())
        assert e1 == json.loads((tmp_path / "e2" / "eval.json").read_text())
        assert e1["seeds"] == [1, 2]
        # evaluating the restored best checkpoint on the test split reproduces the training report
        train_summary = json.loads((out / "summary.json").read_text())
        assert e1["per_seed"] == train_summary["per_seed"]

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["train", "--dataset", str(tmp_path / "nope.jsonl"), "-o", str(tmp_path / "x")]) == 1
        assert "no such file" in capsys.readouterr().err

    def test_wrong_vocab(self, tmp_path, dataset, capsys):
        out = tmp_path / "tr"
        main(["train", "--dataset", str(dataset), "-o", str(out), *TRAIN])
        pat = tmp_path / "p"
        main(["generate", "-o", str(pat), "--set", "dataset.kind=pattern", "--set", "dataset.n_graphs=4"])
        capsys.readouterr()
        assert main(["eval", "--dataset", str(pat / "dataset.jsonl"), "--checkpoint", str(out)]) == 1
        assert "vocabulary" in capsys.readouterr().err

    def test_divergence_exit_status(self, tmp_path, dataset):
        args = ["train", "--dataset", str(dataset), "-o", str(tmp_path / "d"), *TRAIN, "--set", "train.lr0=1e308"]
        with pytest.warns(RuntimeWarning):
            assert main(args) == 1
        assert "diverged" in (tmp_path / "d" / "results.csv").read_text()


class TestParams:
    @pytest.mark.parametrize(
        "arch,task,k,count",
        [
            ("7 -E70 -ChN70 -ChN70 -ChN70 -ChN70 -MP70 -L35 -L17 -L6", "node-classification", 5, 102535),
            ("3 -E70 -ChN70 -ChN70 -ChN70 -ChN70 -MP70 -L35 -L17 -L2", "node-classification", 5, 102183),
            ("28 -E106 -ChN106 -ChN106 -ChN106 -ChN106 -MP106 -L53 -L26 -L1 (No-RC)", "graph-regression", 2, 101230),
        ],
    )
    def test_counts(self, capsys, arch, task, k, count):
        assert main(["params", "--arch", arch, "--set", f"model.task={task}", "--set", f"model.k={k}"]) == 0
        assert capsys.readouterr().out.strip() == str(count)

    def test_bad_spec(self, capsys):
        assert main(["params", "--arch", "7 -E70 -Q5"]) == 1
        assert "Q5" in capsys.readouterr().err


class TestExperiments:
    def test_stability(self, tmp_path):
        out = tmp_path / "st"
        args = ["stability", "-o", str(out), "--set", "stability.trials=2", "--set", "stability.community_size=10"]
        assert main(args) == 0
        lines = (out / "stability.csv").read_text().splitlines()
        assert lines[1] == "epsilon,realized_norm,mean_distance,std_distance,ratio"
        summary = json.loads((out / "stability.json").read_text())
        assert summary["slope"] >= 0.9 and summary["max_ratio"] <= summary["lipschitz_bound"]

    def test_stability_rejects_eps(self, tmp_path, capsys):
        assert main(["stability", "-o", str(tmp_path / "s"), "--set", "stability.eps=[2.0]"]) == 1
        assert "epsilon" in capsys.readouterr().err

    def test_transfer(self, tmp_path):
        out = tmp_path / "tf"
        args = [
            "transfer", "-o", str(out), *TRAIN,
            "--set", "transfer.n_train_graphs=24", "--set", "transfer.n_eval_graphs=6",
            "--set", "transfer.train_sizes=[3, 4]", "--set", "transfer.eval_sizes=[6, 8]",
        ]
        assert main(args) == 0
        rep = json.loads((out / "transfer.json").read_text())
        assert rep["gap"] == pytest.approx(rep["small"]["mean"] - rep["large"]["mean"])
        assert len(rep["large"]["per_seed"]) == 2

    def test_no_out_dir(self, capsys):
        assert main(["stability"]) == 1
        assert "--out" in capsys.readouterr().err
