import json

import pytest
import yaml

from plugin_defense.cli import build_parser, main
from plugin_defense.harness import read_results

MICRO = {
    "dataset": {"name": "synthetic", "n_train": 200, "n_test": 64, "channels": 1, "num_classes": 4, "size": 16},
    "victim": {"kind": "mlp", "hidden": [32], "max_epochs": 8, "floor": 0.0, "augment_shift": 0, "lr": 3e-3},
    "attack": {"steps": 2},
    "tune": {"epochs": 2},
    "subset_size": 16,
    "timing": False,
}


@pytest.fixture
def workdir(tmp_path):
    def write(name, tree):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(tree))
        return str(path)

    tree = dict(MICRO, defender={"patch": 4, "dim": 16, "layers": 1, "heads": 2})
    return tmp_path, write("exp.yaml", tree), write


def run(args, tmp_path):
    return main([*args, "--runs", str(tmp_path / "runs")])


class TestCli:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--help"])
        out = capsys.readouterr().out
        for name in ("train-victim", "gen-adv", "tune", "eval", "transfer", "suite", "curves"):
            assert name in out

    def test_pipeline(self, workdir, capsys):
        tmp, config, _ = workdir
        assert run(["train-victim", "--config", config, "--out", str(tmp / "v.ckpt")], tmp) == 0
        assert (tmp / "v.ckpt").exists()
        assert run(["gen-adv", "--config", config, "--victim", str(tmp / "v.ckpt"),
                    "--out", str(tmp / "adv.pdax")], tmp) == 0
        assert run(["tune", "--config", config, "--seed", "7", "--out", str(tmp / "t.csv")], tmp) == 0
        (row,) = read_results(tmp / "t.csv")
        assert row.seed == 7 and row.defender == "transformer"
        run_dir = next((tmp / "runs").glob("*/7"))
        assert run(["eval", "--config", config, "--defender", str(run_dir), "--out", str(tmp / "e.jsonl")], tmp) == 0
        assert read_results(tmp / "e.jsonl")[0].defender == "checkpoint"
        assert run(["curves", "--input", str(run_dir / "curve.jsonl"), "--out", str(tmp / "c.csv")], tmp) == 0
        assert (tmp / "c.csv").read_text().startswith("epoch,loss")

    def test_suite_and_stdout(self, workdir, capsys):
        tmp, _, write = workdir
        config = write("suite.yaml", dict(MICRO, seeds=[1], arms=[{"kind": "none"}, {"kind": "noise", "std": 0.06}]))
        assert run(["suite", "--config", config], tmp) == 0
        lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [r["defender"] for r in lines] == ["none", "noise-0.06"]

    def test_transfer(self, workdir):
        tmp, config, write = workdir
        assert run(["tune", "--config", config, "--seed", "3"], tmp) == 0
        source = str(next((tmp / "runs").glob("*/3")))
        target = write("transfer.yaml", {"source": source, "dataset": dict(MICRO["dataset"], seed=9),
                                         "victim": MICRO["victim"], "attack": MICRO["attack"], "subset_size": 16})
        assert run(["transfer", "--config", target, "--out", str(tmp / "x.csv")], tmp) == 0
        assert read_results(tmp / "x.csv")[0].defender.startswith("transfer:")

    def test_errors_exit_two(self, workdir, capsys):
        tmp, _, write = workdir
        assert run(["tune", "--config", write("bad.yaml", dict(MICRO, colour=1))], tmp) == 2
        assert run(["tune", "--config", write("list.yaml", [1, 2])], tmp) == 2
        assert run(["tune", "--config", str(tmp / "missing.yaml")], tmp) == 2
        assert "error:" in capsys.readouterr().err

    def test_failed_row_exit_one(self, workdir):
        tmp, _, write = workdir
        config = write("fail.yaml", dict(MICRO, defender={"patch": 4, "dim": 15, "layers": 1, "heads": 2}))
        assert run(["tune", "--config", config, "--out", str(tmp / "f.csv")], tmp) == 1
        assert read_results(tmp / "f.csv")[0].failed
