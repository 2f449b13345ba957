import json
import math

import numpy as np
import pytest

from plugin_defense.attacks import AttackConfig
from plugin_defense.baselines import Baseline
from plugin_defense.errors import ConfigError, ContractError
from plugin_defense.harness import (CSV_COLUMNS, AdvCache, ExperimentSpec, ResultRow, RunStore, SuiteSpec,
                                    TransferSpec, default_suite, emit_results, evaluate_ca_aa, get_adv_cache,
                                    get_victim, load_config, load_dataset, read_results, run_experiment, run_suite,
                                    specs_from_dict, transfer_eval)
from plugin_defense.victims import logits_of

DATASET = {"name": "synthetic", "n_train": 200, "n_test": 64, "channels": 1, "num_classes": 4, "size": 16}
VICTIM = {"kind": "mlp", "hidden": [32], "max_epochs": 8, "floor": 0.0, "augment_shift": 0, "batch_size": 32,
          "lr": 3e-3}
ATTACK = {"steps": 2}
DEFENDER = {"kind": "defender", "patch": 4, "dim": 16, "layers": 1, "heads": 2}


def micro_spec(**kw):
    d = dict(dataset=DATASET, victim=VICTIM, attack=ATTACK, defender=DEFENDER, tune={"epochs": 2},
             seeds=[42], subset_size=16, timing=False)
    d.update(kw)
    return ExperimentSpec.from_dict(d)


@pytest.fixture(scope="module")
def micro():
    return load_dataset(DATASET)


@pytest.fixture
def store(tmp_path):
    return RunStore(tmp_path / "runs")


class TestSpecs:
    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            ExperimentSpec.from_dict({"dataset": DATASET, "colour": "red"})

    def test_sub_configs_validated(self):
        with pytest.raises(ConfigError):
            micro_spec(attack={"norm": "l0"})
        with pytest.raises(ConfigError):
            micro_spec(defender={"kind": "jpeg"})
        with pytest.raises(ConfigError):
            micro_spec(seeds=[])

    def test_hash_ignores_seeds_and_timing(self):
        a = micro_spec(seeds=[1], timing=True)
        assert a.hash() == micro_spec(seeds=[2, 3]).hash()
        assert a.hash() != micro_spec(attack={"steps": 3}).hash()

    def test_arm_labels(self):
        assert micro_spec(defender=None).arm_label == "none"
        assert micro_spec(defender={"kind": "noise", "std": 0.06}).arm_label == "noise-0.06"
        assert micro_spec(defender={"processor": "ffn"}).arm_label == "ffn"
        assert micro_spec(defender={"label": "x"}).arm_label == "x"

    def test_suite_expansion(self):
        tree = default_suite()
        specs = specs_from_dict(tree)
        assert len(specs) == 11
        labels = [s.arm_label for s in specs]
        assert labels[:5] == ["none", "rp", "noise-0.05", "noise-0.06", "noise-0.07"]
        assert labels[-1] == "transformer-without-res"
        assert specs[9].defender["dim"] == 192 and specs[9].defender["layers"] == 4
        assert not specs[10].defender["residual"]
        assert all(s.seeds == [41, 42, 43] for s in specs)

    def test_suite_over_datasets(self):
        tree = {"datasets": [{"dataset": {"name": "mnist"}}, {"dataset": DATASET, "victim": VICTIM}],
                "arms": [{"kind": "none"}, {"kind": "rp"}]}
        suites = SuiteSpec.from_dict(tree)
        assert len(suites) == 2 and suites[1].base.victim == VICTIM
        with pytest.raises(ConfigError):
            SuiteSpec.from_dict({"arms": []})

    def test_yaml(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("dataset: {name: mnist}\narms:\n  - kind: none\n  - {kind: noise, std: 0.07}\n")
        assert [s.arm_label for s in load_config(path)] == ["none", "noise-0.07"]
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestResults:
    def rows(self):
        return [ResultRow("mnist", "tiny-vit", "none", "linf-pgd", 41, 98.123, 3.0, 1.005),
                ResultRow("mnist", "tiny-vit", "rp", "linf-pgd", 41, float("nan"), float("nan"), 0.0)]

    def test_csv_exact_text(self, tmp_path):
        path = emit_results(self.rows(), tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "mnist,tiny-vit,none,linf-pgd,41,98.12,3.00,1.00"
        assert lines[2] == "mnist,tiny-vit,rp,linf-pgd,41,nan,nan,0.00"

    @pytest.mark.parametrize("name", ["r.csv", "r.jsonl"])
    def test_round_trip(self, tmp_path, name):
        back = read_results(emit_results(self.rows(), tmp_path / name))
        assert back[0] == self.rows()[0]
        assert back[1].failed and not back[0].failed

    def test_contracts(self, tmp_path):
        with pytest.raises(ContractError):
            ResultRow("d", "v", "a", "x", 1, 101.0, 0.0, 0.0)
        with pytest.raises(ContractError):
            emit_results([], tmp_path / "e.csv")
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ContractError):
            read_results(tmp_path / "bad.csv")


class TestEvaluation:
    def test_manual_oracle(self, micro, store):
        train, test = micro
        victim = get_victim(store, DATASET, VICTIM, train)
        cache = get_adv_cache(store, victim, test, AttackConfig(**ATTACK), 8)
        assert len(cache.indices) == 8
        ca = np.mean(logits_of(victim, cache.clean).argmax(1) == cache.labels)
        aa = np.mean(logits_of(victim, cache.adversarial).argmax(1) == cache.labels)
        assert evaluate_ca_aa(victim, None, cache) == (ca, aa)
        noise = Baseline("noise", seed=1, std=0.05)
        noisy = np.stack([noise(cache.clean[i:i + 1], [cache.indices[i]])[0] for i in range(8)])
        expected = np.mean(logits_of(victim, noisy).argmax(1) == cache.labels)
        assert evaluate_ca_aa(victim, noise, cache)[0] == expected

    def test_caches_are_reused(self, micro, store):
        train, test = micro
        victim = get_victim(store, DATASET, VICTIM, train)
        again = get_victim(store, DATASET, VICTIM)
        assert again.checksum() == victim.checksum()
        a = get_adv_cache(store, victim, test, AttackConfig(**ATTACK), 8)
        b = get_adv_cache(store, victim, test, AttackConfig(**ATTACK), 8)
        np.testing.assert_array_equal(a.adversarial, b.adversarial)
        assert len(list((store.root / "adv").iterdir())) == 1

    def test_checksum_mismatch(self, micro, store):
        victim = get_victim(store, DATASET, VICTIM, micro[0])
        cache = AdvCache(np.arange(2), micro[1].images[:2], micro[1].labels[:2], micro[1].images[:2], "other")
        with pytest.raises(ContractError):
            evaluate_ca_aa(victim, None, cache)


class TestRun:
    def test_rows_and_artifacts(self, micro, store):
        spec = micro_spec(seeds=[41, 42])
        rows = run_experiment(spec, store, micro)
        assert [r.seed for r in rows] == [41, 42]
        assert all(r.defender == "transformer" and r.wall_s == 0.0 and not r.failed for r in rows)
        run_dir = store.root / spec.hash() / "42"
        for name in ("curve.jsonl", "defender.ckpt", "trainset.pdax", "row.json"):
            assert (run_dir / name).exists(), name
        assert json.loads((run_dir.parent / "spec.json").read_text())["defender"]["dim"] == 16
        assert len((run_dir / "curve.jsonl").read_text().splitlines()) == 3

    def test_failure_row(self, micro, store):
        spec = micro_spec(defender={**DEFENDER, "dim": 15, "heads": 2})
        (row,) = run_experiment(spec, store, micro)
        assert row.failed and math.isnan(row.ca_pct)
        record = json.loads((store.root / spec.hash() / "42" / "row.json").read_text())
        assert record["error"].startswith("ConfigError")

    def test_suite_byte_identical(self, micro, tmp_path):
        tree = dict(dataset=DATASET, victim=VICTIM, attack=ATTACK, tune={"epochs": 2}, seeds=[42], subset_size=16,
                    timing=False, defender_defaults={"patch": 4, "dim": 16, "layers": 1, "heads": 2},
                    arms=[{"kind": "none"}, {"kind": "rp"}, {"kind": "noise"}, {"processor": "linear"}, {}])
        outputs = []
        for run in ("a", "b"):
            rows = run_suite(specs_from_dict(tree), RunStore(tmp_path / run))
            outputs.append(emit_results(rows, tmp_path / f"{run}.csv").read_bytes())
        assert outputs[0] == outputs[1]
        assert outputs[0].count(b"\n") == 6


class TestTransfer:
    def test_zero_shot_row(self, micro, store):
        spec = micro_spec()
        run_experiment(spec, store, micro)
        source = store.root / spec.hash() / "42"
        target = dict(DATASET, seed=5)
        row = transfer_eval(TransferSpec(str(source), target, VICTIM, ATTACK, subset_size=16), store)
        assert row.dataset == "synthetic" and row.defender == "transfer:transformer"
        assert 0 <= row.ca_pct <= 100 and 0 <= row.aa_pct <= 100

    def test_geometry_mismatch(self, micro, store):
        spec = micro_spec()
        run_experiment(spec, store, micro)
        source = store.root / spec.hash() / "42" / "defender.ckpt"
        wrong = dict(DATASET, size=32)
        with pytest.raises(ConfigError):
            transfer_eval(TransferSpec(str(source), wrong, VICTIM, ATTACK, subset_size=16), store)
