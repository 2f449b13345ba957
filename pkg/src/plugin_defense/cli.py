"""Command-line entry point: ``plugin-defense <subcommand> --config file.yaml ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import autodiff, harness, serialize
from .attacks import AttackConfig, attack_fn
from .errors import ConfigError, ContractError, ParseError, TrainingError
from .trainer import CurveLog

log = logging.getLogger("plugin_defense")


def _read_tree(path):
    if path is None:
        return {}
    with open(path) as fh:
        tree = yaml.safe_load(fh) or {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: expected a key-value tree at the top level")
    return tree


def _single_spec(args):
    tree = _read_tree(args.config)
    if args.seed is not None:
        tree["seeds"] = [args.seed]
    specs = harness.specs_from_dict(tree)
    if len(specs) != 1:
        raise ConfigError("this subcommand takes a single-arm experiment config, not a suite")
    return specs[0]


def _emit(rows, out, fmt):
    if out is None:
        for r in rows:
            print(json.dumps(r.to_dict()))
    else:
        harness.emit_results(rows, out, fmt)
    return 1 if any(r.failed for r in rows) else 0


def cmd_train_victim(args):
    spec = _single_spec(args)
    store = harness.RunStore(args.runs)
    victim = harness.get_victim(store, spec.dataset, spec.victim)
    path = store.victim_path(spec.dataset, spec.victim)
    if args.out:
        Path(args.out).write_bytes(path.read_bytes())
    print(f"victim {victim.checksum()[:16]} held-out {getattr(victim, 'heldout_accuracy', float('nan')):.4f} -> "
          f"{args.out or path}")
    return 0


def cmd_gen_adv(args):
    spec = _single_spec(args)
    store = harness.RunStore(args.runs)
    train, test = harness.load_dataset(spec.dataset)
    victim = serialize.load_victim(args.victim) if args.victim else harness.get_victim(
        store, spec.dataset, spec.victim, train)
    attack_cfg = AttackConfig(**spec.attack)
    cache = harness.get_adv_cache(store, victim, test, attack_cfg, spec.subset_size, spec.subset_seed)
    if args.out:
        manifest = {"attack": attack_cfg.to_dict(), "victim_checksum": victim.checksum(), "test": test.name,
                    "subset_seed": spec.subset_seed}
        flat = (cache.adversarial - cache.clean).reshape(len(cache.clean), -1)
        serialize.write_corpus(args.out, serialize.Corpus(manifest, cache.indices, cache.labels,
                                                          abs(flat).max(axis=1), cache.adversarial))
    print(f"{len(cache.indices)} adversarial examples ({attack_cfg.label})")
    return 0


def cmd_tune(args):
    spec = _single_spec(args)
    if spec.defender["kind"] != "defender":
        raise ConfigError("tune needs a config whose defender kind is 'defender'")
    rows = harness.run_experiment(spec, harness.RunStore(args.runs))
    for seed in spec.seeds:
        print(f"artifacts: {harness.RunStore(args.runs).run_dir(spec, seed)}")
    return _emit(rows, args.out, args.format)


def cmd_eval(args):
    spec = _single_spec(args)
    store = harness.RunStore(args.runs)
    if args.defender:
        row = harness.transfer_eval(harness.TransferSpec(args.defender, spec.dataset, spec.victim, spec.attack,
                                                         spec.subset_size, spec.subset_seed, spec.seeds[0],
                                                         label="checkpoint"), store)
        rows = [row]
    else:
        rows = harness.run_experiment(spec, store)
    return _emit(rows, args.out, args.format)


def cmd_transfer(args):
    tree = _read_tree(args.config)
    if args.seed is not None:
        tree["seed"] = args.seed
    row = harness.transfer_eval(harness.TransferSpec.from_dict(tree), harness.RunStore(args.runs))
    return _emit([row], args.out, args.format)


def cmd_suite(args):
    tree = _read_tree(args.config) if args.config else harness.default_suite()
    if args.seed is not None:
        tree["seeds"] = [args.seed]
    specs = harness.specs_from_dict(tree)
    rows = harness.run_suite(specs, harness.RunStore(args.runs),
                             on_row=lambda r: log.info("%s %s seed %d: CA %.2f AA %.2f", r.dataset, r.defender,
                                                       r.seed, r.ca_pct, r.aa_pct))
    return _emit(rows, args.out, args.format)


def cmd_curves(args):
    curve = CurveLog.from_jsonl(args.input)
    if args.out:
        curve.to_csv(args.out)
    else:
        for row in curve.rows:
            print(row.to_json())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="plugin-defense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the seed list with one seed")
        p.add_argument("--out", help="output path")
        p.add_argument("--format", choices=("csv", "jsonl"), help="result format (default from --out suffix)")
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.add_argument("--threads", type=int, help="cap BLAS threads")
        p.add_argument("--runs", default="runs", help="artifact store root")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    add("train-victim", cmd_train_victim, "train (or fetch cached) victim")
    add("gen-adv", cmd_gen_adv, "attack the fixed test subset").add_argument("--victim", help="victim checkpoint")
    add("tune", cmd_tune, "tune a defender and evaluate it")
    add("eval", cmd_eval, "evaluate an arm, or a defender checkpoint").add_argument(
        "--defender", help="defender checkpoint or run directory")
    add("transfer", cmd_transfer, "zero-shot evaluation of a tuned defender in a target environment")
    add("suite", cmd_suite, "run the defense comparison suite (built-in default without --config)")
    add("curves", cmd_curves, "dump a CurveLog to CSV", config=False).add_argument(
        "--input", required=True, help="curve.jsonl from a run directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(args.threads), autodiff.precision(args.precision):
            return args.func(args)
    except (ConfigError, ContractError, ParseError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
