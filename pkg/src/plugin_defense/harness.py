"""Experiment orchestration: victims, adversarial caches, defense arms, result rows.

An experiment is one dataset, one victim, one attack and one defense arm,
repeated over a list of seeds. A suite is a list of arms sharing the rest.
Every (experiment, seed) pair writes its artifacts to
``<root>/<spec-hash>/<seed>/``; trained victims and adversarial test caches
are shared across experiments under ``<root>/victims`` and ``<root>/adv``.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import serialize
from .attacks import AttackConfig, attack_fn, run_attack
from .baselines import Baseline, RpConfig
from .data import (SamplerConfig, SyntheticSpec, build_defense_trainset, fixed_test_subset, gen_synthetic,
                   gen_textures, load_mnist, to_channels)
from .defender import DefenderConfig, DefenderModel, initialize
from .errors import ConfigError, ContractError
from .trainer import EvalSet, TuneConfig, tune_defender
from .victims import VictimConfig, accuracy, train_victim

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (41, 42, 43)
CSV_COLUMNS = ("dataset", "victim", "defender", "attack", "seed", "ca_pct", "aa_pct", "wall_s")


def spec_hash(obj, length=12):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:length]


# ---------------------------------------------------------------- datasets


def load_dataset(ref):
    """Resolve a dataset reference (a dict) into ``(train, test)``.

    ``{"name": "mnist", "train_limit": 10000, "test_limit": 1000}`` or
    ``{"name": "synthetic", "n_train": 2000, "n_test": 1000, "channels": 3,
    "num_classes": 10, "seed": 0}``. ``channels`` converts either source.
    """
    ref = dict(ref)
    name = ref.get("name", "mnist")
    if name == "mnist":
        train, test = load_mnist(ref.get("directory"), ref.get("train_limit", 10000), ref.get("test_limit", 1000))
    elif name == "synthetic":
        seed = int(ref.get("seed", 0))
        spec = dict(num_classes=int(ref.get("num_classes", 10)), channels=int(ref.get("channels", 3)),
                    size=int(ref.get("size", 32)))
        train = gen_synthetic(SyntheticSpec(n=int(ref.get("n_train", 2000)), name="synthetic-train", **spec), seed)
        test = gen_synthetic(SyntheticSpec(n=int(ref.get("n_test", 1000)), name="synthetic-test", **spec), seed + 1)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    if "channels" in ref:
        train, test = to_channels(train, int(ref["channels"])), to_channels(test, int(ref["channels"]))
    return train, test


def dataset_label(ref):
    return ref.get("label") or ref.get("name", "mnist")


# ---------------------------------------------------------------- specs


@dataclass
class ExperimentSpec:
    """One defense arm evaluated over ``seeds``.

    ``defender`` is ``None``/``{"kind": "none"}``, a baseline
    (``{"kind": "rp", ...}``, ``{"kind": "noise", "std": 0.05}``) or a tuned
    defender (``{"kind": "defender", ...DefenderConfig fields}``). Geometry
    fields of a defender (channels, image size) default to the dataset's.
    """

    dataset: dict = field(default_factory=lambda: {"name": "mnist"})
    victim: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    defender: dict | None = None
    sampler: dict = field(default_factory=dict)
    tune: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    subset_size: int = 512
    subset_seed: int = 42
    timing: bool = True
    name: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        self.seeds = [int(s) for s in self.seeds]
        self.defender = _normalize_arm(self.defender)
        AttackConfig(**self.attack)
        VictimConfig(**self.victim)
        SamplerConfig(**self.sampler)
        TuneConfig(**self.tune)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def to_dict(self):
        return copy.deepcopy(asdict(self))

    def hash(self):
        d = self.to_dict()
        for volatile in ("seeds", "timing", "name"):
            d.pop(volatile)
        return spec_hash(d)

    @property
    def arm_label(self):
        arm = self.defender
        if arm.get("label"):
            return arm["label"]
        if arm["kind"] == "noise":
            return f"noise-{arm.get('std', 0.05):g}"
        if arm["kind"] == "defender":
            return arm.get("processor", "transformer")
        return arm["kind"]


def _normalize_arm(arm):
    if arm is None:
        return {"kind": "none"}
    arm = dict(arm)
    arm.setdefault("kind", "defender")
    if arm["kind"] not in ("none", "rp", "noise", "defender"):
        raise ConfigError(f"unknown defense kind {arm['kind']!r}")
    return arm


@dataclass
class SuiteSpec:
    """Shared experiment settings plus a list of defense arms."""

    base: ExperimentSpec
    arms: list

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        arms = d.pop("arms", None)
        if not arms:
            raise ConfigError("a suite needs a non-empty 'arms' list")
        datasets = d.pop("datasets", None)
        bases = []
        for ds in datasets or [d.get("dataset", {"name": "mnist"})]:
            entry = dict(d)
            if datasets:
                entry["dataset"] = ds.get("dataset", ds)
                entry["victim"] = ds.get("victim", d.get("victim", {}))
                if "defender_defaults" in ds:
                    entry["defender_defaults"] = ds["defender_defaults"]
            bases.append(entry)
        return [cls._one(b, arms) for b in bases]

    @classmethod
    def _one(cls, d, arms):
        defaults = d.pop("defender_defaults", {})
        base = ExperimentSpec.from_dict(d)
        merged = []
        for arm in arms:
            arm = _normalize_arm(arm)
            if arm["kind"] == "defender":
                arm = {**defaults, **arm}
            merged.append(arm)
        return cls(base, merged)

    def expand(self):
        out = []
        for arm in self.arms:
            d = self.base.to_dict()
            d["defender"] = arm
            out.append(ExperimentSpec.from_dict(d))
        return out


def load_config(path):
    """Parse a YAML experiment or suite file into a list of :class:`ExperimentSpec`."""
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a key-value tree at the top level")
    return specs_from_dict(d)


def specs_from_dict(d):
    if "arms" in d:
        return [spec for suite in SuiteSpec.from_dict(d) for spec in suite.expand()]
    return [ExperimentSpec.from_dict(d)]


# ---------------------------------------------------------------- results


@dataclass
class ResultRow:
    dataset: str
    victim: str
    defender: str
    attack: str
    seed: int
    ca_pct: float
    aa_pct: float
    wall_s: float

    def __post_init__(self):
        self.seed = int(self.seed)
        self.ca_pct, self.aa_pct, self.wall_s = (round(float(v), 2) for v in (self.ca_pct, self.aa_pct, self.wall_s))
        for v in (self.ca_pct, self.aa_pct):
            if not (math.isnan(v) or 0 <= v <= 100):
                raise ContractError(f"percentages must lie in [0, 100], got {v}")

    @property
    def failed(self):
        return math.isnan(self.ca_pct) or math.isnan(self.aa_pct)

    def to_dict(self):
        return asdict(self)


def emit_results(rows, path, fmt=None):
    """Write rows as CSV (exact header, 2-decimal floats) or JSONL."""
    if not rows:
        raise ContractError("no rows to emit")
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in rows:
                fh.write(f"{r.dataset},{r.victim},{r.defender},{r.attack},{r.seed},"
                         f"{r.ca_pct:.2f},{r.aa_pct:.2f},{r.wall_s:.2f}\n")
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r.to_dict()) + "\n")
    else:
        raise ConfigError(f"unknown result format {fmt!r}")
    return path


def read_results(path):
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path) as fh:
            return [ResultRow(**json.loads(line)) for line in fh if line.strip()]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow(**row) for row in reader]


# ---------------------------------------------------------------- artifact store


class RunStore:
    """Content-addressed artifact layout rooted at ``root``."""

    def __init__(self, root="runs"):
        self.root = Path(root)

    def run_dir(self, spec, seed):
        d = self.root / spec.hash() / str(seed)
        d.mkdir(parents=True, exist_ok=True)
        spec_file = d.parent / "spec.json"
        if not spec_file.exists():
            spec_file.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        return d

    def victim_path(self, dataset, victim):
        d = self.root / "victims"
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{spec_hash({'dataset': dataset, 'victim': victim})}.ckpt"

    def adv_path(self, key):
        d = self.root / "adv"
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{spec_hash(key)}.pdax"


def get_victim(store, dataset_ref, victim_ref, train=None):
    """Load the cached victim for ``(dataset, victim)`` or train and cache it."""
    path = store.victim_path(dataset_ref, victim_ref)
    if path.exists():
        return serialize.load_victim(path)
    if train is None:
        train, _ = load_dataset(dataset_ref)
    cfg = VictimConfig(**victim_ref)
    if "patch" not in victim_ref and train.shape[0] == 3:
        cfg.patch = 8  # colour images use the coarser default patch
    started = time.process_time()
    model = train_victim(train, cfg)
    log.info("trained %s victim in %.0f CPU-s, held-out accuracy %.4f", cfg.kind, time.process_time() - started,
             model.heldout_accuracy)
    serialize.save_victim(path, model)
    return model


@dataclass
class AdvCache:
    """Test subset indices, clean images and their cached adversarial counterparts."""

    indices: np.ndarray
    clean: np.ndarray
    labels: np.ndarray
    adversarial: np.ndarray
    victim_checksum: str


def get_adv_cache(store, victim, test, attack_cfg, subset_size=512, subset_seed=42):
    size = min(subset_size, len(test))
    indices = fixed_test_subset(test, size, subset_seed)
    clean, labels = test.images[indices], test.labels[indices]
    key = {"victim": victim.checksum(), "attack": attack_cfg.to_dict(), "test": test.name,
           "indices": spec_hash(indices.tolist())}
    path = store.adv_path(key)
    if path.exists():
        corpus = serialize.read_corpus(path)
        return AdvCache(indices, clean, labels, corpus.images, corpus.manifest["victim_checksum"])
    x_adv = attack_fn(attack_cfg)(victim, clean, labels)
    distortion = np.abs((x_adv - clean).reshape(len(clean), -1)).max(axis=1) if attack_cfg.norm == "linf" else \
        np.sqrt(((x_adv - clean).reshape(len(clean), -1).astype(np.float64) ** 2).sum(axis=1))
    manifest = {"attack": attack_cfg.to_dict(), "victim_checksum": victim.checksum(), "test": test.name,
                "subset_seed": subset_seed}
    serialize.write_corpus(path, serialize.Corpus(manifest, indices, labels, distortion, x_adv))
    return AdvCache(indices, clean, labels, x_adv, victim.checksum())


# ---------------------------------------------------------------- evaluation


def evaluate_ca_aa(victim, defense, cache):
    """``(CA, AA)`` as fractions over the same subset, through ``defense`` when given.

    ``defense`` is ``None``, a :class:`DefenderModel`, or a :class:`Baseline`
    (which is re-seeded per example from the subset index).
    """
    if cache.victim_checksum != victim.checksum():
        raise ContractError("adversarial cache was generated against a different victim")

    def route(x):
        if defense is None:
            return x
        if isinstance(defense, Baseline):
            return defense(x, cache.indices)
        if isinstance(defense, DefenderModel):
            return defense.defend(x)
        return defense(x)

    ca = accuracy(victim, route(cache.clean), cache.labels)
    aa = accuracy(victim, route(cache.adversarial), cache.labels)
    return ca, aa


def _defender_config(arm, train, seed):
    cfg = {k: v for k, v in arm.items() if k not in ("kind", "label")}
    cfg.setdefault("channels", train.shape[0])
    cfg.setdefault("image_size", list(train.shape[1:]))
    cfg.setdefault("seed", seed)
    return DefenderConfig(**cfg)


def build_defense(arm, seed, train, victim, store=None, run_dir=None, tune_cfg=None, sampler_cfg=None,
                  attack_cfg=None, test_eval=None):
    """Materialise one defense arm for ``seed``; tunes a defender when the arm asks for it."""
    kind = arm["kind"]
    if kind == "none":
        return None, None
    if kind == "rp":
        rp = RpConfig(arm.get("s_min"), arm.get("s_max"), arm.get("interpolation", "bilinear"), seed)
        return Baseline("rp", seed, rp=rp), None
    if kind == "noise":
        return Baseline("noise", seed, std=float(arm.get("std", 0.05))), None
    cfg = _defender_config(arm, train, seed)
    defender = DefenderModel(cfg)
    corpora = None
    if cfg.init.get("kind") == "proxy":
        corpora = proxy_corpora(cfg)
    initialize(defender, cfg.init, corpora)
    sampler = SamplerConfig(**{**(sampler_cfg or {}), "seed": seed})
    trainset = build_defense_trainset(victim, attack_fn(attack_cfg), train, sampler)
    tune = TuneConfig(**{**(tune_cfg or {}), "seed": seed})
    curve_path = None if run_dir is None else Path(run_dir) / "curve.jsonl"
    _, curve = tune_defender(defender, victim, trainset, tune, test=test_eval, checkpoint_dir=run_dir)
    if run_dir is not None:
        curve.to_jsonl(curve_path)
        serialize.save_defender(Path(run_dir) / "defender.ckpt", defender,
                                {"seed": seed, "victim_checksum": victim.checksum()})
        serialize.write_corpus(Path(run_dir) / "trainset.pdax", serialize.Corpus(
            {"sampler": asdict(sampler), "tags": trainset.tags, "victim_checksum": victim.checksum()},
            trainset.origin, trainset.labels, trainset.attack_failed.astype(np.float32), trainset.inputs))
    defender.trainset, defender.curve = trainset, curve
    return defender, curve


def proxy_corpora(cfg, n=512):
    """Unlabeled corpora for proxy pretraining, at the defender's geometry.

    ``digits``: scikit-learn's 8x8 handwritten digits upsampled (a
    handwriting-like domain). ``textures``: procedural gratings (a foreign
    domain).
    """
    from sklearn.datasets import load_digits

    from .data import Dataset
    from .baselines import resize

    c, (h, w) = cfg.channels, cfg.image_size
    digits = load_digits().images[:n].astype(np.float32) / 16.0
    up = np.stack([resize(img[None], h, "bilinear")[0] for img in digits])[:, None]
    digits_ds = to_channels(Dataset(np.clip(up, 0, 1), np.zeros(len(up), dtype=np.int64), 1, "digits"), c)
    return {"digits": digits_ds, "textures": gen_textures(n, c, h, seed=7)}


def _victim_label(victim_ref):
    return victim_ref.get("label") or victim_ref.get("kind", "tiny-vit")


def run_experiment(spec, store=None, data=None, on_row=None):
    """Run every seed of ``spec``; returns one :class:`ResultRow` per seed.

    A seed whose run raises produces a row with NaN percentages and the
    error recorded in its ``row.json``; the other seeds still run.
    """
    store = store or RunStore()
    attack_cfg = AttackConfig(**spec.attack)
    train, test = data or load_dataset(spec.dataset)
    victim = get_victim(store, spec.dataset, spec.victim, train)
    cache = get_adv_cache(store, victim, test, attack_cfg, spec.subset_size, spec.subset_seed)
    before = victim.checksum()
    rows = []
    for seed in spec.seeds:
        run_dir = store.run_dir(spec, seed)
        started = time.perf_counter()
        error = None
        try:
            defense, _ = build_defense(spec.defender, seed, train, victim, store, run_dir, spec.tune,
                                       spec.sampler, attack_cfg)
            ca, aa = evaluate_ca_aa(victim, defense, cache)
            if victim.checksum() != before:
                raise ContractError("victim parameters changed during the run")
        except Exception as exc:  # a failed seed is recorded, not fatal to the suite
            log.exception("seed %d of %s failed", seed, spec.arm_label)
            ca = aa = float("nan")
            error = f"{type(exc).__name__}: {exc}"
        wall = time.perf_counter() - started
        row = ResultRow(dataset_label(spec.dataset), _victim_label(spec.victim), spec.arm_label, attack_cfg.label,
                        seed, 100 * ca, 100 * aa, wall if spec.timing else 0.0)
        (run_dir / "row.json").write_text(json.dumps({**row.to_dict(), "wall_s_measured": round(wall, 2),
                                                      "error": error}, indent=2))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def run_suite(specs, store=None, on_row=None):
    """Run experiments in order, sharing loaded datasets; rows come in spec order, then seed order."""
    store = store or RunStore()
    loaded = {}
    rows = []
    for spec in specs:
        key = spec_hash(spec.dataset)
        if key not in loaded:
            loaded[key] = load_dataset(spec.dataset)
        rows.extend(run_experiment(spec, store, loaded[key], on_row))
    return rows


# ---------------------------------------------------------------- transfer


@dataclass
class TransferSpec:
    """A tuned defender checkpoint evaluated, without re-tuning, in a target environment."""

    source: str
    dataset: dict = field(default_factory=lambda: {"name": "mnist"})
    victim: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    subset_size: int = 512
    subset_seed: int = 42
    seed: int = 42
    label: str = ""

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))


def check_geometry(defender, target):
    """``target`` is a victim or a dataset; shapes must match exactly."""
    shape = tuple(getattr(target, "input_shape", None) or target.shape)
    if tuple(defender.input_shape) != shape:
        raise ConfigError(f"defender input {tuple(defender.input_shape)} does not match "
                          f"target input {shape}; refusing to resize")


def transfer_eval(spec, store=None, data=None):
    store = store or RunStore()
    source = Path(spec.source)
    if source.is_dir():
        source = source / "defender.ckpt"
    defender = serialize.load_defender(source)
    train, test = data or load_dataset(spec.dataset)
    check_geometry(defender, test)
    victim = get_victim(store, spec.dataset, spec.victim, train)
    check_geometry(defender, victim)
    attack_cfg = AttackConfig(**spec.attack)
    cache = get_adv_cache(store, victim, test, attack_cfg, spec.subset_size, spec.subset_seed)
    started = time.perf_counter()
    ca, aa = evaluate_ca_aa(victim, defender, cache)
    return ResultRow(dataset_label(spec.dataset), _victim_label(spec.victim),
                     spec.label or f"transfer:{defender.config.processor}", attack_cfg.label, spec.seed,
                     100 * ca, 100 * aa, time.perf_counter() - started)


# ---------------------------------------------------------------- default suite


def default_suite(seeds=DEFAULT_SEEDS):
    """The desk-scale counterpart of the defense comparison table, as a config tree."""
    return {
        "name": "defense-comparison",
        "dataset": {"name": "mnist", "train_limit": 10000, "test_limit": 1000},
        "victim": {},
        "attack": {"norm": "linf", "variant": "pgd"},
        "sampler": {"mode": "1adv"},
        "tune": {"epochs": 500},
        "seeds": list(seeds),
        "timing": False,
        "defender_defaults": {"patch": 8, "dim": 192, "layers": 4, "heads": 4},
        "arms": [
            {"kind": "none"},
            {"kind": "rp"},
            {"kind": "noise", "std": 0.05},
            {"kind": "noise", "std": 0.06},
            {"kind": "noise", "std": 0.07},
            {"kind": "defender", "processor": "linear"},
            {"kind": "defender", "processor": "ffn"},
            {"kind": "defender", "processor": "bottleneck"},
            {"kind": "defender", "processor": "fd", "fd_hidden": 256},
            {"kind": "defender", "processor": "transformer"},
            {"kind": "defender", "processor": "transformer", "residual": False, "label": "transformer-without-res"},
        ],
    }
