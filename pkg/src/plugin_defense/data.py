"""Datasets, seeded samplers and defense-training-set assembly.

Every sampler is a pure function of (dataset, arguments, seed). Shuffling
always goes through :meth:`Rng.permutation` on the ``"shuffle"`` stream of
the given seed, so each call with the same seed reproduces the same order,
the same way a seeded ``Dataset.shuffle(seed=...)`` does.
"""
from __future__ import annotations

import gzip
import importlib.resources
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .errors import ConfigError, ContractError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError("Dataset needs images [N, C, H, W] and matching labels [N]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, name or self.name)


# ---------------------------------------------------------------- IDX files


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise ParseError(f"{path}: expected {count} data bytes, file ends early", len(raw))
    if len(raw) > header + count:
        raise ParseError(f"{path}: trailing bytes after data", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array in IDX format (gzip-compressed when the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def pad_to(images, size):
    """Zero-pad ``[N, C, h, w]`` symmetrically to ``size x size``."""
    n, c, h, w = images.shape
    if h > size or w > size:
        raise ConfigError(f"cannot pad {h}x{w} down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, c, size, size), dtype=images.dtype)
    out[:, :, top:top + h, left:left + w] = images
    return out


def load_idx(images_path, labels_path, pad=32, channels=1, name="mnist", limit=None):
    """Load an IDX image/label pair as a :class:`Dataset` scaled to [0, 1].

    Images are zero-padded to ``pad x pad``; ``channels=3`` replicates the
    grey channel.
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ParseError(f"{images_path}: {len(images)} images but {len(labels)} labels", 4)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float32)[:, None] / 255.0
    if pad:
        x = pad_to(x, pad)
    if channels > 1:
        x = np.repeat(x, channels, axis=1)
    return Dataset(x, labels.astype(np.int64), int(labels.max()) + 1 if len(labels) else 10, name)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for candidate in (stem, stem + ".gz"):
        if (Path(directory) / candidate).exists():
            return Path(directory) / candidate
    return None


def materialize_desk_mnist(directory):
    """Write the 5000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    The sample holds 500 digits per class; the first 400 of each class form
    the train split and the last 100 the test split. Both splits are written
    in a fixed interleaved order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    source = importlib.resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with importlib.resources.as_file(source) as path:
        table = np.loadtxt(gzip.open(path, "rt"), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    train_idx, test_idx = [], []
    for k in range(10):
        members = np.flatnonzero(labels == k)
        train_idx.append(members[:400])
        test_idx.append(members[400:])
    for split, idx in (("train", train_idx), ("test", test_idx)):
        idx = np.stack(idx, axis=1).reshape(-1)  # round-robin over classes
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(directory / (img_name + ".gz"), pixels[idx])
        write_idx(directory / (lbl_name + ".gz"), labels[idx])
    return directory


def load_mnist(directory=None, train_limit=10000, test_limit=1000, channels=1):
    """Return ``(train, test)`` MNIST datasets padded to 32x32.

    ``directory`` (or ``$PLUGIN_DEFENSE_MNIST``) may hold the official IDX
    files; otherwise the bundled desk sample is materialised under
    ``~/.cache/plugin_defense/mnist``.
    """
    directory = directory or os.environ.get("PLUGIN_DEFENSE_MNIST")
    if directory is None or _find(directory, MNIST_FILES["train"][0]) is None:
        directory = Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "plugin_defense" / "mnist"
        if _find(directory, MNIST_FILES["train"][0]) is None:
            materialize_desk_mnist(directory)
    out = []
    for split, limit in (("train", train_limit), ("test", test_limit)):
        img, lbl = (_find(directory, stem) for stem in MNIST_FILES[split])
        out.append(load_idx(img, lbl, channels=channels, name=f"mnist-{split}", limit=limit))
    return tuple(out)


# ---------------------------------------------------------------- synthetic images


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    n: int = 2000
    channels: int = 3
    size: int = 32
    name: str = "synthetic"


def _shape_mask(kind, size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    r = radius
    if kind == 0:  # disk
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:  # filled square
        return (abs(dy) <= r * 0.8) & (abs(dx) <= r * 0.8)
    if kind == 2:  # triangle (apex up)
        return (dy <= r * 0.8) & (dy >= -r) & (abs(dx) <= (dy + r) * 0.55)
    if kind == 3:  # plus
        return ((abs(dy) <= r * 0.3) & (abs(dx) <= r)) | ((abs(dx) <= r * 0.3) & (abs(dy) <= r))
    if kind == 4:  # ring
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == 5:  # horizontal bar
        return (abs(dy) <= r * 0.3) & (abs(dx) <= r * 1.1)
    if kind == 6:  # vertical bar
        return (abs(dx) <= r * 0.3) & (abs(dy) <= r * 1.1)
    if kind == 7:  # diamond
        return abs(dy) + abs(dx) <= r
    if kind == 8:  # X
        return ((abs(dy - dx) <= r * 0.35) | (abs(dy + dx) <= r * 0.35)) & (abs(dy) <= r) & (abs(dx) <= r)
    if kind == 9:  # hollow square
        inner = (abs(dy) <= r * 0.45) & (abs(dx) <= r * 0.45)
        return (abs(dy) <= r * 0.85) & (abs(dx) <= r * 0.85) & ~inner
    raise ConfigError(f"no shape for class {kind}")


def gen_synthetic(spec=None, seed=0):
    """Render a stratified dataset of coloured shapes on textured backgrounds.

    Class ``k`` is shape ``k % 10`` (disk, square, triangle, plus, ring,
    horizontal bar, vertical bar, diamond, X, hollow square); ``k // 10``
    shifts the foreground palette so up to 20 classes stay separable. Each
    image jitters shape position (+-3 px) and radius, draws a random
    foreground colour at least 0.35 away from a smooth background texture
    made of a sinusoidal grating plus low-amplitude noise.
    """
    spec = spec or SyntheticSpec()
    k, n, c, s = spec.num_classes, spec.n, spec.channels, spec.size
    if k > 20:
        raise ConfigError("gen_synthetic supports at most 20 classes")
    if n < k:
        raise ConfigError("need at least one image per class")
    rng = Rng(seed).stream("synthetic")
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    images = np.empty((n, c, s, s), dtype=np.float32)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32) / s
    for i, label in enumerate(labels):
        bg_level = rng.uniform(0.1, 0.4, size=c)
        freq, angle, phase = rng.uniform(1.0, 3.0), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        grating = 0.08 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        background = bg_level[:, None, None] + grating[None] + rng.normal(0, 0.03, size=(c, s, s))
        fg = rng.uniform(0.75, 1.0, size=c)
        if label // 10:
            fg = fg * np.array([1.0, 0.55, 0.2][:c] if c == 3 else [0.75])
        cy, cx = s / 2 + rng.uniform(-3, 3), s / 2 + rng.uniform(-3, 3)
        radius = s * rng.uniform(0.24, 0.32)
        mask = _shape_mask(int(label % 10), s, cy, cx, radius)
        img = np.where(mask[None], fg[:, None, None], background)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, k, spec.name)


def gen_textures(n, channels=3, size=32, seed=0):
    """Label-free corpus of random gratings and blobs, a domain unlike digits or shapes."""
    rng = Rng(seed).stream("textures")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    out = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        img = np.full((channels, size, size), rng.uniform(0.2, 0.8))
        for _ in range(3):
            freq, angle, phase = rng.uniform(2, 8), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25, size=channels)[:, None, None]
            img = img + amp * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        out[i] = np.clip(img + rng.normal(0, 0.05, size=img.shape), 0, 1)
    return Dataset(out, np.zeros(n, dtype=np.int64), 1, "textures")


def to_channels(ds, channels):
    """Replicate a grey dataset to ``channels`` or average colour down to one channel."""
    c = ds.images.shape[1]
    if c == channels:
        return ds
    if c == 1:
        return Dataset(np.repeat(ds.images, channels, axis=1), ds.labels, ds.num_classes, ds.name)
    if channels == 1:
        return Dataset(ds.images.mean(axis=1, keepdims=True), ds.labels, ds.num_classes, ds.name)
    raise ConfigError(f"cannot convert {c} channels to {channels}")


# ---------------------------------------------------------------- samplers


def shuffled(n, seed):
    return Rng(seed).stream("shuffle").permutation(n)


def nshot_sample(ds, n_per_class, seed):
    """``n_per_class`` indices per class: filter, shuffle, take first n, concatenate, shuffle."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    picked = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < n_per_class:
            raise ContractError(f"class {k} has {len(members)} examples, fewer than {n_per_class}")
        picked.append(members[shuffled(len(members), seed)[:n_per_class]])
    merged = np.concatenate(picked)
    return merged[shuffled(len(merged), seed)]


def random_sample(ds, n, seed):
    """First ``n`` indices of a seeded shuffle; class balance is not guaranteed."""
    if not 0 <= n <= len(ds):
        raise ContractError(f"cannot sample {n} of {len(ds)} examples")
    return shuffled(len(ds), seed)[:n]


def fixed_test_subset(ds, size=512, seed=42):
    if len(ds) < size:
        raise ContractError(f"test set has {len(ds)} examples, fewer than {size}")
    return shuffled(len(ds), seed)[:size]


@dataclass
class SamplerConfig:
    """How the defense training set is drawn.

    ``mode`` is one of ``1adv``, ``1adv-1clean``, ``kadv`` (with ``k``) or
    ``1adv-balanced``. ``shots`` overrides the default of one example per
    class for the unbalanced modes.
    """

    mode: str = "1adv"
    seed: int = 42
    k: int = 4
    shots: int | None = None
    strict: bool = False

    MODES = ("1adv", "1adv-1clean", "kadv", "1adv-balanced")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown sampler mode {self.mode!r}; expected one of {self.MODES}")
        if self.k < 1 or (self.shots is not None and self.shots < 1):
            raise ConfigError("k and shots must be >= 1")


@dataclass
class DefenseTrainSet:
    inputs: np.ndarray  # what the defender is tuned on
    labels: np.ndarray  # ground truth
    tags: list  # "adv" | "clean" per item
    origin: np.ndarray  # index into the source dataset
    clean: np.ndarray  # clean original of every item
    attack_failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.labels)

    @property
    def adversarial(self):
        return np.array([t == "adv" for t in self.tags])

    @property
    def failure_rate(self):
        adv = self.adversarial
        return float(self.attack_failed[adv].mean()) if adv.any() else 0.0


def build_defense_trainset(victim, attack, ds_train, cfg):
    """Draw the defender's tuning set from ``ds_train`` and attack it.

    ``attack`` is a callable ``(victim, images, labels) -> adversarial images``.
    Failed attacks (victim still right) stay in the set and are flagged;
    ``cfg.strict`` instead keeps drawing from the same shuffled order until
    every adversarial slot holds a successful attack.
    """
    from .victims import predict

    k = ds_train.num_classes
    per_class = cfg.shots or 1
    if cfg.mode == "1adv-balanced":
        idx = nshot_sample(ds_train, per_class, cfg.seed)
    else:
        count = (cfg.k if cfg.mode == "kadv" else 1) * per_class * k
        idx = random_sample(ds_train, count, cfg.seed)

    def attack_indices(indices):
        clean = ds_train.images[indices]
        labels = ds_train.labels[indices]
        adv = np.asarray(attack(victim, clean, labels), dtype=np.float32)
        failed = predict(victim, adv)[0] == labels
        return adv, failed

    adv, failed = attack_indices(idx)
    if cfg.strict and failed.any():
        taken = set(idx.tolist())
        pool = [i for i in shuffled(len(ds_train), cfg.seed) if i not in taken]
        idx, adv, failed = idx.copy(), adv.copy(), failed.copy()
        for slot in np.flatnonzero(failed):
            want = ds_train.labels[idx[slot]] if cfg.mode == "1adv-balanced" else None
            while pool:
                cand = pool.pop(0)
                if want is not None and ds_train.labels[cand] != want:
                    continue
                a, f = attack_indices(np.array([cand]))
                if not f[0]:
                    idx[slot], adv[slot], failed[slot] = cand, a[0], False
                    break
    labels = ds_train.labels[idx]
    clean = ds_train.images[idx]
    tags = ["adv"] * len(idx)
    if cfg.mode == "1adv-1clean":
        return DefenseTrainSet(
            inputs=np.concatenate([adv, clean]),
            labels=np.concatenate([labels, labels]),
            tags=tags + ["clean"] * len(idx),
            origin=np.concatenate([idx, idx]),
            clean=np.concatenate([clean, clean]),
            attack_failed=np.concatenate([failed, np.zeros(len(idx), dtype=bool)]),
        )
    return DefenseTrainSet(adv, labels, tags, idx, clean, failed)
