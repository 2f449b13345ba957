"""Frozen classifiers under attack: a small ViT and an MLP.

A victim is trained once, frozen, and from then on only read. Attacks
differentiate through it with respect to the input; the defender trainer
differentiates through it with respect to defender parameters. Neither
ever touches victim weights.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError, TrainingError
from .nn import LayerNorm, Linear, Module, PatchEmbedding, TransformerLayer

log = logging.getLogger(__name__)


@dataclass
class VictimConfig:
    kind: str = "tiny-vit"
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    hidden: tuple = (256, 256)
    input_mean: float = 0.5
    input_std: float = 0.5
    # training
    seed: int = 0
    max_epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    augment_shift: int = 2
    val_fraction: float = 0.05
    floor: float = 0.95
    target: float = 1.0
    extra: dict = field(default_factory=dict)

    def model_fields(self):
        keys = ("kind", "patch", "dim", "depth", "heads", "hidden", "input_mean", "input_std")
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if k in keys}


class _Victim(Module):
    kind = ""

    def _normalize(self, x):
        return ad.mul(ad.sub(x, self.config["input_mean"]), 1.0 / self.config["input_std"])

    def _check(self, x):
        if tuple(x.shape[-3:]) != tuple(self.input_shape):
            raise ContractError(f"victim expects images {self.input_shape}, got {x.shape[-3:]}")

    def freeze(self):
        self.set_trainable(False)
        self.frozen = True
        return self

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()


class TinyViT(_Victim):
    """Patch embedding, pre-norm encoder, final norm, mean-pooled linear head."""

    kind = "tiny-vit"

    def __init__(self, input_shape, num_classes, config, rng):
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.config = dict(config)
        init = rng.stream("init")
        self.embed = PatchEmbedding(c, (h, w), config["patch"], config["dim"], init)
        self.layers = [TransformerLayer(config["dim"], config["heads"], init) for _ in range(config["depth"])]
        self.norm = LayerNorm(config["dim"])
        self.head = Linear(config["dim"], num_classes, init, group="head")
        self.frozen = False
        self.bind_names()

    def forward(self, x):
        self._check(x)
        tokens = self.embed(self._normalize(x))
        for layer in self.layers:
            tokens = layer(tokens)
        pooled = ad.mean(self.norm(tokens), axis=-2)
        return self.head(pooled)


class MLPClassifier(_Victim):
    kind = "mlp"

    def __init__(self, input_shape, num_classes, config, rng):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.config = dict(config)
        init = rng.stream("init")
        sizes = [int(np.prod(input_shape)), *config["hidden"]]
        self.hidden = [Linear(a, b, init, std=np.sqrt(2.0 / a), group="mlp") for a, b in zip(sizes, sizes[1:])]
        self.head = Linear(sizes[-1], num_classes, init, std=np.sqrt(1.0 / sizes[-1]), group="head")
        self.frozen = False
        self.bind_names()

    def forward(self, x):
        self._check(x)
        lead = x.shape[:-3]
        h = ad.reshape(self._normalize(x), (*lead, -1))
        for layer in self.hidden:
            h = ad.relu(layer(h))
        return self.head(h)


VICTIM_KINDS = {"tiny-vit": TinyViT, "mlp": MLPClassifier}


def build_victim(kind, input_shape, num_classes, config, seed=0):
    try:
        cls = VICTIM_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown victim kind {kind!r}")
    return cls(input_shape, num_classes, config, Rng(seed))


# ---------------------------------------------------------------- inference


def logits_of(model, images, batch_size=256):
    """Forward ``images [N, C, H, W]`` in chunks without building a graph."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(Tensor(images[start:start + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def predict(model, x):
    """Return ``(labels, logits)`` for one image ``[C, H, W]`` or a batch."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim not in (3, 4) or tuple(x.shape[-3:]) != tuple(model.input_shape):
        raise ContractError(f"expected images of shape {model.input_shape}, got {x.shape}")
    single = x.ndim == 3
    logits = logits_of(model, x[None] if single else x)
    labels = logits.argmax(axis=-1)
    return (labels[0], logits[0]) if single else (labels, logits)


def accuracy(model, images, labels, defender=None, batch_size=256):
    """Fraction of ``images`` classified as ``labels``, optionally through ``defender``.

    ``defender`` is any callable mapping a numpy image batch to a numpy
    image batch of the same shape (e.g. ``DefenderModel.defend``).
    """
    images, labels = np.asarray(images), np.asarray(labels)
    if len(images) == 0:
        raise ContractError("accuracy of an empty subset is undefined")
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        if defender is not None:
            batch = defender(batch)
        pred = logits_of(model, batch, batch_size).argmax(axis=-1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(images)


# ---------------------------------------------------------------- training


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)


def random_shift(images, max_shift, rng):
    """Translate each image by up to ``max_shift`` pixels, filling with zeros."""
    if max_shift <= 0:
        return images
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * max_shift, w + 2 * max_shift), dtype=images.dtype)
    padded[:, :, max_shift:max_shift + h, max_shift:max_shift + w] = images
    offsets = rng.integers(0, 2 * max_shift, size=(n, 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def train_victim(train, cfg=None, val=None):
    """Train a victim on ``train`` and return it frozen.

    Without an explicit ``val`` set, ``cfg.val_fraction`` of ``train`` is held
    out. Training stops early once held-out accuracy reaches ``cfg.target``;
    a model that never reaches ``cfg.floor`` raises :class:`TrainingError`.
    """
    cfg = cfg or VictimConfig()
    if cfg.max_epochs < 1:
        raise TrainingError("victim training budget is zero epochs")
    rng = Rng(cfg.seed)
    images, labels = np.asarray(train.images), np.asarray(train.labels)
    if val is None:
        order = rng.stream("split").permutation(len(images))
        n_val = max(1, int(round(cfg.val_fraction * len(images))))
        val_images, val_labels = images[order[:n_val]], labels[order[:n_val]]
        images, labels = images[order[n_val:]], labels[order[n_val:]]
    else:
        val_images, val_labels = np.asarray(val.images), np.asarray(val.labels)

    model = build_victim(cfg.kind, images.shape[1:], train.num_classes, cfg.model_fields(), cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = int(np.ceil(len(images) / cfg.batch_size))
    total = steps_per_epoch * cfg.max_epochs
    warmup = max(1, steps_per_epoch * cfg.warmup_epochs)
    shuffle, aug = rng.stream("shuffle"), rng.stream("augment")
    step, best = 0, 0.0
    for epoch in range(cfg.max_epochs):
        order = shuffle.permutation(len(images))
        losses = []
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = random_shift(images[idx], cfg.augment_shift, aug)
            loss = ad.cross_entropy(model(Tensor(batch)), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"victim loss became {loss.item()} at epoch {epoch}")
            grads = ad.grad(loss, opt.params)
            if step < warmup:
                lr = cfg.lr * (step + 1) / warmup
            else:
                lr = 0.5 * cfg.lr * (1 + np.cos(np.pi * (step - warmup) / max(1, total - warmup)))
            opt.step(grads, lr)
            losses.append(float(loss.data))
            step += 1
        best = accuracy(model, val_images, val_labels)
        log.info("victim epoch %d loss %.4f held-out acc %.4f", epoch, np.mean(losses), best)
        if best >= cfg.target:
            break
    if best < cfg.floor:
        raise TrainingError(
            f"victim reached held-out accuracy {best:.4f} < floor {cfg.floor} after {epoch + 1} epochs",
            {"epochs": epoch + 1, "accuracy": best},
        )
    model.heldout_accuracy = best
    return model.freeze()
