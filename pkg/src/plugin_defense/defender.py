"""The plug-in defender: patch embedding -> processor -> PixelShuffle decoder, added to the input.

Only a small parameter subset (by default the processor's layer-norm
gammas and betas) is ever tuned; everything else stays at its
initialisation, random or proxy-pretrained.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError
from .nn import (LAYER_NORM, FeedForward, LayerNorm, Linear, Module, PatchEmbedding, PixelShuffleDecoder,
                 TransformerLayer)

log = logging.getLogger(__name__)

PROCESSORS = ("transformer", "linear", "ffn", "bottleneck", "fd")
POLICIES = ("layer-norm-only", "processor", "all", "none")


@dataclass
class DefenderConfig:
    channels: int = 3
    image_size: tuple = (32, 32)
    patch: int = 8
    dim: int = 192
    processor: str = "transformer"
    layers: int = 4
    heads: int = 4
    causal: bool = False
    arrangement: str = "pre"
    fd_hidden: int | None = None
    policy: str | None = None
    residual: bool = True
    embed_norm: bool = False
    embed_norm_trainable: bool = False
    init_std: float = 0.02
    init: dict = field(default_factory=lambda: {"kind": "random"})
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.processor not in PROCESSORS:
            raise ConfigError(f"unknown processor {self.processor!r}; expected one of {PROCESSORS}")
        if self.policy is None:
            self.policy = "layer-norm-only" if self.processor == "transformer" else "processor"
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown partition policy {self.policy!r}; expected one of {POLICIES}")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @property
    def input_shape(self):
        return (self.channels, *self.image_size)


class TransformerProcessor(Module):
    def __init__(self, cfg, rng):
        self.layers = [
            TransformerLayer(cfg.dim, cfg.heads, rng, cfg.arrangement, cfg.causal, cfg.init_std)
            for _ in range(cfg.layers)
        ]

    def forward(self, tokens):
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens


class LinearProcessor(Module):
    def __init__(self, cfg, rng):
        self.proj = Linear(cfg.dim, cfg.dim, rng, cfg.init_std, group="processor")

    def forward(self, tokens):
        return self.proj(tokens)


class FFNProcessor(Module):
    def __init__(self, cfg, rng, hidden):
        self.ffn = FeedForward(cfg.dim, hidden, rng, "relu", cfg.init_std, group="processor")

    def forward(self, tokens):
        return self.ffn(tokens)


class NonLocalProcessor(Module):
    """Token-wise non-local denoising: softmax affinity mixing, 1x1 channel mix, identity skip."""

    def __init__(self, cfg, rng):
        hidden = cfg.fd_hidden or cfg.dim
        self.hidden = hidden
        self.theta = Linear(cfg.dim, hidden, rng, cfg.init_std, group="processor")
        self.phi = Linear(cfg.dim, hidden, rng, cfg.init_std, group="processor")
        self.mix = Linear(cfg.dim, cfg.dim, rng, cfg.init_std, group="processor")

    def forward(self, tokens):
        scores = ad.matmul(self.theta(tokens), ad.swapaxes(self.phi(tokens), -1, -2))
        affinity = ad.softmax(ad.mul(scores, 1.0 / np.sqrt(self.hidden)), axis=-1)
        return ad.add(tokens, self.mix(ad.matmul(affinity, tokens)))


def _build_processor(cfg, rng):
    if cfg.processor == "transformer":
        return TransformerProcessor(cfg, rng)
    if cfg.processor == "linear":
        return LinearProcessor(cfg, rng)
    if cfg.processor == "ffn":
        return FFNProcessor(cfg, rng, 2 * cfg.dim)
    if cfg.processor == "bottleneck":
        return FFNProcessor(cfg, rng, max(1, cfg.dim // 2))
    return NonLocalProcessor(cfg, rng)


class DefenderModel(Module):
    def __init__(self, cfg):
        h, w = cfg.image_size
        need = cfg.channels * cfg.patch ** 2
        if cfg.dim < need:
            raise ConfigError(f"defender dim {cfg.dim} < channels*patch^2 = {need}")
        if h % cfg.patch or w % cfg.patch:
            raise ConfigError(f"image {h}x{w} is not divisible by patch {cfg.patch}")
        self.config = cfg
        rng = Rng(cfg.seed).stream("defender-init")
        self.embed = PatchEmbedding(cfg.channels, cfg.image_size, cfg.patch, cfg.dim, rng, cfg.init_std, cfg.init_std)
        self.ln_embed = LayerNorm(cfg.dim) if cfg.embed_norm else None
        self.processor = _build_processor(cfg, rng)
        self.decoder = PixelShuffleDecoder(cfg.channels, cfg.patch, self.embed.grid)
        self.bind_names()
        if cfg.embed_norm:
            for p in self.ln_embed.parameters():
                p.group = "embedding_norm"
        self.apply_policy(cfg.policy)

    @property
    def input_shape(self):
        return self.config.input_shape

    # -------------------------------------------------------------- forward

    def features(self, x):
        """Decoder output for ``x`` (a Tensor); the quantity added to the input."""
        tokens = self.embed(x)
        if self.ln_embed is not None:
            tokens = self.ln_embed(tokens)
        return self.decoder(self.processor(tokens))

    def forward(self, x):
        if tuple(x.shape[-3:]) != tuple(self.input_shape):
            raise ContractError(f"defender expects images {self.input_shape}, got {tuple(x.shape[-3:])}")
        feat = self.features(x)
        return ad.add(x, feat) if self.config.residual else feat

    def defend(self, x, batch_size=256):
        """Purify a numpy image (or batch) without recording a graph."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        single = x.ndim == 3
        batch = x[None] if single else x
        if tuple(batch.shape[1:]) != tuple(self.input_shape):
            raise ContractError(f"defender expects images {self.input_shape}, got {tuple(batch.shape[1:])}")
        out = np.concatenate([
            self.forward(Tensor(batch[i:i + batch_size])).data for i in range(0, len(batch), batch_size)
        ]).astype(batch.dtype)
        return out[0] if single else out

    # -------------------------------------------------------------- partition

    def partition(self, policy=None):
        return partition_params(self, policy or self.config.policy)

    def apply_policy(self, policy):
        theta1, theta2 = partition_params(self, policy)
        for p in theta1:
            p.trainable = True
        for p in theta2:
            p.trainable = False
        self.config.policy = policy
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]


def build_defender(cfg=None, **overrides):
    cfg = cfg or DefenderConfig(**overrides)
    return DefenderModel(cfg)


def defend(model, x):
    return model.defend(x)


def partition_params(model, policy):
    """Split defender parameters into ``(theta1, theta2)``: tuned and frozen."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown partition policy {policy!r}")
    theta1, theta2 = [], []
    embed_norm_tuned = model.config.embed_norm_trainable
    for name, p in model.named_parameters():
        if policy == "all":
            tuned = True
        elif policy == "none":
            tuned = False
        elif policy == "processor":
            tuned = name.startswith("processor.")
        else:
            tuned = (p.group == LAYER_NORM and name.startswith("processor.")) or (
                p.group == "embedding_norm" and embed_norm_tuned)
        (theta1 if tuned else theta2).append(p)
    return theta1, theta2


def group_count(params):
    """``(number of parameter tensors, number of scalar variables)``."""
    return len(params), int(sum(p.size for p in params))


def zero_decode_path(model):
    """Zero every weight feeding the decoder so the defender's feature is exactly zero.

    For a transformer processor this zeroes the patch projection and position
    embedding (the residual stream's source) together with every attention
    and feed-forward output projection.
    """
    model.embed.projection.data[...] = 0
    model.embed.pos_embed.data[...] = 0
    if model.ln_embed is not None:
        model.ln_embed.gamma.data[...] = 0
        model.ln_embed.beta.data[...] = 0
    proc = model.processor
    if isinstance(proc, TransformerProcessor):
        for layer in proc.layers:
            for lin in (layer.attn.output, layer.ffn.fc2):
                lin.weight.data[...] = 0
                lin.bias.data[...] = 0
            if layer.arrangement == "post":
                for ln in (layer.ln1, layer.ln2):
                    ln.gamma.data[...] = 0
                    ln.beta.data[...] = 0
    elif isinstance(proc, LinearProcessor):
        proc.proj.weight.data[...] = 0
        proc.proj.bias.data[...] = 0
    elif isinstance(proc, FFNProcessor):
        proc.ffn.fc2.weight.data[...] = 0
        proc.ffn.fc2.bias.data[...] = 0
    return model


# ---------------------------------------------------------------- proxy pretraining


def proxy_pretrain(model, corpus, steps, seed=0, lr=1e-3, batch_size=32, mask_ratio=0.5):
    """Masked-patch inpainting on an unlabeled corpus, in residual form.

    Half of each image's patches are blanked; the whole defender (residual
    included) must restore the clean image, so the processor learns to
    output a correction that is near zero on unmasked content. Only
    processor weights are trained; afterwards the configured partition
    policy is re-applied. Returns the model; the loss trace is stored in
    ``model.pretrain_losses``.
    """
    from .victims import Adam

    model.pretrain_losses = []
    if steps <= 0:
        return model
    images = np.asarray(corpus.images, dtype=np.float32)
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ContractError(f"corpus images {images.shape[1:]} do not match defender input {model.input_shape}")
    for name, p in model.named_parameters():
        p.trainable = name.startswith("processor.")
    params = model.trainable_parameters()
    opt = Adam(params, lr=lr)
    rng = Rng(seed).stream("proxy-pretrain")
    p = model.config.patch
    gh, gw = model.embed.grid
    for _ in range(steps):
        idx = rng.integers(0, len(images) - 1, size=batch_size)
        clean = images[idx]
        keep = rng.random((batch_size, gh, gw)) >= mask_ratio
        pixel_keep = np.repeat(np.repeat(keep, p, axis=1), p, axis=2)[:, None].astype(np.float32)
        masked = clean * pixel_keep
        loss = ad.mse(model(Tensor(masked)), Tensor(clean))
        grads = ad.grad(loss, params)
        opt.step(grads)
        model.pretrain_losses.append(float(loss.data))
    model.apply_policy(model.config.policy)
    return model


def initialize(model, init, corpora=None):
    """Apply an init descriptor ``{"kind": "random" | "proxy" | "checkpoint", ...}``."""
    kind = init.get("kind", "random")
    if kind == "random":
        return model
    if kind == "proxy":
        if corpora is None or init.get("corpus") not in corpora:
            raise ConfigError(f"proxy init needs corpus {init.get('corpus')!r}")
        return proxy_pretrain(model, corpora[init["corpus"]], int(init.get("steps", 300)),
                              seed=int(init.get("seed", 0)), lr=float(init.get("lr", 1e-3)))
    if kind == "checkpoint":
        from .serialize import load_defender

        loaded = load_defender(init["path"])
        model.load_state_dict(loaded.state_dict())
        return model
    raise ConfigError(f"unknown init kind {kind!r}")
