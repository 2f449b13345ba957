"""Layers built on :mod:`plugin_defense.autodiff`.

Every layer works on arbitrary leading batch axes: token tensors are
``[..., T, d]`` and images ``[..., C, H, W]``.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

LAYER_NORM = "layer_norm"


class Parameter(Tensor):
    """A named, grouped tensor owned by a :class:`Module`.

    ``trainable`` doubles as ``requires_grad``: frozen parameters never enter
    a differentiation graph and so never receive gradients.
    """

    def __init__(self, data, name="", group="", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.group = group

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)

    def __repr__(self):
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.shape}, {state})"


class Module:
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def bind_names(self, prefix=""):
        """Write each parameter's attribute path into its ``name``."""
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape).astype(ad.get_dtype())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, std=0.02, bias=True, group="linear"):
        self.weight = Parameter(_normal(rng, (d_in, d_out), std), group=group)
        self.bias = Parameter(np.zeros(d_out), group=group) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        if d < 1:
            raise ConfigError("LayerNorm dimension must be >= 1")
        self.gamma = Parameter(np.ones(d), group=LAYER_NORM)
        self.beta = Parameter(np.zeros(d), group=LAYER_NORM)
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------- patches


def extract_patches(images, p):
    """``[..., C, H, W]`` -> ``[..., T, C*p*p]`` in row-major patch order, channel-major within a patch."""
    *lead, c, h, w = images.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    x = ad.reshape(images, (*lead, c, gh, p, gw, p))
    x = ad.transpose(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return ad.reshape(x, (*lead, gh * gw, c * p * p))


class PatchEmbedding(Module):
    """Linear patch projection plus learned position embedding (no class token)."""

    def __init__(self, in_channels, image_size, patch_size, dim, rng, std=0.02, pos_std=0.02):
        h, w = image_size
        if h % patch_size or w % patch_size:
            raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch_size}")
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.grid = (h // patch_size, w // patch_size)
        self.dim = dim
        self.projection = Parameter(_normal(rng, (dim, in_channels * patch_size ** 2), std), group="embedding")
        self.pos_embed = Parameter(_normal(rng, (self.num_tokens, dim), pos_std), group="embedding")

    @property
    def num_tokens(self):
        return self.grid[0] * self.grid[1]

    def forward(self, images):
        patches = extract_patches(images, self.patch_size)
        return ad.add(ad.matmul(patches, ad.transpose(self.projection)), self.pos_embed)


def patch_embed(image, emb):
    return emb(image)


# ---------------------------------------------------------------- attention


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, std=0.02, causal=False):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.query = Linear(dim, dim, rng, std, group="attention")
        self.key = Linear(dim, dim, rng, std, group="attention")
        self.value = Linear(dim, dim, rng, std, group="attention")
        self.output = Linear(dim, dim, rng, std, group="attention")

    def _split(self, x):
        *lead, t, d = x.shape
        n = len(lead)
        x = ad.reshape(x, (*lead, t, self.heads, d // self.heads))
        return ad.transpose(x, (*range(n), n + 1, n, n + 2))

    def forward(self, x):
        *lead, t, d = x.shape
        n = len(lead)
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // self.heads))
        mask = np.tril(np.ones((t, t), dtype=bool)) if self.causal else None
        ctx = ad.matmul(ad.softmax(scores, axis=-1, mask=mask), v)
        ctx = ad.reshape(ad.transpose(ctx, (*range(n), n + 1, n, n + 2)), (*lead, t, d))
        return self.output(ctx)


def self_attention(tokens, layer):
    return layer.attn(tokens)


class FeedForward(Module):
    """linear -> activation -> linear."""

    ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu, "identity": ad.identity}

    def __init__(self, dim, hidden, rng, activation="relu", std=0.02, group="ffn"):
        if hidden < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if activation not in self.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        self.fc1 = Linear(dim, hidden, rng, std, group=group)
        self.fc2 = Linear(hidden, dim, rng, std, group=group)

    def forward(self, x):
        return self.fc2(self.ACTIVATIONS[self.activation](self.fc1(x)))


def ffn_block(x, block):
    return block(x)


class TransformerLayer(Module):
    """Attention + GELU feed-forward, each wrapped in a residual and a layer norm.

    ``arrangement="pre"`` normalises branch inputs (ViT); ``"post"``
    normalises after each residual sum (BERT).
    """

    def __init__(self, dim, heads, rng, arrangement="pre", causal=False, std=0.02, mlp_ratio=4):
        if arrangement not in ("pre", "post"):
            raise ConfigError(f"arrangement must be 'pre' or 'post', got {arrangement!r}")
        self.arrangement = arrangement
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, std, causal)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, mlp_ratio * dim, rng, "gelu", std)

    def forward(self, x):
        if self.arrangement == "pre":
            x = ad.add(x, self.attn(self.ln1(x)))
            return ad.add(x, self.ffn(self.ln2(x)))
        x = self.ln1(ad.add(x, self.attn(x)))
        return self.ln2(ad.add(x, self.ffn(x)))


def transformer_forward(tokens, layers):
    for layer in layers:
        tokens = layer(tokens)
    return tokens


# ---------------------------------------------------------------- decoder


def pixel_shuffle_decode(tokens, channels, upscale, grid):
    """Rearrange ``[..., T, d]`` tokens into ``[..., C, gh*r, gw*r]`` images.

    Token feature ``c*r*r + i*r + j`` lands in channel ``c`` at offset
    ``(i, j)`` of the token's patch; features past ``C*r*r`` are dropped.
    """
    *lead, t, d = tokens.shape
    gh, gw = grid
    need = channels * upscale * upscale
    if d < need:
        raise ConfigError(f"token dim {d} < channels*upscale^2 = {need}")
    if t != gh * gw:
        raise ConfigError(f"{t} tokens cannot tile a {gh}x{gw} grid")
    if d > need:
        tokens = ad.getitem(tokens, (Ellipsis, slice(0, need)))
    n = len(lead)
    x = ad.reshape(tokens, (*lead, gh, gw, channels, upscale, upscale))
    x = ad.transpose(x, (*range(n), n + 2, n, n + 3, n + 1, n + 4))
    return ad.reshape(x, (*lead, channels, gh * upscale, gw * upscale))


class PixelShuffleDecoder(Module):
    def __init__(self, channels, upscale, grid):
        self.channels = channels
        self.upscale = upscale
        self.grid = grid

    def forward(self, tokens):
        return pixel_shuffle_decode(tokens, self.channels, self.upscale, self.grid)
