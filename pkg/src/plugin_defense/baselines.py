"""Training-free input-transformation baselines: random resize-and-pad and Gaussian noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Rng
from .errors import ConfigError

NOISE_STDS = (0.05, 0.06, 0.07)


@dataclass
class RpConfig:
    """Resize range in pixels (``None`` means ``[0.85 H, H]``) and interpolation."""

    s_min: int | None = None
    s_max: int | None = None
    interpolation: str = "bilinear"
    seed: int = 0

    def resolve(self, h):
        s_max = h if self.s_max is None else int(self.s_max)
        s_min = int(np.ceil(0.85 * h)) if self.s_min is None else int(self.s_min)
        if not 1 <= s_min <= s_max <= h:
            raise ConfigError(f"resize range [{s_min}, {s_max}] must satisfy 1 <= s_min <= s_max <= {h}")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")
        return s_min, s_max


def _source_coords(out_size, in_size):
    # Half-pixel centres, as in the usual align_corners=False convention.
    return (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5


def resize(x, size, interpolation="bilinear"):
    """Resize a ``[C, H, W]`` image to ``[C, size, size]``."""
    _, h, w = x.shape
    ys, xs = _source_coords(size, h), _source_coords(size, w)
    if interpolation == "nearest":
        yi = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        xi = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        return x[:, yi][:, :, xi]
    ys, xs = np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bottom = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(x.dtype)


def rp_defense(x, cfg, rng):
    """Resize to a random ``s x s`` then zero-pad back to ``H x W`` at a random offset."""
    x = np.asarray(x)
    _, h, w = x.shape
    s_min, s_max = cfg.resolve(min(h, w))
    s = int(rng.integers(s_min, s_max))
    small = resize(x, s, cfg.interpolation)
    top = int(rng.integers(0, h - s))
    left = int(rng.integers(0, w - s))
    out = np.zeros_like(x)
    out[:, top:top + s, left:left + s] = small
    return np.clip(out, 0.0, 1.0)


def gaussian_noise_defense(x, std, rng):
    """``clip01(x + n)`` with ``n ~ N(0, std^2)``."""
    if std < 0:
        raise ConfigError("noise std must be >= 0")
    x = np.asarray(x)
    if std == 0:
        return x.copy()
    noise = rng.normal(0.0, std, size=x.shape).astype(x.dtype)
    return np.clip(x + noise, 0.0, 1.0)


class Baseline:
    """A batch defense whose randomness is re-seeded per example from ``(seed, index)``.

    ``indices`` name each image's position in the evaluation subset so that a
    given example always receives the same draw, whatever the batching.
    """

    def __init__(self, kind, seed=0, std=0.05, rp=None):
        if kind not in ("rp", "noise"):
            raise ConfigError(f"unknown baseline {kind!r}")
        self.kind, self.seed, self.std = kind, int(seed), float(std)
        self.rp = rp or RpConfig(seed=seed)

    @property
    def label(self):
        return "rp" if self.kind == "rp" else f"noise-{self.std:g}"

    def __call__(self, x, indices=None):
        x = np.asarray(x)
        single = x.ndim == 3
        batch = x[None] if single else x
        indices = np.arange(len(batch)) if indices is None else np.asarray(indices)
        out = np.empty_like(batch)
        for i, (img, idx) in enumerate(zip(batch, indices)):
            rng = Rng(self.seed).stream(self.kind, str(int(idx)))
            out[i] = rp_defense(img, self.rp, rng) if self.kind == "rp" else gaussian_noise_defense(img, self.std, rng)
        return out[0] if single else out
