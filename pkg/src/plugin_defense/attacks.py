"""White-box evasion attacks on the bare victim: FGSM, PGD and a simplified Auto-PGD.

All attacks are untargeted cross-entropy maximisers operating on a batch
``x [B, C, H, W]`` in [0, 1]. Every iterate is projected onto the epsilon
ball around the clean input and then clipped to the [0, 1] box, so the
returned images satisfy both constraints exactly as measured.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError

L2_FLOOR = 1e-12


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float | None = None
    steps: int = 10
    step_size: float | None = None
    variant: str = "pgd"
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.variant not in ("fgsm", "pgd", "apgd"):
            raise ConfigError(f"unknown attack variant {self.variant!r}")
        if self.epsilon is None:
            self.epsilon = 8 / 255 if self.norm == "linf" else 128 / 255
        if self.step_size is None:
            self.step_size = self.epsilon / 4
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")

    def to_dict(self):
        return asdict(self)

    @property
    def label(self):
        return f"{self.norm}-{self.variant}"


@dataclass
class AdversarialExample:
    x_a: np.ndarray
    origin: int
    label: int
    prediction: int
    distortion: float


@dataclass
class AdversarialBatch:
    """Output of an attack on a batch; ``examples()`` splits it into records."""

    x_adv: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    distortion: np.ndarray
    zero_gradient: np.ndarray

    def examples(self, origins=None):
        origins = range(len(self.labels)) if origins is None else origins
        return [
            AdversarialExample(self.x_adv[i], int(o), int(self.labels[i]), int(self.predictions[i]),
                               float(self.distortion[i]))
            for i, o in enumerate(origins)
        ]

    @property
    def success(self):
        return self.predictions != self.labels


def _batch_norm(v, norm):
    flat = v.reshape(len(v), -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1)
    return np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))


def _expand(per_example, like):
    return per_example.reshape((-1,) + (1,) * (like.ndim - 1))


def project(v, center, norm, epsilon):
    """Project ``v`` onto the ``norm`` ball of radius ``epsilon`` around ``center``.

    Works on one image or a batch (the first axis is the batch axis when
    ``v.ndim == 4``).
    """
    v, center = np.asarray(v), np.asarray(center)
    if v.shape != center.shape:
        raise ContractError(f"project: shapes {v.shape} and {center.shape} differ")
    if norm == "linf":
        return np.clip(v, center - epsilon, center + epsilon)
    if norm != "l2":
        raise ConfigError(f"unknown norm {norm!r}")
    batched = v.ndim == 4
    delta = (v - center) if batched else (v - center)[None]
    size = _batch_norm(delta, "l2")
    factor = np.minimum(1.0, epsilon / np.maximum(size, L2_FLOOR))
    out = delta * _expand(factor, delta).astype(delta.dtype)
    out = out if batched else out[0]
    return center + out


def clip01(x):
    return np.clip(x, 0.0, 1.0)


def input_gradient(model, x, labels):
    """Gradient of the summed cross-entropy with respect to the input, plus per-example losses."""
    xt = Tensor(x, requires_grad=True)
    logits = model(xt)
    loss = ad.cross_entropy(logits, labels, reduction="sum")
    (g,) = ad.grad(loss, [xt])
    logp = ad.log_softmax_np(logits.data.astype(np.float64))
    return g, -logp[np.arange(len(labels)), labels]


def per_example_loss(model, x, labels):
    logits = model(Tensor(x)).data.astype(np.float64)
    return -ad.log_softmax_np(logits)[np.arange(len(labels)), labels]


def _direction(g, norm):
    if norm == "linf":
        return np.sign(g)
    size = _batch_norm(g, "l2")
    return g / _expand(np.maximum(size, L2_FLOOR), g).astype(g.dtype)


def _finish(model, x, x_adv, labels, norm, zero_grad):
    x_adv = np.asarray(x_adv, dtype=x.dtype)
    preds = model(Tensor(x_adv)).data.argmax(axis=-1)
    return AdversarialBatch(x_adv, np.asarray(labels), preds, _batch_norm(x_adv - x, norm), zero_grad)


def _prepare(x, labels):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    if x.min() < 0 or x.max() > 1:
        raise ContractError("attack inputs must lie in [0, 1]")
    return x, labels


def fgsm(model, x, labels, epsilon):
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1]."""
    x, labels = _prepare(x, labels)
    g, _ = input_gradient(model, x, labels)
    x_adv = clip01(x + epsilon * np.sign(g))
    zero = ~np.any(g.reshape(len(g), -1) != 0, axis=1)
    return _finish(model, x, x_adv, labels, "linf", zero)


def _random_start(x, cfg, rng):
    if cfg.norm == "linf":
        return clip01(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype))
    direction = rng.normal(size=x.shape)
    direction /= _expand(_batch_norm(direction, "l2"), direction)
    radius = cfg.epsilon * rng.random(len(x))
    return clip01(x + (direction * _expand(radius, direction)).astype(x.dtype))


def pgd(model, x, labels, cfg=None):
    """Projected gradient ascent on the cross-entropy; returns the last iterate."""
    cfg = cfg or AttackConfig()
    x, labels = _prepare(x, labels)
    x_adv = x.copy()
    if cfg.random_start and cfg.steps > 0:
        x_adv = _random_start(x, cfg, Rng(cfg.seed).stream("attack"))
    zero = np.zeros(len(x), dtype=bool)
    for _ in range(cfg.steps):
        g, _ = input_gradient(model, x_adv, labels)
        zero = ~np.any(g.reshape(len(g), -1) != 0, axis=1)
        step = (cfg.step_size * _direction(g, cfg.norm)).astype(x.dtype)
        x_adv = clip01(project(x_adv + step, x, cfg.norm, cfg.epsilon))
    return _finish(model, x, x_adv, labels, cfg.norm, zero)


def apgd_checkpoints(steps):
    """Iteration indices at which step-size decisions are taken (fractions 0.22, 0.22+0.19, ...)."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    marks = {int(np.ceil(round(q * steps, 9))) for q in p[1:]}
    return sorted(m for m in marks if 0 < m <= steps)


def apgd(model, x, labels, cfg=None, rho=0.75, momentum=0.75):
    """Auto-PGD without restarts: momentum steps, step size halved when progress stalls.

    The step size starts at ``2 * epsilon`` per example. At each checkpoint
    the step is halved (and the iterate reset to the best one found) when
    fewer than ``rho`` of the interval's steps increased the loss, or when
    neither the step size nor the best loss changed since the previous
    checkpoint. Returns the best-loss iterate.
    """
    cfg = cfg or AttackConfig(variant="apgd")
    x, labels = _prepare(x, labels)
    n = len(x)
    if cfg.steps == 0:
        return _finish(model, x, x.copy(), labels, cfg.norm, np.zeros(n, dtype=bool))
    eta = np.full(n, 2.0 * cfg.epsilon)
    checkpoints = set(apgd_checkpoints(cfg.steps))

    x_cur = x.copy()
    g, loss = input_gradient(model, x_cur, labels)
    zero = ~np.any(g.reshape(n, -1) != 0, axis=1)
    x_best, loss_best, g_best = x_cur.copy(), loss.copy(), g.copy()
    x_prev = x_cur.copy()
    increases = np.zeros(n)
    last_check, eta_at_check, best_at_check = 0, eta.copy(), loss_best.copy()

    for k in range(cfg.steps):
        step = (_expand(eta, x) * _direction(g, cfg.norm)).astype(x.dtype)
        z = clip01(project(x_cur + step, x, cfg.norm, cfg.epsilon))
        if k == 0:
            x_next = z
        else:
            mixed = x_cur + momentum * (z - x_cur) + (1 - momentum) * (x_cur - x_prev)
            x_next = clip01(project(mixed.astype(x.dtype), x, cfg.norm, cfg.epsilon))
        g_next, loss_next = input_gradient(model, x_next, labels)
        increases += loss_next > loss
        improved = loss_next > loss_best
        x_best[improved], loss_best[improved], g_best[improved] = x_next[improved], loss_next[improved], g_next[improved]
        x_prev, x_cur, g, loss = x_cur, x_next, g_next, loss_next

        if k + 1 in checkpoints:
            interval = k + 1 - last_check
            stalled = increases < rho * interval
            stalled |= (eta == eta_at_check) & (loss_best == best_at_check)
            eta_at_check, best_at_check = eta.copy(), loss_best.copy()
            eta = np.where(stalled, eta / 2.0, eta)
            if stalled.any():
                x_cur[stalled], g[stalled], loss[stalled] = x_best[stalled], g_best[stalled], loss_best[stalled]
                x_prev[stalled] = x_cur[stalled]
            increases[:] = 0
            last_check = k + 1
    return _finish(model, x, x_best, labels, cfg.norm, zero)


def run_attack(model, x, labels, cfg):
    """Dispatch on ``cfg.variant``."""
    if cfg.variant == "fgsm":
        if cfg.norm != "linf":
            raise ConfigError("fgsm is defined for the linf norm only")
        return fgsm(model, x, labels, cfg.epsilon)
    if cfg.variant == "pgd":
        return pgd(model, x, labels, cfg)
    return apgd(model, x, labels, cfg)


def attack_fn(cfg, batch_size=128):
    """Adapter ``(victim, images, labels) -> adversarial images`` used by the data module."""

    def run(model, images, labels):
        out = []
        for start in range(0, len(images), batch_size):
            out.append(run_attack(model, images[start:start + batch_size], labels[start:start + batch_size], cfg).x_adv)
        return np.concatenate(out)

    return run
