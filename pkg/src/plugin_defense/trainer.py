"""Tuning the defender's tuned subset against a frozen victim with Lion.

The objective is the mean cross-entropy of ``victim(defender(x_d))`` over
the tuning set, labels being the ground truth. Gradients flow through the
victim into the defender, but only trainable defender parameters (the
partition's tuned set) are ever updated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ContractError, TrainingError
from .victims import accuracy

log = logging.getLogger(__name__)


@dataclass
class LionState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    momentum: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.momentum = [np.zeros_like(p.data) for p in params]
        return state


def lion_step(params, grads, state):
    """One Lion update, in place.

    ``u = sign(beta1*m + (1-beta1)*g)``; ``p -= lr*(u + wd*p)``;
    ``m = beta2*m + (1-beta2)*g``. ``sign(0) = 0``.
    """
    if len(params) != len(grads) or len(params) != len(state.momentum):
        raise ContractError("lion_step: params, grads and momentum buffers must align")
    for p, g, m in zip(params, grads, state.momentum):
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"lion_step: gradient shape {g.shape} != parameter shape {p.shape}")
        dtype = p.data.dtype
        update = np.sign(state.beta1 * m + (1 - state.beta1) * g).astype(dtype)
        if state.weight_decay:
            update = update + dtype.type(state.weight_decay) * p.data
        p.data = p.data - dtype.type(state.lr) * update
        m *= state.beta2
        m += (1 - state.beta2) * g
    return params, state


@dataclass
class TuneConfig:
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    eval_every: int = 10
    seed: int = 42
    checkpoint_every: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class CurveRow:
    epoch: int
    loss: float
    train_ca: float
    train_aa: float
    test_ca: float | None = None
    test_aa: float | None = None

    def to_json(self):
        return json.dumps(asdict(self))


@dataclass
class CurveLog:
    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError("curve epochs must increase")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def series(self, key):
        return np.array([np.nan if getattr(r, key) is None else getattr(r, key) for r in self.rows])

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(row.to_json() + "\n")

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as fh:
            return cls([CurveRow(**json.loads(line)) for line in fh if line.strip()])

    def to_csv(self, path):
        cols = ("epoch", "loss", "train_ca", "train_aa", "test_ca", "test_aa")
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                vals = [getattr(r, c) for c in cols]
                fh.write(",".join("" if v is None else (str(v) if isinstance(v, int) else f"{v:.6f}") for v in vals) + "\n")


@dataclass
class EvalSet:
    """Clean test images, their labels, and adversarial counterparts made once against the bare victim."""

    clean: np.ndarray
    labels: np.ndarray
    adversarial: np.ndarray


def _loss(defender, victim, x, y):
    return ad.cross_entropy(victim(defender(Tensor(x))), y)


def epoch_eval(defender, victim, trainset, test, epoch, loss):
    """One curve row: train CA/AA on the tuning set's clean/adversarial versions, test CA/AA when given."""
    defend = defender.defend
    adv = trainset.adversarial
    train_ca = accuracy(victim, trainset.clean, trainset.labels, defend)
    train_aa = accuracy(victim, trainset.inputs[adv], trainset.labels[adv], defend) if adv.any() else float("nan")
    test_ca = test_aa = None
    if test is not None:
        test_ca = accuracy(victim, test.clean, test.labels, defend)
        test_aa = accuracy(victim, test.adversarial, test.labels, defend)
    return CurveRow(epoch, float(loss), train_ca, train_aa, test_ca, test_aa)


def _snapshot(params, epoch, loss):
    return {"epoch": epoch, "loss": loss,
            "param_norms": {p.name: float(np.linalg.norm(p.data)) for p in params}}


def tune_defender(defender, victim, trainset, cfg=None, test=None, on_row=None, checkpoint_dir=None):
    """Tune the defender's trainable parameters for ``cfg.epochs`` epochs.

    Returns ``(defender, CurveLog)``. Row 0 is the untuned state. With
    ``test`` (an :class:`EvalSet`), test CA/AA are logged every
    ``cfg.eval_every`` epochs and at the last epoch. ``on_row`` is called
    with each new row (used for JSONL streaming). With ``checkpoint_dir`` and
    ``cfg.checkpoint_every > 0`` the defender is saved as
    ``epoch-XXXX.ckpt`` every that many epochs.
    """
    cfg = cfg or TuneConfig()
    if len(trainset) == 0:
        raise ContractError("defense training set is empty")
    if getattr(victim, "frozen", False) is not True:
        raise ContractError("the victim must be frozen before tuning a defender")
    params = defender.trainable_parameters()
    state = LionState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                 weight_decay=cfg.weight_decay)
    shuffle = Rng(cfg.seed).stream("tune-shuffle")
    x_all, y_all = trainset.inputs, trainset.labels
    curve = CurveLog()

    def record(row):
        curve.append(row)
        if on_row is not None:
            on_row(row)

    def check_finite(epoch, value):
        if not np.isfinite(value) or not all(np.isfinite(p.data).all() for p in params):
            raise TrainingError(f"non-finite loss or parameters at epoch {epoch}", _snapshot(params, epoch, value))

    check_finite(0, 0.0)
    initial = float(_loss(defender, victim, x_all, y_all).data)
    record(epoch_eval(defender, victim, trainset, test, 0, initial))
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(x_all)) if len(x_all) > cfg.batch_size else np.arange(len(x_all))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = _loss(defender, victim, x_all[idx], y_all[idx])
            value = float(loss.data)
            check_finite(epoch, value)
            grads = ad.grad(loss, params)
            lion_step(params, grads, state)
            check_finite(epoch, value)
            batch_losses.append(value)
        probe = test if (epoch % cfg.eval_every == 0 or epoch == cfg.epochs) else None
        row = epoch_eval(defender, victim, trainset, probe, epoch, float(np.mean(batch_losses)))
        record(row)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            from .serialize import save_defender

            save_defender(f"{checkpoint_dir}/epoch-{epoch:04d}.ckpt", defender, {"epoch": epoch})
        if probe is not None:
            log.info("epoch %d loss %.4f train CA %.3f AA %.3f test CA %.3f AA %.3f", epoch, row.loss,
                     row.train_ca, row.train_aa, row.test_ca, row.test_aa)
    return defender, curve
