import numpy as np
import pytest

from plugin_defense import autodiff as ad
from plugin_defense.data import Dataset, SyntheticSpec, gen_synthetic
from plugin_defense.victims import VictimConfig, train_victim


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_shapes():
    """Grey 32x32 shapes, 4 classes: small enough to train victims in seconds."""
    train = gen_synthetic(SyntheticSpec(num_classes=4, n=400, channels=1, size=32, name="tiny-train"), seed=1)
    test = gen_synthetic(SyntheticSpec(num_classes=4, n=128, channels=1, size=32, name="tiny-test"), seed=2)
    return train, test


@pytest.fixture(scope="session")
def mlp_victim(tiny_shapes):
    train, _ = tiny_shapes
    cfg = VictimConfig(kind="mlp", hidden=(64,), max_epochs=40, lr=3e-3, batch_size=32, augment_shift=0,
                       floor=0.9, target=0.99, seed=3)
    return train_victim(train, cfg)


@pytest.fixture(scope="session")
def vit_victim(tiny_shapes):
    train, _ = tiny_shapes
    cfg = VictimConfig(kind="tiny-vit", patch=8, dim=32, depth=1, heads=2, max_epochs=40, lr=3e-3, batch_size=32,
                       augment_shift=0, floor=0.8, target=0.97, seed=3)
    return train_victim(train, cfg)


class ConstantModel:
    """A 'victim' that returns fixed logits; handy for accuracy bookkeeping tests."""

    frozen = True

    def __init__(self, logits, input_shape=(1, 2, 2)):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.input_shape = input_shape
        self.num_classes = self.logits.shape[-1]

    def __call__(self, x):
        return ad.Tensor(np.broadcast_to(self.logits, (x.shape[0], self.num_classes)).copy())


def toy_dataset(n_per_class=3, k=4, shape=(1, 2, 2), seed=0):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    return Dataset(r.random((len(labels), *shape)), labels, k, "toy")


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        ACCEPTANCE[number] = line
        print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
