"""Train a small victim, attack it, tune a layer-norm-only defender and print its curve.

Runs in about a minute on one CPU:

    python3 demos/defend_one_batch.py
"""
import numpy as np

from plugin_defense.attacks import AttackConfig, attack_fn
from plugin_defense.data import SamplerConfig, SyntheticSpec, build_defense_trainset, fixed_test_subset, gen_synthetic
from plugin_defense.defender import DefenderConfig, build_defender
from plugin_defense.trainer import EvalSet, TuneConfig, tune_defender
from plugin_defense.victims import VictimConfig, accuracy, train_victim


def main():
    train = gen_synthetic(SyntheticSpec(num_classes=4, n=400, channels=1, size=16), seed=0)
    test = gen_synthetic(SyntheticSpec(num_classes=4, n=128, channels=1, size=16), seed=1)
    victim = train_victim(train, VictimConfig(kind="mlp", hidden=(128,), max_epochs=60, floor=0.8, augment_shift=0))

    attack = attack_fn(AttackConfig())
    idx = fixed_test_subset(test, 64, 42)
    x, y = test.images[idx], test.labels[idx]
    x_adv = attack(victim, x, y)
    print(f"undefended  CA {accuracy(victim, x, y):.3f}  AA {accuracy(victim, x_adv, y):.3f}")

    defender = build_defender(DefenderConfig(channels=1, image_size=(16, 16), patch=4, dim=32, layers=2, heads=2))
    trainset = build_defense_trainset(victim, attack, train, SamplerConfig(mode="1adv", seed=42))
    _, curve = tune_defender(defender, victim, trainset, TuneConfig(epochs=200, lr=1e-3, eval_every=50),
                             test=EvalSet(x, y, x_adv))
    for row in curve.rows:
        if row.test_ca is not None:
            print(f"epoch {row.epoch:3d}  loss {row.loss:.4f}  CA {row.test_ca:.3f}  AA {row.test_aa:.3f}")
    theta1, theta2 = defender.partition()
    print(f"tuned {sum(p.data.size for p in theta1)} layer-norm values, froze {sum(p.data.size for p in theta2)}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
