"""Plug-in adversarial defense for frozen image classifiers, on a small numpy autodiff engine."""
from .attacks import AttackConfig, apgd, fgsm, pgd, run_attack
from .autodiff import Rng, Tensor, grad, grad_check, precision, set_precision
from .baselines import Baseline, RpConfig, gaussian_noise_defense, rp_defense
from .data import Dataset, SamplerConfig, build_defense_trainset, fixed_test_subset, gen_synthetic, load_mnist
from .defender import DefenderConfig, DefenderModel, build_defender, partition_params
from .errors import ConfigError, ContractError, ParseError, TrainingError
from .harness import ExperimentSpec, ResultRow, TransferSpec, emit_results, evaluate_ca_aa, run_experiment
from .trainer import CurveLog, LionState, TuneConfig, lion_step, tune_defender
from .victims import VictimConfig, accuracy, build_victim, predict, train_victim

__version__ = "0.1.0"
