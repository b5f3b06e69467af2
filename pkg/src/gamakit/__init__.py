"""Guided margin attacks, guided adversarial training and robustness diagnostics on a small numpy network engine."""

from .attacks import (
    ATTACK_NAMES,
    AttackConfig,
    AttackResult,
    fgsm,
    gama_attack,
    gama_mt,
    make_attack,
    pgd_baseline,
    rfgsm,
    run_attack,
    worst_case_over_restarts,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledBatch, load_dataset, load_mnist_idx, mnist_desk, synth_gaussians
from .errors import ConfigError, GamakitError, IncompatibleCheckpoint, NumericError, ParseError
from .harness import evaluate, lipschitz_estimate, loss_surface, sweep_epsilon, transfer_eval
from .losses import LossSpec
from .nn import Network, build, forward, input_gradient, lenet, mlp, param_gradient
from .training import GatConfig, gat_preset, gat_train, train

__version__ = "0.1.0"
