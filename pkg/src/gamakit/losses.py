"""
Attack and training objectives.

Every loss is evaluated per sample. :class:`LossSpec` bundles a loss kind with
its parameters and, when called as ``spec(logits, probs, y)``, returns the
per-sample values together with the gradient of their sum w.r.t. the logits,
which is the handle expected by :func:`gamakit.nn.input_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .nn import log_softmax

LOG_FLOOR = 1e-30

KINDS = (
    "cross_entropy",
    "margin_prob",
    "margin_logit",
    "gama",
    "ga_ce",
    "targeted_margin",
    "l2_prob_sq",
)

# stable names used by configs and the command line
CLI_NAMES = {
    "ce": "cross_entropy",
    "margin-prob": "margin_prob",
    "margin-logit": "margin_logit",
    "gama": "gama",
    "ga-ce": "ga_ce",
    "targeted-margin": "targeted_margin",
    "l2-prob-sq": "l2_prob_sq",
}

_NEEDS_REFERENCE = {"gama", "ga_ce", "l2_prob_sq"}


def resolve_kind(name):
    kind = CLI_NAMES.get(name, name)
    if kind not in KINDS:
        raise ConfigError(f"unknown loss {name!r}; valid: {sorted(CLI_NAMES)}")
    return kind


def _labels(y, n, num_classes):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ConfigError(f"{y.shape[0]} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"label out of range for {num_classes} classes")
    return y


def _competitor(scores, y):
    """Index of the strongest class other than ``y`` (ties: lowest index)."""
    if scores.shape[1] < 2:
        raise ConfigError("margin losses need at least two classes")
    masked = scores.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def cross_entropy(probs, y):
    """-log p_y with a floor that keeps the log finite."""
    probs = np.asarray(probs)
    y = _labels(y, probs.shape[0], probs.shape[1])
    return -np.log(np.maximum(probs[np.arange(len(y)), y], LOG_FLOOR))


def cross_entropy_logits(logits, y):
    logits = np.asarray(logits)
    y = _labels(y, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(y)), y]


def margin_prob(probs, y):
    """max_{j != y} p_j - p_y; positive exactly when the sample is misclassified."""
    probs = np.asarray(probs)
    y = _labels(y, probs.shape[0], probs.shape[1])
    rows = np.arange(len(y))
    j = _competitor(probs, y)
    return probs[rows, j] - probs[rows, y]


def margin_logit(logits, y):
    return margin_prob(logits, y)


def l2_prob_sq(probs, reference):
    probs = np.asarray(probs)
    reference = np.asarray(reference)
    if probs.shape != reference.shape:
        raise ConfigError(f"probability shapes differ: {probs.shape} vs {reference.shape}")
    d = probs - reference
    return (d * d).sum(axis=1)


def gama_loss(probs_adv, y, probs_clean, lam):
    base = margin_prob(probs_adv, y)
    if lam == 0:
        return base
    return base + lam * l2_prob_sq(probs_adv, probs_clean)


def ga_ce_loss(probs_adv, logits_adv, y, probs_clean, lam):
    base = cross_entropy_logits(logits_adv, y)
    if lam == 0:
        return base
    return base + lam * l2_prob_sq(probs_adv, probs_clean)


def targeted_margin(probs, y, target):
    probs = np.asarray(probs)
    y = _labels(y, probs.shape[0], probs.shape[1])
    t = _labels(np.broadcast_to(target, y.shape), len(y), probs.shape[1])
    rows = np.arange(len(y))
    return probs[rows, t] - probs[rows, y]


def is_correct(probs, y):
    """True where the true class strictly beats every other class (ties count as errors)."""
    return margin_prob(probs, y) < 0


def softmax_vjp(probs, grad_probs):
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


@dataclass
class LossSpec:
    kind: str = "cross_entropy"
    lam: float = 0.0
    target: Optional[object] = None
    reference_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = resolve_kind(self.kind)
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.kind in _NEEDS_REFERENCE and self.reference_probs is None:
            raise ConfigError(f"loss {self.kind} needs reference_probs")
        if self.kind == "targeted_margin":
            if self.target is None:
                raise ConfigError("targeted_margin needs a target class")
            # the multi-targeted attack adds the relaxation term to the targeted margin
            if self.lam and self.reference_probs is None:
                raise ConfigError("targeted_margin with lambda > 0 needs reference_probs")

    def value(self, logits, probs, y):
        return self(logits, probs, y)[0]

    def __call__(self, logits, probs, y):
        """Return ``(values, dlogits)`` for a batch."""
        n, num_classes = logits.shape
        y = _labels(y, n, num_classes)
        rows = np.arange(n)
        kind = self.kind
        gp = None  # gradient w.r.t. probs
        dz = None  # gradient w.r.t. logits (direct part)

        if kind in ("cross_entropy", "ga_ce"):
            values = -log_softmax(logits)[rows, y]
            dz = probs.copy()
            dz[rows, y] -= 1.0
        elif kind == "margin_logit":
            j = _competitor(logits, y)
            values = logits[rows, j] - logits[rows, y]
            dz = np.zeros_like(logits)
            dz[rows, j] += 1.0
            dz[rows, y] -= 1.0
        elif kind in ("margin_prob", "gama", "targeted_margin"):
            if kind == "targeted_margin":
                j = _labels(np.broadcast_to(self.target, y.shape), n, num_classes)
                if np.any(j == y):
                    raise ConfigError("target class equals the true label")
            else:
                j = _competitor(probs, y)
            values = probs[rows, j] - probs[rows, y]
            gp = np.zeros_like(probs)
            gp[rows, j] += 1.0
            gp[rows, y] -= 1.0
        else:  # l2_prob_sq
            values = np.zeros(n, dtype=probs.dtype)
            gp = np.zeros_like(probs)

        relax = kind == "l2_prob_sq" or (kind in ("gama", "ga_ce") and self.lam != 0)
        lam = 1.0 if kind == "l2_prob_sq" else self.lam
        if kind == "targeted_margin" and self.lam != 0:
            relax = True
        if relax:
            ref = np.asarray(self.reference_probs)
            if ref.shape != probs.shape:
                raise ConfigError(f"reference probs shape {ref.shape} != {probs.shape}")
            d = probs - ref
            values = values + lam * (d * d).sum(axis=1)
            gp = (gp if gp is not None else np.zeros_like(probs)) + 2.0 * lam * d

        grad = np.zeros_like(logits) if dz is None else dz
        if gp is not None:
            grad = grad + softmax_vjp(probs, gp)
        return values, grad
