"""
Training regimes: standard, FGSM-AT, R-FGSM-AT and guided adversarial
training (GAT) with its relaxation-weight step-up schedule.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import _init_noise, fgsm, make_attack, pgd_update, project, rfgsm, run_attack, sample_rngs
from .errors import ConfigError, NumericError
from .losses import LossSpec, cross_entropy_logits, is_correct, softmax_vjp
from .nn import SGD, add_grads, forward, input_gradient, softmax

REGIMES = ("standard", "fgsm_at", "rfgsm_at", "gat")
DIVERGENCE_LOSS = 1e3


class TrainingDiverged(NumericError):
    pass


@dataclass
class GatConfig:
    """Training parameters; non-GAT regimes ignore the lambda fields.

    Learning-rate drops and lambda step-ups are applied at the start of the
    listed (0-based) epochs.
    """

    epsilon: float = 0.3
    alpha: Optional[float] = None
    lambda_init: float = 15.0
    stepup_factor: float = 3.0
    stepup_epochs: tuple = ()
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    lr_drops: tuple = ()  # ((epoch, divide_by), ...)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alternate_lambda: bool = True
    seed: int = 0
    allow_alpha_above_epsilon: bool = False
    val_size: int = 500
    eval_every: int = 1

    def __post_init__(self):
        self.stepup_epochs = tuple(int(e) for e in self.stepup_epochs)
        self.lr_drops = tuple((int(e), float(d)) for e, d in self.lr_drops)
        self.validate()

    @property
    def noise(self):
        return self.epsilon / 2 if self.alpha is None else self.alpha

    def validate(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.noise < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.noise}")
        if self.noise > self.epsilon and not self.allow_alpha_above_epsilon:
            raise ConfigError("alpha > epsilon requires allow_alpha_above_epsilon")
        if self.lambda_init < 0:
            raise ConfigError("lambda_init must be >= 0")
        if self.stepup_factor < 1:
            raise ConfigError("stepup_factor must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        drop_epochs = {e for e, _ in self.lr_drops}
        stray = [e for e in self.stepup_epochs if e not in drop_epochs]
        if stray:
            raise ConfigError(f"stepup epochs {stray} do not coincide with a learning-rate drop")

    def lambda_at(self, epoch):
        """Relaxation weight in force during ``epoch``."""
        k = sum(1 for e in self.stepup_epochs if e <= epoch)
        return self.lambda_init * self.stepup_factor**k

    def lr_at(self, epoch):
        lr = self.lr
        for e, d in self.lr_drops:
            if e <= epoch:
                lr /= d
        return lr

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def gat_preset(name, epochs=None, **overrides):
    """Reference settings for MNIST and CIFAR-scale runs, with drops rescaled to ``epochs``."""
    if name == "mnist":
        E = epochs or 50
        drops = tuple((int(round(E * q)), 5.0) for q in (0.25, 0.5, 0.75))
        kw = dict(
            epsilon=0.3, alpha=0.3, lambda_init=15.0, stepup_factor=3.0,
            stepup_epochs=tuple(e for e, _ in drops), epochs=E, lr=0.01, lr_drops=drops,
        )
    elif name == "cifar":
        E = epochs or 100
        drops = tuple((int(round(E * q)), 10.0) for q in (0.70, 0.85))
        kw = dict(
            epsilon=8 / 255, alpha=4 / 255, lambda_init=10.0, stepup_factor=4.0,
            stepup_epochs=(drops[1][0],), epochs=E, lr=0.1, lr_drops=drops,
        )
    else:
        raise ConfigError(f"unknown training preset {name!r}; valid: mnist, cifar")
    kw.update(momentum=0.9, weight_decay=5e-4)
    kw.update(overrides)
    return GatConfig(**kw)


@dataclass
class EpochStats:
    epoch: int
    clean_acc: float
    fgsm_acc: float
    pgd7_acc: float
    ce_clean: float
    ce_adv: float
    lam: float
    ce_gap: float

    CSV_HEADER = ("epoch", "clean_acc", "fgsm_acc", "pgd7_acc", "ce_clean", "ce_adv", "lambda", "ce_gap")

    def row(self):
        return (self.epoch, self.clean_acc, self.fgsm_acc, self.pgd7_acc, self.ce_clean,
                self.ce_adv, self.lam, self.ce_gap)


@dataclass
class TrainReport:
    regime: str
    epochs: list = field(default_factory=list)
    clean_losses: list = field(default_factory=list)  # per-batch CE on clean inputs
    adv_losses: list = field(default_factory=list)  # per-batch CE on training adversaries
    max_linf: float = 0.0
    x_range: tuple = (0.0, 1.0)
    checkpoint: Optional[str] = None
    runtime: float = 0.0


def gat_attack_step(net, x, y, epsilon, alpha, lam, rngs):
    """Single-step guided adversary used by GAT.

    Bernoulli noise of magnitude alpha, one signed step of size epsilon on
    cross-entropy plus ``lam`` times the squared distance to the clean
    softmax, projection onto the epsilon ball and clamp to [0, 1].
    """
    x = net._check_input(x)
    x64 = x.astype(np.float64)
    x0 = project(x, x64 + _init_noise("bernoulli", x, alpha, rngs), alpha)
    if lam:
        spec = LossSpec("ga_ce", lam=lam, reference_probs=forward(net, x)[1])
    else:
        spec = LossSpec("cross_entropy")
    try:
        g = input_gradient(net, x0, spec, {"y": y})
    except NumericError as exc:
        raise NumericError(f"GAT attack step: {exc}", layer=exc.layer) from None
    delta = pgd_update(x0.astype(np.float64) - x64, g, epsilon, epsilon)
    return project(x, x64 + delta, epsilon)


def _ce_grads(net, x, y, scale):
    logits, caches = net.forward_cached(x)
    probs = softmax(logits)
    values = cross_entropy_logits(logits, y)
    dz = probs.copy()
    dz[np.arange(len(y)), y] -= 1.0
    _, grads = net.backward(caches, dz * scale)
    return values, grads


def _gat_grads(net, x, x_adv, y, lam):
    """Gradients of mean_i CE(f(x_i), y_i) + lam * ||f(x~_i) - f(x_i)||^2."""
    M = len(y)
    lc, cc = net.forward_cached(x)
    la, ca = net.forward_cached(x_adv)
    pc, pa = softmax(lc), softmax(la)
    ce = cross_entropy_logits(lc, y)
    d = pa - pc
    reg = (d * d).sum(axis=1)
    dzc = pc.copy()
    dzc[np.arange(M), y] -= 1.0
    dzc /= M
    if lam:
        dzc += softmax_vjp(pc, -2.0 * lam * d / M)
    dza = softmax_vjp(pa, 2.0 * lam * d / M)
    _, gc = net.backward(cc, dzc)
    _, ga = net.backward(ca, dza)
    loss = float(np.mean(ce + lam * reg))
    return loss, add_grads(gc, ga), cross_entropy_logits(la, y)


def validation_stats(net, val, epsilon, seed=0):
    """Clean / FGSM / PGD-7 accuracy and CE on a validation batch."""
    x, y = val.images, val.labels
    logits, probs = forward(net, x)
    clean_acc = float(is_correct(probs, y).mean())
    ce_clean = float(cross_entropy_logits(logits, y).mean())
    rf = fgsm(net, x, y, epsilon)
    rp = run_attack(net, x, y, make_attack("pgd-ce", epsilon, steps=7, seed=seed))
    ce_f = float(cross_entropy_logits(forward(net, rf.x_adv)[0], y).mean())
    ce_p = float(cross_entropy_logits(forward(net, rp.x_adv)[0], y).mean())
    return clean_acc, rf.accuracy, rp.accuracy, ce_clean, abs(ce_f - ce_p)


def train(net, data, cfg, regime="gat", val=None, log=None):
    """Train ``net`` in place under ``regime``; returns ``(net, TrainReport)``.

    ``data`` is a :class:`~gamakit.data.LabeledBatch`. Minibatches are drawn
    from a per-epoch permutation seeded by ``(cfg.seed, epoch)``. The loss is
    averaged over the minibatch.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; valid: {', '.join(REGIMES)}")
    t0 = time.perf_counter()
    x_all = data.images.astype(net.np_dtype)
    y_all = data.labels
    n = len(y_all)
    val = val.take(cfg.val_size) if val is not None and cfg.val_size else val
    opt = SGD(net, cfg.lr, cfg.momentum, cfg.weight_decay)
    report = TrainReport(regime=regime)
    eps, alpha = cfg.epsilon, cfg.noise
    lo, hi = np.inf, -np.inf

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        lam = cfg.lambda_at(epoch) if regime == "gat" else 0.0
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        adv_ce = []
        for j, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            rngs = sample_rngs(cfg.seed, epoch + 1, idx)
            if regime == "standard":
                x_adv = None
            elif regime == "fgsm_at":
                x_adv = fgsm(net, x, y, eps).x_adv
            elif regime == "rfgsm_at":
                x_adv = rfgsm(net, x, y, eps, alpha=alpha, step=eps - alpha,
                              seed=cfg.seed, restart=epoch + 1, sample_ids=idx).x_adv
            else:
                lam_attack = lam if (not cfg.alternate_lambda or j % 2 == 0) else 0.0
                x_adv = gat_attack_step(net, x, y, eps, alpha, lam_attack, rngs)

            if x_adv is not None:
                dist = np.abs(x_adv - x).max()
                report.max_linf = max(report.max_linf, float(dist))
                lo, hi = min(lo, float(x_adv.min())), max(hi, float(x_adv.max()))
                if dist > eps + 1e-6 or x_adv.min() < 0 or x_adv.max() > 1:
                    raise ConfigError(f"training adversary left the threat model (epoch {epoch})")

            try:
                if regime == "gat":
                    loss, grads, ce_adv = _gat_grads(net, x, x_adv, y, lam)
                    ce_clean = None
                elif regime == "standard":
                    ce_clean, grads = _ce_grads(net, x, y, 1.0 / len(y))
                    loss, ce_adv = float(ce_clean.mean()), None
                else:
                    ce_clean, g1 = _ce_grads(net, x, y, 0.5 / len(y))
                    ce_adv, g2 = _ce_grads(net, x_adv, y, 0.5 / len(y))
                    grads = add_grads(g1, g2)
                    loss = float(0.5 * (ce_clean.mean() + ce_adv.mean()))
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch=epoch) from None
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise TrainingDiverged(f"training loss {loss} diverged at epoch {epoch}", epoch=epoch)
            opt.step(grads)
            if ce_clean is not None:
                report.clean_losses.append(float(np.mean(ce_clean)))
            if ce_adv is not None:
                report.adv_losses.append(float(np.mean(ce_adv)))
                adv_ce.append(float(np.mean(ce_adv)))

        if val is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            clean_acc, fgsm_acc, pgd_acc, ce_clean_v, gap = validation_stats(net, val, eps, cfg.seed)
        else:
            clean_acc = fgsm_acc = pgd_acc = ce_clean_v = gap = float("nan")
        stats = EpochStats(
            epoch=epoch, clean_acc=clean_acc, fgsm_acc=fgsm_acc, pgd7_acc=pgd_acc,
            ce_clean=ce_clean_v, ce_adv=float(np.mean(adv_ce)) if adv_ce else float("nan"),
            lam=lam, ce_gap=gap,
        )
        report.epochs.append(stats)
        if log is not None:
            log(stats)
    if np.isfinite(lo):
        report.x_range = (lo, hi)
    report.runtime = time.perf_counter() - t0
    return net, report


def gat_train(net, data, cfg, val=None, log=None):
    return train(net, data, cfg, "gat", val=val, log=log)


def fgsm_at(net, data, cfg, val=None, log=None):
    return train(net, data, cfg, "fgsm_at", val=val, log=log)


def rfgsm_at(net, data, cfg, val=None, log=None):
    return train(net, data, cfg, "rfgsm_at", val=val, log=log)


def standard_train(net, data, cfg, val=None, log=None):
    return train(net, data, cfg, "standard", val=val, log=log)
