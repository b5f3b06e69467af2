"""
Evaluation protocols and diagnostics: robust accuracy under several attacks,
black-box transfer, loss-surface grids, epsilon sweeps and sampled local
Lipschitz estimates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, fgsm, gama_attack, make_attack, run_attack, worst_case_over_restarts
from .errors import ConfigError
from .losses import LossSpec, cross_entropy_logits, is_correct
from .nn import forward, input_gradient


@dataclass
class AttackEval:
    name: str
    accuracy: float
    restart_accuracies: list
    mean_linf: float
    mean_l2: float
    result: object = None


@dataclass
class EvalReport:
    clean_accuracy: float
    n_samples: int
    attacks: dict = field(default_factory=dict)
    runtime: float = 0.0

    def robust_accuracy(self, name):
        return self.attacks[name].accuracy

    def rows(self):
        yield ("clean", self.clean_accuracy, self.clean_accuracy, float("nan"), float("nan"))
        for name, a in self.attacks.items():
            worst = a.accuracy
            yield (name, a.accuracy, worst, a.mean_linf, a.mean_l2)


def _distortion(result, x):
    ok = result.success
    if not ok.any():
        return float("nan"), float("nan")
    d = (result.x_adv[ok] - x[ok]).reshape(int(ok.sum()), -1)
    return float(np.abs(d).max(axis=1).mean()), float(np.sqrt((d * d).sum(axis=1)).mean())


def _label(cfg, used):
    name = cfg.name if cfg.name in ("fgsm", "rfgsm") else f"{cfg.name}-{cfg.steps}"
    if cfg.restarts > 1:
        name += f"x{cfg.restarts}"
    base, k = name, 2
    while name in used:
        name, k = f"{base}#{k}", k + 1
    return name


def evaluate(net, batch, attacks, keep_results=False, scoring_net=None):
    """Clean accuracy plus worst-case-over-restarts accuracy for each attack config.

    Adversaries are crafted on ``net`` and scored on ``scoring_net`` (defaults
    to ``net``); passing a different scoring network gives the black-box
    transfer protocol. ``net`` is never modified.
    """
    t0 = time.perf_counter()
    target = net if scoring_net is None else scoring_net
    x, y = batch.images, batch.labels
    xs = target._check_input(x)
    clean = float(is_correct(forward(target, xs)[1], y).mean())
    report = EvalReport(clean_accuracy=clean, n_samples=len(y))
    for cfg in attacks:
        if not isinstance(cfg, AttackConfig):
            raise ConfigError(f"expected AttackConfig, got {type(cfg).__name__}")
        runs = [run_attack(net, x, y, cfg, restart=r) for r in range(cfg.restarts)]
        scored = [_rescore(target, xs, r, y) for r in runs] if scoring_net is not None else runs
        from .attacks import _combine
        res = _combine(scored)
        linf, l2 = _distortion(res, xs)
        report.attacks[_label(cfg, report.attacks)] = AttackEval(
            name=cfg.name, accuracy=res.accuracy, restart_accuracies=res.restart_accuracies,
            mean_linf=linf, mean_l2=l2, result=res if keep_results else None,
        )
    report.runtime = max(time.perf_counter() - t0, 1e-9)
    return report


def _rescore(net, x, result, y):
    from .attacks import _result
    return _result(net, x, result.x_adv.astype(net.np_dtype), y)


def transfer_eval(source, target, batch, attacks, keep_results=False):
    """Black-box protocol: craft on ``source``, score on ``target``."""
    if source is target:
        return evaluate(target, batch, attacks, keep_results=keep_results)
    return evaluate(source, batch, attacks, keep_results=keep_results, scoring_net=target)


@dataclass
class SurfaceGrid:
    d1: np.ndarray
    d2: np.ndarray
    loss: np.ndarray  # (len(d2), len(d1))
    g: np.ndarray
    g_perp: np.ndarray
    kind: str
    lam: float
    seed: int


def _surface_loss(kind, lam, ref):
    if kind == "gama":
        return LossSpec("gama", lam=lam, reference_probs=ref)
    return LossSpec(kind)


def loss_surface(net, x, y, kind="margin-prob", lam=25.0, radius=None, resolution=51, seed=0,
                 epsilon=0.3):
    """Loss on x + d1 * g + d2 * g_perp over a square grid.

    ``g`` is the sign of the input gradient of the chosen loss at ``x``;
    ``g_perp`` is a seeded Gaussian direction orthogonalised against ``g`` and
    rescaled to the same l2 norm. Both offsets range over [-radius, radius]
    (default: epsilon). For the ``gama`` loss the reference is f(x).
    """
    x = net._check_input(x)[:1].astype(np.float64)
    y = np.asarray([y]).reshape(1)
    radius = epsilon if radius is None else radius
    x64 = x
    ref = forward(net, x64)[1]
    spec = _surface_loss(kind, lam, ref)
    grad = input_gradient(net, x64, spec, {"y": y})
    g = np.sign(grad[0]).astype(np.float64)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(g.shape)
    gn = float((g * g).sum())
    if gn > 0:
        r = r - (r * g).sum() / gn * g
        r *= np.sqrt(gn) / np.linalg.norm(r)
        # second pass removes rounding residue
        r = r - (r * g).sum() / gn * g
    else:
        r = np.zeros_like(g)
    d1 = np.linspace(-radius, radius, resolution)
    d2 = np.linspace(-radius, radius, resolution)
    A, B = np.meshgrid(d1, d2)
    pts = x64[0][None] + A.reshape(-1, *([1] * g.ndim)) * g + B.reshape(-1, *([1] * g.ndim)) * r
    pts = np.clip(pts, 0.0, 1.0)
    loss = np.empty(len(pts))
    ys = np.repeat(y, len(pts))
    for s in range(0, len(pts), 512):
        logits, probs = forward(net, pts[s : s + 512])
        sl = slice(s, s + 512)
        if spec.reference_probs is not None:
            spec_b = LossSpec(spec.kind, lam=spec.lam,
                              reference_probs=np.repeat(ref, len(logits), axis=0))
        else:
            spec_b = spec
        loss[sl] = spec_b.value(logits, probs, ys[sl])
    return SurfaceGrid(d1=d1, d2=d2, loss=loss.reshape(resolution, resolution), g=g, g_perp=r,
                       kind=spec.kind, lam=lam if kind == "gama" else 0.0, seed=seed)


@dataclass
class SweepPoint:
    epsilon: float
    pgd7_accuracy: float
    fgsm_loss: float


def sweep_epsilon(net, batch, epsilons, seed=0, attack="pgd-ce"):
    """PGD-7 accuracy and mean FGSM cross-entropy for each epsilon."""
    x, y = batch.images, batch.labels
    xs = net._check_input(x)
    out = []
    for eps in epsilons:
        eps = float(eps)
        if eps == 0:
            logits, probs = forward(net, xs)
            out.append(SweepPoint(0.0, float(is_correct(probs, y).mean()),
                                  float(cross_entropy_logits(logits, y).mean())))
            continue
        acc = run_attack(net, x, y, make_attack(attack, eps, steps=7, seed=seed)).accuracy
        fx = fgsm(net, x, y, eps).x_adv
        loss = float(cross_entropy_logits(forward(net, fx)[0], y).mean())
        out.append(SweepPoint(eps, acc, loss))
    return out


@dataclass
class LipschitzReport:
    ratios: np.ndarray  # per-sample maximum ratio
    n_samples: int
    included_adversary: bool

    @property
    def mean(self):
        return float(np.mean(self.ratios)) if len(self.ratios) else float("nan")

    @property
    def max(self):
        return float(np.max(self.ratios)) if len(self.ratios) else float("nan")

    @property
    def median(self):
        return float(np.median(self.ratios)) if len(self.ratios) else float("nan")


def lipschitz_estimate(net, x, epsilon, n_samples=64, rng=None, y=None, adversary_cfg=None,
                       min_dist=1e-6):
    """Sampled local Lipschitz constant of the softmax output around each ``x``.

    For every sample, draws ``n_samples`` points uniformly from the epsilon
    ball (clamped to [0, 1]) and, when ``adversary_cfg`` and labels are given,
    adds the adversary found by the guided attack. Returns the maximum of
    ||f(x) - f(x~)||_2 / ||x - x~||_2, ignoring points closer than ``min_dist``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    xs = net._check_input(x)
    p0 = forward(net, xs)[1]
    best = np.zeros(len(xs))
    seen = np.zeros(len(xs), dtype=bool)

    def update(xt):
        pt = forward(net, xt)[1]
        num = np.linalg.norm((pt - p0).reshape(len(xs), -1), axis=1)
        den = np.linalg.norm((xt - xs).reshape(len(xs), -1), axis=1)
        ok = den >= min_dist
        ratio = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        np.maximum(best, ratio, out=best)
        seen[:] |= ok

    for _ in range(n_samples):
        u = rng.uniform(-epsilon, epsilon, size=xs.shape)
        update(np.clip(xs + u, 0.0, 1.0).astype(xs.dtype))
    if adversary_cfg is not None:
        if y is None:
            raise ConfigError("labels are required to include the attack adversary")
        update(gama_attack(net, xs, y, adversary_cfg).x_adv)
    return LipschitzReport(ratios=best, n_samples=n_samples,
                           included_adversary=adversary_cfg is not None)
