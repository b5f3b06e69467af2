"""
l-infinity attacks: the guided margin attack (PGD and Frank-Wolfe updates),
its multi-targeted ensemble, and FGSM / R-FGSM / I-FGSM / PGD baselines.

All iterative attacks share one engine, :func:`iterative_attack`. Per-sample
random streams are derived from ``(seed, restart, sample id)`` so results do
not depend on how a dataset is split into batches.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError
from .losses import LossSpec, margin_prob, resolve_kind
from .nn import forward, input_gradient, softmax

MODES = ("pgd", "fw")
INITS = ("bernoulli", "uniform", "zero")


@dataclass
class AttackConfig:
    """Parameters of one attack run.

    ``step_size`` is the PGD step (``None`` means twice epsilon) and ``gamma``
    the Frank-Wolfe convex weight; both are divided by ``drop_factor`` after
    each iteration listed in ``schedule``. The relaxation weight decays
    linearly from ``lambda0`` to zero over ``tau`` iterations unless
    ``constant_lambda`` is set.
    """

    name: str = "gama-pgd"
    epsilon: float = 8 / 255
    steps: int = 100
    mode: str = "pgd"
    step_size: Optional[float] = None
    gamma: float = 0.5
    lambda0: float = 50.0
    tau: int = 25
    constant_lambda: bool = False
    schedule: tuple = (60, 85)
    drop_factor: float = 10.0
    init: str = "bernoulli"
    init_magnitude: Optional[float] = None
    loss: str = "gama"
    restarts: int = 1
    seed: int = 0
    targets_k: Optional[int] = None

    def __post_init__(self):
        self.schedule = tuple(sorted(int(s) for s in self.schedule))
        self.validate()

    def validate(self):
        if self.name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {self.name!r}; valid: {', '.join(ATTACK_NAMES)}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.drop_factor <= 1 and self.schedule:
            raise ConfigError(f"drop_factor must exceed 1, got {self.drop_factor}")
        if any(s < 0 or s >= self.steps for s in self.schedule):
            raise ConfigError(f"schedule {self.schedule} must lie in [0, {self.steps})")
        if self.lambda0 < 0:
            raise ConfigError(f"lambda0 must be >= 0, got {self.lambda0}")
        if not self.constant_lambda and self.lambda0 and not 0 < self.tau <= self.steps:
            raise ConfigError(f"tau must lie in (0, steps], got {self.tau}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be positive, got {self.restarts}")
        if self.targets_k is not None and self.targets_k < 0:
            raise ConfigError(f"targets_k must be >= 0, got {self.targets_k}")
        resolve_kind(self.loss)

    @property
    def eta(self):
        return 2.0 * self.epsilon if self.step_size is None else self.step_size

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class AttackTrace:
    objective: np.ndarray  # (T, M) attack loss at each evaluated iterate
    margin: np.ndarray  # (T + 1, M) margin at x_0 .. x_T
    linf: np.ndarray  # (T,) max |x_t - x| after each update
    x_min: np.ndarray  # (T,)
    x_max: np.ndarray  # (T,)
    fw_preclamp: np.ndarray  # (T,) max |delta| before the image clamp (fw only)
    best_x: np.ndarray
    best_margin: np.ndarray


@dataclass
class AttackResult:
    x_adv: np.ndarray
    labels: np.ndarray
    pred: np.ndarray
    success: np.ndarray
    margin: np.ndarray
    linf: np.ndarray
    trace: Optional[AttackTrace] = None
    restart_accuracies: list = field(default_factory=list)

    @property
    def accuracy(self):
        return float(1.0 - self.success.mean()) if len(self.success) else 1.0


def _result(net, x, x_adv, y, trace=None):
    _, probs = forward(net, x_adv)
    margin = margin_prob(probs, y)
    flat = (x_adv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1)
    linf = np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(x))
    return AttackResult(
        x_adv=x_adv,
        labels=np.asarray(y),
        pred=probs.argmax(axis=1),
        success=margin >= 0,
        margin=margin,
        linf=linf,
        trace=trace,
    )


def box_bounds(x, epsilon):
    """Per-coordinate feasible interval [max(x - eps, 0), min(x + eps, 1)] in the dtype of ``x``.

    Bounds that rounding pushed outside the exact ball are nudged one ulp inwards.
    """
    x64 = x.astype(np.float64)
    lo64 = np.maximum(x64 - epsilon, 0.0)
    hi64 = np.minimum(x64 + epsilon, 1.0)
    lo, hi = lo64.astype(x.dtype), hi64.astype(x.dtype)
    if x.dtype != np.float64:
        bad = lo.astype(np.float64) < lo64
        lo[bad] = np.nextafter(lo[bad], x.dtype.type(np.inf))
        bad = hi.astype(np.float64) > hi64
        hi[bad] = np.nextafter(hi[bad], x.dtype.type(-np.inf))
    return lo, hi


def project(x, x_new, epsilon, bounds=None):
    """Clamp ``x_new`` to the image range and the epsilon ball around ``x``."""
    lo, hi = box_bounds(x, epsilon) if bounds is None else bounds
    # lo and hi are representable in x.dtype, so the final cast cannot leave the box
    return np.clip(np.clip(x_new, 0.0, 1.0), lo, hi).astype(x.dtype, copy=False)


def sample_rngs(seed, restart, sample_ids, tag=()):
    return [np.random.default_rng([int(seed), int(restart), int(i), *tag]) for i in sample_ids]


def bernoulli_init(shape, epsilon, rng):
    """Each coordinate independently +epsilon or -epsilon with probability 1/2."""
    bits = rng.integers(0, 2, size=shape)
    return np.where(bits == 1, epsilon, -epsilon).astype(np.float64)


def uniform_init(shape, epsilon, rng):
    return rng.uniform(-epsilon, epsilon, size=shape)


def _init_noise(kind, x, magnitude, rngs):
    if kind == "zero" or magnitude == 0:
        return np.zeros_like(x)
    draw = bernoulli_init if kind == "bernoulli" else uniform_init
    return np.stack([draw(x.shape[1:], magnitude, r) for r in rngs]).astype(np.float64)


def lambda_schedule(lambda0, tau, t):
    """Relaxation weight used at iteration ``t``: max(lambda0 - t * lambda0 / tau, 0)."""
    if t >= tau:
        return 0.0
    # lambda0 * (tau - t) / tau equals the linear decay and rounds only once
    return max(lambda0 * (tau - t) / tau, 0.0)


def pgd_update(delta, grad, eta, epsilon):
    return np.clip(delta + eta * np.sign(grad).astype(np.float64), -epsilon, epsilon)


def fw_update(delta, grad, gamma, epsilon):
    """Convex step towards the l-inf ball vertex epsilon * sign(grad); stays inside the ball."""
    return (1.0 - gamma) * delta + gamma * (epsilon * np.sign(grad).astype(np.float64))


def _objective(cfg, lam, ref, target=None):
    kind = resolve_kind(cfg.loss)
    if target is not None:
        return LossSpec("targeted_margin", lam=lam, target=target, reference_probs=ref)
    if kind in ("gama", "ga_ce", "l2_prob_sq"):
        return LossSpec(kind, lam=lam, reference_probs=ref)
    return LossSpec(kind)


def iterative_attack(net, x, y, cfg, restart=0, sample_ids=None, trace=False, target=None, tag=()):
    """Run the guided-margin iteration (or a PGD baseline) on a batch.

    The loss is evaluated at the current iterate, the relaxation weight is
    decreased, then the perturbation is updated by a PGD step plus ball
    projection or a Frank-Wolfe convex step, and the image is clamped to
    [0, 1]. Step sizes are divided at the end of scheduled iterations. The
    final iterate is returned; the best-margin iterate is kept in the trace.
    """
    x = net._check_input(x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(x):
        raise ConfigError(f"{len(y)} labels for {len(x)} samples")
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    eps = cfg.epsilon
    magnitude = eps if cfg.init_magnitude is None else cfg.init_magnitude
    if cfg.init != "zero":
        noise = _init_noise(cfg.init, x, magnitude, sample_rngs(cfg.seed, restart, ids, tag))
    else:
        noise = np.zeros(x.shape)
    # perturbation arithmetic runs in float64; iterates are stored in the network dtype
    x64 = x.astype(np.float64)
    x_t = project(x, x64 + noise, max(eps, magnitude))

    kind = resolve_kind(cfg.loss)
    relaxed = kind in ("gama", "ga_ce", "l2_prob_sq") or (target is not None and cfg.lambda0 > 0)
    try:
        ref = forward(net, x_t)[1] if relaxed else None
    except NumericError as exc:
        raise NumericError(f"iteration 0: {exc}", layer=exc.layer, iteration=0) from None
    eta, gamma = cfg.eta, cfg.gamma
    schedule = set(cfg.schedule)
    T, M = cfg.steps, len(x)
    bounds = box_bounds(x, eps)

    if trace:
        objective = np.empty((T, M))
        margins = np.empty((T + 1, M))
        linf = np.empty(T)
        x_min = np.empty(T)
        x_max = np.empty(T)
        fw_pre = np.zeros(T)
        best_x = x_t.copy()
        best_margin = np.full(M, -np.inf)

    for t in range(T):
        if not relaxed:
            lam = 0.0
        elif cfg.constant_lambda:
            lam = cfg.lambda0
        else:
            lam = lambda_schedule(cfg.lambda0, cfg.tau, t)
        spec = _objective(cfg, lam, ref, target)
        try:
            logits, caches = net.forward_cached(x_t)
            probs = softmax(logits)
            values, dlogits = spec(logits, probs, y)
            if not np.isfinite(values).all():
                raise NumericError("non-finite attack loss", iteration=t)
            grad, _ = net.backward(caches, dlogits, need_params=False)
        except NumericError as exc:
            raise NumericError(f"iteration {t}: {exc}", layer=exc.layer, iteration=t) from None
        if trace:
            objective[t] = values
            margins[t] = margin_prob(probs, y)
            better = margins[t] > best_margin
            best_x[better] = x_t[better]
            best_margin[better] = margins[t][better]

        delta = x_t.astype(np.float64) - x64
        if cfg.mode == "pgd":
            delta = pgd_update(delta, grad, eta, eps)
        else:
            delta = fw_update(delta, grad, gamma, eps)
            if trace:
                fw_pre[t] = np.abs(delta).max() if delta.size else 0.0
        x_t = project(x, x64 + delta, eps, bounds)

        if trace:
            linf[t] = np.abs(x_t.astype(np.float64) - x64).max() if x.size else 0.0
            x_min[t] = x_t.min() if x.size else 0.0
            x_max[t] = x_t.max() if x.size else 0.0
        if t in schedule:
            eta /= cfg.drop_factor
            gamma /= cfg.drop_factor

    res = _result(net, x, x_t, y)
    if trace:
        margins[T] = res.margin
        better = res.margin > best_margin
        best_x[better] = x_t[better]
        best_margin[better] = res.margin[better]
        res.trace = AttackTrace(
            objective=objective,
            margin=margins,
            linf=linf,
            x_min=x_min,
            x_max=x_max,
            fw_preclamp=fw_pre,
            best_x=best_x,
            best_margin=best_margin,
        )
    return res


def gama_attack(net, x, y, cfg, restart=0, sample_ids=None, trace=False):
    """Guided margin attack; ``cfg.mode`` selects the PGD or Frank-Wolfe update."""
    if resolve_kind(cfg.loss) != "gama":
        cfg = cfg.replace(loss="gama")
    return iterative_attack(net, x, y, cfg, restart=restart, sample_ids=sample_ids, trace=trace)


def _combine(results):
    """Per-sample worst case: keep the adversary with the highest margin (earliest on ties)."""
    best = results[0]
    x_adv = best.x_adv.copy()
    margin = best.margin.copy()
    pred = best.pred.copy()
    linf = best.linf.copy()
    for r in results[1:]:
        better = r.margin > margin
        x_adv[better] = r.x_adv[better]
        margin[better] = r.margin[better]
        pred[better] = r.pred[better]
        linf[better] = r.linf[better]
    return AttackResult(
        x_adv=x_adv,
        labels=best.labels,
        pred=pred,
        success=margin >= 0,
        margin=margin,
        linf=linf,
        restart_accuracies=[r.accuracy for r in results],
    )


def top_k_targets(probs, y, k):
    """The ``k`` most probable classes other than ``y``, most probable first."""
    order = np.argsort(-probs, axis=1, kind="stable")
    out = np.empty((len(y), k), dtype=np.int64)
    for i in range(len(y)):
        others = order[i][order[i] != y[i]]
        out[i] = others[:k]
    return out


def gama_mt(net, x, y, cfg, k=None, restart=0, sample_ids=None):
    """Untargeted guided attack plus ``k`` runs targeting the top-k wrong classes.

    Targets are ranked once by clean-image probability. A sample counts as
    broken if any run breaks it; otherwise the highest-margin adversary is kept.
    """
    k = (cfg.targets_k if cfg.targets_k is not None else 5) if k is None else k
    x = net._check_input(x)
    y = np.asarray(y, dtype=np.int64)
    k = min(k, net.num_classes - 1)
    results = [gama_attack(net, x, y, cfg, restart=restart, sample_ids=sample_ids)]
    if k > 0:
        cfg = cfg.replace(loss="gama") if resolve_kind(cfg.loss) != "gama" else cfg
        targets = top_k_targets(forward(net, x)[1], y, k)
        for j in range(k):
            r = iterative_attack(
                net, x, y, cfg, restart=restart, sample_ids=sample_ids,
                target=targets[:, j], tag=(j + 1,),
            )
            # score every run with the untargeted margin
            results.append(r)
    out = _combine(results)
    out.restart_accuracies = []
    return out


def fgsm(net, x, y, epsilon, loss="ce"):
    """One signed-gradient step of size epsilon from the clean image."""
    x = net._check_input(x)
    y = np.asarray(y, dtype=np.int64)
    g = input_gradient(net, x, LossSpec(loss), {"y": y})
    x_adv = project(x, x.astype(np.float64) + epsilon * np.sign(g), epsilon)
    return _result(net, x, x_adv, y)


def rfgsm(net, x, y, epsilon, alpha=None, step=None, seed=0, restart=0, sample_ids=None, loss="ce"):
    """Bernoulli noise of magnitude alpha, a signed step, then projection onto the ball.

    ``alpha`` defaults to epsilon/2 and ``step`` to epsilon - alpha.
    """
    x = net._check_input(x)
    y = np.asarray(y, dtype=np.int64)
    alpha = epsilon / 2 if alpha is None else alpha
    step = epsilon - alpha if step is None else step
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    noise = _init_noise("bernoulli", x, alpha, sample_rngs(seed, restart, ids))
    x64 = x.astype(np.float64)
    x0 = project(x, x64 + noise, alpha)
    g = input_gradient(net, x0, LossSpec(loss), {"y": y})
    delta = pgd_update(x0.astype(np.float64) - x64, g, step, epsilon)
    return _result(net, x, project(x, x64 + delta, epsilon), y)


def pgd_baseline(
    net, x, y, epsilon, loss="ce", steps=10, step_size=None, init="uniform", seed=0,
    schedule=(), drop_factor=10.0, restart=0, sample_ids=None, trace=False,
):
    """Signed-gradient PGD on a plain loss (cross-entropy, margin in probs or logits)."""
    name = {"cross_entropy": "pgd-ce", "margin_prob": "pgd-margin", "margin_logit": "pgd-margin-logit"}
    kind = resolve_kind(loss)
    if kind not in name:
        raise ConfigError(f"pgd baseline supports ce, margin-prob and margin-logit, not {loss!r}")
    cfg = AttackConfig(
        name=name[kind], epsilon=epsilon, steps=steps, mode="pgd",
        step_size=2.5 * epsilon / steps if step_size is None else step_size,
        lambda0=0.0, schedule=schedule, drop_factor=drop_factor, init=init, loss=kind, seed=seed,
    )
    return iterative_attack(net, x, y, cfg, restart=restart, sample_ids=sample_ids, trace=trace)


def run_attack(net, x, y, cfg, restart=0, sample_ids=None):
    """Dispatch a single run of the attack described by ``cfg``."""
    if cfg.name == "fgsm":
        return fgsm(net, x, y, cfg.epsilon, loss=cfg.loss)
    if cfg.name == "rfgsm":
        return rfgsm(
            net, x, y, cfg.epsilon, alpha=cfg.init_magnitude, step=cfg.step_size,
            seed=cfg.seed, restart=restart, sample_ids=sample_ids, loss=cfg.loss,
        )
    if cfg.name == "gama-mt" or cfg.targets_k is not None:
        return gama_mt(net, x, y, cfg, restart=restart, sample_ids=sample_ids)
    return iterative_attack(net, x, y, cfg, restart=restart, sample_ids=sample_ids)


def worst_case_over_restarts(net, x, y, cfg, restarts=None, sample_ids=None):
    """Union of successes over independently seeded restarts 0..R-1."""
    R = cfg.restarts if restarts is None else restarts
    if R < 1:
        raise ConfigError(f"restarts must be positive, got {R}")
    runs = [run_attack(net, x, y, cfg, restart=r, sample_ids=sample_ids) for r in range(R)]
    return _combine(runs)


# --- presets -----------------------------------------------------------------

PRESETS = {
    # CIFAR-10 / ImageNet settings
    "default": dict(lambda0=50.0, tau=25, eta_mult=2.0, schedule=(60, 85), pgd_drop=10.0, fw_drop=5.0),
    "mnist": dict(lambda0=5.0, tau=50, eta_mult=1.0, schedule=(50, 75), pgd_drop=10.0, fw_drop=5.0),
}

ATTACK_NAMES = (
    "fgsm", "rfgsm", "ifgsm", "pgd-ce", "pgd-margin", "pgd-margin-logit",
    "gama-pgd", "gama-fw", "gama-mt",
)


def make_attack(name, epsilon, steps=None, preset="default", seed=0, **overrides):
    """Build an :class:`AttackConfig` for a named attack.

    Guided attacks use the step and relaxation schedule of ``preset``, scaled
    proportionally when ``steps`` differs from 100. With 10 or fewer steps the
    relaxation weight is held constant instead of decayed. Baseline PGD uses a
    fixed step of 2.5 * epsilon / steps with uniform random start, and I-FGSM
    a fixed step of epsilon / steps from the clean image.
    """
    if name not in ATTACK_NAMES:
        raise ConfigError(f"unknown attack {name!r}; valid: {', '.join(ATTACK_NAMES)}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid: {sorted(PRESETS)}")
    p = PRESETS[preset]
    kw = dict(name=name, epsilon=epsilon, seed=seed)
    if name == "fgsm":
        kw.update(steps=1, init="zero", step_size=epsilon, lambda0=0.0, schedule=(), loss="ce")
    elif name == "rfgsm":
        kw.update(steps=1, init="bernoulli", init_magnitude=epsilon / 2, step_size=epsilon / 2,
                  lambda0=0.0, schedule=(), loss="ce")
    elif name == "ifgsm":
        steps = steps or 10
        kw.update(steps=steps, init="zero", step_size=epsilon / steps, lambda0=0.0,
                  schedule=(), loss="ce")
    elif name.startswith("pgd-"):
        steps = steps or 10
        loss = {"pgd-ce": "ce", "pgd-margin": "margin-prob", "pgd-margin-logit": "margin-logit"}[name]
        kw.update(steps=steps, init="uniform", step_size=2.5 * epsilon / steps, lambda0=0.0,
                  schedule=(), loss=loss)
    else:
        steps = steps or 100
        scale = steps / 100.0
        schedule = tuple(sorted({int(round(s * scale)) for s in p["schedule"]} - {steps}))
        schedule = tuple(s for s in schedule if 0 <= s < steps) if steps > 10 else ()
        mode = "fw" if name == "gama-fw" else "pgd"
        kw.update(
            steps=steps, mode=mode, init="bernoulli", loss="gama",
            step_size=p["eta_mult"] * epsilon, gamma=0.5, lambda0=p["lambda0"],
            tau=max(1, min(steps, int(round(p["tau"] * scale)))),
            constant_lambda=steps <= 10, schedule=schedule,
            drop_factor=p["fw_drop"] if mode == "fw" else p["pgd_drop"],
        )
        if name == "gama-mt":
            kw["targets_k"] = 5
    kw.update(overrides)
    return AttackConfig(**kw)
