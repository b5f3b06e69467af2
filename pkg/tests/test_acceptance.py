"""
End-to-end acceptance checks.

Each criterion prints one PASS/FAIL line (visible in ``pytest -v`` output)
before asserting. Trained desk-scale models are shared through a
module-level cache so every regime is trained once per seed.
"""

import os
import time
from fractions import Fraction

import numpy as np
import pytest

from gamakit import attacks, cli, harness, nn, training
from gamakit.attacks import make_attack
from gamakit.data import mnist_desk
from gamakit.losses import KINDS, LossSpec, is_correct

from conftest import random_network
from oracles import (
    central_difference,
    grid_max_margin,
    kink_distance,
    lambda_exact,
    max_relative_error,
    ref_loss,
    ref_softmax,
)

SEEDS = (0, 1, 2)
EPS = 0.3


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


# --- 1. gradient correctness ---------------------------------------------------

def _loss_case(rng, kind, n_classes, m):
    y = rng.integers(0, n_classes, m)
    lam = float(rng.uniform(0.5, 50)) if kind in ("gama", "ga_ce", "targeted_margin") else 0.0
    ref = ref_softmax(rng.normal(size=(m, n_classes)))
    target = (y + 1 + rng.integers(0, n_classes - 1, m)) % n_classes
    spec = LossSpec(kind, lam=lam, reference_probs=ref,
                    target=target if kind == "targeted_margin" else None)
    oracle = lambda logits: ref_loss(kind, logits, y, lam=lam if kind != "l2_prob_sq" else 1.0,
                                     ref=ref, target=target).sum()
    return spec, y, oracle


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checked, resampled = 0.0, 0, 0
    for _ in range(100):
        net = random_network(rng)
        for kind in KINDS:
            for attempt in range(50):
                x = rng.uniform(0.05, 0.95, (2, *net.input_shape))
                spec, y, oracle = _loss_case(rng, kind, net.num_classes, 2)
                if kink_distance(net, x, kind, y) > 1e-3:
                    break
                resampled += 1
            else:
                pytest.fail("could not draw a kink-free configuration")
            gx = nn.input_gradient(net, x, spec, {"y": y})
            fd = central_difference(lambda v: oracle(nn.forward(net, v)[0]), x)
            worst = max(worst, max_relative_error(gx, fd))
            grads = nn.param_gradient(net, x, spec, {"y": y})
            for i, name, p in net.parameters():
                def f(theta, i=i, name=name):
                    saved = net.layers[i].params[name]
                    net.layers[i].params[name] = theta
                    try:
                        return oracle(nn.forward(net, x)[0])
                    finally:
                        net.layers[i].params[name] = saved
                worst = max(worst, max_relative_error(grads[i][name], central_difference(f, p)))
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report(capsys, 1, ok, f"{checked} net/loss pairs, max relative error {worst:.2e}, "
                          f"{resampled} near-kink draws resampled, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60


# --- 2. brute-force oracle -----------------------------------------------------

def test_criterion_2_grid_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    eps = 0.25
    cfg = make_attack("gama-pgd", eps, steps=100)
    hits, gaps = 0, []
    for inst in range(100):
        n_classes = int(rng.integers(2, 4))
        hidden = () if inst % 2 == 0 else (int(rng.integers(3, 9)),)
        net = nn.mlp((2,), hidden, n_classes, dtype="float64", seed=inst)
        for layer in net.layers:
            if layer.kind == "affine":
                layer.params["b"] = rng.normal(0, 0.5, layer.params["b"].shape)
        x = rng.uniform(0, 1, (1, 2))
        y = net.predict(x)
        final = attacks.gama_attack(net, x, y, cfg).margin[0]
        best = grid_max_margin(net, x[0], int(y[0]), eps)
        ok = final >= best - 0.01 * abs(best)
        hits += ok
        gaps.append(best - final)
    elapsed = time.perf_counter() - t0
    ok = hits >= 95 and elapsed < 120
    report(capsys, 2, ok, f"{hits}/100 instances within 1% of the 201x201 grid maximum, "
                          f"worst shortfall {max(gaps):.2e}, {elapsed:.1f}s")
    assert hits >= 95
    assert elapsed < 120


# --- 3. reductions -------------------------------------------------------------

def test_criterion_3_reductions(capsys):
    rng = np.random.default_rng(3)
    nets = [nn.mlp((8,), (16,), 4, dtype="float64", seed=1),
            nn.lenet((1, 12, 12), 5, width=2, fc=8, dtype="float64", seed=2),
            nn.mlp((8,), (16, 8), 3, dtype="float32", seed=3)]
    results = []
    for net in nets:
        x = rng.uniform(size=(25, *net.input_shape))
        y = rng.integers(0, net.num_classes, 25)
        g0 = make_attack("gama-pgd", 0.1, steps=100, seed=5, lambda0=0.0)
        marg = g0.replace(name="pgd-margin", loss="margin-prob")
        a = attacks.gama_attack(net, x, y, g0.replace(loss="gama"))
        b = attacks.iterative_attack(net, x, y, marg)
        results.append(a.x_adv.tobytes() == b.x_adv.tobytes() and a.margin.tobytes() == b.margin.tobytes())
        p = attacks.pgd_baseline(net, x, y, 0.1, steps=1, step_size=0.1, init="zero", loss="ce")
        f = attacks.fgsm(net, x, y, 0.1)
        results.append(p.x_adv.tobytes() == f.x_adv.tobytes())
        full = make_attack("gama-pgd", 0.1, steps=100, seed=5)
        m0 = attacks.gama_mt(net, x, y, full, k=0)
        s = attacks.gama_attack(net, x, y, full)
        results.append(m0.x_adv.tobytes() == s.x_adv.tobytes() and m0.margin.tobytes() == s.margin.tobytes())
    ok = all(results)
    report(capsys, 3, ok, f"{sum(results)}/{len(results)} bitwise identities hold "
                          "(GAMA lambda0=0 vs margin-PGD, 1-step PGD vs FGSM, MT k=0 vs GAMA)")
    assert ok


# --- 4. schedule ---------------------------------------------------------------

def test_criterion_4_schedule(capsys):
    worst_ulps, count = 0.0, 0
    for lam0 in (5.0, 50.0):
        for tau in (25, 50):
            cfg = attacks.AttackConfig(epsilon=0.1, steps=100, lambda0=lam0, tau=tau)
            for t in range(cfg.steps + 1):
                got = attacks.lambda_schedule(cfg.lambda0, cfg.tau, t)
                exact = lambda_exact(lam0, tau, t)
                ulp = Fraction(float(np.spacing(got))) if got else Fraction(float(np.finfo(float).tiny))
                worst_ulps = max(worst_ulps, float(abs(Fraction(got) - exact) / ulp))
                if t >= tau:
                    assert got == 0.0
                count += 1
    ok = worst_ulps <= 1.0
    report(capsys, 4, ok, f"{count} schedule values, worst error {worst_ulps:.2f} ulp")
    assert ok


# --- 5. constraints ------------------------------------------------------------

def test_criterion_5_constraints(capsys):
    rng = np.random.default_rng(11)
    total, violations, fw_excess = 0, 0, 0
    names = attacks.ATTACK_NAMES
    per = -(-10_000 // len(names))
    for k, name in enumerate(names):
        dtype = "float64" if k % 2 == 0 else "float32"
        net = nn.mlp((20,), (16,), 4, dtype=dtype, seed=k)
        eps = (0.03, 0.1, 0.3)[k % 3]
        x = rng.uniform(size=(per, 20))
        x[:, :3] = 0.0
        x[:, 3:6] = 1.0
        x = x.astype(net.np_dtype)
        y = rng.integers(0, 4, per)
        cfg = make_attack(name, eps, steps=20 if name not in ("fgsm", "rfgsm") else None, seed=k)
        trace = name in ("gama-pgd", "gama-fw", "pgd-ce", "pgd-margin", "pgd-margin-logit", "ifgsm")
        res = attacks.iterative_attack(net, x, y, cfg, trace=True) if trace else attacks.run_attack(net, x, y, cfg)
        d = np.abs(res.x_adv.astype(np.float64) - x.astype(np.float64)).reshape(per, -1).max(axis=1)
        violations += int(np.sum(d > eps + 1e-12))
        violations += int(np.sum((res.x_adv < 0).any(axis=1) | (res.x_adv > 1).any(axis=1)))
        if trace:
            violations += int(np.sum(res.trace.linf > eps + 1e-12))
            violations += int(np.sum(res.trace.x_min < 0) + np.sum(res.trace.x_max > 1))
            if cfg.mode == "fw":
                fw_excess += int(np.sum(res.trace.fw_preclamp > eps + 1e-12))
        total += per
    ok = violations == 0 and fw_excess == 0 and total >= 10_000
    report(capsys, 5, ok, f"{total} attacked samples over {len(names)} attack kinds, "
                          f"{violations} constraint violations, {fw_excess} Frank-Wolfe pre-clamp excursions")
    assert total >= 10_000
    assert violations == 0
    assert fw_excess == 0


# --- shared desk-scale models ----------------------------------------------------

# epochs per regime; everything else comes from the MNIST training preset
RECIPES = {
    "standard": dict(epochs=20),
    "rfgsm_at": dict(epochs=30, alpha=EPS / 2),
    "fgsm_at": dict(epochs=50),
    "gat": dict(epochs=50),
}
_MODELS = {}
_TRAIN_TIME = {}


def desk_data():
    if "data" not in _MODELS:
        _MODELS["data"] = mnist_desk(seed=0)
    return _MODELS["data"]


def model(regime, seed):
    key = (regime, seed)
    if key not in _MODELS:
        t0 = time.perf_counter()
        ds = desk_data()
        net = nn.mlp(ds.image_shape, (256,), ds.num_classes, seed=seed)
        cfg = training.gat_preset("mnist", seed=seed, eval_every=10_000, **RECIPES[regime])
        training.train(net, ds.train, cfg, regime)
        _MODELS[key] = net
        _TRAIN_TIME[key] = time.perf_counter() - t0
    return _MODELS[key]


def criterion_seconds(t0, cached, keys):
    """Wall time since ``t0`` plus the training time of models that were already cached."""
    return time.perf_counter() - t0 + sum(_TRAIN_TIME[k] for k in keys if k in cached)


def accuracy(net, cfg):
    ds = desk_data()
    return attacks.run_attack(net, ds.test.images, ds.test.labels, cfg).accuracy


# --- 6. loss ordering on an R-FGSM model ------------------------------------------

def test_criterion_6_loss_ordering(capsys):
    t0, cached = time.perf_counter(), set(_MODELS)
    acc = {k: [] for k in ("gama", "margin", "ce", "gama10", "fw10")}
    for s in SEEDS:
        net = model("rfgsm_at", s)
        gama = make_attack("gama-pgd", EPS, 100, preset="mnist", seed=s)
        acc["gama"].append(accuracy(net, gama))
        # same optimiser, relaxation switched off, plain margin or CE objective
        acc["margin"].append(accuracy(net, make_attack("gama-pgd", EPS, 100, preset="mnist", seed=s,
                                                       lambda0=0.0, loss="margin-prob")))
        acc["ce"].append(accuracy(net, make_attack("gama-pgd", EPS, 100, preset="mnist", seed=s,
                                                   lambda0=0.0, loss="ce")))
        acc["gama10"].append(accuracy(net, make_attack("gama-pgd", EPS, 10, preset="mnist", seed=s)))
        acc["fw10"].append(accuracy(net, make_attack("gama-fw", EPS, 10, preset="mnist", seed=s)))
    m = {k: 100 * float(np.mean(v)) for k, v in acc.items()}
    elapsed = criterion_seconds(t0, cached, [("rfgsm_at", s) for s in SEEDS])
    ok = (m["gama"] <= m["margin"] + 0.3 and m["margin"] <= m["ce"] + 0.3
          and m["fw10"] <= m["gama10"] + 0.3 and elapsed < 600)
    report(capsys, 6, ok, f"mean robust accuracy (%) GAMA-PGD {m['gama']:.2f}, margin-PGD {m['margin']:.2f}, "
                          f"CE-PGD {m['ce']:.2f}; 10 steps GAMA-FW {m['fw10']:.2f} vs GAMA-PGD "
                          f"{m['gama10']:.2f}; {elapsed:.0f}s including training")
    assert m["gama"] <= m["margin"] + 0.3
    assert m["margin"] <= m["ce"] + 0.3
    assert m["fw10"] <= m["gama10"] + 0.3
    assert elapsed < 600


# --- 7. restarts and multi-targeting never help the defender ----------------------

def test_criterion_7_restarts_and_targets(capsys):
    ds = desk_data()
    x, y = ds.test.images, ds.test.labels
    bad = []
    for reg in RECIPES:
        for s in SEEDS:
            net = model(reg, s)
            cfg = make_attack("gama-pgd", EPS, 100, preset="mnist", seed=s)
            one = attacks.run_attack(net, x, y, cfg).accuracy
            five = attacks.worst_case_over_restarts(net, x, y, cfg, restarts=5).accuracy
            mt = attacks.gama_mt(net, x, y, cfg, k=3).accuracy
            if not (five <= one and mt <= one):
                bad.append((reg, s, one, five, mt))
    ok = not bad
    report(capsys, 7, ok, f"{len(RECIPES) * len(SEEDS)} models, R=5 <= R=1 and MT(k=3) <= GAMA-PGD "
                          f"violated on {len(bad)}")
    assert not bad, bad


# --- 8. GAT against FGSM-AT ------------------------------------------------------

def test_criterion_8_gat_vs_fgsm_at(capsys):
    t0, cached = time.perf_counter(), set(_MODELS)
    ds = desk_data()
    x, y = ds.test.images, ds.test.labels
    gat, fat, fat_fgsm = [], [], []
    for s in SEEDS:
        pgd20 = make_attack("pgd-ce", EPS, 20, seed=s)
        gat.append(accuracy(model("gat", s), pgd20))
        net = model("fgsm_at", s)
        fat.append(accuracy(net, pgd20))
        fat_fgsm.append(attacks.fgsm(net, x, y, EPS).accuracy)
    g, f, ff = (100 * float(np.mean(v)) for v in (gat, fat, fat_fgsm))
    elapsed = criterion_seconds(t0, cached, [(r, s) for r in ("gat", "fgsm_at") for s in SEEDS])
    collapse = all(p < 0.5 * q for p, q in zip(fat, fat_fgsm))
    ok = g >= f + 10 and collapse and elapsed < 1200
    report(capsys, 8, ok, f"PGD-20 accuracy GAT {g:.1f}% vs FGSM-AT {f:.1f}% (needs +10 points); "
                          f"FGSM-AT under FGSM {ff:.1f}%, collapse on every seed: {collapse}; "
                          f"{elapsed:.0f}s including training")
    assert collapse
    assert g >= f + 10
    assert elapsed < 1200


# --- 9. gradient-masking sanity ---------------------------------------------------

SWEEP = tuple(round(0.05 * i, 2) for i in range(13))


def test_criterion_9_masking_sanity(capsys):
    ds = desk_data()
    high, nonmono, transfer = [], [], []
    for reg in RECIPES:
        for s in SEEDS:
            net = model(reg, s)
            sweep = harness.sweep_epsilon(net, ds.test, SWEEP, seed=s)
            high += [(reg, s, p.epsilon, p.pgd7_accuracy) for p in sweep
                     if p.epsilon >= 0.5 and p.pgd7_accuracy >= 0.05]
            nonmono += [(reg, s, b.epsilon) for a, b in zip(sweep, sweep[1:])
                        if b.fgsm_loss < a.fgsm_loss - 1e-3]
            # black-box source: a normally trained model from a different seed
            source = model("standard", (s + 1) % len(SEEDS))
            cfg = [make_attack("pgd-ce", EPS, 20, seed=s)]
            white = harness.evaluate(net, ds.test, cfg).attacks["pgd-ce-20"].accuracy
            black = harness.transfer_eval(source, net, ds.test, cfg).attacks["pgd-ce-20"].accuracy
            if black < white - 0.01:
                transfer.append((reg, s, white, black))
    ok = not (high or nonmono or transfer)
    report(capsys, 9, ok, f"{len(RECIPES) * len(SEEDS)} models: {len(high)} PGD-7 accuracies >= 5% at eps >= 0.5, "
                          f"{len(nonmono)} FGSM loss decreases > 1e-3, {len(transfer)} black-box > 1 point "
                          f"below white-box")
    assert not high, high
    assert not nonmono, nonmono
    assert not transfer, transfer


# --- 10. Lipschitz diagnostic -------------------------------------------------------

def test_criterion_10_lipschitz(capsys):
    x = desk_data().test.images[:100]
    est = {}
    for reg in ("gat", "standard"):
        est[reg] = float(np.mean([
            harness.lipschitz_estimate(model(reg, s), x, EPS, n_samples=64,
                                       rng=np.random.default_rng(s)).mean
            for s in SEEDS
        ]))
    ok = est["gat"] < est["standard"]
    report(capsys, 10, ok, f"mean sampled local Lipschitz estimate GAT {est['gat']:.4f} vs "
                           f"standard {est['standard']:.4f} on 100 test samples")
    assert est["gat"] < est["standard"]


# --- 11. CLI determinism --------------------------------------------------------------

def _cli_outputs(root):
    root.mkdir()
    gat, std = root / "gat.ckpt", root / "std.ckpt"
    common = ["--dataset", "mnist", "--seed", "5"]
    runs = {
        "train_gat": ["train", "--regime", "gat", "--preset", "mnist", "--epochs", "2", *common,
                      "--checkpoint", str(gat)],
        "train_std": ["train", "--regime", "standard", "--preset", "mnist", "--epochs", "2", *common,
                      "--checkpoint", str(std)],
        "attack": ["attack", "--checkpoint", str(gat), "--n", "100", "--epsilon", "0.3",
                   "--preset", "mnist", "--steps", "20", "--restarts", "2", *common],
        "eval": ["eval", "--checkpoint", str(gat), "--n", "100", "--epsilon", "0.3",
                 "--attacks", "fgsm,rfgsm,ifgsm:5,pgd-ce:7x2,gama-pgd:20,gama-fw:10,gama-mt:10", *common],
        "transfer": ["transfer", "--source", str(std), "--target", str(gat), "--n", "100",
                     "--epsilon", "0.3", "--attacks", "pgd-ce:10,gama-pgd:10", *common],
        "surface": ["surface", "--checkpoint", str(gat), "--index", "3", "--loss", "gama",
                    "--resolution", "11", "--epsilon", "0.3", *common],
        "sweep": ["sweep", "--checkpoint", str(gat), "--n", "100", "--epsilons", "0,0.1,0.3,0.5", *common],
        "lipschitz": ["lipschitz", "--checkpoint", str(gat), "--n", "50", "--epsilon", "0.3",
                      "--n-samples", "16", "--with-adversary", "--steps", "10", *common],
    }
    out, codes = {}, {}
    for name, argv in runs.items():
        path = root / f"{name}.csv"
        codes[name] = cli.main(argv + ["--out", str(path)])
        out[name] = path.read_bytes() if path.exists() else b""
    out["checkpoint"] = gat.read_bytes()
    return out, codes


def test_criterion_11_cli_determinism(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    a, codes_a = _cli_outputs(tmp_path / "a")
    b, codes_b = _cli_outputs(tmp_path / "b")
    failed = sorted(n for n, c in {**codes_a, **codes_b}.items() if c != 0)
    differ = sorted(n for n in a if a[n] != b[n])
    empty = sorted(n for n in a if not a[n])
    ok = not (failed or differ or empty)
    report(capsys, 11, ok, f"{len(codes_a)} CLI invocations run twice: nonzero exits {failed or 'none'}, "
                           f"differing outputs {differ or 'none'}")
    assert not failed
    assert not empty
    assert not differ
