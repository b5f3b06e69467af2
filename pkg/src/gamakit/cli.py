"""
Command-line entry point.

Every subcommand writes a CSV (to ``--out`` or stdout) and one summary line to
stderr. Exit codes: 0 ok, 1 numeric failure, 2 usage or input error.
The ``GAMAKIT_SEED`` environment variable overrides config-file and default
seeds; an explicit ``--seed`` flag still wins.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attacks import ATTACK_NAMES, PRESETS, AttackConfig, make_attack, worst_case_over_restarts
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import ConfigError, GamakitError, NumericError
from .harness import evaluate, lipschitz_estimate, loss_surface, sweep_epsilon, transfer_eval
from .losses import CLI_NAMES
from .nn import build
from .training import REGIMES, EpochStats, GatConfig, gat_preset, train

SEED_ENV = "GAMAKIT_SEED"

ATTACK_HEADER = ("sample", "label", "pred", "success", "margin", "linf")
EVAL_HEADER = ("attack", "accuracy", "restart_accuracies", "mean_linf", "mean_l2")
SURFACE_HEADER = ("i", "j", "d1", "d2", "loss")
SWEEP_HEADER = ("epsilon", "pgd7_acc", "fgsm_loss")
LIPSCHITZ_HEADER = ("sample", "ratio")


class UsageError(GamakitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(rows, header, out=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
    return text


def read_csv(path_or_text):
    """Parse a CSV emitted by this tool into ``(header, rows)`` with numeric cells converted."""
    text = str(path_or_text)
    if "\n" not in text:
        try:
            text = Path(text).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path_or_text}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    rows = []
    for row in reader:
        conv = []
        for cell in row:
            try:
                conv.append(int(cell))
            except ValueError:
                try:
                    conv.append(float(cell))
                except ValueError:
                    conv.append(cell)
        rows.append(tuple(conv))
    return header, rows


def _summary(text):
    print(text, file=sys.stderr)


def _seed(args, file_values):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if "seed" in file_values:
        return int(file_values["seed"])
    return 0


def _merged(args):
    values = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    values.update(cfgmod.parse_assignments(getattr(args, "set", None)))
    return values


def _load_net(path):
    ckpt = load_checkpoint(path)
    return ckpt.network, ckpt.metadata


def _batch(args, meta, seed):
    name = args.dataset or meta.get("dataset") or "mnist"
    ds = load_dataset(name, seed=int(meta.get("data_seed", 0)))
    batch = ds.split(args.split)
    if args.n is not None:
        batch = batch.take(args.n)
    return ds, batch


def _attack_config(name, epsilon, values, seed, steps=None, preset=None):
    values = dict(values)
    name = values.pop("attack", name)
    preset = values.pop("preset", preset or "default")
    values.pop("seed", None)
    if name not in ATTACK_NAMES:
        raise UsageError(f"unknown attack {name!r}; valid: {', '.join(ATTACK_NAMES)}")
    if "epsilon" in values:
        epsilon = float(values.pop("epsilon"))
    if "steps" in values and steps is None:
        steps = int(values.pop("steps"))
    values.pop("steps", None)
    overrides = cfgmod.apply_fields(AttackConfig, values, ignore=("name",))
    cfg = make_attack(name, epsilon, steps=steps, preset=preset, seed=seed, **overrides)
    return cfg


def _parse_attack_list(spec, epsilon, values, seed, preset):
    """``fgsm,pgd-ce:7,gama-pgd:100x5`` -> configs (``:steps`` and ``xR`` restarts optional)."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        restarts = 1
        if "x" in item.split(":")[-1] and ":" in item:
            head, r = item.rsplit("x", 1)
            item, restarts = head, int(r)
        name, _, steps = item.partition(":")
        if name not in ATTACK_NAMES:
            raise UsageError(f"unknown attack {name!r}; valid: {', '.join(ATTACK_NAMES)}")
        cfg = _attack_config(name, epsilon, values, seed, steps=int(steps) if steps else None,
                             preset=preset)
        out.append(cfg.replace(restarts=restarts) if restarts != 1 else cfg)
    if not out:
        raise UsageError("no attacks given")
    return out


# --- subcommands -------------------------------------------------------------

def cmd_train(args):
    values = _merged(args)
    seed = _seed(args, values)
    values.pop("seed", None)
    arch = values.pop("arch", args.arch)
    hidden = values.pop("hidden", args.hidden)
    dataset = values.pop("dataset", args.dataset or "mnist")
    preset = values.pop("preset", args.preset)
    ds = load_dataset(dataset, seed=0)
    overrides = cfgmod.apply_fields(GatConfig, values)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if preset:
        cfg = gat_preset(preset, epochs=overrides.pop("epochs", None), seed=seed, **overrides)
    else:
        overrides.setdefault("epsilon", ds.epsilon)
        cfg = GatConfig(seed=seed, **overrides)
    if args.regime not in REGIMES:
        raise UsageError(f"unknown regime {args.regime!r}; valid: {', '.join(REGIMES)}")
    hidden = tuple(int(h) for h in str(hidden).split(",") if h.strip())
    net = build(arch, ds.image_shape, ds.num_classes, hidden=hidden, seed=seed)
    net, report = train(net, ds.train, cfg, args.regime, val=ds.val)
    rows = [s.row() for s in report.epochs]
    write_csv(rows, EpochStats.CSV_HEADER, args.out)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, net, regime=args.regime, seed=seed, epoch=cfg.epochs,
                        dataset=dataset, data_seed=0, epsilon=cfg.epsilon)
    last = report.epochs[-1]
    _summary(f"train regime={args.regime} epochs={cfg.epochs} clean_acc={last.clean_acc:.4f} "
             f"fgsm_acc={last.fgsm_acc:.4f} pgd7_acc={last.pgd7_acc:.4f}")
    return 0


def cmd_attack(args):
    values = _merged(args)
    seed = _seed(args, values)
    net, meta = _load_net(args.checkpoint)
    ds, batch = _batch(args, meta, seed)
    eps = args.epsilon if args.epsilon is not None else float(meta.get("epsilon", ds.epsilon))
    if args.restarts is not None:
        values["restarts"] = str(args.restarts)
    cfg = _attack_config(args.attack, eps, values, seed, steps=args.steps, preset=args.preset)
    res = worst_case_over_restarts(net, batch.images, batch.labels, cfg)
    rows = zip(range(len(res.labels)), res.labels, res.pred, res.success, res.margin, res.linf)
    write_csv(rows, ATTACK_HEADER, args.out)
    _summary(f"attack {cfg.name} steps={cfg.steps} eps={cfg.epsilon:g} restarts={cfg.restarts} "
             f"accuracy={res.accuracy:.4f} n={len(res.labels)}")
    return 0


def _eval_rows(report):
    for name, a in report.attacks.items():
        yield (name, a.accuracy, ";".join(_fmt(r) for r in a.restart_accuracies), a.mean_linf, a.mean_l2)


def _eval_common(args):
    values = _merged(args)
    seed = _seed(args, values)
    return values, seed


def cmd_eval(args):
    values, seed = _eval_common(args)
    net, meta = _load_net(args.checkpoint)
    ds, batch = _batch(args, meta, seed)
    eps = args.epsilon if args.epsilon is not None else float(meta.get("epsilon", ds.epsilon))
    attacks = _parse_attack_list(args.attacks, eps, values, seed, args.preset)
    report = evaluate(net, batch, attacks)
    rows = [("clean", report.clean_accuracy, "", float("nan"), float("nan"))] + list(_eval_rows(report))
    write_csv(rows, EVAL_HEADER, args.out)
    worst = min([report.clean_accuracy] + [a.accuracy for a in report.attacks.values()])
    _summary(f"eval n={report.n_samples} clean={report.clean_accuracy:.4f} worst={worst:.4f} "
             f"runtime={report.runtime:.2f}s")
    return 0


def cmd_transfer(args):
    values, seed = _eval_common(args)
    source, _ = _load_net(args.source)
    target, meta = _load_net(args.target)
    ds, batch = _batch(args, meta, seed)
    eps = args.epsilon if args.epsilon is not None else float(meta.get("epsilon", ds.epsilon))
    attacks = _parse_attack_list(args.attacks, eps, values, seed, args.preset)
    report = transfer_eval(source, target, batch, attacks)
    rows = [("clean", report.clean_accuracy, "", float("nan"), float("nan"))] + list(_eval_rows(report))
    write_csv(rows, EVAL_HEADER, args.out)
    _summary(f"transfer n={report.n_samples} target_clean={report.clean_accuracy:.4f}")
    return 0


def cmd_surface(args):
    values, seed = _eval_common(args)
    net, meta = _load_net(args.checkpoint)
    ds, batch = _batch(args, meta, seed)
    eps = args.epsilon if args.epsilon is not None else float(meta.get("epsilon", ds.epsilon))
    x = batch.images[args.index : args.index + 1]
    y = batch.labels[args.index]
    grid = loss_surface(net, x, y, kind=args.loss, lam=args.lam, radius=args.radius,
                        resolution=args.resolution, seed=seed, epsilon=eps)
    rows = ((i, j, grid.d1[j], grid.d2[i], grid.loss[i, j])
            for i in range(len(grid.d2)) for j in range(len(grid.d1)))
    write_csv(rows, SURFACE_HEADER, args.out)
    if args.directions:
        with open(args.directions, "wb") as f:
            np.savez(f, g=grid.g, g_perp=grid.g_perp, seed=seed)
    _summary(f"surface kind={grid.kind} lam={grid.lam:g} seed={seed} "
             f"resolution={args.resolution} min={grid.loss.min():.6g} max={grid.loss.max():.6g}")
    return 0


def cmd_sweep(args):
    values, seed = _eval_common(args)
    net, meta = _load_net(args.checkpoint)
    ds, batch = _batch(args, meta, seed)
    eps = [float(e) for e in args.epsilons.split(",") if e.strip()]
    if not eps:
        raise UsageError("no epsilons given")
    pts = sweep_epsilon(net, batch, eps, seed=seed)
    write_csv(((p.epsilon, p.pgd7_accuracy, p.fgsm_loss) for p in pts), SWEEP_HEADER, args.out)
    _summary(f"sweep points={len(pts)} acc_at_max_eps={pts[-1].pgd7_accuracy:.4f}")
    return 0


def cmd_lipschitz(args):
    values, seed = _eval_common(args)
    net, meta = _load_net(args.checkpoint)
    ds, batch = _batch(args, meta, seed)
    eps = args.epsilon if args.epsilon is not None else float(meta.get("epsilon", ds.epsilon))
    adv = None
    if args.with_adversary:
        adv = _attack_config("gama-pgd", eps, values, seed, steps=args.steps, preset=args.preset)
    rep = lipschitz_estimate(net, batch.images, eps, n_samples=args.n_samples,
                             rng=np.random.default_rng(seed), y=batch.labels, adversary_cfg=adv)
    write_csv(enumerate(rep.ratios), LIPSCHITZ_HEADER, args.out)
    _summary(f"lipschitz n={len(rep.ratios)} mean={rep.mean:.6g} median={rep.median:.6g} max={rep.max:.6g}")
    return 0


# --- parser ------------------------------------------------------------------

def _common(p, checkpoint=True):
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None,
                   help="mnist, mnist-full, gaussians or gaussians:C:D:S (default: from checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=None, help="evaluate only the first N samples")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key = value attack config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", default=None, help="CSV output path (default: stdout)")


def build_parser():
    ap = _Parser(prog="gamakit", description="Guided margin attacks and guided adversarial training.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write per-epoch CSV")
    p.add_argument("--regime", default="gat", help=", ".join(REGIMES))
    p.add_argument("--preset", default=None, choices=("mnist", "cifar"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--arch", default="mlp", choices=("mlp", "lenet"))
    p.add_argument("--hidden", default="256")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key = value training config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--checkpoint", default=None, help="where to save the trained model")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run one attack, per-sample CSV")
    _common(p)
    p.add_argument("--attack", default="gama-pgd")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="multi-attack robust accuracy report")
    _common(p)
    p.add_argument("--attacks", default="fgsm,pgd-ce:7,gama-pgd:100",
                   help="comma list of NAME[:STEPS[xRESTARTS]]")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="black-box transfer: craft on --source, score on --target")
    _common(p, checkpoint=False)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--attacks", default="pgd-ce:7")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("surface", help="loss surface grid around one sample")
    _common(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--loss", default="margin-prob", choices=sorted(CLI_NAMES))
    p.add_argument("--lam", type=float, default=25.0)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--resolution", type=int, default=51)
    p.add_argument("--directions", default=None, help="optional .npz for g and g_perp")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("sweep", help="PGD-7 accuracy and FGSM loss across epsilons")
    _common(p)
    p.add_argument("--epsilons", default="0,0.05,0.1,0.15,0.2,0.25,0.3,0.4,0.5")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lipschitz", help="sampled local Lipschitz estimate")
    _common(p)
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--with-adversary", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_lipschitz)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        return args.func(args)
    except NumericError as exc:
        print(f"gamakit: numeric failure: {exc}", file=sys.stderr)
        return 1
    except (GamakitError, ValueError, OSError) as exc:
        print(f"gamakit: error: {exc}", file=sys.stderr)
        return 2


def cli(argv=None):
    return main(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
