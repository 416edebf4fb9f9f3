"""``gradforge`` command-line entry point.

Commands: ``train``, ``curve``, ``attack-compare``, ``regtable``. Settings come
from built-in desk-scale defaults, then an optional ``--config`` file of
``key = value`` lines, then explicit flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from gradforge import data, harness, training
from gradforge.nn import ModelConfig, build_classifier, build_generator, load_checkpoint, save_checkpoint
from gradforge.training import TrainConfig

log = logging.getLogger("gradforge")

COMMANDS = ("train", "curve", "attack-compare", "regtable")

# desk-scale defaults; every key can be set in a config file or by the flag of the same name
DEFAULTS = {
    "dataset": "synth",
    "data_dir": None,
    "synth_kind": "gaussian_blobs",
    "noise": 0.5,
    "jitter": 0,
    "classes": 10,
    "data_seed": 0,
    "n_train": 500,
    "n_val": 500,
    "n_test": 2000,
    "hw": 16,
    "width_scale": 0.25,
    "seed": 0,
    "variant": "baseline",
    "alpha": 0.5,
    "cg": "1.0",
    "k": 1,
    "lr_f": 1e-3,
    "lr_g": 1e-3,
    "batch_size": 16,
    "epochs": 100,
    "patience": 10,
    "epsilon": 0.3,
    "dropout": 0.0,
    "eps": "0,0.25,0.5,1,2",
    "repeats": 5,
    "methods": ",".join(harness.REG_METHODS),
    "mode": "direct",
    "attack": "fg_l2",
    "model": None,
    "source": None,
    "out": "runs/out",
    "full": False,
}

# unmodified large-scale protocol, selected by --full
FULL_PROTOCOL = {
    "hw": 32,
    "width_scale": 1.0,
    "n_train": 45000,
    "n_val": 5000,
    "n_test": 10000,
    "repeats": 50,
    "lr_f": 1e-3,
    "lr_g": 1e-6,
    "batch_size": 64,
    "epochs": 200,
}

INT_KEYS = {"classes", "data_seed", "n_train", "n_val", "n_test", "hw", "seed", "k", "batch_size", "epochs",
            "patience", "repeats", "jitter"}
FLOAT_KEYS = {"noise", "width_scale", "alpha", "lr_f", "lr_g", "epsilon", "dropout"}
BOOL_KEYS = {"full"}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradforge", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    S = argparse.SUPPRESS
    p.add_argument("--data-dir", dest="data_dir", default=S, help="directory with CIFAR binary files")
    p.add_argument("--dataset", choices=("cifar10", "cifar100", "synth"), default=S)
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--seed", default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--variant", choices=training.VARIANTS, default=S)
    p.add_argument("--alpha", default=S)
    p.add_argument("--cg", default=S, help="c_g, or comma list for attack-compare")
    p.add_argument("--k", default=S, help="generator steps per classifier step")
    p.add_argument("--eps", default=S, help="comma-separated epsilon grid")
    p.add_argument("--epsilon", default=S, help="training epsilon for fg/random variants")
    p.add_argument("--repeats", default=S)
    p.add_argument("--width-scale", dest="width_scale", default=S)
    p.add_argument("--hw", default=S, help="image side length (CIFAR is downsampled)")
    p.add_argument("--epochs", default=S)
    p.add_argument("--batch-size", dest="batch_size", default=S)
    p.add_argument("--patience", default=S)
    p.add_argument("--lr-f", dest="lr_f", default=S)
    p.add_argument("--lr-g", dest="lr_g", default=S)
    p.add_argument("--n-train", dest="n_train", default=S)
    p.add_argument("--n-val", dest="n_val", default=S)
    p.add_argument("--n-test", dest="n_test", default=S)
    p.add_argument("--noise", default=S)
    p.add_argument("--jitter", default=S)
    p.add_argument("--classes", default=S, help="number of synthetic classes")
    p.add_argument("--data-seed", dest="data_seed", default=S,
                   help="seed of the synthetic draw and of the CIFAR train/val split")
    p.add_argument("--synth-kind", dest="synth_kind", choices=data.SYNTH_KINDS, default=S)
    p.add_argument("--dropout", default=S,
                   help="classifier dropout rate (train/curve); regtable dropout rows use 0.5 when unset")
    p.add_argument("--methods", default=S, help="comma list of regtable methods")
    p.add_argument("--mode", choices=("direct", "indirect"), default=S)
    p.add_argument("--attack", choices=("fg_l2", "fgsm"), default=S)
    p.add_argument("--model", default=S, help="classifier checkpoint to evaluate")
    p.add_argument("--source", default=S, help="source checkpoint for indirect attacks")
    p.add_argument("--full", action="store_true", default=S,
                   help="full-resolution CIFAR protocol (45k/5k split, 50 repeats)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def read_config(path) -> dict:
    settings = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = value
    return settings


def _coerce(settings: dict) -> dict:
    out = dict(settings)
    for key, value in settings.items():
        if value is None or not isinstance(value, str):
            continue
        try:
            if key in INT_KEYS:
                out[key] = int(value)
            elif key in FLOAT_KEYS:
                out[key] = float(value)
            elif key in BOOL_KEYS:
                out[key] = value.lower() in ("1", "true", "yes", "on")
        except ValueError as exc:
            raise UsageError(f"--{key.replace('_', '-')}: invalid value {value!r}") from exc
    return out


def _floats(text: str, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise UsageError(f"{flag}: empty list")
    return vals


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    config = read_config(args.config) if args.config else {}
    full = str(explicit.get("full", config.get("full", False))).lower() in ("1", "true", "yes", "on")
    if full:
        settings.update(FULL_PROTOCOL)
        settings["full"] = True
        if settings["dataset"] == "synth":
            settings["dataset"] = "cifar10"
    settings.update(config)
    settings.update(explicit)
    return _coerce(settings)


# ------------------------------------------------------------------- data


def load_data(s: dict) -> tuple[data.Dataset, data.Dataset, data.Dataset]:
    if s["dataset"] == "synth":
        n = s["n_train"] + s["n_val"] + s["n_test"]
        full = data.synth_dataset(s["synth_kind"], n, s["hw"], 3, s["classes"], s["noise"],
                                  seed=s["data_seed"], jitter=s["jitter"])
        idx = np.arange(n)
        return (full.subset(idx[:s["n_train"]], "synth/train"),
                full.subset(idx[s["n_train"]:s["n_train"] + s["n_val"]], "synth/val"),
                full.subset(idx[s["n_train"] + s["n_val"]:], "synth/test"))
    if not s["data_dir"]:
        raise UsageError(f"--data-dir is required for --dataset {s['dataset']}")
    if not Path(s["data_dir"]).is_dir():
        raise UsageError(f"--data-dir {s['data_dir']} is not a directory")
    pool = data.load_cifar(s["data_dir"], s["dataset"], "train")
    test = data.load_cifar(s["data_dir"], s["dataset"], "test")
    train, val = data.split(pool, data.SplitSpec(s["n_train"], s["n_val"], s["data_seed"]))
    if s["n_test"] < len(test):
        test = test.subset(np.arange(s["n_test"]))
    if s["hw"] != data.CIFAR_HW:
        factor = data.CIFAR_HW // s["hw"]
        if factor * s["hw"] != data.CIFAR_HW:
            raise UsageError(f"--hw {s['hw']} must divide 32")
        train, val, test = (data.downsample(d, factor) for d in (train, val, test))
    return train, val, test


def model_config(s: dict, train: data.Dataset, seed: int) -> ModelConfig:
    return ModelConfig(train.hw, train.channels, train.num_classes, s["width_scale"], seed)


def train_config(s: dict, **changes) -> TrainConfig:
    cg = _floats(s["cg"], "--cg")[0]
    cfg = TrainConfig(alpha=s["alpha"], c_g=cg, k=s["k"], lr_f=s["lr_f"], lr_g=s["lr_g"],
                      batch_size=s["batch_size"], epochs=s["epochs"], epsilon=s["epsilon"],
                      seed=s["seed"], variant=s["variant"], patience=s["patience"])
    return cfg.replace(**changes) if changes else cfg


# --------------------------------------------------------------- commands


def cmd_train(s, out: Path) -> None:
    train, val, test = load_data(s)
    cfg = train_config(s)
    rate = s["dropout"]
    mcfg = model_config(s, train, s["seed"])
    F = build_classifier(mcfg, dropout_rate=rate)
    if cfg.variant == "gat":
        F, G, hist = training.train_gat(F, build_generator(mcfg), train, val, cfg)
        save_checkpoint(G, out / "generator.ckpt")
    else:
        F, hist = training.train_supervised(F, train, val, cfg)
    save_checkpoint(F, out / "classifier.ckpt")
    harness.write_history_csv(out / "history.csv", hist)
    epochs = [r.epoch for r in hist.records]
    harness.svg_line_chart(out / "history.svg",
                           {"val_acc": (epochs, [r.val_acc for r in hist.records]),
                            "val_loss": (epochs, [r.val_loss for r in hist.records])},
                           "epoch", "value", f"{cfg.variant} training")
    harness.write_csv(out / "summary.csv", ("variant", "seed", "best_epoch", "test_accuracy"),
                      [(cfg.variant, cfg.seed, hist.best_epoch, harness.eval_accuracy(F, test))])


def _trained_classifier(s, train, val, variant: str, seed: int, dropout: float = 0.0):
    cfg = train_config(s, variant=variant, seed=seed)
    F, _ = harness.train_method(variant, model_config(s, train, seed), train, val, cfg, dropout)
    return F


def cmd_curve(s, out: Path) -> None:
    train, val, test = load_data(s)
    eps = _floats(s["eps"], "--eps")
    if eps != sorted(eps) or eps[0] < 0:
        raise UsageError("--eps must be non-negative and ascending")
    F = load_checkpoint(s["model"]) if s["model"] else _trained_classifier(
        s, train, val, s["variant"], s["seed"], s["dropout"])
    if s["mode"] == "direct":
        source, source_id = F, s["model"] or f"{s['variant']}-seed{s['seed']}"
    elif s["source"]:
        source, source_id = load_checkpoint(s["source"]), s["source"]
    else:
        # separately seeded baseline trained by the same recipe
        src_seed = s["seed"] + 1000
        source = _trained_classifier(s, train, val, "baseline", src_seed)
        source_id = f"baseline-seed{src_seed}"
    curve = harness.robustness_curve(F, source, eps, test, s["attack"], source_id)
    curve.mode = s["mode"]
    name = f"curve_{s['mode']}_{s['attack']}"
    harness.write_curve_csv(out / f"{name}.csv", curve)
    harness.svg_line_chart(out / f"{name}.svg", {s["variant"]: (curve.epsilons, curve.accuracy)},
                           "epsilon", "accuracy", f"{s['mode']} {s['attack']} attack")


def cmd_attack_compare(s, out: Path) -> None:
    train, val, test = load_data(s)
    F = load_checkpoint(s["model"]) if s["model"] else _trained_classifier(s, train, val, "baseline", s["seed"])
    grid = _floats(s["cg"], "--cg")
    points = harness.attack_compare(F, train, val, test, grid, train_config(s, variant="gat"))
    harness.write_attack_csv(out / "attack_compare.csv", points)
    series = {}
    for m in ("gat", "fg_l2", "fgsm"):
        pts = sorted((p.mean_power, p.accuracy) for p in points if p.method == m)
        series[m] = ([p[0] for p in pts], [p[1] for p in pts])
    harness.svg_line_chart(out / "attack_compare.svg", series, "mean per-image L2 power", "accuracy",
                           "attack strength at matched power")


def cmd_regtable(s, out: Path) -> None:
    train, val, test = load_data(s)
    methods = [m.strip() for m in s["methods"].split(",") if m.strip()]
    if s["repeats"] < 2:
        raise UsageError("--repeats must be >= 2")
    rows = harness.regtable(train, val, test, methods, s["repeats"], model_config(s, train, s["seed"]),
                            train_config(s), dropout_rate=s["dropout"] or 0.5)
    harness.write_regtable_csv(out / "regtable.csv", rows)
    xs = list(range(len(rows)))
    harness.svg_line_chart(out / "regtable.svg",
                           {"mean": (xs, [r.mean for r in rows]),
                            "mean-std": (xs, [r.mean - (r.std if np.isfinite(r.std) else 0) for r in rows]),
                            "mean+std": (xs, [r.mean + (r.std if np.isfinite(r.std) else 0) for r in rows])},
                           "method index (" + ", ".join(r.method for r in rows) + ")", "test accuracy",
                           "regularization comparison")


HANDLERS = {"train": cmd_train, "curve": cmd_curve, "attack-compare": cmd_attack_compare,
            "regtable": cmd_regtable}


def run_cli(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = resolve_settings(args)
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        HANDLERS[args.command](s, out)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except UsageError as exc:
        print(f"gradforge: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, training.TrainingDiverged) as exc:
        print(f"gradforge: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
