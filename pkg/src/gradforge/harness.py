"""Experiment orchestration: robustness curves, attack comparison, regularization table."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from gradforge import perturb, training
from gradforge.data import Dataset
from gradforge.nn import ModelConfig, Network, build_classifier, build_generator, predict
from gradforge.training import TrainConfig, TrainingDiverged

log = logging.getLogger(__name__)

# row order of the regularization comparison
REG_METHODS = ("baseline", "dropout", "random", "fg_linf", "fg_l2", "gat", "dropout+gat")
REG_LABELS = {
    "baseline": "Baseline",
    "dropout": "Dropout",
    "random": "Random Perturbation",
    "fg_linf": "Adv. training (FG, Linf)",
    "fg_l2": "Adv. training (FG, L2)",
    "gat": "Adv. training (GAT)",
    "dropout+gat": "Dropout + GAT",
}


def eval_accuracy(F: Network, ds: Dataset, batch: int = 500) -> float:
    if len(ds) == 0:
        raise ValueError("cannot compute accuracy of an empty dataset")
    probs = predict(F, ds.images, batch)
    return float((probs.argmax(axis=1) == ds.labels).mean())


def _accuracy_on(F: Network, images: np.ndarray, labels: np.ndarray, batch: int = 500) -> float:
    return float((predict(F, images, batch).argmax(axis=1) == labels).mean())


# ----------------------------------------------------------------- curves


@dataclass
class RobustnessCurve:
    attack: str
    mode: str
    epsilons: list[float]
    accuracy: list[float]
    mean_power: list[float] = field(default_factory=list)
    source_model: str = ""

    def rows(self):
        return list(zip(self.epsilons, self.accuracy, self.mean_power))


def attack_batch(F_source: Network, attack: str, x, y, eps: float,
                 rng: Optional[np.random.Generator] = None) -> perturb.PerturbationBatch:
    if attack == "fg_l2":
        return perturb.fg_l2(F_source, x, y, eps)
    if attack == "fgsm":
        return perturb.fgsm(F_source, x, y, eps)
    if attack == "random":
        return perturb.random_perturbation(x, eps, rng)
    raise ValueError(f"unknown attack {attack!r}")


def robustness_curve(F_eval: Network, F_source: Network, epsilons: Sequence[float], ds: Dataset,
                     attack: str = "fg_l2", source_model: str = "", batch: int = 500,
                     seed: int = 0) -> RobustnessCurve:
    """Accuracy of ``F_eval`` on images attacked through ``F_source``'s gradients.

    Direct mode when both networks are the same object, indirect otherwise.
    Adversarial images are clipped to [0, 1].
    """
    eps_list = [float(e) for e in epsilons]
    if any(e < 0 for e in eps_list) or eps_list != sorted(eps_list):
        raise ValueError("epsilons must be non-negative and ascending")
    mode = "direct" if F_eval is F_source else "indirect"
    # loss gradients do not depend on eps: compute them once
    grads = [perturb.input_gradient_loss(F_source, ds.images[i:i + batch], ds.labels[i:i + batch])
             for i in range(0, len(ds), batch)]
    accs, powers = [], []
    for eps in eps_list:
        if eps == 0.0:
            accs.append(eval_accuracy(F_eval, ds, batch))
            powers.append(0.0)
            continue
        correct, norms = 0, []
        for j, i in enumerate(range(0, len(ds), batch)):
            xb, yb = ds.images[i:i + batch], ds.labels[i:i + batch]
            if attack == "fg_l2":
                eta = perturb.l2_perturbation(grads[j], eps)
            elif attack == "fgsm":
                eta = perturb.sign_perturbation(grads[j], eps)
            else:
                eta = attack_batch(F_source, attack, xb, yb, eps, np.random.default_rng([seed, j])).eta
            norms.append(perturb.PerturbationBatch(eta, attack).per_image_l2)
            correct += int((predict(F_eval, perturb.apply(xb, eta)).argmax(axis=1) == yb).sum())
        accs.append(correct / len(ds))
        powers.append(float(np.concatenate(norms).mean()))
    return RobustnessCurve(attack, mode, eps_list, accs, powers, source_model)


# --------------------------------------------------------- attack comparison


@dataclass
class AttackPoint:
    method: str
    param: float  # c_g for gat, eps for the fast-gradient attacks
    mean_power: float
    accuracy: float


def _fg_at_power(F: Network, ds: Dataset, grads: list, method: str, power: float,
                 batch: int) -> AttackPoint:
    """Fast-gradient attack scaled so its mean per-image L2 equals ``power``."""
    if method == "fg_l2":
        eps = power
    else:
        # ||eps * sign(g)||_2 = eps * sqrt(nnz(g)) per image, so mean power is linear in eps
        root_nnz = np.concatenate([np.sqrt((g.reshape(len(g), -1) != 0).sum(axis=1)) for g in grads])
        eps = power / root_nnz.mean() if root_nnz.mean() > 0 else 0.0
    correct, norms = 0, []
    for j, i in enumerate(range(0, len(ds), batch)):
        xb, yb = ds.images[i:i + batch], ds.labels[i:i + batch]
        if method == "fg_l2":
            eta = perturb.l2_perturbation(grads[j], eps)
        else:
            eta = perturb.sign_perturbation(grads[j], eps)
        norms.append(perturb.PerturbationBatch(eta, method).per_image_l2)
        correct += int((predict(F, perturb.apply(xb, eta)).argmax(axis=1) == yb).sum())
    return AttackPoint(method, float(eps), float(np.concatenate(norms).mean()), correct / len(ds))


def gat_attack_point(G: Network, F: Network, ds: Dataset, c_g: float, batch: int = 500) -> AttackPoint:
    correct, norms = 0, []
    for i in range(0, len(ds), batch):
        xb, yb = ds.images[i:i + batch], ds.labels[i:i + batch]
        pb = perturb.gat_perturb(G, F, xb, yb)
        norms.append(pb.per_image_l2)
        correct += int((predict(F, perturb.apply(xb, pb.eta)).argmax(axis=1) == yb).sum())
    return AttackPoint("gat", c_g, float(np.concatenate(norms).mean()), correct / len(ds))


def attack_compare(F: Network, train: Dataset, val: Dataset, test: Dataset,
                   c_g_grid: Sequence[float], cfg: TrainConfig,
                   generator_cfg: Optional[ModelConfig] = None,
                   batch: int = 500) -> list[AttackPoint]:
    """Generator attack vs fast-gradient attacks at matched mean perturbation power.

    For every ``c_g`` a fresh generator is fitted against the frozen ``F``;
    the fast-gradient attacks are then scaled to the generator's measured
    power on ``test``. A zero-power row anchors all methods at clean accuracy.
    """
    gcfg = generator_cfg or ModelConfig(F.cfg.input_hw, F.cfg.input_channels, F.cfg.num_classes,
                                        F.cfg.width_scale, cfg.seed)
    grads = [perturb.input_gradient_loss(F, test.images[i:i + batch], test.labels[i:i + batch])
             for i in range(0, len(test), batch)]
    clean = eval_accuracy(F, test, batch)
    points = [AttackPoint(m, 0.0, 0.0, clean) for m in ("gat", "fg_l2", "fgsm")]
    for c_g in c_g_grid:
        G, _ = training.train_generator_only(build_generator(gcfg), F, train, val,
                                             cfg.replace(c_g=float(c_g)))
        gp = gat_attack_point(G, F, test, float(c_g), batch)
        points.append(gp)
        for method in ("fg_l2", "fgsm"):
            points.append(_fg_at_power(F, test, grads, method, gp.mean_power, batch))
    return points


# --------------------------------------------------------- regularization table


@dataclass
class RegRow:
    method: str
    mean: float
    std: float
    repeats: int
    accuracies: list[float] = field(default_factory=list)
    diverged: int = 0

    @property
    def label(self) -> str:
        return REG_LABELS.get(self.method, self.method)


def sample_std(values: Sequence[float]) -> float:
    """Unbiased (n-1) sample standard deviation; nan for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if v.size >= 2 else math.nan


def method_config(method: str, base: TrainConfig, eps: Optional[dict] = None,
                  dropout_rate: float = 0.5) -> tuple[TrainConfig, float]:
    """(training config, dropout rate) for one regularization method."""
    eps = eps or {}
    variant = {"baseline": "baseline", "dropout": "baseline", "random": "random",
               "fg_linf": "fg_linf", "fg_l2": "fg_l2", "gat": "gat", "dropout+gat": "gat"}[method]
    rate = dropout_rate if method in ("dropout", "dropout+gat") else 0.0
    cfg = base.replace(variant=variant, epsilon=float(eps.get(method, base.epsilon)))
    return cfg, rate


def train_method(method: str, model_cfg: ModelConfig, train: Dataset, val: Dataset,
                 cfg: TrainConfig, dropout_rate: float = 0.0) -> tuple[Network, training.TrainHistory]:
    F = build_classifier(model_cfg, dropout_rate=dropout_rate)
    if cfg.variant == "gat":
        G = build_generator(model_cfg)
        F, _, hist = training.train_gat(F, G, train, val, cfg)
    else:
        F, hist = training.train_supervised(F, train, val, cfg)
    return F, hist


def regtable(train: Dataset, val: Dataset, test: Dataset, methods: Sequence[str], repeats: int,
             model_cfg: ModelConfig, base_cfg: TrainConfig, eps: Optional[dict] = None,
             dropout_rate: float = 0.5, seeds: Optional[Sequence[int]] = None) -> list[RegRow]:
    """Mean and sample std of test accuracy per method over fresh initializations.

    Run ``r`` uses seed ``seeds[r]`` (default ``base_cfg.seed + r``) for both
    weight initialization and minibatch order. Diverged runs are dropped and
    counted. Unless ``eps`` says otherwise every perturbation row trains at L2
    budget ``base_cfg.epsilon``; the sign method gets ``epsilon / sqrt(D)``,
    which has that L2 norm when no gradient entry is zero.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    seeds = list(seeds) if seeds is not None else [base_cfg.seed + r for r in range(repeats)]
    unknown = [m for m in methods if m not in REG_METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {REG_METHODS}")
    eps = dict(eps or {})
    eps.setdefault("fg_linf", base_cfg.epsilon / math.sqrt(train.images[0].size))
    rows = []
    for method in [m for m in REG_METHODS if m in methods]:
        accs, diverged = [], 0
        for seed in sorted(seeds[:repeats]):
            cfg, rate = method_config(method, base_cfg.replace(seed=seed), eps, dropout_rate)
            mcfg = ModelConfig(model_cfg.input_hw, model_cfg.input_channels, model_cfg.num_classes,
                               model_cfg.width_scale, seed)
            try:
                F, _ = train_method(method, mcfg, train, val, cfg, rate)
            except TrainingDiverged:
                diverged += 1
                continue
            accs.append(eval_accuracy(F, test))
        if diverged:
            log.warning("%s: %d of %d runs diverged and were excluded", method, diverged, repeats)
        mean = float(np.mean(accs)) if accs else math.nan
        rows.append(RegRow(method, mean, sample_std(accs), len(accs), accs, diverged))
    return rows


# ------------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_history_csv(path, history: training.TrainHistory) -> None:
    write_csv(path, ("epoch", "train_loss", "val_loss", "val_acc", "mean_power"), history.rows())


def write_curve_csv(path, curve: RobustnessCurve) -> None:
    write_csv(path, ("epsilon", "accuracy", "mean_power"), curve.rows())


def write_attack_csv(path, points: Sequence[AttackPoint]) -> None:
    write_csv(path, ("method", "param", "mean_power", "accuracy"),
              [(p.method, p.param, p.mean_power, p.accuracy) for p in points])


def write_regtable_csv(path, rows: Sequence[RegRow]) -> None:
    write_csv(path, ("method", "mean_accuracy", "std", "repeats", "diverged"),
              [(r.label, r.mean, r.std, r.repeats, r.diverged) for r in rows])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def svg_line_chart(path, series: dict, xlabel: str, ylabel: str, title: str = "",
                   width: int = 480, height: int = 320) -> None:
    """Write a minimal SVG: axes, one polyline per series, legend.

    ``series`` maps a label to (xs, ys).
    """
    left, right, top, bottom = 60, 20, 30, 45
    xs = [x for sx, _ in series.values() for x in sx] or [0.0, 1.0]
    ys = [y for _, sy in series.values() for y in sy if np.isfinite(y)] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{ylabel}</text>')
    if title:
        out.append(f'<text x="{left + pw / 2}" y="18" text-anchor="middle">{title}</text>')
    for i, (label, (sx, sy)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(sx, sy) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw - 130}" y1="{ly}" x2="{left + pw - 110}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 105}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
