"""Losses, Adam, and the supervised / alternating adversarial training loops."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from gradforge import autodiff as ad
from gradforge import perturb
from gradforge.autodiff import Tape, Tensor
from gradforge.data import Dataset, batch_stream, minibatches
from gradforge.nn import Network, forward, predict

VARIANTS = ("baseline", "fg_linf", "fg_l2", "random", "gat")

# rng stream tags; keep the classifier, generator and dropout streams independent
_CLS_STREAM, _GEN_STREAM, _STEP_RNG = 0, 1, 2


@dataclass
class TrainConfig:
    alpha: float = 0.5
    c_g: float = 1.0
    k: int = 1
    lr_f: float = 1e-3
    lr_g: float = 1e-6
    batch_size: int = 64
    epochs: int = 10
    epsilon: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "baseline"
    patience: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.c_g <= 0:
            raise ValueError("c_g must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def replace(self, **changes) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return TrainConfig(**vals)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    mean_power: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.records)

    def rows(self) -> list[tuple]:
        """Deterministic columns (wall time excluded)."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_acc, r.mean_power) for r in self.records]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ------------------------------------------------------------------- losses


def loss_J(F: Network, x, y, params=None, rng=None) -> Tensor:
    """Batch-mean cross-entropy of the classifier."""
    return ad.cross_entropy(forward(F, x, rng=rng, params=params), y)


def _mix(alpha: float, clean: Tensor, adv: Tensor) -> Tensor:
    return ad.add(ad.scale(clean, alpha), ad.scale(adv, 1.0 - alpha))


def loss_G(F: Network, G: Network, x, y, c_g: float, g_params=None, delta=None) -> Tensor:
    """Label probability at the perturbed input plus the perturbation-power penalty.

    The classifier enters with constant weights; only ``x`` and the generator
    parameters carry gradient. ``delta`` (the detached input gradient) is
    recomputed from ``F`` when not supplied.
    """
    x = np.asarray(x)
    if delta is None:
        delta = perturb.input_gradient_prob(F, x, y)
    eta = forward(G, delta, params=g_params)
    mode, F.mode = F.mode, "eval"
    try:
        probs = forward(F, ad.add(Tensor(x), eta))
    finally:
        F.mode = mode
    fooled = ad.mean(ad.pick(probs, y))
    return ad.add(fooled, ad.scale(ad.l2_norm_sq(eta, batch_mean=True), c_g))


def loss_F_gat(F: Network, G: Network, x, y, alpha: float, params=None, rng=None,
               delta=None) -> Tensor:
    """Mix of clean and generator-perturbed cross-entropy; the generator is frozen."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    x = np.asarray(x)
    if delta is None:
        delta = perturb.input_gradient_prob(F, x, y)
    mode, G.mode = G.mode, "eval"
    try:
        eta = forward(G, delta).data
    finally:
        G.mode = mode
    clean = loss_J(F, x, y, params, rng)
    adv = loss_J(F, x + eta, y, params, rng)
    return _mix(alpha, clean, adv)


def loss_F_fg(F: Network, x, y, alpha: float, eps: float, norm: str = "linf",
              params=None, rng=None) -> Tensor:
    """Fast-gradient adversarial objective; the perturbation is held constant."""
    if norm == "linf":
        eta = perturb.fgsm(F, x, y, eps).eta
    elif norm == "l2":
        eta = perturb.fg_l2(F, x, y, eps).eta
    else:
        raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")
    clean = loss_J(F, x, y, params, rng)
    adv = loss_J(F, np.asarray(x) + eta, y, params, rng)
    return _mix(alpha, clean, adv)


def loss_F_random(F: Network, x, y, alpha: float, eps: float, noise_rng, params=None,
                  rng=None) -> Tensor:
    eta = perturb.random_perturbation(x, eps, noise_rng).eta
    clean = loss_J(F, x, y, params, rng)
    adv = loss_J(F, np.asarray(x) + eta, y, params, rng)
    return _mix(alpha, clean, adv)


# --------------------------------------------------------------- evaluation


def evaluate(F: Network, ds: Dataset, batch: int = 500) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in eval mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(F, ds.images, batch)
    p = np.maximum(probs[np.arange(len(ds)), ds.labels], ad.PROB_FLOOR)
    return float(-np.log(p).mean()), float((probs.argmax(axis=1) == ds.labels).mean())


def mean_gat_power(G: Network, F: Network, ds: Dataset, batch: int = 500) -> float:
    norms = [perturb.gat_perturb(G, F, ds.images[i:i + batch], ds.labels[i:i + batch]).per_image_l2
             for i in range(0, len(ds), batch)]
    return float(np.concatenate(norms).mean())


def mean_loss_G(F: Network, G: Network, ds: Dataset, c_g: float, batch: int = 500) -> float:
    total = 0.0
    for i in range(0, len(ds), batch):
        xb, yb = ds.images[i:i + batch], ds.labels[i:i + batch]
        total += loss_G(F, G, xb, yb, c_g).item() * len(yb)
    return total / len(ds)


# ----------------------------------------------------------------- stepping


def _step(net: Network, state: AdamState, cfg: TrainConfig, lr: float,
          make_loss: Callable[[dict], Tensor]) -> float:
    tape = Tape()
    params = net.bind(tape)
    loss = make_loss(params)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite loss")
    ad.backward(tape, loss)
    adam_step(net.params, {n: t.grad for n, t in params.items()}, state, lr,
              cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss.item()


def _step_rng(cfg: TrainConfig, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _STEP_RNG, epoch, step])


def _classifier_loss(F: Network, cfg: TrainConfig, xb, yb, rng, G: Optional[Network] = None):
    v = cfg.variant
    if v == "baseline":
        return lambda p: loss_J(F, xb, yb, p, rng)
    if v in ("fg_linf", "fg_l2"):
        norm = "linf" if v == "fg_linf" else "l2"
        return lambda p: loss_F_fg(F, xb, yb, cfg.alpha, cfg.epsilon, norm, p, rng)
    if v == "random":
        noise_rng = np.random.default_rng(rng.integers(2 ** 63))
        return lambda p: loss_F_random(F, xb, yb, cfg.alpha, cfg.epsilon, noise_rng, p, rng)
    return lambda p: loss_F_gat(F, G, xb, yb, cfg.alpha, p, rng)


class _EarlyStopper:
    def __init__(self, patience: int, nets: list[Network]):
        self.patience = patience
        self.nets = nets
        self.best = np.inf
        self.best_epoch = -1
        self.best_params = [dict(n.params) for n in nets]
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; return True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.best_params = [dict(n.params) for n in self.nets]
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    def restore(self):
        for net, params in zip(self.nets, self.best_params):
            net.params = dict(params)


def _finish_epoch(history, stopper, epoch, losses, val_loss, val_acc, power, t0) -> bool:
    rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_acc, power,
                      time.perf_counter() - t0)
    history.records.append(rec)
    if not np.isfinite(rec.train_loss) or not np.isfinite(val_loss):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
    return stopper.update(epoch, val_loss)


def train_supervised(F: Network, train: Dataset, val: Dataset, cfg: TrainConfig,
                     callback: Optional[Callable] = None) -> tuple[Network, TrainHistory]:
    """Adam training of ``F`` on the variant's objective with early stopping.

    Returns a trained copy holding the parameters of the epoch with the lowest
    validation cross-entropy.
    """
    if cfg.variant == "gat":
        raise ValueError("use train_gat for the gat variant")
    F = F.copy()
    state = AdamState()
    history = TrainHistory()
    stopper = _EarlyStopper(cfg.patience, [F])
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for step, idx in enumerate(minibatches(train, cfg.batch_size, cfg.seed, epoch)):
            xb, yb = train.images[idx], train.labels[idx]
            rng = _step_rng(cfg, epoch, step)
            F.train()
            try:
                losses.append(_step(F, state, cfg, cfg.lr_f, _classifier_loss(F, cfg, xb, yb, rng)))
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), history) from exc
            finally:
                F.eval()
            if callback is not None:
                callback("classifier", epoch, step, F, None)
        val_loss, val_acc = evaluate(F, val)
        if _finish_epoch(history, stopper, epoch, losses, val_loss, val_acc, 0.0, t0):
            break
    stopper.restore()
    history.best_epoch = stopper.best_epoch
    return F, history


def train_gat(F: Network, G: Network, train: Dataset, val: Dataset, cfg: TrainConfig,
              callback: Optional[Callable] = None) -> tuple[Network, Network, TrainHistory]:
    """Alternating adversarial training of classifier ``F`` and generator ``G``.

    Each outer iteration takes ``cfg.k`` generator steps on minibatches from
    an independently shuffled stream, then one classifier step. An epoch is one
    pass of classifier minibatches over ``train``. ``callback(phase, epoch,
    step, F, G)`` runs after every update.
    """
    F, G = F.copy(), G.copy()
    state_f, state_g = AdamState(), AdamState()
    gen_batches = batch_stream(train, cfg.batch_size, cfg.seed * 1_000_003 + _GEN_STREAM)
    history = TrainHistory()
    stopper = _EarlyStopper(cfg.patience, [F, G])
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for step, idx in enumerate(minibatches(train, cfg.batch_size, cfg.seed, epoch)):
            try:
                for _ in range(cfg.k):
                    gidx = next(gen_batches)
                    gx, gy = train.images[gidx], train.labels[gidx]
                    _step(G, state_g, cfg, cfg.lr_g, lambda p: loss_G(F, G, gx, gy, cfg.c_g, p))
                    if callback is not None:
                        callback("generator", epoch, step, F, G)
                xb, yb = train.images[idx], train.labels[idx]
                rng = _step_rng(cfg, epoch, step)
                F.train()
                try:
                    losses.append(_step(F, state_f, cfg, cfg.lr_f,
                                        _classifier_loss(F, cfg, xb, yb, rng, G)))
                finally:
                    F.eval()
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), history) from exc
            if callback is not None:
                callback("classifier", epoch, step, F, G)
        val_loss, val_acc = evaluate(F, val)
        power = mean_gat_power(G, F, val)
        if _finish_epoch(history, stopper, epoch, losses, val_loss, val_acc, power, t0):
            break
    stopper.restore()
    history.best_epoch = stopper.best_epoch
    return F, G, history


def train_generator_only(G: Network, F: Network, train: Dataset, val: Dataset,
                         cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Fit ``G`` against a frozen classifier; early stopping on validation generator loss."""
    G = G.copy()
    state = AdamState()
    history = TrainHistory()
    stopper = _EarlyStopper(cfg.patience, [G])
    init_loss = mean_loss_G(F, G, val, cfg.c_g)
    stopper.best = init_loss  # never return something worse than the starting point
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in minibatches(train, cfg.batch_size, cfg.seed * 1_000_003 + _GEN_STREAM, epoch):
            gx, gy = train.images[idx], train.labels[idx]
            try:
                losses.append(_step(G, state, cfg, cfg.lr_g, lambda p: loss_G(F, G, gx, gy, cfg.c_g, p)))
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), history) from exc
        val_loss = mean_loss_G(F, G, val, cfg.c_g)
        _, val_acc = _adv_accuracy(G, F, val)
        power = mean_gat_power(G, F, val)
        if _finish_epoch(history, stopper, epoch, losses, val_loss, val_acc, power, t0):
            break
    stopper.restore()
    history.best_epoch = stopper.best_epoch
    return G, history


def _adv_accuracy(G: Network, F: Network, ds: Dataset, batch: int = 500) -> tuple[float, float]:
    """(mean power, accuracy of F on clipped generator-perturbed images)."""
    correct, norms = 0, []
    for i in range(0, len(ds), batch):
        xb, yb = ds.images[i:i + batch], ds.labels[i:i + batch]
        pb = perturb.gat_perturb(G, F, xb, yb)
        norms.append(pb.per_image_l2)
        correct += int((predict(F, perturb.apply(xb, pb.eta)).argmax(axis=1) == yb).sum())
    return float(np.concatenate(norms).mean()), correct / len(ds)
