"""Input gradients and the perturbation producers built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gradforge import autodiff as ad
from gradforge.autodiff import Tape, Tensor
from gradforge.nn import Network, forward

METHODS = ("fgsm", "fg_l2", "random", "gat")
NORM_FLOOR = 1e-12


@dataclass
class PerturbationBatch:
    eta: np.ndarray
    method: str

    @property
    def per_image_l2(self) -> np.ndarray:
        return np.sqrt((self.eta.reshape(len(self.eta), -1) ** 2).sum(axis=1))

    @property
    def mean_l2(self) -> float:
        return float(self.per_image_l2.mean()) if len(self.eta) else 0.0


def _eval_input_grad(F: Network, x, objective) -> np.ndarray:
    mode, F.mode = F.mode, "eval"
    try:
        tape = Tape()
        xt = tape.watch(np.asarray(x.data if isinstance(x, Tensor) else x))
        probs = forward(F, xt)
        ad.backward(tape, objective(probs))
    finally:
        F.mode = mode
    return xt.grad


def input_gradient_prob(F: Network, x, y) -> np.ndarray:
    """Gradient of the label-class probability w.r.t. each input image.

    Images in a batch do not interact, so differentiating the sum of the
    per-image label probabilities yields every per-image gradient at once.
    """
    return _eval_input_grad(F, x, lambda p: ad.sum_all(ad.pick(p, y)))


def input_gradient_loss(F: Network, x, y) -> np.ndarray:
    """Per-image gradient of ``-log F(x)_y`` (not divided by batch size)."""
    n = len(y)
    return _eval_input_grad(F, x, lambda p: ad.scale(ad.cross_entropy(p, y), float(n)))


def sign_perturbation(g: np.ndarray, eps: float) -> np.ndarray:
    return eps * np.sign(g)


def l2_perturbation(g: np.ndarray, eps: float) -> np.ndarray:
    flat = g.reshape(len(g), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    safe = np.where(norms < NORM_FLOOR, 1.0, norms)
    eta = np.where((norms < NORM_FLOOR)[:, None], 0.0, eps * flat / safe[:, None])
    return eta.reshape(g.shape)


def fgsm(F: Network, x, y, eps: float) -> PerturbationBatch:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return PerturbationBatch(sign_perturbation(input_gradient_loss(F, x, y), eps), "fgsm")


def fg_l2(F: Network, x, y, eps: float) -> PerturbationBatch:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return PerturbationBatch(l2_perturbation(input_gradient_loss(F, x, y), eps), "fg_l2")


def random_perturbation(x, eps: float, rng: np.random.Generator) -> PerturbationBatch:
    """Isotropic direction per image, scaled to L2 norm ``eps``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    shape = np.shape(x)
    return PerturbationBatch(l2_perturbation(rng.standard_normal(shape), eps), "random")


def gat_perturb(G: Network, F: Network, x, y) -> PerturbationBatch:
    x = np.asarray(x)
    if G.cfg.input_hw != F.cfg.input_hw or G.cfg.input_channels != F.cfg.input_channels:
        raise ad.ShapeError("gat_perturb", "generator and classifier with equal input shape",
                            (G.cfg.input_hw, F.cfg.input_hw))
    delta = input_gradient_prob(F, x, y)
    mode, G.mode = G.mode, "eval"
    try:
        eta = forward(G, delta).data
    finally:
        G.mode = mode
    # float64 tanh rounds to +-1 past |z| ~ 19; keep the output strictly inside (-1, 1)
    edge = np.nextafter(1.0, 0.0)
    return PerturbationBatch(np.clip(eta, -edge, edge), "gat")


def apply(x, eta) -> np.ndarray:
    """Perturbed images clipped to the valid pixel range [0, 1]."""
    x = np.asarray(x)
    eta = np.asarray(eta)
    if x.shape != eta.shape:
        raise ad.ShapeError("apply", x.shape, eta.shape)
    return np.clip(x + eta, 0.0, 1.0)
