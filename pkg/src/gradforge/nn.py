"""All-convolutional classifier and perturbation generator networks."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from gradforge import autodiff as ad
from gradforge.autodiff import Tape, Tensor

LAYER_KINDS = ("conv3x3", "conv1x1", "relu", "tanh", "global_avg_pool", "softmax", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    stride: int = 1
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind.startswith("conv") and self.out_channels < 1:
            raise ValueError("conv layers need out_channels >= 1")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def is_conv(self) -> bool:
        return self.kind.startswith("conv")

    @property
    def kernel(self) -> int:
        return 3 if self.kind == "conv3x3" else 1


@dataclass
class ModelConfig:
    input_hw: int = 32
    input_channels: int = 3
    num_classes: int = 10
    width_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.input_hw < 1 or self.input_channels < 1:
            raise ValueError("input_hw and input_channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.width_scale <= 0 or round(48 * self.width_scale) < 1:
            raise ValueError(f"width_scale {self.width_scale} gives no channels")

    def width(self, base: int) -> int:
        return max(1, int(round(base * self.width_scale)))


def xavier_init(fan_in: int, fan_out: int, shape, rng: np.random.Generator) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """Ordered layer stack with one (weight, bias) pair per conv layer.

    Parameters live in ``params`` as plain numpy arrays keyed ``conv{i}.w`` /
    ``conv{i}.b`` in layer order. ``mode`` is ``"train"`` or ``"eval"`` and
    only affects dropout.
    """

    def __init__(self, kind: str, cfg: ModelConfig, layers: list[LayerSpec],
                 params: Optional[dict] = None):
        self.kind = kind
        self.cfg = cfg
        self.layers = list(layers)
        self.mode = "eval"
        self.params: dict[str, np.ndarray] = {}
        cin = cfg.input_channels
        conv_i = 0
        for spec in self.layers:
            if not spec.is_conv:
                continue
            k = spec.kernel
            self.params[f"conv{conv_i}.w"] = np.zeros((k, k, cin, spec.out_channels))
            self.params[f"conv{conv_i}.b"] = np.zeros(spec.out_channels)
            cin = spec.out_channels
            conv_i += 1
        if params is not None:
            for name, arr in params.items():
                if name not in self.params or self.params[name].shape != arr.shape:
                    raise ad.ShapeError("Network", f"{name} {self.params.get(name, np.empty(0)).shape}",
                                        np.shape(arr))
                self.params[name] = np.array(arr, dtype=np.float64)

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.is_conv]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def init_xavier(self, rng: np.random.Generator) -> "Network":
        for name in self.params:
            arr = self.params[name]
            if name.endswith(".w"):
                k, _, cin, cout = arr.shape
                self.params[name] = xavier_init(k * k * cin, k * k * cout, arr.shape, rng)
            else:
                self.params[name] = np.zeros_like(arr)
        return self

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def copy(self) -> "Network":
        net = Network(self.kind, self.cfg, self.layers, self.params)
        net.mode = self.mode
        return net

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a tracked leaf on ``tape``."""
        return {name: tape.watch(arr, name=name) for name, arr in self.params.items()}

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for name, p in self.params.items():
            self.params[name] = np.array(flat[off:off + p.size]).reshape(p.shape)
            off += p.size


def _classifier_layers(cfg: ModelConfig, dropout_rate: float) -> list[LayerSpec]:
    w48, w96 = cfg.width(48), cfg.width(96)
    drop = [LayerSpec("dropout", rate=dropout_rate)] if dropout_rate > 0 else []
    return [
        LayerSpec("conv3x3", w48), LayerSpec("relu"),
        LayerSpec("conv3x3", w48, stride=2), LayerSpec("relu"), *drop,
        LayerSpec("conv3x3", w96), LayerSpec("relu"),
        LayerSpec("conv3x3", w96, stride=2), LayerSpec("relu"), *drop,
        LayerSpec("conv3x3", w96), LayerSpec("relu"),
        LayerSpec("conv1x1", w96), LayerSpec("relu"),
        LayerSpec("conv1x1", cfg.num_classes),
        LayerSpec("global_avg_pool"),
        LayerSpec("softmax"),
    ]


def build_classifier(cfg: ModelConfig, dropout_rate: float = 0.0) -> Network:
    """All-conv classifier: two stride-2 stages, 1x1 class scores, global average."""
    if cfg.input_hw % 4:
        raise ValueError(f"classifier input_hw must be divisible by 4, got {cfg.input_hw}")
    net = Network("classifier", cfg, _classifier_layers(cfg, dropout_rate))
    return net.init_xavier(np.random.default_rng([cfg.seed, 0]))


def build_generator(cfg: ModelConfig) -> Network:
    """Shape-preserving gradient-to-perturbation network ending in tanh."""
    w48 = cfg.width(48)
    layers = []
    for _ in range(6):
        layers += [LayerSpec("conv3x3", w48), LayerSpec("relu")]
    layers += [LayerSpec("conv1x1", w48), LayerSpec("relu"),
               LayerSpec("conv1x1", cfg.input_channels), LayerSpec("tanh")]
    net = Network("generator", cfg, layers)
    return net.init_xavier(np.random.default_rng([cfg.seed, 1]))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], mode: str) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-rate) in train mode, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    return ad.mul(x, Tensor(keep / (1.0 - rate)))


def forward(net: Network, x, rng: Optional[np.random.Generator] = None,
            params: Optional[dict[str, Tensor]] = None) -> Tensor:
    """Run ``net`` on ``x`` ([N,H,W,C]).

    With ``params`` from :meth:`Network.bind` the parameters take part in the
    tape; otherwise they enter as constants, so only ``x`` can carry gradient.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = net.cfg
    if x.data.ndim != 4 or x.shape[1:] != (cfg.input_hw, cfg.input_hw, cfg.input_channels):
        raise ad.ShapeError(f"{net.kind}.forward",
                            f"[N,{cfg.input_hw},{cfg.input_hw},{cfg.input_channels}]", x.shape)
    if params is None:
        params = {name: Tensor(arr) for name, arr in net.params.items()}
    h = x
    conv_i = 0
    for spec in net.layers:
        if spec.is_conv:
            h = ad.conv2d(h, params[f"conv{conv_i}.w"], params[f"conv{conv_i}.b"], spec.stride)
            conv_i += 1
        elif spec.kind == "relu":
            h = ad.relu(h)
        elif spec.kind == "tanh":
            h = ad.tanh(h)
        elif spec.kind == "global_avg_pool":
            h = ad.global_avg_pool(h)
        elif spec.kind == "softmax":
            h = ad.softmax(h)
        elif spec.kind == "dropout":
            h = dropout(h, spec.rate, rng, net.mode)
    return h


def predict(net: Network, x: np.ndarray, batch: int = 500) -> np.ndarray:
    """Class probabilities in eval mode, evaluated in chunks."""
    mode, net.mode = net.mode, "eval"
    try:
        out = [forward(net, x[i:i + batch]).data for i in range(0, len(x), batch)]
    finally:
        net.mode = mode
    return np.concatenate(out) if out else np.zeros((0, net.cfg.num_classes))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GFCKPT"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path) -> None:
    """Write ``net`` as magic, version, JSON header, then little-endian float64 arrays."""
    header = {
        "kind": net.kind,
        "cfg": asdict(net.cfg),
        "layers": [asdict(s) for s in net.layers],
        "params": [[name, list(arr.shape)] for name, arr in net.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for arr in net.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a gradforge checkpoint")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    layers = [LayerSpec(**s) for s in header["layers"]]
    return Network(header["kind"], ModelConfig(**header["cfg"]), layers, params)
