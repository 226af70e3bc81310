"""Shallow binary real/fake classifier over coverage feature vectors.

Five fully-connected layers (four ReLU hidden layers, one sigmoid
output), trained with momentum SGD under inverse-time learning-rate
decay and binary cross-entropy. Fake is the positive class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nsw1
from .errors import WeightFormatError
from .nn import glorot_uniform, max_relative_error, relu, sigmoid

REAL = "real"
FAKE = "fake"

_MAGIC = b"NSD1"
_VERSION = 1


@dataclass(frozen=True)
class DetectorSpec:
    input_width: int
    hidden: tuple = (256, 128, 64, 32)

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError("input_width must be positive")
        if len(self.hidden) != 4:
            raise ValueError("detector has exactly five FC layers: four hidden plus the output")

    def layer_widths(self):
        return [self.input_width, *self.hidden, 1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    decay: float = 1e-6
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.decay < 0:
            raise ValueError("learning rate and decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension (x - mean) / std with std floored at 1e-8; fit on train only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("standardizer needs a non-empty 2-D feature matrix")
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), 1e-8)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class Prediction:
    score: float
    label: str


@dataclass
class DetectorModel:
    spec: DetectorSpec
    tensors: dict  # fcN.weight / fcN.bias, float32
    standardizer: Standardizer
    criterion: str = ""
    k: int = 0
    loss_log: list = field(default_factory=list)

    def params64(self) -> dict:
        return {k: v.astype(np.float64) for k, v in self.tensors.items()}


def _init_tensors(spec: DetectorSpec, rng: np.random.Generator) -> dict:
    tensors = {}
    widths = spec.layer_widths()
    for i in range(5):
        fan_in, fan_out = widths[i], widths[i + 1]
        tensors[f"fc{i + 1}.weight"] = glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out).astype(np.float32)
        tensors[f"fc{i + 1}.bias"] = np.zeros(fan_out, dtype=np.float32)
    return tensors


def _forward_layers(params: dict, x: np.ndarray):
    """Returns the list of post-activation layer outputs; last entry is the logit."""
    outs = []
    cur = x
    for i in range(5):
        cur = cur @ params[f"fc{i + 1}.weight"] + params[f"fc{i + 1}.bias"]
        if i < 4:
            cur = relu(cur)
        outs.append(cur)
    return outs


def _bce_loss(logits: np.ndarray, targets: np.ndarray):
    z = logits.ravel()
    y = targets.astype(np.float64)
    # softplus(z) - y*z, computed overflow-free
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z))
    dlogits = (sigmoid(z) - y)[:, None] / z.size
    return loss, dlogits


def _backward(params: dict, x: np.ndarray, outs, dlogit: np.ndarray) -> dict:
    grads = {}
    dcur = dlogit
    for i in range(4, -1, -1):
        layer_in = x if i == 0 else outs[i - 1]
        if i < 4:
            dcur = dcur * (outs[i] > 0)
        grads[f"fc{i + 1}.weight"] = layer_in.T @ dcur
        grads[f"fc{i + 1}.bias"] = dcur.sum(axis=0)
        dcur = dcur @ params[f"fc{i + 1}.weight"].T
    return grads


def train_detector(
    features: np.ndarray,
    labels,
    config: TrainConfig,
    spec: DetectorSpec | None = None,
    standardizer: Standardizer | None = None,
    criterion: str = "",
    k: int = 0,
) -> DetectorModel:
    """Momentum-SGD BCE training; lr_t = lr0 / (1 + decay * t) per global step.

    labels are 1 for fake, 0 for real. When a standardizer is given it is
    applied before training and bundled into the returned model, so
    predict() accepts raw features.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if features.shape[0] != labels.size:
        raise ValueError("features and labels must align")
    if np.unique(labels).size < 2:
        raise ValueError("training needs both classes present")
    if spec is None:
        spec = DetectorSpec(features.shape[1])
    if features.shape[1] != spec.input_width:
        raise ValueError(f"feature width {features.shape[1]} does not match spec {spec.input_width}")
    if standardizer is None:
        standardizer = Standardizer.identity(spec.input_width)
    x_all = standardizer.transform(features)

    rng = np.random.default_rng(config.seed)
    params = {k_: v.astype(np.float64) for k_, v in _init_tensors(spec, rng).items()}
    velocity = {k_: np.zeros_like(v) for k_, v in params.items()}

    n = features.shape[0]
    step = 0
    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            take = order[start : start + config.batch_size]
            outs = _forward_layers(params, x_all[take])
            loss, dlogit = _bce_loss(outs[-1], labels[take])
            grads = _backward(params, x_all[take], outs, dlogit)
            lr_t = config.lr / (1.0 + config.decay * step)
            for key in params:
                velocity[key] = config.momentum * velocity[key] - lr_t * grads[key]
                params[key] = params[key] + velocity[key]
            step += 1
            total += loss * take.size
        epoch_losses.append(total / n)

    tensors = {k_: v.astype(np.float32) for k_, v in params.items()}
    return DetectorModel(spec, tensors, standardizer, criterion, k, epoch_losses)


def score_batch(model: DetectorModel, features: np.ndarray) -> np.ndarray:
    """Sigmoid scores in [0, 1] for raw (unstandardized) feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None]
    if features.shape[1] != model.spec.input_width:
        raise ValueError(
            f"feature width {features.shape[1]} does not match model input {model.spec.input_width}"
        )
    x = model.standardizer.transform(features)
    logits = _forward_layers(model.params64(), x)[-1]
    return sigmoid(logits.ravel())


def predict(model: DetectorModel, feature, threshold: float = 0.5) -> Prediction:
    score = float(score_batch(model, np.asarray(feature, dtype=np.float64))[0])
    return Prediction(score, FAKE if score >= threshold else REAL)


def gradient_check(model: DetectorModel, feature, label: int, eps: float = 1e-3) -> float:
    """Analytic vs central-difference BCE gradients; max relative error."""
    n_params = sum(int(t.size) for t in model.tensors.values())
    if n_params > 5000:
        raise ValueError(f"gradient check limited to 5000 parameters, model has {n_params}")
    x = model.standardizer.transform(np.asarray(feature, dtype=np.float64)[None])
    y = np.asarray([label], dtype=np.int64)
    params = model.params64()
    outs = _forward_layers(params, x)
    _, dlogit = _bce_loss(outs[-1], y)
    grads = _backward(params, x, outs, dlogit)

    worst = 0.0
    for name, tensor in params.items():
        numeric = np.zeros_like(tensor)
        flat = tensor.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = _bce_loss(_forward_layers(params, x)[-1], y)
            flat[i] = orig - eps
            down, _ = _bce_loss(_forward_layers(params, x)[-1], y)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * eps)
        worst = max(worst, max_relative_error(grads[name], numeric))
    return worst


def save_detector(model: DetectorModel, path) -> None:
    """NSD1 header (criterion, k) followed by an NSW1 block with weights and stats."""
    header = _MAGIC + struct.pack("<I", _VERSION)
    enc = model.criterion.encode("utf-8")
    header += struct.pack("<I", len(enc)) + enc + struct.pack("<I", model.k)
    tensors = dict(model.tensors)
    tensors["standardize.mean"] = model.standardizer.mean.astype(np.float32)
    tensors["standardize.std"] = model.standardizer.std.astype(np.float32)
    Path(path).write_bytes(header + nsw1.pack_tensors(tensors))


def load_detector(path) -> DetectorModel:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a detector file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise WeightFormatError(f"{path}: unsupported detector version {version}")
    (crit_len,) = struct.unpack_from("<I", data, 8)
    criterion = data[12 : 12 + crit_len].decode("utf-8")
    (k,) = struct.unpack_from("<I", data, 12 + crit_len)
    tensors = nsw1.read_tensor_stream(data[16 + crit_len :], label=str(path))

    try:
        mean = tensors.pop("standardize.mean").astype(np.float64)
        std = tensors.pop("standardize.std").astype(np.float64)
    except KeyError as exc:
        raise WeightFormatError(f"{path}: missing standardization tensors") from exc
    expected = [f"fc{i}.{part}" for i in range(1, 6) for part in ("weight", "bias")]
    if sorted(tensors) != sorted(expected):
        raise WeightFormatError(f"{path}: detector needs exactly fc1..fc5 weight/bias tensors")
    hidden = tuple(tensors[f"fc{i}.weight"].shape[1] for i in range(1, 5))
    spec = DetectorSpec(tensors["fc1.weight"].shape[0], hidden)
    for i in range(5):
        w = tensors[f"fc{i + 1}.weight"]
        widths = spec.layer_widths()
        if w.shape != (widths[i], widths[i + 1]):
            raise WeightFormatError(f"{path}: fc{i + 1}.weight has inconsistent shape {w.shape}")
    return DetectorModel(spec, tensors, Standardizer(mean, std), criterion, k)
