"""Toy-scale supervised training and the finite-difference gradient checker."""

from __future__ import annotations

import csv
import enum
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ffnet.errors import CorruptFile, CountMismatch, EmptyDataset, ShapeMismatch
from ffnet.layers import (
    ConvLayerSpec,
    ConvParams,
    DenseHeadSpec,
    DenseParams,
    VdpLayerParams,
    VdpLayerSpec,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    init_conv,
    init_dense,
    init_vdp,
    vdp_backward,
    vdp_forward,
)
from ffnet.network import FfnParams, FfnSpec, ffn_backward, forward_cached, init_params
from ffnet.patcher import resize_nearest_patch, to_rgb

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------- loss


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    Accepts a single logit vector with an integer label or a ``[B, K]`` batch
    with ``B`` labels.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {np.shape(labels)}")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ShapeMismatch(f"label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(z.shape[0])
    loss = float(-log_probs[rows, y].mean())
    grad = np.exp(log_probs)
    grad[rows, y] -= 1
    grad /= z.shape[0]
    return loss, grad[0] if single else grad


# ------------------------------------------------------------------ optimizer


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    dropout_rate: float = 0.25
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.optimizer = OptimizerKind(self.optimizer)
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: TrainConfig, state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place with SGD or bias-corrected Adam."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("gradients do not conform to parameters")
    state.step += 1
    lr = config.learning_rate
    if config.optimizer is OptimizerKind.SGD:
        for p, g in zip(params, grads):
            p -= (lr * g).astype(p.dtype)
        return state
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2, t = config.beta1, config.beta2, state.step
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------- data


@dataclass
class LabeledSet:
    images: np.ndarray  # [N, P, P, 3]
    labels: np.ndarray  # [N]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)


def synth_dataset(
    num_classes: int = 10,
    per_class: int = 100,
    patch_size: int = 16,
    seed: int = 0,
    sigma: float = 0.3,
    split: str = "train",
) -> LabeledSet:
    """Separable toy set: one random +/-1 template per class plus Gaussian noise.

    Templates depend only on ``seed``; the noise also depends on ``split`` so
    train and test sets share classes but not samples.
    """
    if not 1 <= num_classes <= 32:
        raise ValueError("num_classes must lie in [1, 32]")
    shape = (patch_size, patch_size, 3)
    rng = np.random.default_rng(seed)
    while True:
        templates = rng.choice([-1.0, 1.0], size=(num_classes,) + shape)
        flat = templates.reshape(num_classes, -1)
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        if num_classes == 1 or d[~np.eye(num_classes, dtype=bool)].min() >= 4 * sigma:
            break
    noise_rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + sigma * noise_rng.standard_normal((len(labels),) + shape)
    return LabeledSet(images.astype(np.float32), labels, num_classes, split)


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise CorruptFile(f"{path}: bad gzip stream") from exc
    if len(raw) < 4:
        raise CorruptFile(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise CorruptFile(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorruptFile(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise CorruptFile(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None, split: str = "train") -> LabeledSet:
    """Load an IDX image/label pair as 3-channel ``[0, 1]`` patches of the
    nearest allowed patch size."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801).astype(np.int64)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise EmptyDataset("IDX files contain no samples")
    pixels = images.astype(np.float32) / 255.0
    patches = np.stack([resize_nearest_patch(to_rgb(img)) for img in pixels])
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledSet(patches, labels, k, split)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def channel_stats(images: np.ndarray) -> np.ndarray:
    """``[2, C]`` per-channel mean and std."""
    mean = images.mean(axis=(0, 1, 2), dtype=np.float64)
    std = images.std(axis=(0, 1, 2), dtype=np.float64)
    return np.stack([mean, np.where(std > 0, std, 1.0)]).astype(np.float32)


def normalize(images: np.ndarray, stats: np.ndarray | None) -> np.ndarray:
    if stats is None:
        return images
    return ((images - stats[0]) / stats[1]).astype(np.float32)


# ------------------------------------------------------------------- training


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float | None = None


def evaluate(spec: FfnSpec, params: FfnParams, data: LabeledSet, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy with dropout disabled."""
    if len(data) == 0:
        raise EmptyDataset("nothing to evaluate")
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = normalize(data.images[start : start + batch_size], params.normalization)
        y = data.labels[start : start + batch_size]
        logits = forward_cached(spec, params, x).logits
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


def predict(spec: FfnSpec, params: FfnParams, images: np.ndarray) -> np.ndarray:
    return forward_cached(spec, params, normalize(np.asarray(images), params.normalization)).logits.argmax(axis=1)


def train(
    spec: FfnSpec,
    data: LabeledSet,
    config: TrainConfig = TrainConfig(),
    eval_data: LabeledSet | None = None,
    params: FfnParams | None = None,
) -> tuple[FfnParams, list[EpochMetrics]]:
    """Shuffled minibatch training with dropout on the feature vector.

    Row ``epoch=0`` of the metrics is measured before the first update; every
    later row is measured after that epoch, with dropout off.
    """
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    if spec.head is None:
        spec = spec.with_head(data.num_classes)
    if data.images.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"data patches {data.images.shape[1:]} do not match network input {spec.input_shape}")
    spec = FfnSpec(spec.name, spec.layers, spec.head, config.dropout_rate)
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(spec, rng)
    params.normalization = channel_stats(data.images)
    x_all = normalize(data.images, params.normalization)
    state = OptimizerState()
    metrics = [_measure(0, spec, params, data, eval_data)]
    log.info("epoch 0 loss %.4f acc %.4f", metrics[0].train_loss, metrics[0].train_acc)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            cache = forward_cached(spec, params, x_all[idx], training=True, rng=rng)
            _, grad_logits = softmax_cross_entropy(cache.logits, data.labels[idx])
            grads = ffn_backward(spec, params, x_all[idx], grad_logits.astype(np.float32), cache)
            step(params.arrays(), grads.arrays(), config, state)
        metrics.append(_measure(epoch, spec, params, data, eval_data))
        log.info("epoch %d loss %.4f acc %.4f", epoch, metrics[-1].train_loss, metrics[-1].train_acc)
    return params, metrics


def _measure(epoch, spec, params, data, eval_data) -> EpochMetrics:
    loss, acc = evaluate(spec, params, data)
    eval_acc = evaluate(spec, params, eval_data)[1] if eval_data is not None else None
    return EpochMetrics(epoch, loss, acc, eval_acc)


def write_metrics(metrics: Sequence[EpochMetrics], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "eval_acc"])
        for m in metrics:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc), "" if m.eval_acc is None else repr(m.eval_acc)])


# ----------------------------------------------------------------- gradcheck


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a, f = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, f), floor)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` (perturbed in place and restored).

    ``indices`` restricts the check to a subset of flat positions; the result
    then holds only those entries.
    """
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.empty(len(idx), dtype=np.result_type(array, np.float64))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        out[n] = (plus - minus) / (2 * h)
    return out


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e}"


def compare_gradients(
    f: Callable[[], float],
    groups: dict[str, tuple[np.ndarray, np.ndarray]],
    h: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    tolerance: float = 1e-5,
) -> GradcheckReport:
    """Check each ``name -> (array, analytic_grad)`` pair against central differences."""
    errors = {}
    for name, (array, analytic) in groups.items():
        if array.shape != analytic.shape:
            raise ShapeMismatch(f"{name}: gradient shape {analytic.shape} != {array.shape}")
        if max_coords is not None and array.size > max_coords:
            idx = np.sort((rng or np.random.default_rng(0)).choice(array.size, max_coords, replace=False))
        else:
            idx = np.arange(array.size)
        numeric = numeric_gradient(f, array, h, idx)
        errors[name] = float(relative_error(analytic.reshape(-1)[idx].astype(numeric.dtype), numeric).max()) if len(idx) else 0.0
    return GradcheckReport(errors, tolerance)


def gradcheck(
    target: FfnSpec | VdpLayerSpec | DenseHeadSpec | tuple[ConvLayerSpec, Sequence[int]],
    seed: int = 0,
    h: float = 1e-6,
    max_coords: int | None = None,
    tolerance: float = 1e-5,
    fd_dtype=np.longdouble,
) -> GradcheckReport:
    """Finite-difference check of one layer or network.

    Analytic gradients are computed at 64-bit. The scalar under test is
    ``sum(r * output)`` for a fixed random ``r``; its central differences are
    evaluated on a ``fd_dtype`` copy of the same point, so that cancellation
    error stays far below ``tolerance`` even for small gradients.
    ``max_coords`` samples that many coordinates per parameter group, which
    keeps checks of full presets affordable.
    """
    rng = np.random.default_rng(seed)
    dt = np.float64
    cast = lambda a: np.array(a, dtype=fd_dtype)  # noqa: E731
    if isinstance(target, FfnSpec):
        params = init_params(target, rng, dt)
        for p in params.layers:
            p.biases[...] = rng.uniform(-0.1, 0.1, p.biases.shape)
        x = rng.standard_normal(target.input_shape)
        out_len = target.head.num_classes if target.head is not None else target.feature_length
        r = rng.standard_normal(out_len)
        grads = ffn_backward(target, params, x, r)
        fp, fx, fr = params.astype(fd_dtype), cast(x), cast(r)

        def f():
            c = forward_cached(target, fp, fx)
            return (c.logits if target.head is not None else c.feature)[0] @ fr

        groups = {}
        for t, (p, (gw, gb)) in enumerate(zip(fp.layers, grads.layers)):
            groups[f"layer{t + 1}.weights"] = (p.weights, gw)
            groups[f"layer{t + 1}.biases"] = (p.biases, gb)
        if fp.head is not None:
            groups["head.weights"] = (fp.head.weights, grads.head[0])
            groups["head.bias"] = (fp.head.bias, grads.head[1])
        groups["input"] = (fx, grads.input)
    elif isinstance(target, VdpLayerSpec):
        params = init_vdp(target, rng, dt)
        params.biases[...] = rng.uniform(-0.1, 0.1, params.biases.shape)
        x = rng.standard_normal(target.input_shape)
        r = rng.standard_normal(target.output_shape)
        gw, gb, gx = vdp_backward(target, params, x, r)
        fp, fx, fr = VdpLayerParams(cast(params.weights), cast(params.biases)), cast(x), cast(r)
        f = lambda: (vdp_forward(target, fp, fx) * fr).sum()  # noqa: E731
        groups = {"weights": (fp.weights, gw), "biases": (fp.biases, gb), "input": (fx, gx)}
    elif isinstance(target, DenseHeadSpec):
        params = init_dense(target, rng, dt)
        params.bias[...] = rng.uniform(-0.1, 0.1, params.bias.shape)
        x = rng.standard_normal(target.in_features)
        r = rng.standard_normal(target.num_classes)
        gw, gb, gx = dense_backward(params, x, r)
        fp, fx, fr = DenseParams(cast(params.weights), cast(params.bias)), cast(x), cast(r)
        f = lambda: dense_forward(fp, fx) @ fr  # noqa: E731
        groups = {"weights": (fp.weights, gw), "bias": (fp.bias, gb), "input": (fx, gx)}
    elif isinstance(target, tuple) and isinstance(target[0], ConvLayerSpec):
        spec, shape = target
        params = init_conv(spec, rng, dt)
        params.biases[...] = rng.uniform(-0.1, 0.1, params.biases.shape)
        x = rng.standard_normal(tuple(shape))
        r = rng.standard_normal(spec.output_shape(shape))
        gw, gb, gx = conv_backward(spec, params, x, r)
        fp, fx, fr = ConvParams(cast(params.weights), cast(params.biases)), cast(x), cast(r)
        f = lambda: (conv_forward(spec, fp, fx) * fr).sum()  # noqa: E731
        groups = {"weights": (fp.weights, gw), "biases": (fp.biases, gb), "input": (fx, gx)}
    else:
        raise TypeError(f"cannot gradcheck {type(target).__name__}")
    return compare_gradients(f, groups, h, max_coords, rng, tolerance)
