"""Forward and backward passes for VDP, convolution and dense layers.

Every pass accepts either a single sample (``[H, W, C]`` / ``[F]``) or a
batch with a leading axis. Parameter gradients are summed over the batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ffnet.errors import ShapeMismatch
from ffnet.tensor import VolumeGrid, as_batch, check_finite, from_volumes, to_volumes


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


def activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0)
    return z


def activation_grad(grad: np.ndarray, out: np.ndarray, activation: Activation) -> np.ndarray:
    """Push ``grad`` back through the activation, given the activated output."""
    if activation is Activation.RELU:
        return grad * (out > 0)
    return grad


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    dtype = np.dtype(dtype)
    limit = dtype.type(np.sqrt(6.0 / (fan_in + fan_out)))
    if dtype in (np.float32, np.float64):
        u = rng.random(shape, dtype=dtype)
    else:
        u = rng.random(shape).astype(dtype)
    u *= 2 * limit
    u -= limit
    return u


# --------------------------------------------------------------------------- VDP


@dataclass(frozen=True)
class VdpLayerSpec:
    """Geometry of one volume-wise dot product layer."""

    input_shape: tuple[int, int, int]
    grid: VolumeGrid
    volume_output: int
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.volume_output < 1:
            raise ShapeMismatch(f"volume_output must be positive, got {self.volume_output}")
        self.grid.check(self.input_shape)

    @classmethod
    def from_volumes(
        cls,
        volume_shape: Sequence[int],
        counts: Sequence[int],
        volume_output: int,
        activation: Activation = Activation.RELU,
    ) -> "VdpLayerSpec":
        """Build a layer from a volume shape and per-axis volume counts."""
        grid = VolumeGrid(*counts, *volume_shape)
        return cls(grid.input_shape, grid, volume_output, activation)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        g = self.grid
        return (g.n_h, g.n_w, g.n_c * self.volume_output)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        g = self.grid
        return (g.n_h, g.n_w, g.n_c, g.v_h, g.v_w, g.v_c, self.volume_output)

    @property
    def bias_shape(self) -> tuple[int, ...]:
        g = self.grid
        return (g.n_h, g.n_w, g.n_c, self.volume_output)

    @property
    def parameter_count(self) -> int:
        g = self.grid
        return g.num_volumes * (g.volume_size * self.volume_output + self.volume_output)


@dataclass
class VdpLayerParams:
    """Independent weights and biases for each volume.

    ``weights[i, j, k]`` is the ``[v_h, v_w, v_c, volume_output]`` tensor of
    volume ``(i, j, k)``; ``biases[i, j, k]`` is its bias vector.
    """

    weights: np.ndarray
    biases: np.ndarray

    def volume_weights(self, i: int, j: int, k: int) -> np.ndarray:
        return self.weights[i, j, k]

    def volume_bias(self, i: int, j: int, k: int) -> np.ndarray:
        return self.biases[i, j, k]

    def check(self, spec: VdpLayerSpec) -> None:
        if self.weights.shape != spec.weight_shape or self.biases.shape != spec.bias_shape:
            raise ShapeMismatch(
                f"params {self.weights.shape}/{self.biases.shape} do not match layer "
                f"{spec.weight_shape}/{spec.bias_shape}"
            )


def init_vdp(spec: VdpLayerSpec, rng: np.random.Generator, dtype=np.float32) -> VdpLayerParams:
    """Per-volume Glorot-uniform weights, zero biases."""
    fan_in = spec.grid.volume_size
    weights = glorot_uniform(rng, spec.weight_shape, fan_in, spec.volume_output, dtype)
    return VdpLayerParams(weights, np.zeros(spec.bias_shape, dtype=dtype))


def _stacked(spec: VdpLayerSpec, params: VdpLayerParams):
    g = spec.grid
    w = params.weights.reshape(g.num_volumes, g.volume_size, spec.volume_output)
    b = params.biases.reshape(g.num_volumes, 1, spec.volume_output)
    return w, b


def _out_to_volumes(y: np.ndarray, spec: VdpLayerSpec) -> np.ndarray:
    """``[B, n_h, n_w, n_c * out] -> [N, B, out]``."""
    g = spec.grid
    b = y.shape[0]
    y = y.reshape(b, g.n_h, g.n_w, g.n_c, spec.volume_output)
    return y.transpose(1, 2, 3, 0, 4).reshape(g.num_volumes, b, spec.volume_output)


def _volumes_to_out(y: np.ndarray, spec: VdpLayerSpec) -> np.ndarray:
    g = spec.grid
    b = y.shape[1]
    y = y.reshape(g.n_h, g.n_w, g.n_c, b, spec.volume_output)
    return y.transpose(3, 0, 1, 2, 4).reshape((b,) + spec.output_shape)


def vdp_forward(spec: VdpLayerSpec, params: VdpLayerParams, x: np.ndarray) -> np.ndarray:
    """Apply every volume's own dot product, bias and activation.

    The output vector of volume ``(i, j, k)`` lands at position ``(i, j)``,
    channels ``[k * out, (k + 1) * out)``.
    """
    xb, squeeze = as_batch(x)
    if xb.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"VDP layer expects {spec.input_shape}, got {xb.shape[1:]}")
    params.check(spec)
    w, b = _stacked(spec, params)
    z = np.matmul(to_volumes(xb, spec.grid), w) + b
    y = _volumes_to_out(activate(z, spec.activation), spec)
    check_finite(y, "VDP output")
    return y[0] if squeeze else y


def vdp_backward(
    spec: VdpLayerSpec,
    params: VdpLayerParams,
    x: np.ndarray,
    grad_out: np.ndarray,
    output: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_weights, grad_biases, grad_input)``.

    ``output`` is the cached forward result; it is recomputed when omitted.
    """
    xb, squeeze = as_batch(x)
    gb_, _ = as_batch(grad_out)
    if gb_.shape != (xb.shape[0],) + spec.output_shape:
        raise ShapeMismatch(f"grad_out shape {np.shape(grad_out)} does not match output {spec.output_shape}")
    if output is None:
        output = vdp_forward(spec, params, xb)
    out_b, _ = as_batch(output)
    w, _ = _stacked(spec, params)
    g = _out_to_volumes(activation_grad(gb_, out_b, spec.activation), spec)  # [N, B, out]
    vols = to_volumes(xb, spec.grid)  # [N, B, V]
    grad_w = np.matmul(vols.transpose(0, 2, 1), g).reshape(spec.weight_shape)
    grad_b = g.sum(axis=1).reshape(spec.bias_shape)
    grad_x = from_volumes(np.matmul(g, w.transpose(0, 2, 1)), spec.grid)
    return grad_w, grad_b, (grad_x[0] if squeeze else grad_x)


# -------------------------------------------------------------------------- conv


class ConvMode(str, enum.Enum):
    STANDARD = "standard"
    DEPTHWISE = "depthwise"


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    mode: ConvMode = ConvMode.STANDARD

    def __post_init__(self):
        object.__setattr__(self, "mode", ConvMode(self.mode))
        for name in ("kernel", "stride", "padding"):
            v = getattr(self, name)
            if isinstance(v, int):
                v = (v, v)
            object.__setattr__(self, name, tuple(int(t) for t in v))
        if self.mode is ConvMode.DEPTHWISE and self.out_channels != self.in_channels:
            raise ShapeMismatch("depthwise convolution needs out_channels == in_channels")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeMismatch(f"invalid conv geometry {self}")

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, int, int]:
        h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv expects {self.in_channels} channels, got {c}")
        span_h = h + 2 * self.padding[0] - self.kernel[0]
        span_w = w + 2 * self.padding[1] - self.kernel[1]
        if span_h < 0 or span_w < 0:
            raise ShapeMismatch(f"kernel {self.kernel} does not fit padded input {input_shape}")
        return (span_h // self.stride[0] + 1, span_w // self.stride[1] + 1, self.out_channels)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.mode is ConvMode.DEPTHWISE:
            return (*self.kernel, self.in_channels)
        return (*self.kernel, self.in_channels, self.out_channels)


@dataclass
class ConvParams:
    weights: np.ndarray
    biases: np.ndarray


def init_conv(spec: ConvLayerSpec, rng: np.random.Generator, dtype=np.float32) -> ConvParams:
    k = spec.kernel[0] * spec.kernel[1]
    if spec.mode is ConvMode.DEPTHWISE:
        fan_in, fan_out = k, k
    else:
        fan_in, fan_out = k * spec.in_channels, k * spec.out_channels
    weights = glorot_uniform(rng, spec.weight_shape, fan_in, fan_out, dtype)
    return ConvParams(weights, np.zeros(spec.out_channels, dtype=dtype))


def _pad(x: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _taps(spec: ConvLayerSpec, out_hw: tuple[int, int]):
    """Yield ``(di, dj, row_slice, col_slice)`` for every kernel tap."""
    (sh, sw), (ho, wo) = spec.stride, out_hw
    for di in range(spec.kernel[0]):
        for dj in range(spec.kernel[1]):
            yield di, dj, slice(di, di + sh * (ho - 1) + 1, sh), slice(dj, dj + sw * (wo - 1) + 1, sw)


def conv_forward(spec: ConvLayerSpec, params: ConvParams, x: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation (no kernel flip)."""
    xb, squeeze = as_batch(x)
    ho, wo, co = spec.output_shape(xb.shape[1:])
    if params.weights.shape != spec.weight_shape:
        raise ShapeMismatch(f"conv weights {params.weights.shape} != {spec.weight_shape}")
    xp = _pad(xb, spec)
    out = np.zeros((xb.shape[0], ho, wo, co), dtype=np.result_type(xb, params.weights))
    for di, dj, rs, cs in _taps(spec, (ho, wo)):
        patch = xp[:, rs, cs, :]
        if spec.mode is ConvMode.DEPTHWISE:
            out += patch * params.weights[di, dj]
        else:
            out += patch @ params.weights[di, dj]
    out += params.biases
    check_finite(out, "conv output")
    return out[0] if squeeze else out


def conv_backward(
    spec: ConvLayerSpec, params: ConvParams, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_weights, grad_biases, grad_input)``."""
    xb, squeeze = as_batch(x)
    g, _ = as_batch(grad_out)
    ho, wo, co = spec.output_shape(xb.shape[1:])
    if g.shape != (xb.shape[0], ho, wo, co):
        raise ShapeMismatch(f"grad_out shape {np.shape(grad_out)} != {(ho, wo, co)}")
    xp = _pad(xb, spec)
    grad_xp = np.zeros_like(xp, dtype=np.result_type(xp, g))
    grad_w = np.zeros(spec.weight_shape, dtype=grad_xp.dtype)
    flat_g = g.reshape(-1, co)
    for di, dj, rs, cs in _taps(spec, (ho, wo)):
        patch = xp[:, rs, cs, :]
        if spec.mode is ConvMode.DEPTHWISE:
            grad_w[di, dj] = (patch * g).sum(axis=(0, 1, 2))
            grad_xp[:, rs, cs, :] += g * params.weights[di, dj]
        else:
            grad_w[di, dj] = patch.reshape(-1, spec.in_channels).T @ flat_g
            grad_xp[:, rs, cs, :] += g @ params.weights[di, dj].T
    grad_b = flat_g.sum(axis=0)
    ph, pw = spec.padding
    grad_x = grad_xp[:, ph : ph + xb.shape[1], pw : pw + xb.shape[2], :]
    return grad_w, grad_b, (grad_x[0] if squeeze else grad_x)


# ------------------------------------------------------------------------- dense


@dataclass(frozen=True)
class DenseHeadSpec:
    in_features: int
    num_classes: int


@dataclass
class DenseParams:
    weights: np.ndarray  # [in_features, num_classes]
    bias: np.ndarray


def init_dense(spec: DenseHeadSpec, rng: np.random.Generator, dtype=np.float32) -> DenseParams:
    weights = glorot_uniform(rng, (spec.in_features, spec.num_classes), spec.in_features, spec.num_classes, dtype)
    return DenseParams(weights, np.zeros(spec.num_classes, dtype=dtype))


def dense_forward(params: DenseParams, feature: np.ndarray) -> np.ndarray:
    feature = np.asarray(feature)
    if feature.shape[-1] != params.weights.shape[0] or feature.ndim > 2:
        raise ShapeMismatch(f"dense head expects {params.weights.shape[0]} features, got {feature.shape}")
    return check_finite(feature @ params.weights + params.bias, "logits")


def dense_backward(
    params: DenseParams, feature: np.ndarray, grad_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    fb, squeeze = as_batch(feature, rank=1)
    gb, _ = as_batch(grad_logits, rank=1)
    if fb.shape[-1] != params.weights.shape[0] or gb.shape != (fb.shape[0], params.weights.shape[1]):
        raise ShapeMismatch(f"dense backward shapes {np.shape(feature)} / {np.shape(grad_logits)}")
    grad_w = fb.T @ gb
    grad_b = gb.sum(axis=0)
    grad_f = gb @ params.weights.T
    return grad_w, grad_b, (grad_f[0] if squeeze else grad_f)


# ----------------------------------------------------------------------- dropout


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | int | None = None, training: bool = True):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is boolean keep-mask."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x)
    if not training or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    rng = np.random.default_rng(rng)
    mask = rng.random(x.shape) >= rate
    return x * mask * x.dtype.type(1.0 / (1.0 - rate)), mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    if rate == 0.0:
        return grad
    return grad * mask * grad.dtype.type(1.0 / (1.0 - rate))
