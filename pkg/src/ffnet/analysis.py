"""Parameter / MAC accounting and the empirical effective-receptive-field probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ffnet.errors import ShapeMismatch
from ffnet.layers import (
    ConvLayerSpec,
    ConvMode,
    DenseHeadSpec,
    VdpLayerSpec,
    activate,
    activation_grad,
    Activation,
    conv_backward,
    conv_forward,
    init_conv,
)
from ffnet.network import FfnSpec, ffn_backward, forward_cached, init_params


@dataclass(frozen=True)
class LayerCost:
    kind: str
    parameters: int
    macs: int
    biases: int


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)
    activation_layers: int = 0
    head_activations: int = 0
    output_vector_length: int = 0

    @property
    def parameter_count(self) -> int:
        return sum(c.parameters for c in self.layers)

    @property
    def mac_count(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def activation_label(self) -> str:
        if self.head_activations:
            return f"{self.activation_layers}+{self.head_activations}"
        return str(self.activation_layers)

    def to_dict(self) -> dict:
        return {
            "parameters": self.parameter_count,
            "macs": self.mac_count,
            "activation_layers": self.activation_label,
            "output_vector_length": self.output_vector_length,
            "layers": [vars(c) for c in self.layers],
        }


def cost_of_vdp(spec: VdpLayerSpec) -> LayerCost:
    """Every weight is used exactly once per forward pass, so MACs equal the
    weight count."""
    n = spec.grid.num_volumes
    v = spec.grid.volume_size
    out = spec.volume_output
    return LayerCost("vdp", n * (v * out + out), n * v * out, n * out)


def cost_of_conv(spec: ConvLayerSpec, input_shape: Sequence[int]) -> LayerCost:
    ho, wo, _ = spec.output_shape(input_shape)
    kh, kw = spec.kernel
    if spec.mode is ConvMode.DEPTHWISE:
        c = spec.in_channels
        return LayerCost("depthwise", kh * kw * c + c, ho * wo * kh * kw * c, c)
    ci, co = spec.in_channels, spec.out_channels
    return LayerCost("conv", kh * kw * ci * co + co, ho * wo * kh * kw * ci * co, co)


def cost_of_dense(spec: DenseHeadSpec) -> LayerCost:
    n, k = spec.in_features, spec.num_classes
    return LayerCost("dense", n * k + k, n * k, k)


def cost_of_network(spec: FfnSpec) -> CostReport:
    """Sum the per-layer costs; the classifier softmax counts as the ``+1``
    activation whenever the backbone is non-empty."""
    if not spec.layers:
        return CostReport()
    layers = [cost_of_vdp(layer) for layer in spec.layers]
    if spec.head is not None:
        layers.append(cost_of_dense(spec.head))
    acts = sum(layer.activation is not Activation.IDENTITY for layer in spec.layers)
    return CostReport(layers, acts, 1, spec.feature_length)


def approx_millions(n: int) -> str:
    """Render a count in millions at table precision, truncating (``12546048 -> '12M'``)."""
    m = n / 1e6
    if m >= 10:
        return f"{math.floor(m)}M"
    return f"{math.floor(m * 10) / 10:g}M"


# ----------------------------------------------------------------- ERF probe


@dataclass(frozen=True)
class ConvStackSpec:
    """Plain stack of convolutions, each followed by ReLU.

    The stack's feature vector is taken at the central output position, which
    is the unit whose receptive field is centred on the patch.
    """

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shape  # validates the chain

    @property
    def output_shape(self) -> tuple[int, int, int]:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


def conv_stack(depth: int = 4, channels: int = 16, input_shape=(32, 32, 3), kernel: int = 3) -> ConvStackSpec:
    """``depth`` stride-1, same-padded ``kernel x kernel`` convolutions."""
    layers, c_in = [], input_shape[2]
    for _ in range(depth):
        layers.append(ConvLayerSpec(c_in, channels, (kernel, kernel), (1, 1), (kernel // 2, kernel // 2)))
        c_in = channels
    return ConvStackSpec(f"conv{depth}", input_shape, tuple(layers))


@dataclass
class ErfMap:
    network: str
    input_shape: tuple[int, int, int]
    mean_abs_grad: np.ndarray  # [H, W], channel-averaged, trial-averaged
    nonzero_fraction: np.ndarray  # [H, W], share of trials with a nonzero gradient
    trials: int
    seed: int

    def center_corner_ratio(self, block: int = 4) -> float:
        m = self.mean_abs_grad
        h, w = m.shape
        ch, cw = (h - block) // 2, (w - block) // 2
        center = m[ch : ch + block, cw : cw + block].mean()
        corners = np.mean(
            [
                m[:block, :block].mean(),
                m[:block, w - block :].mean(),
                m[h - block :, :block].mean(),
                m[h - block :, w - block :].mean(),
            ]
        )
        if corners == 0:
            return math.inf if center > 0 else math.nan
        return float(center / corners)

    def coefficient_of_variation(self) -> float:
        m = self.mean_abs_grad
        mean = m.mean()
        return float(m.std() / mean) if mean > 0 else math.nan


def _trial_rngs(seed: int, trials: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(trials)]


def _ffn_input_grad(spec: FfnSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    backbone = spec.backbone()
    params = init_params(backbone, rng, dtype)
    x = rng.standard_normal(backbone.input_shape).astype(dtype)
    cache = forward_cached(backbone, params, x)
    seed_grad = np.ones((1, backbone.feature_length), dtype=dtype)
    return ffn_backward(backbone, params, x, seed_grad, cache).input


def _conv_input_grad(spec: ConvStackSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    params = [init_conv(layer, rng, dtype) for layer in spec.layers]
    x = rng.standard_normal(spec.input_shape).astype(dtype)
    acts = [x]
    for layer, p in zip(spec.layers, params):
        acts.append(activate(conv_forward(layer, p, acts[-1]), Activation.RELU))
    h, w, c = spec.output_shape
    g = np.zeros((h, w, c), dtype=dtype)
    g[h // 2, w // 2, :] = 1
    for t in range(len(spec.layers) - 1, -1, -1):
        g = activation_grad(g, acts[t + 1], Activation.RELU)
        _, _, g = conv_backward(spec.layers[t], params[t], acts[t], g)
    return g


def erf_probe(network: FfnSpec | ConvStackSpec, trials: int = 100, seed: int = 0, dtype=np.float32) -> ErfMap:
    """Average channel-mean |d(feature sum)/d input| over fresh random inits.

    Each trial draws new weights and a unit-variance input, seeds the
    backward pass with ones over the feature vector (for a conv stack, over
    the channels of the central output unit) and accumulates the absolute
    input gradient.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if isinstance(network, FfnSpec):
        if not network.layers:
            raise ShapeMismatch("cannot probe an empty network")
        shape, grad_fn = network.input_shape, _ffn_input_grad
    elif isinstance(network, ConvStackSpec):
        shape, grad_fn = network.input_shape, _conv_input_grad
    else:
        raise TypeError(f"unsupported network type {type(network).__name__}")
    total = np.zeros(shape[:2], dtype=np.float64)
    nonzero = np.zeros(shape[:2], dtype=np.int64)
    for rng in _trial_rngs(seed, trials):
        g = np.abs(grad_fn(network, rng, dtype)).astype(np.float64).mean(axis=-1)
        total += g
        nonzero += g > 0
    return ErfMap(network.name, tuple(shape), total / trials, nonzero / trials, trials, seed)


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def erf_report(maps: Sequence[ErfMap], path: str | Path) -> list[Path]:
    """Write one CSV grid per map plus ``summary.txt``; return the written paths."""
    if not maps:
        raise ValueError("erf_report needs at least one map")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, names, lines = [], [], []
    for m in maps:
        name = m.network
        while name in names:
            name += "_"
        names.append(name)
        grid = "\n".join(",".join(_fmt(v) for v in row) for row in m.mean_abs_grad) + "\n"
        csv_path = out_dir / f"{name}.csv"
        csv_path.write_text(grid)
        written.append(csv_path)
        lines += [
            f"{name}.trials={m.trials}",
            f"{name}.seed={m.seed}",
            f"{name}.center_corner_ratio={_fmt(m.center_corner_ratio())}",
            f"{name}.coefficient_of_variation={_fmt(m.coefficient_of_variation())}",
            f"{name}.min_nonzero_fraction={_fmt(m.nonzero_fraction.min())}",
        ]
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)
    return written
