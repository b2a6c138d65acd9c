"""Fast&Focused-Net: stacks of VDP layers, presets, passes and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ffnet.errors import CorruptCheckpoint, ShapeMismatch, SpecMismatch
from ffnet.layers import (
    Activation,
    DenseHeadSpec,
    DenseParams,
    VdpLayerParams,
    VdpLayerSpec,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    init_dense,
    init_vdp,
    vdp_backward,
    vdp_forward,
)
from ffnet.tensor import as_batch

# (volume shape, number of volumes, volume output) per layer.
PRESET_TABLE: dict[str, list[tuple[tuple[int, int, int], tuple[int, int, int], int]]] = {
    "ffn16": [
        ((4, 4, 3), (4, 4, 1), 64),
        ((1, 1, 64), (4, 4, 1), 64),
        ((2, 2, 64), (2, 2, 1), 256),
        ((1, 1, 256), (2, 2, 1), 256),
        ((2, 2, 64), (1, 1, 4), 256),
        ((1, 1, 1024), (1, 1, 1), 1024),
    ],
    "ffn32": [
        ((4, 4, 3), (8, 8, 1), 64),
        ((1, 1, 64), (8, 8, 1), 64),
        ((2, 2, 64), (4, 4, 1), 256),
        ((1, 1, 256), (4, 4, 1), 256),
        ((2, 2, 64), (2, 2, 4), 256),
        ((1, 1, 1024), (2, 2, 1), 1024),
        ((2, 2, 64), (1, 1, 16), 128),
        ((1, 1, 2048), (1, 1, 1), 2048),
    ],
    "ffn96": [
        ((6, 6, 3), (16, 16, 1), 64),
        ((1, 1, 64), (16, 16, 1), 64),
        ((2, 2, 64), (8, 8, 1), 256),
        ((1, 1, 256), (8, 8, 1), 256),
        ((2, 2, 64), (4, 4, 4), 256),
        ((1, 1, 1024), (4, 4, 1), 1024),
        ((2, 2, 64), (2, 2, 16), 128),
        ((1, 1, 2048), (2, 2, 1), 2048),
        ((2, 2, 64), (1, 1, 32), 128),
        ((1, 1, 4096), (1, 1, 1), 4096),
    ],
}

PRESETS = tuple(PRESET_TABLE)


@dataclass(frozen=True)
class FfnSpec:
    name: str
    layers: tuple[VdpLayerSpec, ...]
    head: DenseHeadSpec | None = None
    dropout_rate: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for t in range(1, len(self.layers)):
            prev, cur = self.layers[t - 1], self.layers[t]
            if prev.output_shape != cur.input_shape:
                raise ShapeMismatch(
                    f"layer {t} expects input {cur.input_shape} but layer {t - 1} "
                    f"produces {prev.output_shape}"
                )
        if self.head is not None and self.head.in_features != self.feature_length:
            raise ShapeMismatch(
                f"head takes {self.head.in_features} features, backbone produces {self.feature_length}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def input_shape(self) -> tuple[int, int, int] | None:
        return self.layers[0].input_shape if self.layers else None

    @property
    def output_shape(self) -> tuple[int, int, int] | None:
        return self.layers[-1].output_shape if self.layers else None

    @property
    def feature_length(self) -> int:
        return int(np.prod(self.output_shape)) if self.layers else 0

    def with_head(self, num_classes: int) -> "FfnSpec":
        return FfnSpec(self.name, self.layers, DenseHeadSpec(self.feature_length, num_classes), self.dropout_rate)

    def backbone(self) -> "FfnSpec":
        return FfnSpec(self.name, self.layers, None, self.dropout_rate)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape) if self.layers else None,
            "layers": [
                {
                    "volume_shape": list(layer.grid.volume_shape),
                    "num_volumes": list(layer.grid.counts),
                    "volume_output": layer.volume_output,
                    "activation": layer.activation.value,
                }
                for layer in self.layers
            ],
            "head": None
            if self.head is None
            else {"in_features": self.head.in_features, "num_classes": self.head.num_classes},
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FfnSpec":
        try:
            layers = [
                VdpLayerSpec.from_volumes(
                    layer["volume_shape"],
                    layer["num_volumes"],
                    int(layer["volume_output"]),
                    Activation(layer.get("activation", "relu")),
                )
                for layer in d["layers"]
            ]
            head = d.get("head")
            spec = cls(
                str(d["name"]),
                tuple(layers),
                None if head is None else DenseHeadSpec(int(head["in_features"]), int(head["num_classes"])),
                float(d.get("dropout_rate", 0.25)),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed architecture config: {exc!r}") from exc
        if d.get("input_shape") is not None and tuple(d["input_shape"]) != spec.input_shape:
            raise ShapeMismatch(f"config input_shape {d['input_shape']} != derived {spec.input_shape}")
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FfnSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON encoding."""
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


def preset(name: str, num_classes: int | None = None, dropout_rate: float = 0.25) -> FfnSpec:
    """Return one of the ``ffn16`` / ``ffn32`` / ``ffn96`` architectures."""
    key = name.lower().replace("-", "").replace("_", "")
    if key not in PRESET_TABLE:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    layers = tuple(VdpLayerSpec.from_volumes(v, n, out) for v, n, out in PRESET_TABLE[key])
    spec = FfnSpec(key, layers, None, dropout_rate)
    return spec.with_head(num_classes) if num_classes else spec


def load_config(path: str | Path) -> FfnSpec:
    return FfnSpec.from_json(Path(path).read_text())


@dataclass
class FfnParams:
    layers: list[VdpLayerParams]
    head: DenseParams | None = None
    # per-channel (mean, std) of the training inputs, shape [2, C]
    normalization: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        """All trainable arrays in checkpoint order."""
        out = []
        for p in self.layers:
            out += [p.weights, p.biases]
        if self.head is not None:
            out += [self.head.weights, self.head.bias]
        return out

    def copy(self) -> "FfnParams":
        return FfnParams(
            [VdpLayerParams(p.weights.copy(), p.biases.copy()) for p in self.layers],
            None if self.head is None else DenseParams(self.head.weights.copy(), self.head.bias.copy()),
            None if self.normalization is None else self.normalization.copy(),
        )

    def astype(self, dtype) -> "FfnParams":
        return FfnParams(
            [VdpLayerParams(p.weights.astype(dtype), p.biases.astype(dtype)) for p in self.layers],
            None if self.head is None else DenseParams(self.head.weights.astype(dtype), self.head.bias.astype(dtype)),
            None if self.normalization is None else self.normalization.astype(dtype),
        )


def init_params(spec: FfnSpec, rng: np.random.Generator | int | None = None, dtype=np.float32) -> FfnParams:
    rng = np.random.default_rng(rng)
    layers = [init_vdp(layer, rng, dtype) for layer in spec.layers]
    head = init_dense(spec.head, rng, dtype) if spec.head is not None else None
    return FfnParams(layers, head)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # input followed by every layer output, batched
    feature: np.ndarray  # [B, F] after dropout
    mask: np.ndarray | None = None
    squeeze: bool = False
    logits: np.ndarray | None = None


@dataclass
class FfnGrads:
    layers: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray] | None
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [a for pair in self.layers for a in pair]
        if self.head is not None:
            out += list(self.head)
        return out


def forward_cached(
    spec: FfnSpec,
    params: FfnParams,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | int | None = None,
) -> ForwardCache:
    xb, squeeze = as_batch(x)
    if not spec.layers:
        raise ShapeMismatch("network has no layers")
    if len(params.layers) != len(spec.layers):
        raise ShapeMismatch(f"{len(params.layers)} parameter sets for {len(spec.layers)} layers")
    acts = [xb]
    for t, (layer, p) in enumerate(zip(spec.layers, params.layers)):
        try:
            acts.append(vdp_forward(layer, p, acts[-1]))
        except ShapeMismatch as exc:
            raise ShapeMismatch(f"layer {t}: {exc}") from exc
    feature = acts[-1].reshape(xb.shape[0], -1)
    mask = None
    if training and spec.dropout_rate > 0:
        feature, mask = dropout(feature, spec.dropout_rate, rng, training=True)
    logits = dense_forward(params.head, feature) if params.head is not None and spec.head is not None else None
    return ForwardCache(acts, feature, mask, squeeze, logits)


def ffn_forward(
    spec: FfnSpec,
    params: FfnParams,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Encode a patch (or batch of patches); returns ``(feature, logits)``.

    ``logits`` is ``None`` when ``spec`` has no classification head.
    """
    cache = forward_cached(spec, params, x, training, rng)
    feature, logits = cache.feature, cache.logits
    if cache.squeeze:
        feature = feature[0]
        logits = None if logits is None else logits[0]
    return feature, logits


def ffn_backward(
    spec: FfnSpec,
    params: FfnParams,
    x: np.ndarray,
    loss_grad: np.ndarray,
    cache: ForwardCache | None = None,
) -> FfnGrads:
    """Exact gradients of every layer, the head and the input.

    ``loss_grad`` is the gradient w.r.t. the logits when ``spec`` has a head,
    otherwise w.r.t. the (flattened) feature vector.
    """
    if cache is None:
        cache = forward_cached(spec, params, x)
    g, _ = as_batch(loss_grad, rank=1)
    batch = cache.activations[0].shape[0]
    head_grads = None
    if spec.head is not None:
        if g.shape != (batch, spec.head.num_classes):
            raise ShapeMismatch(f"loss_grad shape {np.shape(loss_grad)} does not match logits")
        gw, gbias, g = dense_backward(params.head, cache.feature, g)
        head_grads = (gw, gbias)
    elif g.shape != (batch, spec.feature_length):
        raise ShapeMismatch(f"loss_grad shape {np.shape(loss_grad)} does not match feature")
    if cache.mask is not None:
        g = dropout_backward(g, cache.mask, spec.dropout_rate)
    g = g.reshape((batch,) + spec.output_shape)
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for t in range(len(spec.layers) - 1, -1, -1):
        gw, gbias, g = vdp_backward(spec.layers[t], params.layers[t], cache.activations[t], g, cache.activations[t + 1])
        layer_grads.append((gw, gbias))
    layer_grads.reverse()
    return FfnGrads(layer_grads, head_grads, g[0] if cache.squeeze else g)


def dependency_mask(spec: FfnSpec, output_mask: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``[H, W, C]`` map of input elements the selected outputs depend on.

    Purely structural: an input element is marked when it lies inside a volume
    whose output vector contains a selected element. With no ``output_mask``
    every final feature is selected.
    """
    mask = np.ones(spec.output_shape, dtype=bool) if output_mask is None else np.asarray(output_mask, bool)
    for layer in reversed(spec.layers):
        g = layer.grid
        per_volume = mask.reshape(g.n_h, g.n_w, g.n_c, layer.volume_output).any(axis=-1)
        block = np.broadcast_to(per_volume[:, None, :, None, :, None], (g.n_h, g.v_h, g.n_w, g.v_w, g.n_c, g.v_c))
        mask = block.reshape(layer.input_shape)
    return mask


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FFNW"
VERSION = 1
_HEADER = struct.Struct("<4sH32sI")


def save_checkpoint(spec: FfnSpec, params: FfnParams, path: str | Path) -> None:
    """Write ``spec`` and ``params`` as little-endian float32 buffers.

    Layout: magic, u16 version, 32-byte spec digest, u32 JSON length, the
    canonical spec JSON, u8 normalization flag, then every weight and bias
    buffer in layer order (head last, normalization after it when present).
    """
    arrays = params.arrays()
    expected = _expected_shapes(spec)
    if [a.shape for a in arrays] != expected:
        raise ShapeMismatch("parameters do not conform to spec")
    blob = spec.to_json().encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, spec.digest(), len(blob)), blob]
    parts.append(struct.pack("<B", params.normalization is not None))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    if params.normalization is not None:
        parts.append(np.ascontiguousarray(params.normalization, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _expected_shapes(spec: FfnSpec) -> list[tuple[int, ...]]:
    shapes = []
    for layer in spec.layers:
        shapes += [layer.weight_shape, layer.bias_shape]
    if spec.head is not None:
        shapes += [(spec.head.in_features, spec.head.num_classes), (spec.head.num_classes,)]
    return shapes


def load_checkpoint(path: str | Path, expected: FfnSpec | None = None) -> tuple[FfnSpec, FfnParams]:
    """Read a checkpoint; reject it if ``expected`` has a different digest."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint("file is shorter than the header")
    magic, version, digest, blob_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    if expected is not None and expected.digest() != digest:
        raise SpecMismatch(f"checkpoint was written for a different architecture than {expected.name!r}")
    offset = _HEADER.size
    blob = data[offset : offset + blob_len]
    if len(blob) != blob_len:
        raise CorruptCheckpoint("truncated spec block")
    offset += blob_len
    try:
        spec = FfnSpec.from_json(blob.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable spec block: {exc}") from exc
    if spec.digest() != digest:
        raise CorruptCheckpoint("spec block does not match header digest")
    if offset >= len(data):
        raise CorruptCheckpoint("truncated before parameters")
    has_norm = data[offset]
    offset += 1
    shapes = _expected_shapes(spec)
    if has_norm:
        shapes.append((2, spec.input_shape[2]))
    total = sum(int(np.prod(s)) for s in shapes) * 4
    if len(data) - offset != total:
        raise CorruptCheckpoint(f"expected {total} parameter bytes, found {len(data) - offset}")
    flat = np.frombuffer(data, dtype="<f4", offset=offset).astype(np.float32)
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos : pos + n].reshape(s))
        pos += n
    layers = [VdpLayerParams(arrays[2 * t], arrays[2 * t + 1]) for t in range(len(spec.layers))]
    rest = arrays[2 * len(spec.layers) :]
    head = None
    if spec.head is not None:
        head = DenseParams(rest[0], rest[1])
        rest = rest[2:]
    norm = rest[0] if has_norm else None
    return spec, FfnParams(layers, head, norm)


def describe_rows(spec: FfnSpec) -> list[dict]:
    """Per-layer geometry rows: volume shape, count, output length, output shape."""
    fmt = lambda dims: "x".join(str(d) for d in dims)  # noqa: E731
    return [
        {
            "layer": t + 1,
            "volume_shape": fmt(layer.grid.volume_shape),
            "num_volumes": fmt(layer.grid.counts),
            "volume_output": layer.volume_output,
            "output_shape": fmt(layer.output_shape),
        }
        for t, layer in enumerate(spec.layers)
    ]
