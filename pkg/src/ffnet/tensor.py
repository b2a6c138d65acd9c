"""Tensor primitives.

Tensors are plain ``numpy.ndarray`` values laid out row-major as ``[H, W, C]``
(channel fastest). An optional leading batch axis is accepted wherever a
layer operates, giving ``[B, H, W, C]``.

Volumes of a :class:`VolumeGrid` are ordered row-major over their ``(i, j, k)``
index, i.e. volume ``(i, j, k)`` has flat index ``(i * n_w + j) * n_c + k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ffnet.errors import NonFinite, ShapeMismatch


@dataclass(frozen=True)
class VolumeGrid:
    """Split of an ``H x W x C`` map into ``n_h x n_w x n_c`` blocks of
    shape ``v_h x v_w x v_c``."""

    n_h: int
    n_w: int
    n_c: int
    v_h: int
    v_w: int
    v_c: int

    def __post_init__(self):
        for name in ("n_h", "n_w", "n_c", "v_h", "v_w", "v_c"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeMismatch(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def for_shape(cls, shape: Sequence[int], counts: Sequence[int]) -> "VolumeGrid":
        """Build the grid that cuts ``shape`` into ``counts`` volumes per axis."""
        h, w, c = _hwc(shape)
        n_h, n_w, n_c = counts
        if h % n_h or w % n_w or c % n_c:
            raise ShapeMismatch(f"shape {tuple(shape)} is not divisible by counts {tuple(counts)}")
        return cls(n_h, n_w, n_c, h // n_h, w // n_w, c // n_c)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_h, self.n_w, self.n_c)

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.v_h, self.v_w, self.v_c)

    @property
    def num_volumes(self) -> int:
        return self.n_h * self.n_w * self.n_c

    @property
    def volume_size(self) -> int:
        return self.v_h * self.v_w * self.v_c

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.n_h * self.v_h, self.n_w * self.v_w, self.n_c * self.v_c)

    def check(self, shape: Sequence[int]) -> None:
        if tuple(_hwc(shape)) != self.input_shape:
            raise ShapeMismatch(
                f"grid {self.counts} of volumes {self.volume_shape} needs input "
                f"{self.input_shape}, got {tuple(shape)}"
            )


def _hwc(shape: Sequence[int]) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeMismatch(f"expected an [H, W, C] shape, got {tuple(shape)}")
    return tuple(int(s) for s in shape)


def to_volumes(x: np.ndarray, grid: VolumeGrid) -> np.ndarray:
    """Batched partition: ``[B, H, W, C] -> [N, B, V]``.

    ``N`` runs over volumes in row-major ``(i, j, k)`` order and ``V`` is the
    row-major flattening of one ``v_h x v_w x v_c`` block.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"expected a [B, H, W, C] batch, got shape {x.shape}")
    grid.check(x.shape[1:])
    b = x.shape[0]
    blocks = x.reshape(b, grid.n_h, grid.v_h, grid.n_w, grid.v_w, grid.n_c, grid.v_c)
    blocks = blocks.transpose(1, 3, 5, 0, 2, 4, 6)
    return blocks.reshape(grid.num_volumes, b, grid.volume_size)


def from_volumes(v: np.ndarray, grid: VolumeGrid) -> np.ndarray:
    """Inverse of :func:`to_volumes`: ``[N, B, V] -> [B, H, W, C]``."""
    if v.ndim != 3 or v.shape[0] != grid.num_volumes or v.shape[2] != grid.volume_size:
        raise ShapeMismatch(f"volume stack of shape {v.shape} does not fit grid {grid}")
    b = v.shape[1]
    blocks = v.reshape(grid.n_h, grid.n_w, grid.n_c, b, grid.v_h, grid.v_w, grid.v_c)
    blocks = blocks.transpose(3, 0, 4, 1, 5, 2, 6)
    return blocks.reshape((b,) + grid.input_shape)


def partition(x: np.ndarray, grid: VolumeGrid) -> list[np.ndarray]:
    """Cut an ``[H, W, C]`` tensor into its list of ``[v_h, v_w, v_c]`` volumes."""
    x = np.asarray(x)
    grid.check(x.shape)
    out = []
    for i in range(grid.n_h):
        for j in range(grid.n_w):
            for k in range(grid.n_c):
                out.append(
                    x[
                        i * grid.v_h : (i + 1) * grid.v_h,
                        j * grid.v_w : (j + 1) * grid.v_w,
                        k * grid.v_c : (k + 1) * grid.v_c,
                    ].copy()
                )
    return out


def reassemble(volumes: Sequence[np.ndarray], grid: VolumeGrid) -> np.ndarray:
    """Scatter volumes back to their ``(i, j, k)`` blocks."""
    if len(volumes) != grid.num_volumes:
        raise ShapeMismatch(f"expected {grid.num_volumes} volumes, got {len(volumes)}")
    first = np.asarray(volumes[0])
    out = np.empty(grid.input_shape, dtype=first.dtype)
    idx = 0
    for i in range(grid.n_h):
        for j in range(grid.n_w):
            for k in range(grid.n_c):
                vol = np.asarray(volumes[idx])
                if vol.shape != grid.volume_shape:
                    raise ShapeMismatch(f"volume {idx} has shape {vol.shape}, expected {grid.volume_shape}")
                out[
                    i * grid.v_h : (i + 1) * grid.v_h,
                    j * grid.v_w : (j + 1) * grid.v_w,
                    k * grid.v_c : (k + 1) * grid.v_c,
                ] = vol
                idx += 1
    return out


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of elementwise products of two equally shaped tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"dot of shapes {a.shape} and {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def reshape(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Row-major reshape that refuses to change the element count."""
    x = np.asarray(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add of shapes {a.shape} and {b.shape}")
    return check_finite(a + b)


def scale(x: np.ndarray, factor: float) -> np.ndarray:
    return check_finite(np.asarray(x) * factor)


def reduce_sum(x: np.ndarray) -> float:
    return float(check_finite(np.asarray(x).sum()))


def argmax(x: np.ndarray) -> int:
    return int(np.argmax(np.asarray(x)))


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return x


def as_batch(x: np.ndarray, rank: int = 3) -> tuple[np.ndarray, bool]:
    """Add a leading batch axis to an unbatched tensor; report whether it did."""
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")
