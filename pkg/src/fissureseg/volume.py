"""Dense 3D volume containers and basic label handling.

In memory every volume is a numpy array indexed ``[x, y, z]`` (channel
volumes ``[c, x, y, z]``). Real values are float64; labels are uint8.
The on-disk linearization (x fastest, channel slowest) lives in
:mod:`fissureseg.vvol`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .errors import LabelRangeError, ParameterError

MAX_LABEL_CLASSES = 256


class Shape3(NamedTuple):
    nx: int
    ny: int
    nz: int

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz


def _check_shape(shape) -> Shape3:
    if len(shape) != 3:
        raise ParameterError(f"expected a 3D shape, got {tuple(shape)}")
    if any(int(n) < 1 for n in shape):
        raise ParameterError(f"voxel counts must be >= 1, got {tuple(shape)}")
    return Shape3(*(int(n) for n in shape))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        _check_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ParameterError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape)


@dataclass(frozen=True)
class ChannelVolume:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] < 1:
            raise ParameterError(f"channel volume needs shape (C, nx, ny, nz), got {arr.shape}")
        _check_shape(arr.shape[1:])
        if not np.all(np.isfinite(arr)):
            raise ParameterError("channel volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape[1:])


@dataclass(frozen=True)
class LabelVolume:
    data: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.size and (raw.min() < 0 or raw.max() >= MAX_LABEL_CLASSES):
            raise LabelRangeError("labels must lie in [0, 255]")
        arr = np.array(raw, dtype=np.uint8)
        _check_shape(arr.shape)
        n = self.num_classes
        if n is None:
            n = int(arr.max()) + 1
        if not 1 <= n <= MAX_LABEL_CLASSES:
            raise ParameterError(f"num_classes must be in [1, 256], got {n}")
        if arr.max() >= n:
            raise LabelRangeError(f"label {int(arr.max())} >= num_classes {n}")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "num_classes", int(n))

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape)


Volume = Union[ScalarVolume, ChannelVolume, LabelVolume]


def as_array(v) -> np.ndarray:
    """Return the backing array of a volume object, or ``v`` itself."""
    return v.data if isinstance(v, (ScalarVolume, ChannelVolume, LabelVolume)) else np.asarray(v)


def one_hot(labels, num_classes: int) -> np.ndarray:
    lab = as_array(labels)
    if num_classes < 1:
        raise ParameterError("num_classes must be >= 1")
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise LabelRangeError(f"labels must be in [0, {num_classes}), got max {lab.max()}")
    classes = np.arange(num_classes).reshape((-1,) + (1,) * lab.ndim)
    return (lab[None] == classes).astype(np.float64)


def argmax_channel(probs) -> np.ndarray:
    """Per-voxel channel argmax; ties go to the lowest channel index."""
    p = as_array(probs)
    if p.ndim != 4 or p.shape[0] < 1:
        raise ParameterError(f"expected (C, nx, ny, nz), got {p.shape}")
    # np.argmax returns the first occurrence of the maximum
    return np.argmax(p, axis=0).astype(np.uint8)


def hu_window_normalize(image, lo: float = -1000.0, hi: float = 400.0) -> np.ndarray:
    """Map HU values linearly so ``lo -> 0`` and ``hi -> 1``, clamping outside."""
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got [{lo}, {hi}]")
    v = as_array(image).astype(np.float64)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)
