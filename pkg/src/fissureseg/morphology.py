"""Fissure masks from lobe maps: binary dilation for ground truth and the
differentiable fissure generation module (FGM) for predictions.

Both routes dilate the two lobes adjacent to a fissure and intersect them.
The FGM swaps dilation for max pooling and intersection for a product so
that gradients reach the lobe probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import ParameterError
from .volume import LabelVolume, as_array

LOBE_NAMES = {1: "LU", 2: "LL", 3: "RU", 4: "RM", 5: "RL"}


@dataclass(frozen=True)
class FissureEntry:
    fissure: int
    lobe_a: int
    lobe_b: int
    name: str = ""


@dataclass(frozen=True)
class FissureAdjacency:
    """Maps each fissure class to the two lobe classes it separates."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(e if isinstance(e, FissureEntry) else FissureEntry(*e) for e in self.entries)
        if not entries:
            raise ParameterError("adjacency table is empty")
        for k, e in enumerate(entries, start=1):
            if e.fissure != k:
                raise ParameterError(f"fissure classes must be 1..C consecutively, got {e.fissure} at position {k}")
            if e.lobe_a == e.lobe_b:
                raise ParameterError(f"fissure {e.fissure}: lobes must differ")
            if min(e.lobe_a, e.lobe_b) < 1:
                raise ParameterError(f"fissure {e.fissure}: lobe classes must be foreground (>= 1)")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence[int]]) -> "FissureAdjacency":
        rows = []
        for t in triples:
            if len(t) != 3:
                raise ParameterError(f"adjacency rows are [fissure, lobeA, lobeB], got {t!r}")
            rows.append(FissureEntry(int(t[0]), int(t[1]), int(t[2])))
        return cls(tuple(rows))

    def to_triples(self) -> list:
        return [[e.fissure, e.lobe_a, e.lobe_b] for e in self.entries]

    @property
    def num_fissures(self) -> int:
        return len(self.entries)

    @property
    def max_lobe(self) -> int:
        return max(max(e.lobe_a, e.lobe_b) for e in self.entries)

    def names(self) -> list:
        return [e.name or f"F{e.fissure}" for e in self.entries]

    def check_lobes(self, num_lobe_classes: int) -> None:
        if self.max_lobe > num_lobe_classes:
            raise ParameterError(
                f"adjacency references lobe {self.max_lobe} but only {num_lobe_classes} lobe classes exist")


DEFAULT_ADJACENCY = FissureAdjacency((
    FissureEntry(1, 1, 2, "LOF"),
    FissureEntry(2, 3, 4, "RHF"),
    FissureEntry(3, 3, 5, "ROF-upper"),
    FissureEntry(4, 4, 5, "ROF-lower"),
))


def _cube(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1,) * 3, dtype=bool)


def dilate_binary(mask, radius: int = 1) -> np.ndarray:
    """Dilate with a cube of edge ``2*radius+1``; outside the volume counts as false."""
    if radius < 1:
        raise ParameterError(f"dilation radius must be >= 1, got {radius}")
    m = as_array(mask).astype(bool)
    return ndimage.binary_dilation(m, structure=_cube(radius), border_value=0)


def fissure_gt_from_lobes(lobes, radius: int = 1, adj: FissureAdjacency = DEFAULT_ADJACENCY,
                          num_lobe_classes: int | None = None) -> LabelVolume:
    """Label each voxel with the lowest fissure class whose two dilated lobes meet there."""
    lab = as_array(lobes)
    if num_lobe_classes is None and isinstance(lobes, LabelVolume):
        num_lobe_classes = lobes.num_classes - 1
    if num_lobe_classes is not None:
        adj.check_lobes(num_lobe_classes)
    out = np.zeros(lab.shape, dtype=np.uint8)
    dilated = {}
    for e in adj.entries:
        for k in (e.lobe_a, e.lobe_b):
            if k not in dilated:
                m = lab == k
                dilated[k] = dilate_binary(m, radius) if m.any() else m
        hit = dilated[e.lobe_a] & dilated[e.lobe_b] & (out == 0)
        out[hit] = e.fissure
    return LabelVolume(out, adj.num_fissures + 1)


def fgm_forward(lobe_probs: ad.Node, adj: FissureAdjacency = DEFAULT_ADJACENCY, radius: int = 1) -> ad.Node:
    """Fissure probabilities (background first) from lobe probabilities.

    Each fissure channel is the product of the max-pooled probabilities of
    its two lobes; the background channel is the product of one minus every
    fissure channel; the stack is normalized over channels.
    """
    channels = lobe_probs.value.shape[0]
    if adj.max_lobe >= channels:
        raise ParameterError(
            f"adjacency references lobe {adj.max_lobe} but lobe_probs has {channels} channels")
    needed = sorted({k for e in adj.entries for k in (e.lobe_a, e.lobe_b)})
    pooled = ad.maxpool3(ad.take_channels(lobe_probs, needed), radius)
    pos = {k: i for i, k in enumerate(needed)}
    fissures = [
        ad.mul(ad.take_channels(pooled, [pos[e.lobe_a]]), ad.take_channels(pooled, [pos[e.lobe_b]]))
        for e in adj.entries
    ]
    fg = ad.concat_channels(fissures)
    bg = ad.channel_product(ad.one_minus(fg))
    return ad.normalize_channels(ad.concat_channels([bg, fg]))


def fgm_normalizer(lobe_probs: np.ndarray, adj: FissureAdjacency = DEFAULT_ADJACENCY, radius: int = 1) -> np.ndarray:
    """Per-voxel sum of the unnormalized FGM channels (always >= 1)."""
    tape = ad.Tape()
    y = tape.constant(lobe_probs)
    needed = sorted({k for e in adj.entries for k in (e.lobe_a, e.lobe_b)})
    pooled = ad.maxpool3(ad.take_channels(y, needed), radius).value
    pos = {k: i for i, k in enumerate(needed)}
    fg = np.stack([pooled[pos[e.lobe_a]] * pooled[pos[e.lobe_b]] for e in adj.entries])
    return np.prod(1.0 - fg, axis=0) + fg.sum(axis=0)
