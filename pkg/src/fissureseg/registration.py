"""Deterministic, differentiable registration operators.

Both operators map a (moving, fixed) pair of single-channel images to a
3-channel displacement field in voxel units and are differentiable with
respect to the moving image. They stand in for a trained registration
network: :class:`DemonsOperator` is a fixed-point iteration with no
parameters to learn, :class:`ConvOperator` is a frozen random conv stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ParameterError

DEMONS_EPS = 1e-6


# gaussian smoothing ----------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.floor(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=64)
def _smoothing_matrix(n: int, sigma: float) -> np.ndarray:
    """Row i holds the clipped, renormalized kernel centered at i."""
    w = gaussian_kernel(sigma)
    r = (w.size - 1) // 2
    m = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - r), min(n, i + r + 1)
        row = w[lo - i + r: hi - i + r]
        m[i, lo:hi] = row / row.sum()
    m.setflags(write=False)
    return m


def _apply_axes(v: np.ndarray, mats, transpose: bool) -> np.ndarray:
    out = v
    for axis, m in zip((1, 2, 3), mats):
        mm = m.T if transpose else m
        out = np.moveaxis(np.tensordot(mm, out, axes=([1], [axis])), 0, axis)
    return out


def gaussian_smooth(field: ad.Node, sigma: float) -> ad.Node:
    """Separable Gaussian blur of every channel of a (C, nx, ny, nz) node."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    v = field.value
    if v.ndim != 4:
        raise ParameterError("gaussian_smooth expects a (C, nx, ny, nz) volume")
    mats = [_smoothing_matrix(n, float(sigma)) for n in v.shape[1:]]
    out = _apply_axes(v, mats, transpose=False)
    return field.tape.record("gaussian_smooth", out, (field,), lambda g: (_apply_axes(g, mats, transpose=True),))


# warping -------------------------------------------------------------------

def warp(image: ad.Node, disp: ad.Node) -> ad.Node:
    """Trilinear resampling of a single-channel image at ``x - disp(x)``.

    Sample coordinates are clamped to the volume, so the derivative with
    respect to the displacement vanishes where clamping is active.
    """
    img = image.value
    if img.ndim != 4 or img.shape[0] != 1:
        raise ParameterError("warp expects a single-channel image")
    if disp.value.shape != (3,) + img.shape[1:]:
        raise ParameterError(f"displacement shape {disp.value.shape} does not match image {img.shape}")
    dims = img.shape[1:]
    grid = np.indices(dims, dtype=np.float64)
    raw = grid - disp.value
    lows, fracs, actives = [], [], []
    for a, n in enumerate(dims):
        p = np.clip(raw[a], 0.0, n - 1)
        lo = np.minimum(np.floor(p).astype(np.intp), max(n - 2, 0))
        lows.append(lo)
        fracs.append(p - lo)
        actives.append((raw[a] > 0.0) & (raw[a] < n - 1))
    hi = [np.minimum(lo + 1, n - 1) for lo, n in zip(lows, dims)]
    src = img[0]
    corners = []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = hi[0] if bx else lows[0]
                iy = hi[1] if by else lows[1]
                iz = hi[2] if bz else lows[2]
                corners.append(((bx, by, bz), (ix, iy, iz)))

    def wts(bits):
        return [f if b else 1.0 - f for f, b in zip(fracs, bits)]

    out = np.zeros(dims, dtype=img.dtype)
    for bits, idx in corners:
        wx, wy, wz = wts(bits)
        out += (wx * wy * wz) * src[idx]

    def back(g):
        gdisp = np.zeros((3,) + dims, dtype=g.dtype)
        flats, weights = [], []
        for bits, idx in corners:
            wx, wy, wz = wts(bits)
            flats.append(np.ravel_multi_index(idx, dims).ravel())
            weights.append((g[0] * wx * wy * wz).ravel())
            val = g[0] * src[idx]
            sx, sy, sz = (1.0 if b else -1.0 for b in bits)
            # d(sample)/d(disp) = -d(sample)/d(coord)
            gdisp[0] -= val * sx * wy * wz
            gdisp[1] -= val * wx * sy * wz
            gdisp[2] -= val * wx * wy * sz
        for a in range(3):
            gdisp[a] *= actives[a]
        gimg = np.bincount(np.concatenate(flats), weights=np.concatenate(weights), minlength=img.size)
        return gimg.reshape(img.shape), gdisp

    return image.tape.record("warp", out[None], (image, disp), back)


# operators -----------------------------------------------------------------

def central_gradient(fixed: np.ndarray) -> np.ndarray:
    """Central differences in the interior, one-sided at the borders; (3, nx, ny, nz)."""
    f = np.asarray(fixed, dtype=np.float64)
    out = np.zeros((3,) + f.shape)
    for a in range(3):
        if f.shape[a] > 1:
            out[a] = np.gradient(f, axis=a)
    return out


def demons_register(moving: ad.Node, fixed, iterations: int = 3, sigma: float = 1.0,
                    eps: float = DEMONS_EPS) -> ad.Node:
    """Demons displacement field taking ``moving`` onto ``fixed``.

    Each iteration warps the moving image by the current field and adds
    the Gaussian-smoothed force ``(m - f) grad f / (|grad f|^2 + (m - f)^2 + eps)``.
    """
    f = np.asarray(fixed, dtype=np.float64)
    if f.ndim == 4:
        f = f[0]
    if moving.value.shape != (1,) + f.shape:
        raise ParameterError(f"moving {moving.value.shape} and fixed {f.shape} shapes differ")
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    tape = moving.tape
    gf = central_gradient(f)
    gf_node = tape.constant(gf)
    gf_sq = tape.constant((gf * gf).sum(axis=0, keepdims=True) + eps)
    fixed_node = tape.constant(f[None])
    disp = None
    for _ in range(iterations):
        warped = moving if disp is None else warp(moving, disp)
        diff = ad.sub(warped, fixed_node)
        num = ad.mul(ad.broadcast_channels(diff, 3), gf_node)
        den = ad.add(gf_sq, ad.square(diff))
        force = ad.div(num, ad.broadcast_channels(den, 3))
        step = gaussian_smooth(force, sigma)
        disp = step if disp is None else ad.add(disp, step)
    return disp


def conv3d(x: ad.Node, w: ad.Node, b: ad.Node) -> ad.Node:
    """Stride-1 'same' cross-correlation with zero padding.

    ``x``: (Cin, nx, ny, nz); ``w``: (Cout, Cin, k, k, k) with odd k; ``b``: (Cout,).
    """
    xv, wv, bv = x.value, w.value, b.value
    cout, cin, k = wv.shape[0], wv.shape[1], wv.shape[2]
    if xv.ndim != 4 or xv.shape[0] != cin or wv.shape[2:] != (k, k, k) or k % 2 != 1:
        raise ParameterError(f"conv3d: incompatible shapes x{xv.shape} w{wv.shape}")
    if bv.shape != (cout,):
        raise ParameterError(f"conv3d: bias shape {bv.shape} != ({cout},)")
    r = k // 2
    pad = ((0, 0), (r, r), (r, r), (r, r))
    # windows[c, x, y, z, i, j, l] = xpad[c, x+i, y+j, z+l]
    windows = sliding_window_view(np.pad(xv, pad), (k, k, k), axis=(1, 2, 3))
    out = np.einsum("ocijl,cxyzijl->oxyz", wv, windows, optimize=True) + bv[:, None, None, None]

    def back(g):
        gw = np.einsum("oxyz,cxyzijl->ocijl", g, windows, optimize=True)
        gwin = sliding_window_view(np.pad(g, pad), (k, k, k), axis=(1, 2, 3))
        gx = np.einsum("ocijl,oxyzijl->cxyz", wv[:, :, ::-1, ::-1, ::-1], gwin, optimize=True)
        return gx, gw, g.sum(axis=(1, 2, 3))

    return x.tape.record("conv3d", out, (x, w, b), back)


def init_conv_stack(rng: np.random.Generator, channels, kernel: int = 3):
    """He-style normal weights and zero-mean small biases for a conv stack."""
    params = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        fan_in = cin * kernel ** 3
        w = rng.standard_normal((cout, cin, kernel, kernel, kernel)) / math.sqrt(fan_in)
        b = 0.1 * rng.standard_normal(cout)
        params.append((w, b))
    return params


def conv_register(moving: ad.Node, fixed, seed: int = 0, hidden: int = 8) -> ad.Node:
    """Field from a frozen two-layer conv stack over the (moving, fixed) pair."""
    return ConvOperator(seed=seed, hidden=hidden)(moving, fixed)


@dataclass(frozen=True)
class DemonsOperator:
    iterations: int = 3
    sigma: float = 1.0
    kind = "demons"

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")

    def __call__(self, moving: ad.Node, fixed) -> ad.Node:
        return demons_register(moving, fixed, self.iterations, self.sigma)

    def to_config(self) -> dict:
        return {"kind": "demons", "iterations": self.iterations, "sigma": self.sigma}


@dataclass(frozen=True)
class ConvOperator:
    seed: int = 0
    hidden: int = 8
    kind = "seeded-conv"

    def weights(self):
        rng = np.random.default_rng(self.seed)
        return init_conv_stack(rng, (2, self.hidden, 3))

    def __call__(self, moving: ad.Node, fixed) -> ad.Node:
        f = np.asarray(fixed, dtype=np.float64)
        if f.ndim == 4:
            f = f[0]
        if moving.value.shape != (1,) + f.shape:
            raise ParameterError(f"moving {moving.value.shape} and fixed {f.shape} shapes differ")
        tape = moving.tape
        (w1, b1), (w2, b2) = self.weights()
        x = ad.concat_channels([moving, tape.constant(f[None])])
        h = ad.tanh(conv3d(x, tape.constant(w1), tape.constant(b1)))
        return conv3d(h, tape.constant(w2), tape.constant(b2))

    def to_config(self) -> dict:
        return {"kind": "seeded-conv", "seed": self.seed, "hidden": self.hidden}


def operator_from_config(cfg: dict | None):
    """Build an operator from ``{"kind": "demons", ...}`` or ``{"kind": "seeded-conv", ...}``."""
    cfg = dict(cfg or {"kind": "demons"})
    kind = cfg.pop("kind", "demons")
    if kind == "demons":
        allowed = {"iterations", "sigma"}
        cls = DemonsOperator
    elif kind == "seeded-conv":
        allowed = {"seed", "hidden"}
        cls = ConvOperator
    else:
        raise ParameterError(f"unknown registration kind {kind!r} (expected 'demons' or 'seeded-conv')")
    unknown = set(cfg) - allowed
    if unknown:
        raise ParameterError(f"unknown keys for {kind} operator: {sorted(unknown)}")
    return cls(**cfg)
