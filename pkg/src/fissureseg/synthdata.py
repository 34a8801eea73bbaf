"""Synthetic five-lobe lung phantoms.

Each lung is an ellipsoid. The left lung (x < nx/2) is cut by one curved
height field z = h(x, y) into LU (above) and LL (below). The right lung is
cut by an oblique surface into RL (below) and an upper part, which a
horizontal surface divides into RU (above) and RM. Where the horizontal
surface dips under the oblique one, RM pinches out and RU touches RL
directly, giving the three right-lung fissure classes.

Heights are quadratics in normalized column coordinates u = (x+0.5)/nx,
v = (y+0.5)/ny, returning a normalized height in [0, 1] (times nz):
``a + bx*u + by*v + cxx*u^2 + cxy*u*v + cyy*v^2``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError, SpecError
from .volume import LabelVolume, ScalarVolume
from .vvol import write_volume

LU, LL, RU, RM, RL = 1, 2, 3, 4, 5
SURFACES = ("left_oblique", "right_horizontal", "right_oblique")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (32, 32, 32)
    seed: int = 0
    left_oblique: tuple = (0.50, 0.0, 0.30, 0.0, 0.0, -0.20)
    right_horizontal: tuple = (0.60, 0.0, -0.05, 0.0, 0.0, 0.0)
    right_oblique: tuple = (0.30, 0.0, 0.60, 0.0, 0.0, -0.20)
    incompleteness: float = 0.0
    noise_sigma: float = 0.0
    fissure_contrast: float = 0.3
    lung_intensity: float = 0.2
    body_intensity: float = 0.7
    jitter: float = 0.03

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 4:
            raise SpecError(f"phantom shape needs three axes of at least 4 voxels, got {shape}")
        object.__setattr__(self, "shape", shape)
        for name in SURFACES:
            coeffs = tuple(float(c) for c in getattr(self, name))
            if len(coeffs) != 6:
                raise SpecError(f"{name} needs 6 coefficients (a, bx, by, cxx, cxy, cyy)")
            object.__setattr__(self, name, coeffs)
        if not 0.0 <= self.incompleteness <= 1.0:
            raise SpecError(f"incompleteness must be in [0, 1], got {self.incompleteness}")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise SpecError("noise_sigma and jitter must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PhantomCase:
    image: ScalarVolume
    lobes: LabelVolume
    spec: PhantomSpec = field(repr=False, default=None)


def _height(coeffs, u, v):
    a, bx, by, cxx, cxy, cyy = coeffs
    return a + bx * u + by * v + cxx * u * u + cxy * u * v + cyy * v * v


def lung_mask(shape) -> np.ndarray:
    nx, ny, nz = shape
    x, y, z = np.indices(shape, dtype=np.float64) + 0.5
    mask = np.zeros(shape, dtype=bool)
    for cx, half in ((nx / 4, x < nx / 2), (3 * nx / 4, x >= nx / 2)):
        r = ((x - cx) / (0.23 * nx)) ** 2 + ((y - ny / 2) / (0.44 * ny)) ** 2 + ((z - nz / 2) / (0.46 * nz)) ** 2
        mask |= (r <= 1.0) & half
    return mask


def _columns(shape):
    nx, ny, _ = shape
    u = (np.arange(nx)[:, None] + 0.5) / nx
    v = (np.arange(ny)[None, :] + 0.5) / ny
    return u, v


def _check_surfaces(spec: PhantomSpec, lung: np.ndarray, heights: dict):
    nx = spec.shape[0]
    cols_any = lung.any(axis=2)
    halves = {"left_oblique": np.arange(nx) < nx / 2}
    halves["right_horizontal"] = halves["right_oblique"] = ~halves["left_oblique"]
    for name, h in heights.items():
        cols = cols_any & halves[name][:, None]
        vals = h[cols] / spec.shape[2]
        if vals.min() <= 0.02 or vals.max() >= 0.98:
            raise SpecError(f"surface {name} leaves the volume (normalized range {vals.min():.3f}..{vals.max():.3f})")


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    nx, ny, nz = spec.shape
    rng = np.random.default_rng(spec.seed)
    u, v = _columns(spec.shape)
    heights = {name: _height(getattr(spec, name), u, v) * nz for name in SURFACES}
    lung = lung_mask(spec.shape)
    _check_surfaces(spec, lung, heights)

    zc = np.arange(nz)[None, None, :] + 0.5
    left = (np.arange(nx) < nx / 2)[:, None, None]
    h_lo = heights["left_oblique"][:, :, None]
    h_rh = heights["right_horizontal"][:, :, None]
    h_ro = heights["right_oblique"][:, :, None]

    labels = np.zeros(spec.shape, dtype=np.uint8)
    left_lab = np.where(zc > h_lo, LU, LL)
    right_lab = np.where(zc <= h_ro, RL, np.where(zc > h_rh, RU, RM))
    labels[:] = np.where(left, left_lab, right_lab)
    labels[~lung] = 0

    image = np.where(lung, spec.lung_intensity, spec.body_intensity)
    # one voxel per column: the voxel whose center is nearest the surface,
    # kept only where that surface actually separates two lobes
    bands = {
        "left_oblique": (np.abs(zc - h_lo) <= 0.5) & left,
        "right_oblique": (np.abs(zc - h_ro) <= 0.5) & ~left,
        "right_horizontal": (np.abs(zc - h_rh) <= 0.5) & ~left & (zc > h_ro),
    }
    for name in SURFACES:
        band = bands[name] & lung
        cols = np.argwhere(band.any(axis=2))
        n_hide = int(round(spec.incompleteness * len(cols)))
        if n_hide:
            hidden = cols[rng.choice(len(cols), size=n_hide, replace=False)]
            keep = np.ones(band.shape[:2], dtype=bool)
            keep[hidden[:, 0], hidden[:, 1]] = False
            band &= keep[:, :, None]
        image = np.where(band, spec.lung_intensity + spec.fissure_contrast, image)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return PhantomCase(ScalarVolume(image), LabelVolume(labels, 6), spec)


def jittered_spec(template: PhantomSpec, seed: int) -> PhantomSpec:
    """Copy of ``template`` with seed ``seed`` and perturbed surface offsets/slopes."""
    rng = np.random.default_rng(seed)
    changes = {"seed": seed}
    for name in SURFACES:
        c = np.array(getattr(template, name))
        c[:3] += rng.normal(0.0, template.jitter, size=3)
        changes[name] = tuple(float(x) for x in c)
    return replace(template, **changes)


def generate_dataset(template: PhantomSpec, n_cases: int, base_seed: int = 0, out_dir=None) -> list:
    if n_cases < 1:
        raise ParameterError(f"n_cases must be >= 1, got {n_cases}")
    cases = [generate_phantom(jittered_spec(template, base_seed + k)) for k in range(n_cases)]
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for k, case in enumerate(cases):
                write_volume(out / f"case_{k}_img.vvol", case.image)
                write_volume(out / f"case_{k}_lab.vvol", case.lobes)
        except OSError as exc:
            raise OSError(f"writing dataset to {out}: {exc}") from exc
    return cases


def check_case(case: PhantomCase) -> list:
    """Return a list of invariant violations (empty when the case is valid)."""
    problems = []
    lab = case.lobes.data
    img = case.image.data
    nx = lab.shape[0]
    if img.min() < 0 or img.max() > 1:
        problems.append("image outside [0, 1]")
    x = np.arange(nx)[:, None, None]
    if np.any(np.isin(lab, (LU, LL)) & (x >= nx / 2)):
        problems.append("left lobe label in right half")
    if np.any(np.isin(lab, (RU, RM, RL)) & (x < nx / 2)):
        problems.append("right lobe label in left half")
    lung = lung_mask(lab.shape)
    if np.any((lab > 0) != lung):
        problems.append("lobe labels do not match the lung region")
    if lab.max() > RL:
        problems.append("label above 5")
    return problems
