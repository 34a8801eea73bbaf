"""Finite-difference verification of tape gradients.

The checks compare every analytic adjoint entry (computed at float64)
against a central difference, using relative error ``|a - n| / (|a| + 1e-8)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .morphology import FissureAdjacency, fgm_forward, fissure_gt_from_lobes
from .registration import ConvOperator, DemonsOperator, demons_register, gaussian_smooth, warp

FD_STEP = 1e-6
REL_TOL = 1e-5
TIE_MARGIN = 1e-3
# Differences are taken in x87 extended precision: at float64 the rounding
# noise of a loss evaluation (~1e-16 * |L| / h) swamps gradient entries
# below ~1e-5 under the 1e-8 relative-error floor.
FD_DTYPE = np.longdouble

# adjacency for 3-lobe test instances: every lobe pair shares a fissure
THREE_LOBE_ADJACENCY = FissureAdjacency.from_triples([(1, 1, 2), (2, 1, 3), (3, 2, 3)])


@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def evaluate(fn: Callable[[ad.Node], ad.Node], x: np.ndarray, dtype=np.float64):
    tape = ad.Tape(dtype)
    return fn(tape.leaf(x)).value


def analytic_grad(fn, x: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    leaf = tape.leaf(x)
    out = fn(leaf)
    tape.backward(out)
    return leaf.grad


def numeric_grad(fn, x: np.ndarray, h: float = FD_STEP, dtype=FD_DTYPE) -> np.ndarray:
    """Central differences, one entry at a time, evaluated on a ``dtype`` tape."""
    flat = np.asarray(x, dtype=dtype).reshape(-1)
    g = np.zeros(flat.size, dtype=dtype)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (evaluate(fn, xp.reshape(x.shape), dtype) - evaluate(fn, xm.reshape(x.shape), dtype)) / (2 * h)
    return g.reshape(x.shape).astype(np.float64)


def check(fn, x: np.ndarray, h: float = FD_STEP, dtype=FD_DTYPE) -> GradCheckResult:
    x = np.asarray(x, dtype=np.float64)
    a = analytic_grad(fn, x)
    n = numeric_grad(fn, x, h, dtype)
    rel = np.abs(a - n) / (np.abs(a) + 1e-8)
    return GradCheckResult(float(rel.max()) if rel.size else 0.0, a, n)


def pool_margin(v: np.ndarray, radius: int) -> float:
    """Smallest gap between the largest and second-largest value of any window.

    Windows include zero padding, matching :func:`maxpool3`.
    """
    r = radius
    c, nx, ny, nz = v.shape
    vp = np.pad(v, ((0, 0), (r, r), (r, r), (r, r)))
    w = 2 * r + 1
    stack = np.stack([vp[:, i:i + nx, j:j + ny, k:k + nz]
                      for i in range(w) for j in range(w) for k in range(w)])
    stack.sort(axis=0)
    return float((stack[-1] - stack[-2]).min())


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def random_labels(rng: np.random.Generator, shape=(4, 4, 4), lobes: int = 3) -> np.ndarray:
    """Lobes cut by random oblique planes, plus a random background corner."""
    coords = np.indices(shape, dtype=np.float64)
    labels = np.ones(shape, dtype=np.uint8)
    for k in range(2, lobes + 1):
        normal = rng.standard_normal(3)
        offset = rng.uniform(0.3, 0.7) * np.dot(np.abs(normal), np.array(shape) - 1)
        side = np.tensordot(np.abs(normal), coords, axes=1) > offset
        labels[side] = k
    corner = (slice(0, int(rng.integers(1, 3))),) * 3
    labels[corner] = 0
    return labels


def random_instance(rng: np.random.Generator, shape=(4, 4, 4), lobes: int = 3, radius: int = 1,
                    scale: float = 1.5, adj: FissureAdjacency | None = None, max_tries: int = 1000):
    """Random logits and structured labels for gradient checks.

    Draws are rejected until the softmax stays ``TIE_MARGIN`` away from
    max-pool ties and from log(0), every lobe is present, and the fissure
    map has both background and fissure voxels (so registration fields
    are not trivially zero).
    """
    adj = adj or THREE_LOBE_ADJACENCY
    for _ in range(max_tries):
        labels = random_labels(rng, shape, lobes)
        if len(np.unique(labels)) != lobes + 1:
            continue
        fiss = fissure_gt_from_lobes(labels, radius, adj).data
        if fiss.all() or not fiss.any():
            continue
        logits = scale * rng.standard_normal((lobes + 1,) + tuple(shape))
        p = softmax_np(logits)
        if p.min() < TIE_MARGIN or pool_margin(p[1:], radius) < TIE_MARGIN:
            continue
        return logits, labels
    raise RuntimeError("could not draw a tie-free instance")


def loss_functions(labels: np.ndarray, adj: FissureAdjacency = THREE_LOBE_ADJACENCY, radius: int = 1,
                   alpha: float = 0.6) -> dict:
    """Scalar functions of logits used by the gradient suite, keyed by name."""
    fiss = fissure_gt_from_lobes(labels, radius, adj)
    demons = DemonsOperator(iterations=3, sigma=1.0)
    conv = ConvOperator(seed=7)
    sched = losses.Schedules(total_steps=10, alpha_max=0.9)
    err_d = losses.self_registration_fields(fiss, demons)
    err_c = losses.self_registration_fields(fiss, conv)

    def probs(x):
        return ad.softmax_channels(x)

    return {
        "ace": lambda x: losses.attentive_ce(probs(x), labels, alpha),
        "dice": lambda x: losses.soft_dice_loss(probs(x), labels),
        "fgm": lambda x: losses.soft_dice_loss(fgm_forward(probs(x), adj, radius), fiss),
        "reg-demons": lambda x: losses.registration_loss(fgm_forward(probs(x), adj, radius), fiss, demons,
                                                          err_fields=err_d),
        "reg-conv": lambda x: losses.registration_loss(fgm_forward(probs(x), adj, radius), fiss, conv,
                                                        err_fields=err_c),
        "combined": lambda x: losses.combined_objective(probs(x), labels, fiss, adj, radius, step=5,
                                                        schedules=sched, op=demons, err_fields=err_d).total,
    }


def op_functions(rng: np.random.Generator) -> dict:
    """Per-op scalar functions of a (3, 3, 3, 3) input for the op suite."""
    wts = rng.standard_normal((3, 3, 3, 3))
    fixed = rng.random((3, 3, 3))

    def weighted(node):
        return ad.sum_all(ad.mul(node, node.tape.constant(wts[: node.value.shape[0]])))

    def demons_l1(x):
        m = ad.softmax_channels(x)
        return ad.l1_norm(demons_register(ad.take_channels(m, [0]), fixed, 2, 1.0))

    return {
        "softmax": weighted_fn(lambda x: ad.softmax_channels(x), wts),
        "maxpool": lambda x: weighted(ad.maxpool3(ad.softmax_channels(x), 1)),
        "channel_product": lambda x: weighted(ad.broadcast_channels(ad.channel_product(ad.exp(x)), 3)),
        "normalize": lambda x: weighted(ad.normalize_channels(ad.exp(x))),
        "log": lambda x: weighted(ad.log(ad.exp(x))),
        "gaussian": lambda x: weighted(gaussian_smooth(x, 0.8)),
        "warp": lambda x: ad.sum_all(ad.square(warp(ad.take_channels(ad.tanh(x), [0]),
                                                    ad.scalar_mul(ad.take_channels(x, [0, 1, 2]), 0.7)))),
        "demons": demons_l1,
    }


def weighted_fn(f, wts):
    def g(x):
        y = f(x)
        return ad.sum_all(ad.mul(y, y.tape.constant(wts[: y.value.shape[0]])))
    return g
