"""Training losses: attentive cross entropy, soft Dice, the registration loss,
and their weighted combination with ramped schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParameterError
from .morphology import DEFAULT_ADJACENCY, FissureAdjacency, fgm_forward
from .registration import DemonsOperator
from .volume import as_array, one_hot

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LinearRamp:
    """``value(t) = end * t / total_steps``, held at ``end`` past the last step."""

    end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ParameterError(f"step must be >= 0, got {step}")
        t = min(step, self.total_steps)
        return self.end * t / self.total_steps


def alpha_schedule(alpha_max: float, total_steps: int) -> LinearRamp:
    if not 0.0 <= alpha_max <= 1.0:
        raise ParameterError(f"alpha_max must be in [0, 1], got {alpha_max}")
    return LinearRamp(alpha_max, total_steps)


@dataclass(frozen=True)
class Schedules:
    total_steps: int
    alpha_max: float = 0.9
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3_max: float = 1.0

    def alpha(self, step: int) -> float:
        return alpha_schedule(self.alpha_max, self.total_steps)(step)

    def lambda3(self, step: int) -> float:
        return LinearRamp(self.lambda3_max, self.total_steps)(step)


def _true_class_prob(probs: ad.Node, labels) -> ad.Node:
    lab = as_array(labels)
    c = probs.value.shape[0]
    if probs.value.shape[1:] != lab.shape:
        raise ParameterError(f"probs {probs.value.shape} and labels {lab.shape} disagree")
    mask = probs.tape.constant(one_hot(lab, c))
    return ad.channel_sum(ad.mul(probs, mask))


def cross_entropy(probs: ad.Node, labels) -> ad.Node:
    """Mean negative log-probability of the true class."""
    y = _true_class_prob(probs, labels)
    return ad.scalar_mul(ad.mean_all(ad.log(y)), -1.0)


def attentive_ce(probs: ad.Node, labels, alpha: float) -> ad.Node:
    """Cross entropy with voxel weights ``1 - alpha * y_true``.

    Confident, correct voxels are down-weighted, so the loss concentrates
    on voxels the model still gets wrong. The weight stays on the tape.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    y = _true_class_prob(probs, labels)
    w = ad.one_minus(ad.scalar_mul(y, alpha))
    return ad.scalar_mul(ad.mean_all(ad.mul(w, ad.log(y))), -1.0)


def soft_dice_loss(probs: ad.Node, labels, eps: float = DICE_EPS) -> ad.Node:
    """One minus the mean soft Dice over foreground channels (1..C-1)."""
    c = probs.value.shape[0]
    if c < 2:
        raise ParameterError("soft Dice needs a background and at least one foreground channel")
    lab = as_array(labels)
    if probs.value.shape[1:] != lab.shape:
        raise ParameterError(f"probs {probs.value.shape} and labels {lab.shape} disagree")
    t = one_hot(lab, c)
    tape = probs.tape
    inter = ad.spatial_sum(ad.mul(probs, tape.constant(t)))
    denom = ad.add_scalar(ad.add(ad.spatial_sum(probs), tape.constant(t.sum(axis=(1, 2, 3)))), eps)
    ratio = ad.div(ad.add_scalar(ad.scalar_mul(inter, 2.0), eps), denom)
    return ad.one_minus(ad.mean_all(ad.take_channels(ratio, range(1, c))))


def reference_form(fissure_gt, mode: str = "collapsed", num_fissures: int | None = None) -> np.ndarray:
    """Fixed images for the registration loss, shape (K, nx, ny, nz).

    ``collapsed`` gives one "any fissure" indicator; ``per-class`` gives one
    indicator per foreground fissure class.
    """
    g = as_array(fissure_gt)
    if mode == "collapsed":
        return (g > 0).astype(np.float64)[None]
    if mode == "per-class":
        n = num_fissures if num_fissures is not None else int(g.max())
        return one_hot(g, n + 1)[1:]
    raise ParameterError(f"unknown registration mode {mode!r}")


def _moving_form(gen: ad.Node, mode: str) -> list:
    fg = ad.take_channels(gen, range(1, gen.value.shape[0]))
    if mode == "collapsed":
        return [ad.channel_sum(fg)]
    return [ad.take_channels(gen, [k]) for k in range(1, gen.value.shape[0])]


def self_registration_fields(fissure_gt, op, mode: str = "collapsed", num_fissures: int | None = None) -> np.ndarray:
    """The operator's own error on the reference: ``op(G, G)`` per reference image."""
    ref = reference_form(fissure_gt, mode, num_fissures)
    fields = []
    for k in range(ref.shape[0]):
        tape = ad.Tape()
        fields.append(op(tape.constant(ref[k:k + 1]), ref[k]).value)
    return np.stack(fields)


def registration_loss(gen_fissure: ad.Node, fissure_gt, op=None, mode: str = "collapsed",
                      err_fields: np.ndarray | None = None) -> ad.Node:
    """Mean absolute difference between ``op(gen, G)`` and ``op(G, G)``.

    ``gen_fissure`` is an FGM output (background channel first).
    ``err_fields`` may carry a cached result of :func:`self_registration_fields`.
    """
    op = op if op is not None else DemonsOperator()
    g = as_array(fissure_gt)
    if gen_fissure.value.shape[1:] != g.shape:
        raise ParameterError(f"generated fissure {gen_fissure.value.shape} and GT {g.shape} disagree")
    nfiss = gen_fissure.value.shape[0] - 1
    if g.size and g.max() > nfiss:
        raise ParameterError(f"fissure GT has class {g.max()} but only {nfiss} fissure channels")
    ref = reference_form(g, mode, nfiss)
    if err_fields is None:
        err_fields = self_registration_fields(g, op, mode, nfiss)
    tape = gen_fissure.tape
    moving = _moving_form(gen_fissure, mode)
    terms = []
    for k, m in enumerate(moving):
        field = op(m, ref[k])
        diff = ad.sub(field, tape.constant(err_fields[k]))
        terms.append(ad.scalar_mul(ad.l1_norm(diff), 1.0 / diff.value.size))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scalar_mul(total, 1.0 / len(terms)) if len(terms) > 1 else total


@dataclass
class ObjectiveParts:
    total: ad.Node
    ace: ad.Node
    dice: ad.Node
    reg: ad.Node
    alpha: float
    lambda3: float


def combined_objective(probs: ad.Node, labels, fissure_gt, adj: FissureAdjacency = DEFAULT_ADJACENCY,
                       radius: int = 1, step: int = 0, schedules: Schedules | None = None, op=None,
                       mode: str = "collapsed", err_fields=None) -> ObjectiveParts:
    """``lambda1 * ACE + lambda2 * Dice + lambda3(step) * Reg`` on one case."""
    schedules = schedules or Schedules(total_steps=1)
    if step > schedules.total_steps:
        raise ParameterError(f"step {step} exceeds total_steps {schedules.total_steps}")
    alpha = schedules.alpha(step)
    lam3 = schedules.lambda3(step)
    ace = attentive_ce(probs, labels, alpha)
    dice = soft_dice_loss(probs, labels)
    reg = registration_loss(fgm_forward(probs, adj, radius), fissure_gt, op, mode, err_fields)
    total = ad.add(ad.add(ad.scalar_mul(ace, schedules.lambda1), ad.scalar_mul(dice, schedules.lambda2)),
                   ad.scalar_mul(reg, lam3))
    return ObjectiveParts(total, ace, dice, reg, alpha, lam3)
