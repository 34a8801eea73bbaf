"""Toy segmentation models, the optimizer, the training loop, and the
ablation harness over the four loss arms."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .errors import DivergenceError, NumericError, ParameterError
from .metrics import MetricsReport, evaluate_segmentation
from .morphology import DEFAULT_ADJACENCY, LOBE_NAMES, FissureAdjacency, fgm_forward, fissure_gt_from_lobes
from .registration import conv3d, init_conv_stack, operator_from_config
from .volume import argmax_channel, as_array

ARMS = ("baseline-ce", "ace", "ace+dice-fissure", "ace+reg")
MODEL_KINDS = ("direct-logit", "tiny-conv")
STEP_COLUMNS = ["step", "alpha", "lambda1", "lambda2", "lambda3", "l_ace", "l_dc", "l_reg", "total"]


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha_max: float = 0.9
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3_max: float = 1.0
    radius: int = 1
    registration: dict = field(default_factory=lambda: {"kind": "demons", "iterations": 3, "sigma": 1.0})
    registration_mode: str = "collapsed"
    model: str = "direct-logit"
    hidden: int = 8
    init_scale: float = 0.01
    input_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.radius < 1:
            raise ParameterError("radius must be >= 1")
        if self.registration_mode not in ("collapsed", "per-class"):
            raise ParameterError(f"unknown registration_mode {self.registration_mode!r}")
        operator_from_config(self.registration)
        losses.alpha_schedule(self.alpha_max, self.total_steps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def schedules(self) -> losses.Schedules:
        return losses.Schedules(self.total_steps, self.alpha_max, self.lambda1, self.lambda2, self.lambda3_max)


# models --------------------------------------------------------------------

class DirectLogitModel:
    """One free logit per voxel per class, kept separately for every case."""

    kind = "direct-logit"

    def __init__(self, shape, num_classes: int, n_cases: int = 1, seed: int = 0, init_scale: float = 0.01):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.params = {f"logits{k}": init_scale * rng.standard_normal((num_classes,) + tuple(shape))
                       for k in range(n_cases)}

    def active(self, case_index: int) -> list:
        return [f"logits{case_index}"]

    def forward(self, tape: ad.Tape, leaves: dict, case_index: int, image) -> ad.Node:
        return leaves[f"logits{case_index}"]

    def logits(self, case_index: int, image) -> np.ndarray:
        return self.params[f"logits{case_index}"]


def coordinate_channels(shape) -> np.ndarray:
    """Normalized voxel-center coordinates in [-1, 1], shape (3, nx, ny, nz)."""
    grids = np.indices(shape, dtype=np.float64)
    for a, n in enumerate(shape):
        grids[a] = 2.0 * (grids[a] + 0.5) / n - 1.0
    return grids


class TinyConvModel:
    """Two 3x3x3 convolutions with a tanh in between.

    Input channels are the image plus three coordinate channels; lobe
    identity depends on position, which a 5-voxel receptive field cannot
    see from intensity alone.
    """

    kind = "tiny-conv"

    def __init__(self, num_classes: int, hidden: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        (w1, b1), (w2, b2) = init_conv_stack(rng, (4, hidden, num_classes))
        self.num_classes = num_classes
        self.params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

    def active(self, case_index: int) -> list:
        return ["w1", "b1", "w2", "b2"]

    def forward(self, tape: ad.Tape, leaves: dict, case_index: int, image) -> ad.Node:
        img = as_array(image)
        x = tape.constant(np.concatenate([img[None], coordinate_channels(img.shape)]))
        h = ad.tanh(conv3d(x, leaves["w1"], leaves["b1"]))
        return conv3d(h, leaves["w2"], leaves["b2"])

    def logits(self, case_index: int, image) -> np.ndarray:
        tape = ad.Tape()
        leaves = {k: tape.constant(v) for k, v in self.params.items()}
        return self.forward(tape, leaves, case_index, image).value


def build_model(config: TrainConfig, shape, num_classes: int, n_cases: int):
    if config.model == "direct-logit":
        return DirectLogitModel(shape, num_classes, n_cases, config.seed, config.init_scale)
    return TinyConvModel(num_classes, config.hidden, config.seed)


def predict(model, case_index: int, image) -> np.ndarray:
    return argmax_channel(model.logits(case_index, image))


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam step for every parameter named in ``grads``.

    Weight decay is added to the gradient (``g + wd * theta``). Step counts
    are kept per parameter so parameters that skip steps still get the
    right bias correction. Returns ``(new_params, state)``.
    """
    new = dict(params)
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        theta = params[name]
        g = g + config.weight_decay * theta
        t = state.t.get(name, 0) + 1
        m = b1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new[name] = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        state.m[name], state.v[name], state.t[name] = m, v, t
    return new, state


def sgd_update(params: dict, grads: dict, config: TrainConfig) -> dict:
    new = dict(params)
    for name, g in grads.items():
        new[name] = params[name] - config.lr * (g + config.weight_decay * params[name])
    return new


# training ------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class TrainReport:
    arm: str
    config: TrainConfig
    steps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    predictions: list = field(default_factory=list, repr=False)
    wall_clock: float = 0.0

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([m.mean_dsc for m in self.metrics]))

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for rec in self.steps:
            w.writerow([rec["step"]] + [_fmt(rec[c]) for c in STEP_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        """Deterministic summary; wall-clock time is kept out so reruns compare byte-for-byte."""
        last = self.steps[-1] if self.steps else {}
        return {
            "arm": self.arm,
            "config": asdict(self.config),
            "steps": len(self.steps),
            "final_losses": {k: last.get(k) for k in STEP_COLUMNS[1:]},
            "mean_dsc": self.mean_dsc,
            "cases": [json.loads(m.to_json()) for m in self.metrics],
            "model_selection": "final-step model (no validation-set selection)",
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _case_arrays(case):
    if hasattr(case, "image") and hasattr(case, "lobes"):
        return as_array(case.image), case.lobes
    image, labels = case
    return as_array(image), labels


def _step_losses(tape, model, leaves, i, image, labels, arm, step, config, sched, op, adj, fissure_gt, err_cache):
    probs = ad.softmax_channels(model.forward(tape, leaves, i, image))
    if arm == "baseline-ce":
        alpha, lam1, lam2, lam3 = 0.0, config.lambda1, 0.0, 0.0
    else:
        alpha, lam1, lam2 = sched.alpha(step), config.lambda1, config.lambda2
        lam3 = sched.lambda3(step) if arm in ("ace+dice-fissure", "ace+reg") else 0.0
    if arm == "baseline-ce":
        l_ace = losses.cross_entropy(probs, labels)
    else:
        l_ace = losses.attentive_ce(probs, labels, alpha)
    l_dc = losses.soft_dice_loss(probs, labels)
    if arm == "ace+reg":
        if i not in err_cache:
            err_cache[i] = losses.self_registration_fields(fissure_gt, op, config.registration_mode,
                                                           adj.num_fissures)
        l_aux = losses.registration_loss(fgm_forward(probs, adj, config.radius), fissure_gt, op,
                                         config.registration_mode, err_cache[i])
    elif arm == "ace+dice-fissure":
        l_aux = losses.soft_dice_loss(fgm_forward(probs, adj, config.radius), fissure_gt)
    else:
        l_aux = tape.constant(0.0)
    total = ad.add(ad.add(ad.scalar_mul(l_ace, lam1), ad.scalar_mul(l_dc, lam2)), ad.scalar_mul(l_aux, lam3))
    rec = {"step": step, "alpha": alpha, "lambda1": lam1, "lambda2": lam2, "lambda3": lam3,
           "l_ace": l_ace.item(), "l_dc": l_dc.item(), "l_reg": l_aux.item(), "total": total.item()}
    return total, rec


def train(model, cases: Sequence, config: TrainConfig, arm: str,
          adj: FissureAdjacency = DEFAULT_ADJACENCY, log: Callable | None = None) -> TrainReport:
    """Optimize ``model`` on ``cases`` (one case per step, cycling) under one loss arm.

    Arms: ``baseline-ce`` (plain cross entropy), ``ace`` (attentive CE +
    lobe Dice), ``ace+dice-fissure`` (adds soft Dice on the generated
    fissures), ``ace+reg`` (adds the registration loss). The auxiliary
    term is weighted by the ramped lambda3 and logged under ``l_reg``.
    """
    if arm not in ARMS:
        raise ParameterError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    if not cases:
        raise ParameterError("need at least one training case")
    data = [_case_arrays(c) for c in cases]
    for image, labels in data:
        if as_array(labels).shape != image.shape:
            raise ParameterError("image and label shapes differ")
        if as_array(labels).max() >= model.num_classes:
            raise ParameterError(f"labels exceed the model's {model.num_classes} classes")
    sched = config.schedules()
    op = operator_from_config(config.registration)
    fissure_gts = [fissure_gt_from_lobes(as_array(lab), config.radius, adj) for _, lab in data]
    err_cache: dict = {}
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState()
    report = TrainReport(arm, config)
    start = time.perf_counter()

    for step in range(config.total_steps):
        i = step % len(data)
        image, labels = data[i]
        if config.input_noise > 0:
            image = image + rng.normal(0.0, config.input_noise, size=image.shape)
        tape = ad.Tape()
        leaves = {k: tape.leaf(model.params[k]) for k in model.active(i)}
        try:
            total, rec = _step_losses(tape, model, leaves, i, image, labels, arm, step, config, sched, op, adj,
                                      fissure_gts[i], err_cache)
        except NumericError as exc:
            raise DivergenceError(step, f"non-finite values at step {step}: {exc}") from exc
        if not all(math.isfinite(rec[k]) for k in ("l_ace", "l_dc", "l_reg", "total")):
            raise DivergenceError(step)
        report.steps.append(rec)

        tape.backward(total)
        grads = {k: leaf.grad for k, leaf in leaves.items()}
        if config.optimizer == "adam":
            model.params, state = adam_update(model.params, grads, state, config)
        else:
            model.params = sgd_update(model.params, grads, config)
        if not all(np.all(np.isfinite(model.params[k])) for k in grads):
            raise DivergenceError(step, f"non-finite parameters after the update at step {step}")
        if log is not None:
            log(rec)

    report.wall_clock = time.perf_counter() - start
    for i, (image, labels) in enumerate(data):
        pred = predict(model, i, image)
        report.predictions.append(pred)
        report.metrics.append(evaluate_segmentation(pred, as_array(labels), adj, config.radius,
                                                    num_classes=model.num_classes, case=f"case_{i}"))
    return report


def ema(values, window: int = 100) -> np.ndarray:
    """Exponential moving average with smoothing ``2 / (window + 1)``."""
    a = 2.0 / (window + 1)
    out = np.empty(len(values))
    acc = values[0]
    for k, v in enumerate(values):
        acc = a * v + (1.0 - a) * acc
        out[k] = acc
    return out


# ablation ------------------------------------------------------------------

@dataclass
class AblationResult:
    lobe_names: list
    fissure_names: list
    rows: list            # one dict per arm
    comparisons: list
    partial: bool

    def to_csv(self) -> str:
        cols = (["arm"] + [f"dsc_{n}" for n in self.lobe_names] + ["dsc_mean"]
                + [f"assd_{n}" for n in self.fissure_names] + ["assd_mean", "partial"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["arm"]] + [r[c] for c in cols[1:-1]] + [str(r["partial"]).lower()])
        return buf.getvalue()


def _mean_std(values) -> str:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return "nan"
    return f"{np.mean(vals):.4f}±{np.std(vals):.4f}"


def _default_fit_predict(arm, train_cases, test_cases, config, adj):
    if config.model != "tiny-conv":
        raise ParameterError("held-out evaluation needs a model that generalizes across cases (model='tiny-conv')")
    num_classes = max(adj.max_lobe, *(int(as_array(_case_arrays(c)[1]).max()) for c in train_cases)) + 1
    model = TinyConvModel(num_classes, config.hidden, config.seed)
    train(model, train_cases, config, arm, adj)
    return [predict(model, 0, _case_arrays(c)[0]) for c in test_cases]


def run_ablation(cases: Sequence, config: TrainConfig, arms: Sequence[str] = ARMS, n_heldout: int = 1,
                 adj: FissureAdjacency = DEFAULT_ADJACENCY, fit_predict: Callable | None = None) -> AblationResult:
    """Train every arm on the leading cases and score the last ``n_heldout`` ones.

    ``fit_predict(arm, train_cases, test_cases, config, adj)`` returns one
    label map per test case; the default trains a fresh tiny-conv model
    with the shared seed.
    """
    if n_heldout < 1 or len(cases) - n_heldout < 1:
        raise ParameterError("need at least one training and one held-out case")
    for arm in arms:
        if arm not in ARMS:
            raise ParameterError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    fit_predict = fit_predict or _default_fit_predict
    train_cases, test_cases = list(cases[:-n_heldout]), list(cases[-n_heldout:])
    lobe_ids = list(range(1, adj.max_lobe + 1))
    lobe_names = [LOBE_NAMES.get(k, f"L{k}") for k in lobe_ids]
    fissure_names = adj.names()
    rows, partial_any = [], False
    for arm in arms:
        preds = fit_predict(arm, train_cases, test_cases, config, adj)
        reports: list[MetricsReport] = [
            evaluate_segmentation(p, as_array(_case_arrays(c)[1]), adj, config.radius,
                                  num_classes=adj.max_lobe + 1, case=f"heldout_{k}")
            for k, (p, c) in enumerate(zip(preds, test_cases))
        ]
        row = {"arm": arm}
        for k, name in zip(lobe_ids, lobe_names):
            row[f"dsc_{name}"] = _mean_std([r.lobes[k - 1].dsc for r in reports])
        row["dsc_mean"] = _mean_std([r.mean_dsc for r in reports])
        for j, name in enumerate(fissure_names):
            row[f"assd_{name}"] = _mean_std([r.fissures[j].assd for r in reports])
        row["assd_mean"] = _mean_std([r.mean_assd for r in reports])
        row["partial"] = any(not c.defined for r in reports for c in r.lobes + r.fissures)
        row["_mean_dsc"] = float(np.nanmean([r.mean_dsc for r in reports]))
        row["_mean_assd"] = float(np.nanmean([r.mean_assd for r in reports])) if any(
            not math.isnan(r.mean_assd) for r in reports) else math.nan
        partial_any |= row["partial"]
        rows.append(row)

    comparisons = []
    base = rows[0]
    for r in rows[1:]:
        comparisons.append(
            f"{r['arm']} vs {base['arm']}: mean DSC {r['_mean_dsc'] - base['_mean_dsc']:+.4f}, "
            f"mean ASSD {r['_mean_assd'] - base['_mean_assd']:+.4f}")
    return AblationResult(lobe_names, fissure_names, rows, comparisons, partial_any)
