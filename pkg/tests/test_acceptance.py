"""Acceptance checks, one test per criterion.

Each test prints a single ``[ACn] PASS|FAIL`` line (visible in ``pytest -v``
output) and then asserts. Tolerances are pinned here, not in the library.
"""
import csv
import io
import time

import numpy as np
import pytest

from fissureseg import autodiff as ad
from fissureseg import gradcheck as gc
from fissureseg import losses
from fissureseg.metrics import assd, dsc, hd95
from fissureseg.morphology import DEFAULT_ADJACENCY, fgm_forward, fgm_normalizer, fissure_gt_from_lobes
from fissureseg.registration import ConvOperator, DemonsOperator
from fissureseg.synthdata import PhantomSpec, generate_dataset
from fissureseg.trainer import ARMS, TrainConfig, build_model, run_ablation, train
from fissureseg.volume import argmax_channel, one_hot

from oracles import assd_brute, dsc_count, hd95_brute

GRAD_TOL = 1e-5
GRAD_INSTANCES = 20
GRAD_BUDGET_S = 120.0
NORM_TOL = 1e-12
TOY_MIN_DSC = 0.95
TOY_BUDGET_S = 600.0
GRAD_LOSSES = ("ace", "dice", "fgm", "reg-demons", "reg-conv", "combined")


@pytest.fixture
def verdict(capsys):
    def emit(tag, title, passed, detail):
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
        return passed
    return emit


def test_ac1_gradient_suite(verdict):
    rng = np.random.default_rng(20240601)
    worst = dict.fromkeys(GRAD_LOSSES, 0.0)
    start = time.perf_counter()
    for _ in range(GRAD_INSTANCES):
        x, labels = gc.random_instance(rng, shape=(4, 4, 4), lobes=3)
        fns = gc.loss_functions(labels)
        for name in GRAD_LOSSES:
            worst[name] = max(worst[name], gc.check(fns[name], x).max_rel_error)
    elapsed = time.perf_counter() - start
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict("AC1", "gradient suite", ok,
                   f"max rel err {detail} (tol {GRAD_TOL:g}); {GRAD_INSTANCES} instances in {elapsed:.0f}s")


def test_ac2_reduction_identities(verdict):
    rng = np.random.default_rng(7)
    bitwise, bounds = 0, 0
    for _ in range(50):
        c = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 6, size=3))
        probs = gc.softmax_np(2.0 * rng.standard_normal((c,) + shape))
        labels = rng.integers(0, c, size=shape)
        p = ad.Tape().constant(probs)
        ce = losses.cross_entropy(p, labels).item()
        bitwise += losses.attentive_ce(p, labels, 0.0).item() == ce
        alpha = float(rng.uniform(0, 1))
        ace = losses.attentive_ce(p, labels, alpha).item()
        bounds += (1 - alpha) * ce <= ace <= ce
    ok = bitwise == 50 and bounds == 50
    assert verdict("AC2", "reduction identities", ok,
                   f"alpha=0 bitwise equal {bitwise}/50; (1-a)CE <= ACE <= CE {bounds}/50")


def test_ac3_fgm_morphology_equivalence(verdict):
    rng = np.random.default_rng(3)
    matches = 0
    for k in range(100):
        shape = tuple(int(n) for n in rng.integers(1, 13, size=3))
        if k % 2 and min(shape) >= 2:
            lab = gc.random_labels(rng, shape, 5)
        else:
            lab = rng.integers(0, 6, size=shape)
        radius = 1 + k % 2
        z = fgm_forward(ad.Tape().constant(one_hot(lab, 6)), DEFAULT_ADJACENCY, radius).value
        matches += np.array_equal(argmax_channel(z), fissure_gt_from_lobes(lab, radius).data)
    assert verdict("AC3", "FGM-morphology equivalence", matches == 100, f"exact match {matches}/100")


def test_ac4_normalization(verdict):
    rng = np.random.default_rng(4)
    worst_sum, min_norm = 0.0, np.inf
    for k in range(60):
        shape = tuple(int(n) for n in rng.integers(1, 9, size=3))
        if k % 3 == 0:
            probs = one_hot(rng.integers(0, 6, size=shape), 6)
        else:
            probs = gc.softmax_np(float(rng.uniform(0.1, 10)) * rng.standard_normal((6,) + shape))
        radius = 1 + k % 2
        z = fgm_forward(ad.Tape().constant(probs), DEFAULT_ADJACENCY, radius).value
        worst_sum = max(worst_sum, float(np.abs(z.sum(axis=0) - 1).max()))
        min_norm = min(min_norm, float(fgm_normalizer(probs, DEFAULT_ADJACENCY, radius).min()))
    ok = worst_sum <= NORM_TOL and min_norm >= 1.0
    assert verdict("AC4", "FGM normalization", ok,
                   f"max |sum-1| {worst_sum:.1e} (tol {NORM_TOL:g}); min normalizer {min_norm:.6f}")


def test_ac5_registration_identities(verdict):
    rng = np.random.default_rng(5)
    zero_fields = 0
    for _ in range(10):
        a = rng.random(tuple(rng.integers(2, 9, size=3)))
        tape = ad.Tape()
        zero_fields += bool(np.all(DemonsOperator()(tape.constant(a[None]), a).value == 0.0))
    zero_losses = {}
    for name, op in (("demons", DemonsOperator()), ("seeded-conv", ConvOperator(seed=11))):
        vals = []
        for _ in range(5):
            fiss = fissure_gt_from_lobes(gc.random_labels(rng, (6, 6, 6), 5), 1)
            gen = ad.Tape().leaf(one_hot(fiss.data, 5))
            vals.append(losses.registration_loss(gen, fiss, op).item())
        zero_losses[name] = max(vals)
    ok = zero_fields == 10 and all(v == 0.0 for v in zero_losses.values())
    assert verdict("AC5", "registration identities", ok,
                   f"demons phi(A,A)==0 {zero_fields}/10; max loss at reference {zero_losses}")


def test_ac6_metrics_oracle(verdict):
    rng = np.random.default_rng(6)
    exact = 0
    for _ in range(100):
        shape = tuple(int(n) for n in rng.integers(1, 13, size=3))
        a = rng.random(shape) < rng.uniform(0.02, 0.6)
        b = rng.random(shape) < rng.uniform(0.02, 0.6)
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        exact += (hd95(a, b) == hd95_brute(a, b)) and (assd(a, b) == assd_brute(a, b)) \
            and (dsc(a, b) == dsc_count(a, b))
    assert verdict("AC6", "metrics oracle", exact == 100, f"exact agreement {exact}/100 mask pairs")


def test_ac7_toy_convergence(toy_run, verdict):
    case, cfg, report = toy_run
    model = build_model(cfg, case.image.shape, 6, 1)
    rerun = train(model, [case], cfg, "ace+reg")
    identical = rerun.steps_csv() == report.steps_csv() and rerun.summary_json() == report.summary_json()
    ok = report.mean_dsc >= TOY_MIN_DSC and report.wall_clock < TOY_BUDGET_S and identical
    assert verdict("AC7", "toy convergence", ok,
                   f"mean DSC {report.mean_dsc:.4f} (>= {TOY_MIN_DSC}); {len(report.steps)} steps in "
                   f"{report.wall_clock:.0f}s (< {TOY_BUDGET_S:.0f}s); rerun byte-identical {identical}")


def test_ac8_ablation_table(verdict):
    cases = generate_dataset(PhantomSpec(shape=(16, 16, 16)), 3, base_seed=0)
    cfg = TrainConfig(total_steps=150, model="tiny-conv", lr=0.01)
    result = run_ablation(cases, cfg)
    rows = list(csv.DictReader(io.StringIO(result.to_csv())))
    dsc_cols = [c for c in rows[0] if c.startswith("dsc_") and c != "dsc_mean"]
    assd_cols = [c for c in rows[0] if c.startswith("assd_") and c != "assd_mean"]
    ok = [r["arm"] for r in rows] == list(ARMS) and len(dsc_cols) == 5 and len(assd_cols) == 4 \
        and all("±" in r[c] for r in rows for c in dsc_cols + assd_cols)
    detail = f"{len(rows)} arms x ({len(dsc_cols)} DSC + {len(assd_cols)} ASSD) columns; " + \
        "; ".join(result.comparisons)
    assert verdict("AC8", "ablation harness", ok, detail)
