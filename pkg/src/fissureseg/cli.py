"""``fissureseg`` command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric failure (training divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck as gc
from .config import load_json, load_run_config, parse_adjacency
from .errors import LabelRangeError, NumericError, ParameterError, VolumeFormatError, ContractError
from .metrics import evaluate_segmentation, reports_to_csv
from .morphology import DEFAULT_ADJACENCY, fissure_gt_from_lobes
from .synthdata import PhantomCase, PhantomSpec, generate_dataset
from .trainer import ARMS, build_model, run_ablation, train
from .volume import ChannelVolume, LabelVolume, ScalarVolume
from .vvol import read_volume, write_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_LOSSES = ("ace", "dice", "fgm", "reg-demons", "reg-conv", "combined")
GRADCHECK_OPS = ("softmax", "maxpool", "channel_product", "normalize", "log", "gaussian", "warp", "demons")


class UsageError(Exception):
    pass


def _emit(path) -> None:
    print(str(path))


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _load_adjacency(path):
    return DEFAULT_ADJACENCY if path is None else parse_adjacency(load_json(path))


def _read_label(path) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise VolumeFormatError(f"{path}: expected a label volume, got {type(vol).__name__}", 0, str(path))
    return vol


def load_cases(data_dir) -> list:
    """Read ``case_<k>_img.vvol`` / ``case_<k>_lab.vvol`` pairs in index order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    found = {}
    for p in data_dir.iterdir():
        m = re.fullmatch(r"case_(\d+)_img\.vvol", p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise FileNotFoundError(f"no case_<k>_img.vvol files in {data_dir}")
    cases = []
    for k in sorted(found):
        image = read_volume(found[k])
        if not isinstance(image, ScalarVolume):
            raise VolumeFormatError(f"{found[k]}: expected a scalar volume", 0, str(found[k]))
        labels = _read_label(data_dir / f"case_{k}_lab.vvol")
        if labels.shape != image.shape:
            raise VolumeFormatError(f"case {k}: image and label shapes differ", 0, str(found[k]))
        cases.append(PhantomCase(image, labels))
    return cases


# subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.cases < 1:
        raise UsageError(f"--cases must be >= 1, got {args.cases}")
    spec = PhantomSpec.from_dict(load_json(args.spec)) if args.spec else PhantomSpec()
    out = Path(args.out)
    generate_dataset(spec, args.cases, base_seed=args.seed, out_dir=out)
    for k in range(args.cases):
        _emit(out / f"case_{k}_img.vvol")
        _emit(out / f"case_{k}_lab.vvol")
    return EXIT_OK


def cmd_fissure_gt(args) -> int:
    labels = _read_label(args.labels)
    adj = _load_adjacency(args.adjacency)
    fiss = fissure_gt_from_lobes(labels, args.radius, adj)
    write_volume(args.out, fiss)
    _emit(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.arm not in ARMS:
        raise UsageError(f"unknown arm {args.arm!r}; valid arms: {', '.join(ARMS)}")
    cfg = load_run_config(args.config)
    data = args.data or cfg.paths.get("data")
    out_arg = args.out or cfg.paths.get("out")
    if not data or not out_arg:
        raise UsageError("--data and --out are required (or set paths.data / paths.out in the config)")
    cases = load_cases(data)
    num_classes = max(cfg.adjacency.max_lobe, max(int(c.lobes.data.max()) for c in cases)) + 1
    model = build_model(cfg.train, cases[0].image.shape, num_classes, len(cases))
    report = train(model, cases, cfg.train, args.arm, cfg.adjacency)
    out = Path(args.out or out_arg)
    paths = [
        _write_text(out / "steps.csv", report.steps_csv()),
        _write_text(out / "summary.json", report.summary_json() + "\n"),
        _write_text(out / "metrics.csv", reports_to_csv(report.metrics)),
    ]
    for k, pred in enumerate(report.predictions):
        p = out / f"pred_case_{k}.vvol"
        write_volume(p, LabelVolume(pred, num_classes))
        paths.append(p)
    for p in paths:
        _emit(p)
    print(f"mean foreground DSC {report.mean_dsc:.4f}; wall-clock {report.wall_clock:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _read_label(args.pred)
    gt = _read_label(args.gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    adj = _load_adjacency(args.adjacency)
    report = evaluate_segmentation(pred, gt, adj, args.radius, case=Path(args.pred).stem)
    _write_text(Path(args.out), reports_to_csv([report]))
    _emit(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.op not in GRADCHECK_LOSSES + GRADCHECK_OPS:
        raise UsageError(f"unknown op {args.op!r}; valid ops: {', '.join(GRADCHECK_LOSSES + GRADCHECK_OPS)}")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for t in range(args.trials):
        if args.op in GRADCHECK_LOSSES:
            x, labels = gc.random_instance(rng)
            fn = gc.loss_functions(labels)[args.op]
        else:
            x = rng.standard_normal((3, 3, 3, 3))
            fn = gc.op_functions(rng)[args.op]
        res = gc.check(fn, x)
        worst = max(worst, res.max_rel_error)
        print(f"trial {t}: max relative error {res.max_rel_error:.3e} {'ok' if res.passed else 'FAIL'}")
    ok = worst < gc.REL_TOL
    print(f"{args.op}: worst {worst:.3e} over {args.trials} trials (tolerance {gc.REL_TOL:g}) -> "
          f"{'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def slice_to_gray(vol, axis: str, index: int, channel: int = 0) -> np.ndarray:
    """8-bit (rows, cols) image of one slice; rows follow the second in-plane axis."""
    arr = vol.data
    if isinstance(vol, ChannelVolume):
        if not 0 <= channel < arr.shape[0]:
            raise UsageError(f"--channel {channel} out of range 0..{arr.shape[0] - 1}")
        arr = arr[channel]
    a = "xyz".index(axis)
    if not 0 <= index < arr.shape[a]:
        raise UsageError(f"--index {index} out of range 0..{arr.shape[a] - 1} for axis {axis}")
    sl = np.take(arr, index, axis=a).T  # columns follow the first remaining axis
    if isinstance(vol, LabelVolume):
        n = vol.num_classes or int(arr.max()) + 1
        return (sl.astype(np.int64) * 255 // max(n - 1, 1)).astype(np.uint8)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros(sl.shape, dtype=np.uint8)
    return np.round((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    rows, cols = img.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def cmd_export_slice(args) -> int:
    vol = read_volume(args.volume)
    write_pgm(args.out, slice_to_gray(vol, args.axis, args.index, args.channel))
    _emit(args.out)
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = cfg.train
    if train_cfg.model != "tiny-conv":
        train_cfg = replace(train_cfg, model="tiny-conv")
        print("ablation: using model=tiny-conv for held-out evaluation", file=sys.stderr)
    if args.data:
        cases = load_cases(args.data)
    else:
        cases = generate_dataset(cfg.phantom, args.cases, base_seed=args.seed)
    arms = args.arms.split(",") if args.arms else list(ARMS)
    for arm in arms:
        if arm not in ARMS:
            raise UsageError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    result = run_ablation(cases, train_cfg, arms, args.heldout, cfg.adjacency)
    out = Path(args.out)
    p1 = _write_text(out / "ablation.csv", result.to_csv())
    p2 = _write_text(out / "comparisons.txt", "\n".join(result.comparisons) + "\n")
    _emit(p1)
    _emit(p2)
    if result.partial:
        print("warning: some classes were undefined; table is flagged partial", file=sys.stderr)
    return EXIT_OK


# parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fissureseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fissureseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write synthetic phantom cases as VVOL pairs")
    s.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, required=True)
    s.add_argument("--seed", type=int, default=0, help="seed of the first case")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("fissure-gt", help="derive fissure labels from a lobe label volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--radius", type=int, default=1)
    s.add_argument("--adjacency", help="JSON list of [fissure, lobe_a, lobe_b(, name)] rows")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fissure_gt)

    s = sub.add_parser("train", help="train one loss arm and write its report")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--data")
    s.add_argument("--arm", required=True, help=f"one of: {', '.join(ARMS)}")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a predicted label volume against a reference")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=int, default=1)
    s.add_argument("--adjacency")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of a loss or op")
    s.add_argument("--op", required=True, help=f"one of: {', '.join(GRADCHECK_LOSSES + GRADCHECK_OPS)}")
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-slice", help="write one slice as an 8-bit PGM")
    s.add_argument("--volume", required=True)
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--channel", type=int, default=0, help="channel for channel volumes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_slice)

    s = sub.add_parser("ablation", help="train all arms and write the comparison table")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset directory (otherwise generated from the config's phantom)")
    s.add_argument("--cases", type=int, default=3, help="cases to generate when --data is omitted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--heldout", type=int, default=1)
    s.add_argument("--arms", help="comma-separated subset of arms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fissureseg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LabelRangeError, VolumeFormatError) as exc:
        print(f"fissureseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"fissureseg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fissureseg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, ContractError) as exc:
        print(f"fissureseg {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
