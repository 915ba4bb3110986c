"""Command-line entry point.

Exit codes: 0 success, 2 input or config error, 3 training divergence,
4 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import edt
from .config import ConfigError, RunConfig, load_run_config
from .gradcheck import DEFAULT_LAMBDAS, check_gradients
from .metrics import report
from .network import NetworkState, state_from_tensors
from .raster import FieldStack, FormatError, read_array, read_mask, read_weights, write_field_stack, write_mask, write_weights
from .synth import generate_synthetic, read_dataset, split_indices, write_dataset
from .trainer import Dataset, TrainingDiverged, evaluate, sliding_window_infer, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CHECK = 4

GRADCHECK_TOL = 1e-4
BENCH_RATIO_LIMIT = 4.5

log = logging.getLogger("sdtseg")


class InputError(Exception):
    pass


def _fail(message: str, code: int = EXIT_INPUT) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def load_data(cfg: RunConfig):
    """``(images, masks, train_idx, val_idx)`` from data_dir or the synth spec."""
    if cfg.data_dir is not None:
        try:
            return read_dataset(cfg.data_dir)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot load dataset from {cfg.data_dir}: {exc}") from exc
    images, masks = generate_synthetic(cfg.synth)
    train_idx, val_idx = split_indices(len(images), cfg.synth.seed)
    return images, masks, train_idx, val_idx


def build_dataset(cfg: RunConfig) -> Dataset:
    images, masks, tr, va = load_data(cfg)
    return Dataset(images[tr], [masks[i] for i in tr], images[va], [masks[i] for i in va])


def load_state(path) -> NetworkState:
    try:
        return state_from_tensors(read_weights(path))
    except OSError as exc:
        raise InputError(f"cannot read weights {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise InputError(f"bad weights file {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_sdt(mask_path, clip: float, out_path, classes: int | None = None) -> int:
    try:
        mask = read_mask(mask_path, classes)
        params = edt.SdtParams(mask.classes, clip)
        write_field_stack(edt.class_sdt_stack(mask, params), out_path)
    except OSError as exc:
        return _fail(f"{exc.filename}: {exc.strerror}")
    except ValueError as exc:
        return _fail(str(exc))
    return EXIT_OK


def cmd_synth(config_path) -> int:
    try:
        cfg = load_run_config(config_path)
        images, masks = generate_synthetic(cfg.synth)
        _, val = split_indices(len(images), cfg.synth.seed)
        write_dataset(cfg.out_dir / "data", images, masks, val)
    except ConfigError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"{exc.filename}: {exc.strerror}")
    print(cfg.out_dir / "data")
    return EXIT_OK


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def cmd_train(config_path) -> int:
    try:
        cfg = load_run_config(config_path)
        dataset = build_dataset(cfg)
    except (ConfigError, InputError) as exc:
        return _fail(str(exc))
    out = cfg.out_dir
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(state, row):
        write_weights(state.params, ckpt_dir / f"epoch_{row['epoch']:03d}.sdtw")
        with log_path.open("a") as fh:
            fh.write(_dump(row) + "\n")

    try:
        result = train(cfg.train, dataset, on_epoch)
    except TrainingDiverged as exc:
        write_weights(exc.state.params, out / "last_good.sdtw")
        return _fail(f"training diverged: {exc}", EXIT_DIVERGED)
    write_weights(result.state.params, out / "final.sdtw")
    doc = {"class_weights": result.class_weights.tolist()}
    if len(dataset.val_images):
        cm = evaluate(result.state, dataset.val_images, dataset.val_masks, cfg.train.crop, cfg.train.eval_overlap)
        doc.update(report(cm))
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(_dump({k: doc[k] for k in ("oa", "miou") if k in doc}))
    return EXIT_OK


def cmd_eval(weights_path, config_path, split: str = "val", window: int | None = None, overlap: float | None = None) -> int:
    try:
        cfg = load_run_config(config_path)
        state = load_state(weights_path)
        images, masks, tr, va = load_data(cfg)
    except (ConfigError, InputError) as exc:
        return _fail(str(exc))
    if state.classes != masks[0].classes:
        return _fail(f"weights have {state.classes} classes, dataset has {masks[0].classes}")
    idx = va if split == "val" else tr if split == "train" else np.arange(len(images))
    if len(idx) == 0:
        return _fail(f"split {split!r} is empty")
    window = window or cfg.train.crop
    overlap = cfg.train.eval_overlap if overlap is None else overlap
    try:
        cm = evaluate(state, images[idx], [masks[i] for i in idx], window, overlap)
    except ValueError as exc:
        return _fail(str(exc))
    print(_dump(report(cm)))
    return EXIT_OK


def cmd_infer(weights_path, image_path, out_path, window: int, overlap: float = 0.75, probs_path=None) -> int:
    try:
        state = load_state(weights_path)
        image = read_array(image_path)
        if image.ndim != 3 or image.shape[0] != state.in_channels:
            raise InputError(f"image must be ({state.in_channels}, H, W), got {image.shape}")
        probs, pred = sliding_window_infer(state, image, window, overlap)
        write_mask(pred, out_path)
        if probs_path:
            write_field_stack(FieldStack(probs), probs_path)
    except InputError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"{exc.filename}: {exc.strerror}")
    except ValueError as exc:
        return _fail(str(exc))
    return EXIT_OK


def cmd_gradcheck(seed: int = 0, lambdas=DEFAULT_LAMBDAS, corrupt: bool = False) -> int:
    worst = 0.0
    for lam in lambdas:
        for block in check_gradients(seed, lam, corrupt=corrupt):
            worst = max(worst, block.max_rel_error)
            print(f"seed={seed} lambda={lam:g} {block.name:<12} rel={block.max_rel_error:.3e} abs={block.max_abs_error:.3e}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK


def bench_mask(size: int, seed: int = 0) -> np.ndarray:
    """Disks scattered at a fixed density, self-similar across sizes."""
    rng = np.random.default_rng([seed, size])
    yy, xx = np.ogrid[:size, :size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(60):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.02, 0.1) * size
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask


def time_sdt(size: int, runs: int = 5) -> float:
    """Mean wall time of signed_dt on a size x size mask, after one warm-up."""
    mask = bench_mask(size)
    edt.signed_dt(mask)
    start = time.perf_counter()
    for _ in range(runs):
        edt.signed_dt(mask)
    return (time.perf_counter() - start) / runs


def cmd_bench(sizes=(512, 1024, 2048), runs: int = 5) -> int:
    sizes = list(sizes)
    if sizes != sorted(sizes):
        return _fail("sizes must be ascending")
    times = {}
    for n in sizes:
        times[n] = time_sdt(n, runs)
        print(f"size={n} pixels={n * n} mean_seconds={times[n]:.6f}")
    for n in sizes:
        if 2 * n in times:
            ratio = times[2 * n] / times[n]
            verdict = "PASS" if ratio <= BENCH_RATIO_LIMIT else "FAIL"
            print(f"ratio t({2 * n})/t({n}) = {ratio:.3f} {verdict} (limit {BENCH_RATIO_LIMIT})")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdtseg", description="Distance-transform regularized segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sdt", help="class-wise normalized signed distance transform of a PGM mask")
    p.add_argument("mask")
    p.add_argument("out")
    p.add_argument("--clip", type=float, default=edt.DEFAULT_CLIP)
    p.add_argument("--classes", type=int, default=None, help="override the inferred class count")

    p = sub.add_parser("synth", help="write the synthetic dataset of a run config")
    p.add_argument("config")

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("config")

    p = sub.add_parser("eval", help="sliding-window evaluation, JSON report on stdout")
    p.add_argument("weights")
    p.add_argument("config")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--overlap", type=float, default=None)

    p = sub.add_parser("infer", help="predict a label mask for one SDTF image")
    p.add_argument("weights")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--overlap", type=float, default=0.75)
    p.add_argument("--probs", default=None, help="also write averaged probabilities as SDTF")

    p = sub.add_parser("gradcheck", help="compare backward against central finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lambdas", type=float, nargs="+", default=list(DEFAULT_LAMBDAS))
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("bench", help="time the signed distance transform")
    p.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048])
    p.add_argument("--runs", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    edt.set_threads()
    if args.command == "sdt":
        return cmd_sdt(args.mask, args.clip, args.out, args.classes)
    if args.command == "synth":
        return cmd_synth(args.config)
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "eval":
        return cmd_eval(args.weights, args.config, args.split, args.window, args.overlap)
    if args.command == "infer":
        return cmd_infer(args.weights, args.image, args.out, args.window, args.overlap, args.probs)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed, args.lambdas, args.corrupt)
    if args.command == "bench":
        return cmd_bench(args.sizes, args.runs)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
