"""Acceptance suite.

Each test checks one numbered criterion at its stated tolerance and records
a PASS or FAIL line; conftest prints the collected lines at the end of the
run. The direction-of-effect experiment trains 10 models and takes roughly
20 to 30 minutes on one core.
"""

import filecmp
import json
import math
import time

import numpy as np
import pytest

from conftest import random_grid
from sdtseg import cli
from sdtseg.edt import SdtParams, brute_force_sdt, class_sdt_stack, signed_dt
from sdtseg.metrics import ConfusionMatrix, f1_per_class, iou, overall_accuracy
from sdtseg.network import LossInputs, forward, init_network, loss
from sdtseg.raster import VOID, LabelMask
from sdtseg.synth import SynthSpec, generate_synthetic, split_indices
from sdtseg.trainer import (
    Dataset,
    TrainConfig,
    augment,
    evaluate,
    lr_at,
    sliding_window_infer,
    train,
    window_starts,
    window_stride,
)

RESULTS = []


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}"
    if detail:
        line += f" ({detail})"
    RESULTS.append(line)
    print(line)
    return ok


# ------------------------------------------------------------------ 1


def exactness_masks(rng, n, count):
    """Random masks mixed with isolated-pixel and full-row shapes."""
    masks = []
    for i in range(count):
        kind = i % 4
        if kind == 0:
            grid = random_grid(rng, n, n)
        elif kind == 1:
            # one or a few isolated foreground pixels
            grid = np.zeros((n, n), dtype=bool)
            grid.flat[rng.choice(n * n, size=rng.integers(1, 4), replace=False)] = True
        elif kind == 2:
            # isolated background pixels inside a full foreground
            grid = np.ones((n, n), dtype=bool)
            grid.flat[rng.choice(n * n, size=rng.integers(1, 4), replace=False)] = False
        else:
            # full rows (or full columns) of foreground
            grid = np.zeros((n, n), dtype=bool)
            rows = rng.choice(n, size=rng.integers(1, max(2, n // 2)), replace=False)
            grid[rows] = True
            if rng.random() < 0.5:
                grid = grid.T.copy()
        masks.append(grid)
    return masks


def test_criterion_01_edt_exactness():
    rng = np.random.default_rng(101)
    cases = {n: exactness_masks(rng, n, 200) for n in (8, 16, 32, 64)}
    # compile both kernels outside the timed region
    warm = random_grid(rng, 4, 4)
    signed_dt(warm), brute_force_sdt(warm)
    worst = 0.0
    start = time.perf_counter()
    for masks in cases.values():
        for grid in masks:
            worst = max(worst, float(np.max(np.abs(signed_dt(grid) - brute_force_sdt(grid)))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10.0
    record(1, "EDT exactness", ok, f"800 masks, max abs error {worst:.1e}, {elapsed:.2f} s")
    assert ok


# ------------------------------------------------------------------ 2


@pytest.mark.slow
def test_criterion_02_edt_scaling():
    start = time.perf_counter()
    small = cli.time_sdt(1024, runs=5)
    large = cli.time_sdt(2048, runs=5)
    elapsed = time.perf_counter() - start
    ratio = large / small
    ok = ratio <= 4.5 and elapsed < 60.0
    record(2, "EDT scaling", ok, f"t(2048)/t(1024) = {ratio:.3f}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_03_clip_one_identity():
    rng = np.random.default_rng(103)
    failures = 0
    for i in range(50):
        classes = int(rng.integers(2, 8))
        h, w = rng.integers(4, 40, size=2)
        data = rng.integers(0, classes, size=(h, w))
        if i % 2:
            data[rng.random((h, w)) < 0.1] = VOID
        mask = LabelMask(data, classes)
        got = class_sdt_stack(mask, SdtParams(classes, clip=1.0)).data
        onehot = (data[None] == np.arange(classes)[:, None, None]).astype(np.float64)
        failures += not np.array_equal(got, 2.0 * onehot - 1.0)
    ok = failures == 0
    record(3, "clip-1 identity", ok, f"{50 - failures}/50 bit-exact")
    assert ok


# ------------------------------------------------------------------ 4


@pytest.mark.slow
def test_criterion_04_gradient_check(capsys):
    start = time.perf_counter()
    codes = [cli.cmd_gradcheck(seed) for seed in range(10)]
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    passed = sum(c == cli.EXIT_OK for c in codes)
    ok = passed == 10 and elapsed < 120.0
    record(4, "gradient check", ok, f"{passed}/10 seeds at lambda 0, 0.5, 2, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 5


def random_loss_inputs(rng, classes, lam, uniform=False):
    n, h, w = 2, 6, 7
    if uniform:
        z_seg = np.full((n, classes, h, w), 1.0 / classes)
    else:
        logits = rng.normal(size=(n, classes, h, w))
        z_seg = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    y_seg = rng.integers(0, classes, size=(n, h, w))
    y_seg[rng.random((n, h, w)) < 0.1] = VOID
    z_dist = rng.uniform(-1, 1, size=(n, classes, h, w))
    y_dist = rng.uniform(-1, 1, size=(n, classes, h, w))
    weights = rng.uniform(0.2, 3.0, size=classes)
    return LossInputs(z_seg, z_dist, y_seg, y_dist, weights, lam)


def test_criterion_05_loss_law():
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(200):
        classes = int(rng.integers(2, 12))
        lam = float(rng.choice([0.0, 0.5, 2.0, rng.uniform(0, 10)]))
        value = loss(random_loss_inputs(rng, classes, lam))
        combined = value.nll + lam * value.l1
        worst = max(worst, abs(value.total - combined) / max(abs(combined), 1e-300))
    law_ok = worst <= 4 * np.finfo(float).eps

    uniform_err = {}
    for classes in (2, 6, 11):
        inputs = random_loss_inputs(rng, classes, 2.0, uniform=True)
        inputs = LossInputs(inputs.z_seg, inputs.z_dist, inputs.y_seg, inputs.y_dist, np.ones(classes), 2.0)
        uniform_err[classes] = abs(loss(inputs).nll - math.log(classes))
    uniform_ok = max(uniform_err.values()) <= 1e-9

    ok = law_ok and uniform_ok
    detail = f"max relative gap {worst:.1e}, uniform nll error " + ", ".join(
        f"C={c}: {e:.1e}" for c, e in uniform_err.items()
    )
    record(5, "loss law", ok, detail)
    assert ok


# ------------------------------------------------------------------ 6


def test_criterion_06_schedule():
    config = TrainConfig()
    got = [lr_at(e, config) for e in (0, 25, 45)]
    ok = got == [0.01, 0.001, 0.0001]
    record(6, "learning-rate schedule", ok, "epochs 0/25/45 -> " + " / ".join(repr(v) for v in got))
    assert ok


# ------------------------------------------------------------------ 7

EFFECT_SEEDS = (0, 1, 2, 3, 4)
EFFECT_WIDTH = 16


def effect_run(dataset, seed, lam):
    config = TrainConfig(lam=lam, seed=seed, trunk_width=EFFECT_WIDTH, val_every=0)
    state = train(config, dataset).state
    cm = evaluate(state, dataset.val_images, dataset.val_masks, config.crop, config.eval_overlap)
    return overall_accuracy(cm)


@pytest.mark.slow
def test_criterion_07_direction_of_effect():
    start = time.perf_counter()
    spec = SynthSpec()
    images, masks = generate_synthetic(spec)
    tr, va = split_indices(len(images), spec.seed)
    dataset = Dataset(images[tr], [masks[i] for i in tr], images[va], [masks[i] for i in va])
    assert (len(tr), len(va), spec.classes) == (200, 50, 5)

    oa = {lam: [] for lam in (0.0, 2.0)}
    for seed in EFFECT_SEEDS:
        for lam in oa:
            oa[lam].append(effect_run(dataset, seed, lam))
            print(f"seed {seed} lambda {lam}: val OA {oa[lam][-1]:.4f}")
    elapsed = time.perf_counter() - start

    base, reg = np.mean(oa[0.0]), np.mean(oa[2.0])
    wins = sum(b > a for a, b in zip(oa[0.0], oa[2.0]))
    mean_ok = reg >= base - 0.002
    wins_ok = wins >= 3
    time_ok = elapsed < 30 * 60
    ok = mean_ok and wins_ok and time_ok
    per_seed = ", ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(oa[0.0], oa[2.0]))
    record(
        7,
        "direction of effect",
        ok,
        f"mean OA lambda=0 {base:.4f}, lambda=2 {reg:.4f}, lambda=2 ahead in {wins}/5 seeds, "
        f"per seed (0/2) {per_seed}, {elapsed / 60:.1f} min",
    )
    assert ok


# ------------------------------------------------------------------ 8


def test_criterion_08_commutation_and_windows():
    rng = np.random.default_rng(108)
    flip_failures = 0
    flip_cases = 0
    for _ in range(120):
        classes = int(rng.integers(2, 6))
        h, w = rng.integers(3, 33, size=2)
        data = rng.integers(0, classes, size=(h, w))
        data[rng.random((h, w)) < 0.05] = VOID
        mask = LabelMask(data, classes)
        params = SdtParams(classes, clip=float(rng.integers(1, 12)))
        stack = class_sdt_stack(mask, params).data
        for axes in ((0,), (1,), (0, 1)):
            flipped = LabelMask(np.flip(data, axes), classes)
            got = class_sdt_stack(flipped, params).data
            flip_cases += 1
            flip_failures += not np.array_equal(got, np.flip(stack, tuple(a + 1 for a in axes)))

    # augment must move image and mask through the same crop and flips
    aug_failures = 0
    for _ in range(120):
        size = int(rng.integers(8, 40))
        crop = 2 * int(rng.integers(1, size // 2 + 1))
        rows, cols = np.mgrid[0:size, 0:size]
        code = rows * size + cols
        image = np.stack([rows, cols, code]).astype(np.float64)
        mask = LabelMask(code % 7, 7)
        img, lab = augment(image, mask, rng, crop)
        same_geometry = np.array_equal(img[2].astype(np.int64) % 7, lab.data)
        rigid = np.all(np.abs(np.diff(img[0], axis=0)) == 1) and np.all(np.abs(np.diff(img[1], axis=1)) == 1)
        aug_failures += not (same_geometry and rigid and img.shape == (3, crop, crop))

    window_failures = 0
    for _ in range(150):
        window = 4 * int(rng.integers(1, 16))
        stride = window_stride(window, 0.75)
        length = int(rng.integers(window, 6 * window))
        starts = window_starts(length, window, stride)
        covered = np.zeros(length, dtype=int)
        for s in starts:
            covered[s : s + window] += 1
        gaps = np.diff(starts)
        window_failures += not (
            stride == window // 4
            and starts[0] == 0
            and starts[-1] == length - window
            and np.all(gaps > 0)
            and np.all(gaps <= stride)
            and covered.min() >= 1
        )

    # whole-image window reproduces the plain forward pass; probabilities sum to one
    infer_failures = 0
    state = init_network(3, trunk_width=4, seed=8)
    for _ in range(100):
        size = 4 * int(rng.integers(2, 6))
        image = rng.normal(size=(3, size, size))
        window = 4 * int(rng.integers(1, size // 4 + 1))
        probs, labels = sliding_window_infer(state, image, window, 0.75)
        whole, _ = sliding_window_infer(state, image, size, 0.75)
        _, z_seg, _ = forward(state, image[None])
        infer_failures += not (
            np.allclose(probs.sum(axis=0), 1.0, atol=1e-12)
            and np.allclose(whole, z_seg[0], atol=1e-12)
            and np.array_equal(labels.data, probs.argmax(axis=0))
        )

    ok = flip_failures == aug_failures == window_failures == infer_failures == 0
    record(
        8,
        "flip commutation and sliding windows",
        ok,
        f"flip {flip_cases - flip_failures}/{flip_cases}, augment {120 - aug_failures}/120, "
        f"window geometry {150 - window_failures}/150, inference {100 - infer_failures}/100",
    )
    assert ok


# ------------------------------------------------------------------ 9


def test_criterion_09_metric_identities():
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(100):
        classes = int(rng.integers(2, 12))
        counts = rng.integers(0, 1000, size=(classes, classes))
        cm = ConfusionMatrix(counts)
        f1 = f1_per_class(cm)
        per_class, _ = iou(cm)
        defined = ~np.isnan(per_class)
        worst = max(worst, float(np.max(np.abs(f1[defined] - 2 * per_class[defined] / (1 + per_class[defined])))))
    identity_ok = worst <= 1e-12

    # TP=8, FP=2, FN=2 for class 0 of a two-class matrix (rows are truth)
    example = ConfusionMatrix(np.array([[8, 2], [2, 5]]))
    f1_0 = f1_per_class(example)[0]
    iou_0 = iou(example)[0][0]
    example_ok = abs(f1_0 - 0.8) <= 1e-12 and round(iou_0, 4) == 0.6667
    ok = identity_ok and example_ok
    record(9, "metric identities", ok, f"max identity gap {worst:.1e}, example F1 {f1_0:.4f} IoU {iou_0:.4f}")
    assert ok


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism(tmp_path, capsys):
    outputs = []
    for name in ("a", "b"):
        doc = {
            "out_dir": str(tmp_path / name),
            "train": {"epochs": 3, "batch_size": 4, "crop": 16, "trunk_width": 4, "seed": 7, "lambda": 2.0},
            "sdt": {"clip": 8},
            "synth": {"size": 32, "count": 12, "radius": [3, 8], "seed": 3},
        }
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(doc))
        assert cli.cmd_train(path) == cli.EXIT_OK
        outputs.append(tmp_path / name)
    capsys.readouterr()

    a, b = outputs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "config.json")
    mismatched = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    same_listing = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "config.json")
    ok = same_listing and not mismatched and len(files) >= 6
    record(10, "determinism", ok, f"{len(files) - len(mismatched)}/{len(files)} output files byte-identical")
    assert ok
