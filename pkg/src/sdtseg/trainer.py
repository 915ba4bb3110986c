"""Training loop, learning-rate schedule, class balancing, augmentation and
sliding-window inference."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .edt import DEFAULT_CLIP, SdtParams, class_sdt_stack
from .metrics import ConfusionMatrix, accumulate, overall_accuracy
from .network import (
    Divergence,
    LossInputs,
    NetworkState,
    backward,
    forward,
    init_network,
    loss,
    sgd_step,
)
from .raster import VOID, LabelMask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 10
    lr: float = 0.01
    lr_milestones: tuple[int, ...] = (25, 45)
    weight_decay: float = 0.0005
    lam: float = 2.0
    clip: float = DEFAULT_CLIP
    crop: int = 64
    seed: int = 0
    balance: bool = False
    trunk_width: int = 32
    void_policy: str = "exclude-from-loss"
    val_every: int = 1
    eval_overlap: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(sorted(self.lr_milestones)))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.lam < 0:
            raise ValueError("lr, weight_decay and lambda must be >= 0")
        if self.crop < 2 or self.crop % 2:
            raise ValueError("crop must be an even number >= 2")
        if self.val_every < 0:
            raise ValueError("val_every must be >= 0")
        if not 0 <= self.eval_overlap < 1:
            raise ValueError("eval_overlap must be in [0, 1)")
        SdtParams(classes=2, clip=self.clip, void_policy=self.void_policy)


@dataclass
class Dataset:
    train_images: np.ndarray
    train_masks: list[LabelMask]
    val_images: np.ndarray
    val_masks: list[LabelMask]

    def __post_init__(self):
        if len(self.train_images) == 0 or len(self.train_images) != len(self.train_masks):
            raise ValueError("training set must be non-empty with one mask per image")
        if len(self.val_images) != len(self.val_masks):
            raise ValueError("validation set needs one mask per image")

    @property
    def classes(self) -> int:
        return self.train_masks[0].classes


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: NetworkState, epoch: int):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Base rate divided by 10 for every milestone already reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.lr / 10**passed


def median_frequency_weights(masks: Sequence[LabelMask], classes: int) -> np.ndarray:
    """weight[c] = median(freq) / freq[c], frequencies over non-void pixels.

    Absent classes get weight 0 and are left out of the median.
    """
    counts = np.zeros(classes, dtype=np.int64)
    for m in masks:
        labels = m.data[m.data != VOID]
        counts += np.bincount(labels, minlength=classes)[:classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("all pixels are void")
    freq = counts / total
    present = counts > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} absent; weight set to 0", stacklevel=2)
    median = np.median(freq[present])
    return np.divide(median, freq, out=np.zeros(classes), where=present)


def augment(image: np.ndarray, mask: LabelMask, rng: np.random.Generator, crop: int, flip_p: float = 0.5):
    """Random crop, then independent vertical and horizontal flips.

    The same geometry is applied to image (3, H, W) and mask.
    """
    _, h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    img = image[:, y0 : y0 + crop, x0 : x0 + crop]
    lab = mask.data[y0 : y0 + crop, x0 : x0 + crop]
    if rng.random() < flip_p:
        img, lab = img[:, ::-1], lab[::-1]
    if rng.random() < flip_p:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    return np.ascontiguousarray(img), LabelMask(lab, mask.classes, mask.void_index)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is clamped to the border."""
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def window_stride(window: int, overlap: float) -> int:
    return max(1, int(round(window * (1.0 - overlap))))


def sliding_window_infer(state: NetworkState, image: np.ndarray, window: int, overlap: float = 0.75, batch: int = 16):
    """Average softmax outputs over overlapping windows.

    Returns ``(probabilities (C, H, W), LabelMask of the argmax)``. Ties in the
    argmax go to the lowest class index.
    """
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    _, h, w = image.shape
    if window > h or window > w:
        raise ValueError(f"window {window} larger than image {h}x{w}")
    stride = window_stride(window, overlap)
    boxes = [(y, x) for y in window_starts(h, window, stride) for x in window_starts(w, window, stride)]
    acc = np.zeros((state.classes, h, w))
    hits = np.zeros((h, w))
    for i in range(0, len(boxes), batch):
        chunk = boxes[i : i + batch]
        crops = np.stack([image[:, y : y + window, x : x + window] for y, x in chunk])
        _, z_seg, _ = forward(state, crops)
        for (y, x), probs in zip(chunk, z_seg):
            acc[:, y : y + window, x : x + window] += probs
            hits[y : y + window, x : x + window] += 1
    probs = acc / hits
    return probs, LabelMask(probs.argmax(axis=0), state.classes)


def evaluate(state: NetworkState, images, masks, window: int | None = None, overlap: float = 0.75) -> ConfusionMatrix:
    """Confusion matrix over a set; ``window=None`` runs each image whole."""
    cm = ConfusionMatrix.empty(state.classes)
    for image, mask in zip(images, masks):
        if window is None:
            _, z_seg, _ = forward(state, image)
            pred = z_seg.argmax(axis=0)
        else:
            pred = sliding_window_infer(state, image, window, overlap)[1].data
        cm = accumulate(cm, mask, pred)
    return cm


def make_batch(config: TrainConfig, dataset: Dataset, indices, rng: np.random.Generator):
    params = SdtParams(dataset.classes, config.clip, config.void_policy)
    images, labels, dists = [], [], []
    for i in indices:
        img, m = augment(dataset.train_images[i], dataset.train_masks[i], rng, config.crop)
        images.append(img)
        labels.append(m.data)
        dists.append(class_sdt_stack(m, params).data)
    return np.stack(images), np.stack(labels), np.stack(dists)


def epoch_batches(config: TrainConfig, n: int, epoch: int):
    """Index batches for one epoch, a pure function of (seed, epoch)."""
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def _run_epoch(config, dataset, state, weights, epoch, step):
    lr = lr_at(epoch, config)
    sums = np.zeros(3)
    batches = epoch_batches(config, len(dataset.train_images), epoch)
    for b, indices in enumerate(batches):
        rng = np.random.default_rng([config.seed, epoch, b])
        images, y_seg, y_dist = make_batch(config, dataset, indices, rng)
        z_dist, z_seg, cache = forward(state, images)
        inputs = LossInputs(z_seg, z_dist, y_seg, y_dist, weights, config.lam, config.void_policy)
        value = loss(inputs)
        if not np.isfinite(value.total):
            raise Divergence(f"non-finite loss at step {step}")
        state = sgd_step(state, backward(state, cache, inputs), lr, config.weight_decay)
        sums += value[:3]
        step += 1
    total, nll, l1 = sums / len(batches)
    row = {"epoch": epoch, "step": step, "lr": lr, "nll": nll, "l1": l1, "total": total, "val_oa": None}
    validate = config.val_every and ((epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs)
    if validate and len(dataset.val_images):
        row["val_oa"] = overall_accuracy(evaluate(state, dataset.val_images, dataset.val_masks))
    log.info("epoch %d lr %g total %.5f nll %.5f l1 %.5f val_oa %s", epoch, lr, total, nll, l1, row["val_oa"])
    return state, row, step


@dataclass
class TrainResult:
    state: NetworkState
    log: list[dict] = field(default_factory=list)
    class_weights: np.ndarray | None = None


def train(
    config: TrainConfig,
    dataset: Dataset,
    on_epoch: Callable[[NetworkState, dict], None] | None = None,
) -> TrainResult:
    """Train from a seeded initialization; one crop per training image per epoch.

    ``on_epoch`` is called after each epoch with the state and its log row.
    Raises TrainingDiverged, carrying the last good state, if the loss or a
    gradient stops being finite.
    """
    classes = dataset.classes
    state = init_network(classes, config.trunk_width, config.seed)
    if config.balance:
        weights = median_frequency_weights(dataset.train_masks, classes)
    else:
        weights = np.ones(classes)
    result = TrainResult(state, [], weights)
    step = 0
    for epoch in range(config.epochs):
        try:
            state, row, step = _run_epoch(config, dataset, result.state, weights, epoch, step)
        except Divergence as exc:
            # result.state is the state checkpointed after the previous epoch
            raise TrainingDiverged(f"epoch {epoch}: {exc}", result.state, epoch) from exc
        result.log.append(row)
        result.state = state
        if on_epoch is not None:
            on_epoch(state, row)
    return result
