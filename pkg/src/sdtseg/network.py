"""Small fully convolutional network with a cascaded distance head.

The trunk is a short encoder-decoder. Its features go to a 1x1 convolution
that regresses one normalized signed distance map per class through a
hardtanh. The distance maps are concatenated back onto the trunk features
and a second 1x1 convolution followed by a softmax gives class
probabilities. The classification loss therefore also trains the distance
head.

Public tensors are (C, H, W) or batched (N, C, H, W); computation runs
channels-last in float64. Forward and backward are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numba
import numpy as np

from .raster import VOID

PROB_FLOOR = 1e-12

LAYER_KINDS = ("conv", "relu", "maxpool2", "upsample2", "hardtanh", "softmax", "concat")


class Divergence(RuntimeError):
    """Raised when a non-finite value reaches the optimizer."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            kh, kw = self.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("conv kernels must be odd-sized")
            if kh != kw:
                raise ValueError("conv kernels must be square")
            if self.padding != kh // 2:
                raise ValueError("conv padding must be kernel // 2")
            if self.stride < 1:
                raise ValueError("stride must be positive")


def conv(name: str, in_ch: int, out_ch: int, k: int = 3) -> LayerSpec:
    return LayerSpec("conv", name, in_ch, out_ch, (k, k), 1, k // 2)


def default_trunk(width: int, in_ch: int = 3) -> tuple[LayerSpec, ...]:
    return (
        conv("trunk.0", in_ch, width),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        conv("trunk.1", width, width),
        LayerSpec("relu"),
        LayerSpec("upsample2"),
        conv("trunk.2", width, width),
        LayerSpec("relu"),
    )


@dataclass(frozen=True)
class NetworkState:
    """Topology plus parameters. Treat as a value: updates return a copy."""

    classes: int
    trunk: tuple[LayerSpec, ...]
    params: dict[str, np.ndarray] = field(repr=False)
    seed: int = 0

    @property
    def trunk_width(self) -> int:
        return [s for s in self.trunk if s.kind == "conv"][-1].out_ch

    @property
    def in_channels(self) -> int:
        return self.trunk[0].in_ch

    @property
    def sdt_head(self) -> LayerSpec:
        return conv("sdt_head", self.trunk_width, self.classes, 1)

    @property
    def fusion(self) -> LayerSpec:
        return conv("fusion", self.trunk_width + self.classes, self.classes, 1)

    def conv_specs(self) -> list[LayerSpec]:
        return [s for s in self.trunk if s.kind == "conv"] + [self.sdt_head, self.fusion]

    def with_params(self, params: dict[str, np.ndarray]) -> NetworkState:
        return replace(self, params=params)


def param_shapes(state: NetworkState) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for spec in state.conv_specs():
        kh, kw = spec.kernel
        shapes[spec.name + ".w"] = (spec.out_ch, spec.in_ch, kh, kw)
        shapes[spec.name + ".b"] = (spec.out_ch,)
    return shapes


def init_network(classes: int, trunk_width: int = 32, seed: int = 0, in_channels: int = 3) -> NetworkState:
    """He-normal weights (variance 2 / fan_in), zero biases, drawn in layer order."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if trunk_width < 4:
        raise ValueError("trunk_width must be >= 4")
    state = NetworkState(classes, default_trunk(trunk_width, in_channels), {}, seed)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(state).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            params[name] = np.zeros(shape)
    return state.with_params(params)


def state_from_tensors(tensors: dict[str, np.ndarray], seed: int = 0) -> NetworkState:
    """Rebuild a default-topology network from named weight tensors."""
    try:
        w0 = tensors["trunk.0.w"]
        classes = tensors["sdt_head.b"].shape[0]
    except KeyError as exc:
        raise ValueError(f"missing tensor {exc.args[0]}") from None
    state = NetworkState(classes, default_trunk(w0.shape[0], w0.shape[1]), {}, seed)
    expected = param_shapes(state)
    if set(tensors) != set(expected):
        raise ValueError(f"tensor names {sorted(tensors)} do not match {sorted(expected)}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
    return state.with_params({k: np.asarray(tensors[k], dtype=np.float64) for k in expected})


# ------------------------------------------------------------------ layers
#
# Activations are (N, H, W, C). Each *_forward returns (out, cache).


def _weight_matrix(w):
    # columns are laid out (kh, kw, in_ch) so the im2col copies stay contiguous
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _out_size(n, stride):
    return (n - 1) // stride + 1


@numba.njit(cache=True)
def _im2col_kernel(x, kh, kw, stride):
    # zero-padded patches of one (H, W, C) image, one row per output pixel
    h, wd, ci = x.shape
    p, q = kh // 2, kw // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = np.zeros((ho * wo, kh * kw * ci))
    for i in range(ho):
        for j in range(wo):
            row = i * wo + j
            for a in range(kh):
                y = i * stride + a - p
                if y < 0 or y >= h:
                    continue
                for c in range(kw):
                    xx = j * stride + c - q
                    if xx < 0 or xx >= wd:
                        continue
                    base = (a * kw + c) * ci
                    for k in range(ci):
                        cols[row, base + k] = x[y, xx, k]
    return cols


def _im2col(x, kh, kw, stride):
    """Patch matrix of a single image x of shape (1, H, W, C)."""
    if kh == 1:
        return x[0, ::stride, ::stride].reshape(-1, x.shape[-1])
    return _im2col_kernel(np.ascontiguousarray(x[0]), kh, kw, stride)


# Images are processed one at a time so the column buffer stays in cache;
# backward rebuilds the columns rather than keeping them alive.
def conv_forward(x, w, b, stride=1):
    co, ci, kh, kw = w.shape
    n, h, wd, _ = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    wm = _weight_matrix(w).T
    out = np.empty((n, ho, wo, co))
    for i in range(n):
        out[i] = (_im2col(x[i : i + 1], kh, kw, stride) @ wm + b).reshape(ho, wo, co)
    return out, (x, w, stride)


def conv_backward(dout, cache, need_dx=True):
    x, w, stride = cache
    co, ci, kh, kw = w.shape
    n, h, wd, _ = x.shape
    ho, wo = dout.shape[1:3]
    wm = _weight_matrix(w)
    # stride 1: the input gradient is a correlation of dout with the flipped,
    # transposed kernel, which reuses the cache-friendly im2col path
    flipped = _weight_matrix(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).T
    p = kh // 2
    dwm = np.zeros_like(wm)
    dx = np.empty_like(x) if need_dx else None
    for i in range(n):
        d2 = dout[i].reshape(-1, co)
        dwm += d2.T @ _im2col(x[i : i + 1], kh, kw, stride)
        if not need_dx:
            continue
        if stride == 1:
            dx[i] = (_im2col(dout[i : i + 1], kh, kw, 1) @ flipped).reshape(h, wd, ci)
            continue
        dcols = (d2 @ wm).reshape(ho, wo, kh, kw, ci)
        dxp = np.zeros((h + 2 * p, wd + 2 * p, ci))
        for a in range(kh):
            for c in range(kw):
                dxp[a : a + stride * ho : stride, c : c + stride * wo : stride] += dcols[:, :, a, c]
        dx[i] = dxp[p : p + h, p : p + wd]
    dw = dwm.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
    return dx, dw, dout.reshape(-1, co).sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def hardtanh_forward(x):
    return np.clip(x, -1.0, 1.0), np.abs(x) < 1.0


def hardtanh_backward(dout, cache):
    return dout * cache


def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    # first maximum wins, so gradients route to exactly one input
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    n, h, w, c = shape
    grad = np.zeros(idx.shape + (4,))
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return grad.reshape(shape)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2), None


def upsample2_backward(dout, cache):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ----------------------------------------------------------------- network


class Cache(NamedTuple):
    trunk: list
    features: np.ndarray
    sdt_conv: tuple
    sdt_act: np.ndarray
    fusion_conv: tuple
    z_seg: np.ndarray
    batched: bool


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def forward(state: NetworkState, image: np.ndarray):
    """Run the network on a (3, H, W) image or a (N, 3, H, W) batch.

    Returns ``(z_dist, z_seg, cache)`` with the same batching as the input.
    """
    image = np.asarray(image, dtype=np.float64)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != state.in_channels:
        raise ValueError(f"expected (N, {state.in_channels}, H, W) input, got {image.shape}")
    if image.shape[2] % 2 or image.shape[3] % 2:
        raise ValueError(f"H and W must be even, got {image.shape[2:]}")
    p = state.params
    x = _to_nhwc(image)
    trunk_cache = []
    for spec in state.trunk:
        if spec.kind == "conv":
            x, c = conv_forward(x, p[spec.name + ".w"], p[spec.name + ".b"], spec.stride)
        elif spec.kind == "relu":
            x, c = relu_forward(x)
        elif spec.kind == "maxpool2":
            x, c = maxpool2_forward(x)
        elif spec.kind == "upsample2":
            x, c = upsample2_forward(x)
        else:
            raise ValueError(f"layer kind {spec.kind!r} not allowed in the trunk")
        trunk_cache.append(c)
    features = x
    pre, sdt_conv = conv_forward(features, p["sdt_head.w"], p["sdt_head.b"])
    z_dist, sdt_act = hardtanh_forward(pre)
    fused = np.concatenate([features, z_dist], axis=-1)
    logits, fusion_conv = conv_forward(fused, p["fusion.w"], p["fusion.b"])
    z_seg = softmax(logits)
    cache = Cache(trunk_cache, features, sdt_conv, sdt_act, fusion_conv, z_seg, batched)
    z_dist, z_seg = _to_nchw(z_dist), _to_nchw(z_seg)
    if not np.isfinite(z_seg).all():
        raise Divergence("non-finite activations in forward pass")
    if not batched:
        return z_dist[0], z_seg[0], cache
    return z_dist, z_seg, cache


# -------------------------------------------------------------------- loss


@dataclass
class LossInputs:
    """Everything the combined loss needs.

    ``y_seg`` holds class indices with ``VOID`` for unlabeled pixels. Void
    pixels never enter the classification term; they enter the distance term
    only when ``void_policy`` is ``"background"``.
    """

    z_seg: np.ndarray
    z_dist: np.ndarray
    y_seg: np.ndarray
    y_dist: np.ndarray
    class_weights: np.ndarray | None = None
    lam: float = 2.0
    void_policy: str = "exclude-from-loss"

    def __post_init__(self):
        self.z_seg = np.asarray(self.z_seg, dtype=np.float64)
        self.z_dist = np.asarray(self.z_dist, dtype=np.float64)
        self.y_seg = np.asarray(self.y_seg)
        self.y_dist = np.asarray(self.y_dist, dtype=np.float64)
        if self.z_seg.ndim == 3:
            self.z_seg, self.z_dist = self.z_seg[None], self.z_dist[None]
            self.y_seg, self.y_dist = self.y_seg[None], self.y_dist[None]
        classes = self.z_seg.shape[1]
        if self.class_weights is None:
            self.class_weights = np.ones(classes)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if not (self.z_seg.shape == self.z_dist.shape == self.y_dist.shape):
            raise ValueError("z_seg, z_dist and y_dist shapes differ")
        if self.y_seg.shape != self.z_seg.shape[:1] + self.z_seg.shape[2:]:
            raise ValueError("y_seg shape does not match predictions")
        if self.class_weights.shape != (classes,) or (self.class_weights < 0).any():
            raise ValueError("class_weights must be C non-negative reals")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def classes(self) -> int:
        return self.z_seg.shape[1]

    @property
    def labelled(self) -> np.ndarray:
        return self.y_seg != VOID

    @property
    def dist_mask(self) -> np.ndarray:
        if self.void_policy == "background":
            return np.ones(self.y_seg.shape, dtype=bool)
        return self.labelled


class Loss(NamedTuple):
    total: float
    nll: float
    l1: float
    clamped: int = 0


def _picked(inputs: LossInputs):
    lab = inputs.labelled
    y = np.where(lab, inputs.y_seg, 0).astype(np.int64)
    p = np.take_along_axis(inputs.z_seg, y[:, None], axis=1)[:, 0]
    return lab, y, p


def loss(inputs: LossInputs) -> Loss:
    """Weighted NLL plus ``lam`` times the weighted L1 distance error.

    Both terms are means: NLL over labelled pixels, L1 over pixels and
    channels. Class weights multiply each term inside the mean.
    """
    lab, y, p = _picked(inputs)
    count = lab.sum()
    w = inputs.class_weights
    clamped = int(((p < PROB_FLOOR) & lab).sum())
    if count:
        nll = float((w[y] * -np.log(np.maximum(p, PROB_FLOOR)))[lab].sum() / count)
    else:
        nll = 0.0
    dm = inputs.dist_mask
    dcount = dm.sum() * inputs.classes
    if dcount:
        err = np.abs(inputs.z_dist - inputs.y_dist) * w[None, :, None, None]
        l1 = float(err.sum(axis=1)[dm].sum() / dcount)
    else:
        l1 = 0.0
    return Loss(nll + inputs.lam * l1, nll, l1, clamped)


def loss_gradients(inputs: LossInputs):
    """Gradients of the total loss w.r.t. the fusion logits and z_dist (NCHW)."""
    lab, y, p = _picked(inputs)
    count = lab.sum()
    w = inputs.class_weights
    scale = np.where(lab & (p >= PROB_FLOOR), w[y], 0.0) / max(count, 1)
    dlogits = inputs.z_seg * scale[:, None]
    np.put_along_axis(
        dlogits, y[:, None], np.take_along_axis(dlogits, y[:, None], axis=1) - scale[:, None], axis=1
    )
    dm = inputs.dist_mask
    dcount = max(dm.sum() * inputs.classes, 1)
    ddist = np.sign(inputs.z_dist - inputs.y_dist) * w[None, :, None, None] * dm[:, None]
    ddist *= inputs.lam / dcount
    return dlogits, ddist


def backward(state: NetworkState, cache: Cache, inputs: LossInputs) -> dict[str, np.ndarray]:
    """Exact gradients of ``loss(inputs).total`` for every parameter."""
    dlogits, ddist = loss_gradients(inputs)
    grads = {}
    dfused, grads["fusion.w"], grads["fusion.b"] = conv_backward(_to_nhwc(dlogits), cache.fusion_conv)
    width = cache.features.shape[-1]
    dfeat = dfused[..., :width]
    # the distance head gets gradient from the L1 term and from the fusion
    dz = dfused[..., width:] + _to_nhwc(ddist)
    dpre = hardtanh_backward(dz, cache.sdt_act)
    dx, grads["sdt_head.w"], grads["sdt_head.b"] = conv_backward(dpre, cache.sdt_conv)
    dx = dx + dfeat
    for i in reversed(range(len(state.trunk))):
        spec, c = state.trunk[i], cache.trunk[i]
        if spec.kind == "conv":
            dx, grads[spec.name + ".w"], grads[spec.name + ".b"] = conv_backward(dx, c, need_dx=i > 0)
        elif spec.kind == "relu":
            dx = relu_backward(dx, c)
        elif spec.kind == "maxpool2":
            dx = maxpool2_backward(dx, c)
        elif spec.kind == "upsample2":
            dx = upsample2_backward(dx, c)
    return grads


def sgd_step(state: NetworkState, grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> NetworkState:
    """Plain SGD with L2 weight decay on weights only (biases are exempt)."""
    if set(grads) != set(state.params):
        raise ValueError("gradient layout does not match parameters")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise Divergence(f"non-finite gradient in {name}")
    params = {}
    for name, w in state.params.items():
        g = grads[name]
        if name.endswith(".w") and weight_decay:
            g = g + weight_decay * w
        params[name] = w - lr * g
    return state.with_params(params)
