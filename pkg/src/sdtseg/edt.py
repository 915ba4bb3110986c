"""Exact signed Euclidean distance transforms of label masks.

Distances are measured between pixel centres on the integer lattice. The
squared distance map is computed with the separable lower-envelope method:
a 1-D pass along every row, then a 1-D pass along every column of the
result. Each pass is linear in its length, so a full transform is linear in
the number of pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from .raster import FieldStack, LabelMask

VOID_POLICIES = ("exclude-from-loss", "background")
DEFAULT_CLIP = 32.0


class EmptySiteSet(ValueError):
    """The site set of a distance transform is empty."""


@dataclass(frozen=True)
class SdtParams:
    classes: int
    clip: float = DEFAULT_CLIP
    void_policy: str = "exclude-from-loss"

    def __post_init__(self):
        if not self.clip >= 1:
            raise ValueError(f"clip must be >= 1, got {self.clip}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.void_policy not in VOID_POLICIES:
            raise ValueError(f"unknown void policy {self.void_policy!r}")


def set_threads(count: int | None = None) -> None:
    """Cap the kernel thread count; 0 or None reads SDTSEG_THREADS (0 = auto)."""
    if not count:
        count = int(os.environ.get("SDTSEG_THREADS", "0") or 0)
    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(min(count, limit) if count > 0 else limit)


@numba.njit(cache=True, nogil=True)
def _lower_envelope(f, out, v, z):
    # out[q] = min_p (q - p)^2 + f[p]; entries of f equal to +inf are not sites.
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        out[:] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


_BLOCK = 32


@numba.njit(cache=True, nogil=True)
def _row_pass(mask, i, want, work, f, g, v, z):
    cols = mask.shape[1]
    for j in range(cols):
        f[j] = 0.0 if mask[i, j] == want else np.inf
    _lower_envelope(f, g, v, z)
    for j in range(cols):
        if mask[i, j] != want:
            work[i, j] = g[j]


@numba.njit(cache=True, parallel=True)
def _edt_kernel(mask, work, out, signed):
    # work[i, j] holds the squared in-row distance from (i, j) to the nearest
    # pixel of the other value; one buffer serves both site sets because a
    # site's own f is 0. The column pass is done on blocks of columns copied
    # into contiguous scratch to keep the strided reads cache friendly.
    rows, cols = mask.shape
    for i in numba.prange(rows):
        f = np.empty(cols)
        g = np.empty(cols)
        v = np.empty(cols, dtype=np.int64)
        z = np.empty(cols + 1)
        _row_pass(mask, i, True, work, f, g, v, z)
        if signed:
            _row_pass(mask, i, False, work, f, g, v, z)
    nblocks = (cols + _BLOCK - 1) // _BLOCK
    for b in numba.prange(nblocks):
        j0 = b * _BLOCK
        width = min(_BLOCK, cols - j0)
        f_in = np.empty((width, rows))
        f_out = np.empty((width, rows))
        d_in = np.empty((width, rows))
        d_out = np.empty((width, rows))
        v = np.empty(rows, dtype=np.int64)
        z = np.empty(rows + 1)
        for i in range(rows):
            for c in range(width):
                inside = mask[i, j0 + c]
                w = work[i, j0 + c]
                f_in[c, i] = 0.0 if inside else w
                f_out[c, i] = w if inside else 0.0
        for c in range(width):
            _lower_envelope(f_in[c], d_in[c], v, z)
            if signed:
                _lower_envelope(f_out[c], d_out[c], v, z)
        for i in range(rows):
            for c in range(width):
                if not signed:
                    out[i, j0 + c] = d_in[c, i]
                elif mask[i, j0 + c]:
                    out[i, j0 + c] = np.sqrt(d_out[c, i])
                else:
                    out[i, j0 + c] = -np.sqrt(d_in[c, i])


def squared_edt_1d(f) -> np.ndarray:
    """Return ``out[i] = min_j (i - j)**2 + f[j]`` in linear time.

    Non-site entries may be ``inf`` or any finite sentinel at least
    ``len(f)**2``; a sentinel is treated as an ordinary parabola offset, which
    gives the same result wherever a real site exists.
    """
    f = np.ascontiguousarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("expected a 1-D sequence")
    n = f.shape[0]
    out = np.empty(n)
    if n:
        _lower_envelope(f, out, np.empty(n, dtype=np.int64), np.empty(n + 1))
    return out


def binary_sqdist(sites: np.ndarray) -> np.ndarray:
    """Squared distance from every pixel to the nearest True pixel.

    Raises EmptySiteSet when no pixel is True.
    """
    sites = np.asarray(sites, dtype=bool)
    if sites.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {sites.shape}")
    if not sites.any():
        raise EmptySiteSet("empty site set")
    out = np.empty(sites.shape)
    _edt_kernel(sites, np.empty(sites.shape), out, False)
    return out


def _degenerate(mask: np.ndarray) -> np.ndarray | None:
    # An all-foreground grid is +inf everywhere, an all-background one -inf.
    if mask.all():
        return np.full(mask.shape, np.inf)
    if not mask.any():
        return np.full(mask.shape, -np.inf)
    return None


def signed_dt(mask: np.ndarray) -> np.ndarray:
    """Signed distance map: inside pixels get +distance to the nearest outside
    pixel, outside pixels get -distance to the nearest inside pixel."""
    mask = np.asarray(mask, dtype=bool)
    out = _degenerate(mask)
    if out is not None:
        return out
    out = np.empty(mask.shape)
    _edt_kernel(mask, np.empty(mask.shape), out, True)
    return out


@numba.njit(cache=True)
def _brute_force_kernel(mask):
    rows, cols = mask.shape
    fg = np.empty((rows * cols, 2), dtype=np.int64)
    bg = np.empty((rows * cols, 2), dtype=np.int64)
    nf = 0
    nb = 0
    for i in range(rows):
        for j in range(cols):
            if mask[i, j]:
                fg[nf, 0] = i
                fg[nf, 1] = j
                nf += 1
            else:
                bg[nb, 0] = i
                bg[nb, 1] = j
                nb += 1
    out = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            sites = bg if mask[i, j] else fg
            count = nb if mask[i, j] else nf
            best = rows * rows + cols * cols
            for k in range(count):
                dy = i - sites[k, 0]
                dx = j - sites[k, 1]
                d = dy * dy + dx * dx
                if d < best:
                    best = d
            dist = np.sqrt(np.float64(best))
            out[i, j] = dist if mask[i, j] else -dist
    return out


def brute_force_sdt(mask: np.ndarray) -> np.ndarray:
    """Signed distance map by exhaustive pairwise search, O(N^2) in pixels."""
    mask = np.asarray(mask, dtype=bool)
    out = _degenerate(mask)
    if out is not None:
        return out
    return _brute_force_kernel(np.ascontiguousarray(mask))


def hardtanh(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def class_masks(mask: LabelMask) -> np.ndarray:
    """(C, H, W) boolean one-hot of the mask; void pixels are in no class."""
    return mask.data[None, :, :] == np.arange(mask.classes)[:, None, None]


def class_sdt_stack(mask: LabelMask, params: SdtParams | None = None) -> FieldStack:
    """Per-class signed distance maps, divided by the clip radius and
    saturated to [-1, 1]. Void pixels count as background for every class."""
    if params is None:
        params = SdtParams(classes=mask.classes)
    if params.classes != mask.classes:
        raise ValueError(f"params expect {params.classes} classes, mask has {mask.classes}")
    onehot = class_masks(mask)
    stack = np.empty(onehot.shape)
    for k in range(mask.classes):
        stack[k] = hardtanh(signed_dt(onehot[k]) / params.clip)
    return FieldStack(stack)
