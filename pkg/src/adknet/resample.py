"""Per-pixel kernel application and classical reference resamplers.

An LR pixel ``(x, y)`` projects to the HR centre ``((x + .5) s - .5, (y + .5) s - .5)``
and gathers a ``k x k`` window around the nearest HR pixel (ties round up).
Kernel slices are stored in image orientation: element ``[dy, dx]`` weights
the HR pixel at row offset ``dy - r`` and column offset ``dx - r`` with
``r = (k - 1) // 2``.  Out-of-range HR reads are mirrored without repeating
the edge pixel, both here and in the classical filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _record, reflect_index

METHODS = ("nearest", "box", "bicubic", "lanczos3")
BICUBIC_A = -0.5


@dataclass(frozen=True)
class ProjectedCenter:
    u: float
    v: float
    anchor_u: int
    anchor_v: int


def project(x: int, y: int, s: int, w: int | None = None, h: int | None = None) -> ProjectedCenter:
    """Map LR column ``x`` / row ``y`` to its HR centre and integer anchor."""
    if x < 0 or y < 0 or (w is not None and x >= w) or (h is not None and y >= h):
        raise IndexError(f"LR index ({x}, {y}) outside {w}x{h}")
    u = (x + 0.5) * s - 0.5
    v = (y + 0.5) * s - 0.5
    return ProjectedCenter(u, v, math.floor(u + 0.5), math.floor(v + 0.5))


def anchors(n_lr: int, s: int) -> np.ndarray:
    """Integer HR anchors of all LR positions along one axis."""
    return np.floor((np.arange(n_lr) + 0.5) * s - 0.5 + 0.5).astype(np.int64)


def _gather_patches(img: np.ndarray, s: int, k: int) -> np.ndarray:
    """``(N, H, W, C)`` image -> ``(N, h, w, C, k, k)`` windows around every anchor."""
    n, hh, ww, c = img.shape
    h, w = hh // s, ww // s
    r = (k - 1) // 2
    rows = reflect_index(anchors(h, s)[:, None] + np.arange(-r, r + 1)[None, :], hh)
    cols = reflect_index(anchors(w, s)[:, None] + np.arange(-r, r + 1)[None, :], ww)
    # (N, h, k, W, C) then (N, h, k, w, k, C)
    p = img[:, rows]
    p = p[:, :, :, cols]
    return p.transpose(0, 1, 3, 5, 2, 4)


def _check_kernel_shape(img_shape, k_shape, s):
    n, hh, ww, c = img_shape
    if hh % s or ww % s:
        raise ShapeError(f"scale {s} does not divide {hh}x{ww}")
    expected = (n, hh // s, ww // s, c)
    if len(k_shape) != 6 or k_shape[:4] != expected or k_shape[4] != k_shape[5]:
        raise ShapeError(f"kernel field {k_shape} does not match image {img_shape} at scale {s}")
    if k_shape[4] % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k_shape[4]}")


def apply_kernels(image: Tensor, kernels: Tensor, s: int) -> Tensor:
    """Weighted sum of each kernel with its HR window.

    ``image`` is ``H x W x C`` (or batched) and ``kernels`` is
    ``h x w x C x k x k`` (or batched).  Differentiable in both arguments.
    """
    single = image.ndim == 3
    img = image.data[None] if single else image.data
    ker = kernels.data[None] if kernels.ndim == 5 else kernels.data
    _check_kernel_shape(img.shape, ker.shape, s)
    k = ker.shape[-1]
    patches = _gather_patches(img, s, k)
    out = np.einsum("nhwcij,nhwcij->nhwc", patches, ker)
    if single:
        out = out[0]

    def bw(g):
        gb = g[None] if single else g
        gk = gb[..., None, None] * patches
        gi = None
        if image.requires_grad:
            gi = _scatter_patches(gb[..., None, None] * ker, img.shape, s)
            if single:
                gi = gi[0]
        if kernels.ndim == 5:
            gk = gk[0]
        return gi, gk

    return _record(out.astype(np.result_type(img, ker)), "apply_kernels", (image, kernels), bw)


def _scatter_patches(gp: np.ndarray, shape, s: int) -> np.ndarray:
    """Adjoint of :func:`_gather_patches`."""
    n, hh, ww, c = shape
    h, w = hh // s, ww // s
    k = gp.shape[-1]
    r = (k - 1) // 2
    rows = reflect_index(anchors(h, s)[:, None] + np.arange(-r, r + 1)[None, :], hh)
    cols = reflect_index(anchors(w, s)[:, None] + np.arange(-r, r + 1)[None, :], ww)
    out = np.zeros(shape, dtype=gp.dtype)
    for dy in range(k):
        for dx in range(k):
            np.add.at(out, (slice(None), rows[:, dy][:, None], cols[:, dx][None, :]), gp[..., dy, dx])
    return out


# ---------------------------------------------------------------------------
# classical filters


def cubic(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


def lanczos(t: np.ndarray, lobes: int = 3) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.where(np.abs(t) < lobes, np.sinc(t) * np.sinc(t / lobes), 0.0)


def box(t: np.ndarray) -> np.ndarray:
    return ((t >= -0.5) & (t < 0.5)).astype(np.float64)


_FILTERS = {"box": (box, 0.5), "bicubic": (cubic, 2.0), "lanczos3": (lanczos, 3.0)}


def _weight_matrix(n_out: int, n_in: int, centers: np.ndarray, fn, support: float, stretch: float) -> np.ndarray:
    """Dense ``n_out x n_in`` resampling matrix with mirrored borders; rows sum to 1."""
    mat = np.zeros((n_out, n_in))
    reach = int(math.ceil(support * stretch)) + 1
    for o, c in enumerate(centers):
        base = int(math.floor(c))
        taps = np.arange(base - reach, base + reach + 1)
        wts = fn((taps - c) / stretch)
        np.add.at(mat[o], reflect_index(taps, n_in), wts)
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def _separable(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    tmp = np.tensordot(rows, img, axes=(1, 0))
    return np.einsum("xW,yWc->yxc", cols, tmp)


def _as_image(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {arr.shape}")
    return arr


def classic_downscale(image, s: int, method: str = "bicubic") -> np.ndarray:
    """Downscale by integer ``s`` with a separable classical filter.

    Box, bicubic and Lanczos kernels are stretched by ``s`` (antialiased) and
    centred on the projected coordinate; nearest samples the anchor pixel.
    """
    img = _as_image(image)
    hh, ww, _ = img.shape
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if hh % s or ww % s:
        raise ShapeError(f"scale {s} does not divide {hh}x{ww}")
    h, w = hh // s, ww // s
    if method == "nearest":
        return img[anchors(h, s)][:, anchors(w, s)].copy()
    fn, support = _FILTERS[method]
    rows = _weight_matrix(h, hh, (np.arange(h) + 0.5) * s - 0.5, fn, support, s)
    cols = _weight_matrix(w, ww, (np.arange(w) + 0.5) * s - 0.5, fn, support, s)
    return _separable(img.astype(np.float64), rows, cols).astype(img.dtype)


def bicubic_upscale(image, s: int) -> np.ndarray:
    """Keys bicubic (a = -0.5) interpolation to ``s`` times the extents."""
    img = _as_image(image)
    h, w, _ = img.shape
    rows = _weight_matrix(h * s, h, (np.arange(h * s) + 0.5) / s - 0.5, cubic, 2.0, 1.0)
    cols = _weight_matrix(w * s, w, (np.arange(w * s) + 0.5) / s - 0.5, cubic, 2.0, 1.0)
    return _separable(img.astype(np.float64), rows, cols).astype(img.dtype)
