"""Differentiable resizing with a scaling-constrained sampling grid.

An output pixel at target coordinate (x_t, y_t) samples the input at
(x_t / m, y_t / m) with a separable interpolation kernel, so the result
is differentiable both in the image values and in the scale factor m.
Pixel centers sit at integer coordinates, and out-of-range taps clamp to
the nearest edge pixel, which preserves constant images.

``warp`` applies the scaling map about the image center (the coordinate
origin sits at the center pixel), while ``make_grid`` exposes the bare
index-0-anchored map.  Anchoring the warp at index 0 pins the phase of
every row simultaneously, which creates strong phase-locking local minima
in scale-estimation objectives at rational scale factors; centering
breaks that degeneracy without changing the scaling constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ShapeError

# Keys cubic-convolution sharpness parameter.
BICUBIC_A = -0.5

KERNEL_KINDS = ("bilinear", "bicubic")

# Integer tap offsets relative to floor(source coordinate).
_TAPS = {"bilinear": (0, 1), "bicubic": (-1, 0, 1, 2)}


def kernel_eval(kind: str, t) -> np.ndarray | float:
    """Interpolation kernel weight at offset t (scalar or array)."""
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    x = np.abs(np.asarray(t, dtype=np.float64))
    if kind == "bilinear":
        w = np.where(x < 1.0, 1.0 - x, 0.0)
    else:
        a = BICUBIC_A
        near = (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
        far = a * (x**3 - 5.0 * x**2 + 8.0 * x - 4.0)
        w = np.where(x < 1.0, near, np.where(x < 2.0, far, 0.0))
    return w if w.ndim else float(w)


def kernel_deriv(kind: str, t) -> np.ndarray | float:
    """Derivative of the kernel in t; 0 at bilinear kinks by convention."""
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    ts = np.asarray(t, dtype=np.float64)
    x = np.abs(ts)
    s = np.sign(ts)
    if kind == "bilinear":
        d = np.where(x < 1.0, -s, 0.0)
    else:
        a = BICUBIC_A
        near = 3.0 * (a + 2.0) * x**2 - 2.0 * (a + 3.0) * x
        far = a * (3.0 * x**2 - 10.0 * x + 8.0)
        d = s * np.where(x < 1.0, near, np.where(x < 2.0, far, 0.0))
    return d if d.ndim else float(d)


@dataclass
class SamplingGrid:
    """Per-output-pixel source coordinates for a scale-constrained warp."""

    source_x: np.ndarray  # (H_out, W_out)
    source_y: np.ndarray  # (H_out, W_out)
    out_dims: tuple[int, int]  # (H_out, W_out)


def make_grid(m: float, out_dims: tuple[int, int]) -> SamplingGrid:
    """Sampling grid with source = target / m, componentwise."""
    m = float(m)
    if not (m > 0.0 and np.isfinite(m)):
        raise ValueError(f"scale factor must be positive and finite, got {m}")
    h, w = out_dims
    if h < 1 or w < 1:
        raise ShapeError(f"output dims must be positive, got {out_dims}")
    ys = np.arange(h, dtype=np.float64) / m
    xs = np.arange(w, dtype=np.float64) / m
    sx, sy = np.meshgrid(xs, ys)
    return SamplingGrid(source_x=sx, source_y=sy, out_dims=(h, w))


def _axis_matrices(kind: str, scale: float, n_out: int, n_in: int, anchor: str = "center"):
    """Dense resampling matrix R (n_out, n_in) and its derivative in scale.

    R[j, i] collects kernel weights k(p_j - t) for taps t whose clamped
    index is i, where p_j = j/scale (origin anchor) or is the same map
    taken about the image centers (center anchor).  Weights always use the
    unclamped tap offset, so rows sum to one at every phase (the clamp
    only redirects where a tap reads).  Rows are renormalized to cancel
    the ~1e-16 float residue of that sum, which makes constant images
    reproduce exactly; the derivative matrix is adjusted consistently so
    it stays the exact derivative of the forward.
    """
    j = np.arange(n_out, dtype=np.float64)
    if anchor == "center":
        c_out = (n_out - 1) / 2.0
        c_in = (n_in - 1) / 2.0
        p = c_in + (j - c_out) / scale
        dp = -(j - c_out) / (scale * scale)
    elif anchor == "origin":
        p = j / scale
        dp = -j / (scale * scale)
    else:
        raise ValueError(f"anchor must be 'center' or 'origin', got {anchor!r}")
    base = np.floor(p)
    R = np.zeros((n_out, n_in), dtype=np.float64)
    dR = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for off in _TAPS[kind]:
        t = base + off
        w = kernel_eval(kind, p - t)
        dw = kernel_deriv(kind, p - t) * dp
        idx = np.clip(t, 0, n_in - 1).astype(np.intp)
        np.add.at(R, (rows, idx), w)
        np.add.at(dR, (rows, idx), dw)
    rowsum = R.sum(axis=1, keepdims=True)
    drowsum = dR.sum(axis=1, keepdims=True)
    R /= rowsum
    dR = (dR - R * drowsum) / rowsum
    return R, dR


def _scale_pair(scale) -> tuple[Tensor, Tensor]:
    if isinstance(scale, (tuple, list)):
        if len(scale) != 2:
            raise ValueError("per-axis scale must be a (sy, sx) pair")
        sy, sx = (as_tensor(s) for s in scale)
    else:
        sy = sx = as_tensor(scale)
    for s in (sy, sx):
        if s.size != 1:
            raise ShapeError("scale factor must be a single value")
        v = s.item()
        if not (v > 0.0 and np.isfinite(v)):
            raise ValueError(f"scale factor must be positive and finite, got {v}")
    return sy, sx


def warp(
    image,
    scale,
    kernel: str = "bicubic",
    out_dims: tuple[int, int] | None = None,
    anchor: str = "center",
) -> Tensor:
    """Separable warp of an NHWC image to out_dims at the given scale.

    ``scale`` may be a float, a scalar Tensor, or a (sy, sx) pair of either;
    gradients flow into the image and into every Tensor scale.
    """
    if kernel not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kernel!r}")
    image = as_tensor(image)
    if image.data.ndim != 4:
        raise ShapeError(f"warp expects a rank-4 NHWC image, got {image.shape}")
    sy, sx = _scale_pair(scale)
    n, h, w, c = image.shape
    if out_dims is None:
        out_dims = (round_half_up(sy.item() * h), round_half_up(sx.item() * w))
    oh, ow = out_dims
    if oh < 1 or ow < 1:
        raise ShapeError(f"warp output dims must be positive, got {out_dims}")

    Ry, dRy = _axis_matrices(kernel, sy.item(), oh, h, anchor)
    Rx, dRx = _axis_matrices(kernel, sx.item(), ow, w, anchor)

    x64 = image.data.astype(np.float64, copy=False)
    mid = np.einsum("ah,nhwc->nawc", Ry, x64, optimize=True)  # rows resampled
    out = np.einsum("bw,nawc->nabc", Rx, mid, optimize=True).astype(image.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        gimg = gy = gx = None
        if image.requires_grad:
            gmid = np.einsum("bw,nabc->nawc", Rx, g64, optimize=True)
            gimg = np.einsum("ah,nawc->nhwc", Ry, gmid, optimize=True).astype(image.dtype)
        if sy.requires_grad:
            dy = np.einsum("ah,nhwc->nawc", dRy, x64, optimize=True)
            gy = np.asarray([np.sum(g64 * np.einsum("bw,nawc->nabc", Rx, dy, optimize=True))], dtype=sy.dtype)
        if sx.requires_grad:
            gx = np.asarray([np.sum(g64 * np.einsum("bw,nawc->nabc", dRx, mid, optimize=True))], dtype=sx.dtype)
        return gimg, gy, gx

    return ad._node(out, (image, sy, sx), vjp, "warp")


def round_half_up(x: float) -> int:
    """Deterministic rounding for warp target dims; ties go up."""
    return int(np.floor(x + 0.5))


@dataclass
class ResizeSpec:
    """Downscale request: factor, kernel, and the backbone stride to align to."""

    m: float | Tensor
    kernel: str = "bicubic"
    equivalent_stride: int = 1

    def __post_init__(self):
        mv = self.m.item() if isinstance(self.m, Tensor) else float(self.m)
        if not (0.0 < mv <= 1.0):
            raise ValueError(f"downscale factor must be in (0, 1], got {mv}")
        if self.equivalent_stride < 1:
            raise ValueError("equivalent_stride must be >= 1")
        if self.kernel not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kernel!r}")


@dataclass
class Downscaled:
    """resize_down output plus the original dims needed for inversion."""

    image: Tensor
    orig_dims: tuple[int, int]  # (H, W)


def resize_down(image, spec: ResizeSpec) -> Downscaled:
    """Warp down by spec.m, then crop trailing rows/cols to a stride multiple."""
    image = as_tensor(image)
    if image.data.ndim != 4:
        raise ShapeError("resize_down expects a rank-4 NHWC image")
    _, h, w, _ = image.shape
    mv = spec.m.item() if isinstance(spec.m, Tensor) else float(spec.m)
    s = spec.equivalent_stride
    oh = round_half_up(mv * h)
    ow = round_half_up(mv * w)
    ch = s * (oh // s)
    cw = s * (ow // s)
    if ch < s or cw < s or ch < 1 or cw < 1:
        raise ShapeError(
            f"input {h}x{w} too small: downscaled dims {oh}x{ow} cannot cover stride {s}"
        )
    warped = warp(image, spec.m, spec.kernel, (oh, ow))
    if (ch, cw) != (oh, ow):
        warped = ad.crop2d(warped, ch, cw)
    return Downscaled(image=warped, orig_dims=(h, w))


def resize_up(image, m, kernel: str = "bicubic", target_dims: tuple[int, int] | None = None) -> Tensor:
    """Warp with the reciprocal scale 1/m to exactly target_dims."""
    image = as_tensor(image)
    if target_dims is None:
        raise ValueError("resize_up needs the recorded original dims")
    if isinstance(m, Tensor):
        inv = ad.reciprocal(m)
    else:
        mv = float(m)
        if not (0.0 < mv <= 1.0):
            raise ValueError(f"upscale expects the original factor in (0, 1], got {mv}")
        inv = 1.0 / mv
    return warp(image, inv, kernel, target_dims)
