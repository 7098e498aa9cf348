"""Bilinear interpolation on (H, W) planes: values, analytic gradients with
respect to the plane and the sampling coordinate, and bilinear image resize.

Out-of-bounds neighbors contribute zero (zero-padding convention). At exactly
integer coordinates the spatial derivative uses the floor cell (the cell to
the lower-right).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, ShapeError
from .tensor import Tensor, as_array


class SamplePoint(NamedTuple):
    y: float
    x: float


def _check_point(y: float, x: float) -> None:
    if not (math.isfinite(y) and math.isfinite(x)):
        raise ArgumentError(f"sample point ({y}, {x}) must be finite")


def _corners(plane: np.ndarray, y: float, x: float):
    """The <=4 integer neighbors of (y, x) with their bilinear weights.

    Yields ((iy, ix), weight, value); out-of-bounds neighbors yield value 0
    and are flagged in_bounds=False.
    """
    h, w = plane.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    ly = y - y0
    lx = x - x0
    out = []
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            iy, ix = y0 + dy, x0 + dx
            inside = 0 <= iy < h and 0 <= ix < w
            val = float(plane[iy, ix]) if inside else 0.0
            out.append(((iy, ix), wy * wx, val, inside))
    return out


def bilinear_sample(plane, pt) -> float:
    """Bilinear value of a single (H, W) plane at fractional point (y, x)."""
    arr = as_array(plane)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty (H, W) plane, got shape {arr.shape}")
    y, x = pt
    _check_point(y, x)
    acc = 0.0
    for _, weight, val, _ in _corners(arr, y, x):
        acc += weight * val
    return acc


def bilinear_backward(plane, pt, upstream: float = 1.0):
    """Gradients of `upstream * bilinear_sample(plane, pt)`.

    Returns (grad_plane, grad_pt): grad_plane is a dict {(iy, ix): g} over the
    in-bounds neighbors, grad_pt is (dY, dX) from the analytic derivative of
    the bilinear surface.
    """
    arr = as_array(plane)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty (H, W) plane, got shape {arr.shape}")
    y, x = pt
    _check_point(y, x)
    y0 = math.floor(y)
    x0 = math.floor(x)
    ly = y - y0
    lx = x - x0
    corners = _corners(arr, y, x)
    grad_plane = {}
    for (iy, ix), weight, _, inside in corners:
        if inside and weight != 0.0:
            grad_plane[(iy, ix)] = upstream * weight
    (_, _, v00, _), (_, _, v01, _), (_, _, v10, _), (_, _, v11, _) = corners
    dy = (v10 - v00) * (1.0 - lx) + (v11 - v01) * lx
    dx = (v01 - v00) * (1.0 - ly) + (v11 - v10) * ly
    return grad_plane, (upstream * dy, upstream * dx)


def bilinear_resize(src, out_h: int, out_w: int):
    """Resize (N, C, H, W) with the half-pixel-center mapping
    ((i+0.5)*H/out_h - 0.5, (j+0.5)*W/out_w - 0.5), channels independent.
    """
    wrap = isinstance(src, Tensor)
    arr = as_array(src)
    if arr.ndim != 4:
        raise ShapeError(f"resize expects (N,C,H,W), got shape {arr.shape}")
    n, c, h, w = arr.shape
    if h < 1 or w < 1:
        raise ShapeError(f"source spatial extent {h}x{w} must be positive")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output extent {out_h}x{out_w} must be positive")

    # clamp to the valid range so borders replicate (constant stays constant)
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    out = _sample_grid(arr, ys, xs)
    return Tensor(out) if wrap else out.astype(arr.dtype)


def bilinear_corner_gather(xf: np.ndarray, py: np.ndarray, px: np.ndarray,
                           h: int, w: int, flat_offset: np.ndarray | None = None):
    """Gather the 4 bilinear corners for a batch of fractional positions.

    xf is a (C, M) flattened plane stack; py/px are position arrays of any
    shape. `flat_offset`, when given, is added to the per-plane flat index
    (so one call can gather across a stack of H*W planes laid out along M).
    Returns (values, weights, (y0, x0, ly, lx)) where values[c] is (C, *pos)
    with out-of-bounds corners zeroed, and weights[c] carries the matching
    bilinear weight (also zero out of bounds). Corner order:
    (0,0), (0,1), (1,0), (1,1).
    """
    dtype = xf.dtype
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    ly = (py - y0).astype(dtype)
    lx = (px - x0).astype(dtype)
    one = dtype.type(1)
    vals = []
    weights = []
    for dy in (0, 1):
        for dx in (0, 1):
            iy = y0 + dy
            ix = x0 + dx
            # float mask: multiplying by a broadcast bool array is far slower
            valid = ((iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)).astype(dtype)
            idx = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
            if flat_offset is not None:
                idx = idx + flat_offset
            wy = ly if dy else one - ly
            wx = lx if dx else one - lx
            vals.append(xf[:, idx] * valid)
            weights.append(wy * wx * valid)
    return vals, weights, (y0, x0, ly, lx)


def _sample_grid(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Vectorized zero-padded bilinear sampling on a separable (ys x xs) grid."""
    n, c, h, w = arr.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ly = ys - y0
    lx = xs - x0

    out = np.zeros((n, c, len(ys), len(xs)), dtype=np.float64)
    for dy in (0, 1):
        iy = y0 + dy
        wy = np.where(dy == 0, 1.0 - ly, ly)
        vy = (iy >= 0) & (iy < h)
        iyc = np.clip(iy, 0, h - 1)
        for dx in (0, 1):
            ix = x0 + dx
            wx = np.where(dx == 0, 1.0 - lx, lx)
            vx = (ix >= 0) & (ix < w)
            ixc = np.clip(ix, 0, w - 1)
            vals = arr[:, :, iyc[:, None], ixc[None, :]].astype(np.float64)
            weight = (wy * vy)[:, None] * (wx * vx)[None, :]
            out += vals * weight
    return out
