"""Modulated deformable RoI pooling: y(k) = sum_j x(p_kj + dp_k) * dm_k / n_k.

Each RoI is divided into bins_h x bins_w bins; a bin averages n*n bilinear
samples placed at fractional positions (j+0.5)/n along each bin axis, shifted
by a per-bin learned offset and scaled by a per-bin modulation scalar. The
sibling branch (`roi_branch_forward`) produces those values from the plainly
pooled RoI features: two 1024-D fc layers with a ReLU between them, then an
fc to 3K outputs whose first 2K entries are offsets normalized by the RoI
height/width and whose last K pass through a sigmoid.

RoI coordinates are continuous feature-map pixels, both edges inclusive; no
rounding anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deform_conv import sigmoid
from .errors import ArgumentError, ShapeError
from .sampling import bilinear_corner_gather
from .tensor import as_array


@dataclass(frozen=True)
class RoI:
    batch_index: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ArgumentError(f"degenerate RoI extents: {self}")

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.y1 + self.y2), 0.5 * (self.x1 + self.x2))


@dataclass(frozen=True)
class PoolSpec:
    """bins_h x bins_w bins (K total), samples x samples grid points per bin."""

    bins_h: int
    bins_w: int
    samples: int = 2

    def __post_init__(self):
        if self.bins_h < 1 or self.bins_w < 1 or self.samples < 1:
            raise ShapeError(f"bins and samples must be >= 1: {self}")

    @property
    def k(self) -> int:
        return self.bins_h * self.bins_w

    @property
    def n_k(self) -> int:
        return self.samples * self.samples


@dataclass
class BinField:
    """Per-RoI learned state: offsets (2K,) as absolute feature-map pixels in
    (dy_k, dx_k) pairs, modulation (K,) in [0, 1].
    """

    offsets: np.ndarray
    modulation: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.modulation = np.asarray(self.modulation, dtype=np.float64)
        if self.offsets.ndim != 1 or self.offsets.size % 2 != 0:
            raise ShapeError(f"offsets must be a flat (2K,) vector, got {self.offsets.shape}")
        if self.modulation.shape != (self.offsets.size // 2,):
            raise ShapeError("modulation must have K entries matching offsets")
        if self.modulation.size and (self.modulation.min() < 0 or self.modulation.max() > 1):
            raise ArgumentError("modulation values must lie in [0, 1]")
        if not np.isfinite(self.offsets).all():
            raise ArgumentError("offsets must be finite")

    @staticmethod
    def identity(k: int, modulation: float = 1.0) -> "BinField":
        return BinField(np.zeros(2 * k), np.full(k, modulation))


def _grid_positions(roi: RoI, spec: PoolSpec) -> tuple[np.ndarray, np.ndarray]:
    """(K, n_k) sampling positions p_kj before the learned offset is added."""
    bh = roi.height / spec.bins_h
    bw = roi.width / spec.bins_w
    n = spec.samples
    frac = (np.arange(n, dtype=np.float64) + 0.5) / n
    by = np.arange(spec.bins_h, dtype=np.float64)
    bx = np.arange(spec.bins_w, dtype=np.float64)
    sy = roi.y1 + (by[:, None] + frac[None, :]) * bh  # (bins_h, n)
    sx = roi.x1 + (bx[:, None] + frac[None, :]) * bw  # (bins_w, n)
    py = np.broadcast_to(sy[:, None, :, None], (spec.bins_h, spec.bins_w, n, n))
    px = np.broadcast_to(sx[None, :, None, :], (spec.bins_h, spec.bins_w, n, n))
    return py.reshape(spec.k, spec.n_k), px.reshape(spec.k, spec.n_k)


def _check_pool_args(x, rois, spec: PoolSpec, fields):
    x = as_array(x)
    if x.ndim != 4:
        raise ShapeError(f"input must be (N,C,H,W), got {x.shape}")
    if len(fields) != len(rois):
        raise ShapeError(f"{len(fields)} bin fields for {len(rois)} RoIs")
    for roi in rois:
        if not 0 <= roi.batch_index < x.shape[0]:
            raise ArgumentError(f"RoI batch index {roi.batch_index} outside batch of {x.shape[0]}")
    for f in fields:
        if f.modulation.size != spec.k:
            raise ShapeError(f"bin field has {f.modulation.size} bins, spec has {spec.k}")
    return x


def _pool_geometry(x: np.ndarray, rois: list[RoI], spec: PoolSpec, fields: list[BinField]):
    """Stacked (R, K, n_k) sampling positions, per-RoI plane offsets, and the
    (C, N*H*W) plane stack for one shared gather across RoIs.
    """
    n, c, h, w = x.shape
    r = len(rois)
    py = np.empty((r, spec.k, spec.n_k), dtype=np.float64)
    px = np.empty((r, spec.k, spec.n_k), dtype=np.float64)
    for i, (roi, f) in enumerate(zip(rois, fields)):
        gy, gx = _grid_positions(roi, spec)
        py[i] = gy + f.offsets[0::2, None]
        px[i] = gx + f.offsets[1::2, None]
    plane_off = np.array([roi.batch_index for roi in rois], dtype=np.int64) * (h * w)
    if n == 1:
        xf = x.reshape(c, h * w)
    else:
        xf = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    mods = np.stack([f.modulation for f in fields]) if fields else np.zeros((0, spec.k))
    return xf, py, px, plane_off[:, None, None], mods


def mdpool_forward(x, rois: list[RoI], spec: PoolSpec, fields: list[BinField]) -> np.ndarray:
    """Pooled output (R, C, bins_h, bins_w)."""
    x = _check_pool_args(x, rois, spec, fields)
    _, c, h, w = x.shape
    if not rois:
        return np.zeros((0, c, spec.bins_h, spec.bins_w), dtype=x.dtype)
    xf, py, px, plane_off, mods = _pool_geometry(x, rois, spec, fields)
    vals, weights, _ = bilinear_corner_gather(xf, py, px, h, w, flat_offset=plane_off)
    sampled = vals[0] * weights[0][None]
    for v, wt in zip(vals[1:], weights[1:]):
        sampled += v * wt[None]  # (C, R, K, n_k)
    out = sampled.mean(axis=3, dtype=np.float64) * mods[None]
    return out.transpose(1, 0, 2).reshape(len(rois), c, spec.bins_h, spec.bins_w).astype(x.dtype)


def mdpool_backward(x, rois: list[RoI], spec: PoolSpec, fields: list[BinField], upstream):
    """Analytic gradients (grad_x, grad_offsets (R, 2K), grad_modulation (R, K)).

    The offset gradient sums the coordinate gradients of all n_k samples in
    the bin scaled by dm_k / n_k; the modulation gradient is the unmodulated
    bin mean contracted against the upstream gradient over channels.
    """
    x = _check_pool_args(x, rois, spec, fields)
    g = as_array(upstream)
    n, c, h, w = x.shape
    if g.shape != (len(rois), c, spec.bins_h, spec.bins_w):
        raise ShapeError(f"upstream shape {g.shape} != {(len(rois), c, spec.bins_h, spec.bins_w)}")
    grad_x = np.zeros((n, c, h, w), dtype=np.float64)
    grad_off = np.zeros((len(rois), 2 * spec.k), dtype=np.float64)
    grad_mod = np.zeros((len(rois), spec.k), dtype=np.float64)
    if not rois:
        return grad_x.astype(x.dtype), grad_off, grad_mod

    xf, py, px, plane_off, mods = _pool_geometry(x, rois, spec, fields)
    vals, weights, (y0, x0, ly, lx) = bilinear_corner_gather(xf, py, px, h, w,
                                                             flat_offset=plane_off)
    v00, v01, v10, v11 = vals
    sampled = vals[0] * weights[0][None]
    for v, wt in zip(vals[1:], weights[1:]):
        sampled += v * wt[None]  # (C, R, K, n_k)
    gk = g.reshape(len(rois), c, spec.k).transpose(1, 0, 2).astype(np.float64)  # (C, R, K)

    grad_mod[...] = (gk * sampled.mean(axis=3)).sum(axis=0)
    gs = gk[:, :, :, None] * (mods[None, :, :, None] / spec.n_k)  # dL/d(sample)
    hy = 1.0 - ly
    hx = 1.0 - lx
    dsdy = (v10 - v00) * hx[None] + (v11 - v01) * lx[None]
    dsdx = (v01 - v00) * hy[None] + (v11 - v10) * ly[None]
    grad_off[:, 0::2] = (gs * dsdy).sum(axis=(0, 3))
    grad_off[:, 1::2] = (gs * dsdx).sum(axis=(0, 3))

    # single deterministic scatter over (channel, batch plane, pixel)
    total = c * n * h * w
    chan_off = (np.arange(c, dtype=np.int64) * (n * h * w))[:, None, None, None]
    gxf = np.zeros(total, dtype=np.float64)
    for corner, wt in enumerate(weights):
        dy, dx = divmod(corner, 2)
        idx = np.clip(y0 + dy, 0, h - 1) * w + np.clip(x0 + dx, 0, w - 1) + plane_off
        flat = (chan_off + idx[None]).ravel()
        gxf += np.bincount(flat, weights=(gs * wt[None]).ravel(), minlength=total)
    grad_x[...] = gxf.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return grad_x.astype(x.dtype), grad_off, grad_mod


def aligned_pool_forward(x, rois: list[RoI], spec: PoolSpec) -> np.ndarray:
    """Plain aligned average pooling: dp = 0, dm = 1 for every bin."""
    fields = [BinField.identity(spec.k) for _ in rois]
    return mdpool_forward(x, rois, spec, fields)


def aligned_pool_backward(x, rois: list[RoI], spec: PoolSpec, upstream) -> np.ndarray:
    fields = [BinField.identity(spec.k) for _ in rois]
    grad_x, _, _ = mdpool_backward(x, rois, spec, fields, upstream)
    return grad_x


# ---------------------------------------------------------------------------
# sibling branch: plain-pooled features -> per-bin offsets and modulation
# ---------------------------------------------------------------------------

@dataclass
class Affine:
    """weight (out, in) and bias (out,) of one fully-connected layer."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"affine shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def make_roi_branch(in_dim: int, k: int, hidden: int = 1024,
                    rng: np.random.Generator | None = None):
    """Branch weights: two Gaussian(0, 0.01) hidden fc layers (default 1024-D)
    and a zero-initialized output fc of 3K values, so the initial field is
    dp = 0, dm = 0.5.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    fc1 = Affine(rng.normal(0.0, 0.01, (hidden, in_dim)), np.zeros(hidden))
    fc2 = Affine(rng.normal(0.0, 0.01, (hidden, hidden)), np.zeros(hidden))
    out = Affine(np.zeros((3 * k, hidden)), np.zeros(3 * k))
    return fc1, fc2, out


@dataclass
class RoiBranchCache:
    pooled_shape: tuple
    z0: np.ndarray
    a1: np.ndarray
    mask1: np.ndarray
    z2: np.ndarray
    modulation: np.ndarray
    roi: RoI


def roi_branch_forward(pooled, fc1: Affine, fc2: Affine, out_w: Affine, roi: RoI,
                       want_cache: bool = False):
    """Produce the BinField for one RoI from its plainly pooled features.

    The first 2K outputs are offsets normalized by the RoI extent: pair k is
    multiplied elementwise by (height, width) to give absolute pixels.
    """
    p = as_array(pooled).astype(np.float64)
    z0 = p.reshape(-1)
    if fc1.weight.shape[1] != z0.size:
        raise ShapeError(f"fc1 expects {fc1.weight.shape[1]} inputs, pooled has {z0.size}")
    if fc2.weight.shape[1] != fc1.out_dim:
        raise ShapeError("fc2 input dim != fc1 output dim")
    if out_w.weight.shape[1] != fc2.out_dim or out_w.out_dim % 3 != 0:
        raise ShapeError("output fc must take fc2 features and emit 3K values")
    k = out_w.out_dim // 3

    z1 = fc1.weight.astype(np.float64) @ z0 + fc1.bias
    mask1 = z1 > 0
    a1 = z1 * mask1
    z2 = fc2.weight.astype(np.float64) @ a1 + fc2.bias
    raw = out_w.weight.astype(np.float64) @ z2 + out_w.bias

    normalized = raw[: 2 * k]
    scale = np.empty(2 * k)
    scale[0::2] = roi.height
    scale[1::2] = roi.width
    offsets = normalized * scale
    modulation = sigmoid(raw[2 * k :])
    bin_field = BinField(offsets, modulation)
    if not want_cache:
        return bin_field
    return bin_field, RoiBranchCache(p.shape, z0, a1, mask1, z2, modulation, roi)


def roi_branch_backward(fc1: Affine, fc2: Affine, out_w: Affine, cache: RoiBranchCache,
                        grad_offsets, grad_modulation):
    """Gradients of the branch given gradients on the absolute-pixel field.

    Returns (grad_pooled, (gw1, gb1), (gw2, gb2), (gwo, gbo)).
    """
    k = out_w.out_dim // 3
    go = np.asarray(grad_offsets, dtype=np.float64)
    gm = np.asarray(grad_modulation, dtype=np.float64)
    scale = np.empty(2 * k)
    scale[0::2] = cache.roi.height
    scale[1::2] = cache.roi.width
    m = cache.modulation
    grad_raw = np.concatenate([go * scale, gm * m * (1.0 - m)])

    gwo = np.outer(grad_raw, cache.z2)
    gbo = grad_raw
    gz2 = out_w.weight.astype(np.float64).T @ grad_raw
    gw2 = np.outer(gz2, cache.a1)
    gb2 = gz2
    ga1 = fc2.weight.astype(np.float64).T @ gz2
    gz1 = ga1 * cache.mask1
    gw1 = np.outer(gz1, cache.z0)
    gb1 = gz1
    grad_pooled = (fc1.weight.astype(np.float64).T @ gz1).reshape(cache.pooled_shape)
    return grad_pooled, (gw1, gb1), (gw2, gb2), (gwo, gbo)


# ---------------------------------------------------------------------------
# RoI list files: one `batch x1 y1 x2 y2` line per RoI
# ---------------------------------------------------------------------------

def parse_roi_lines(text: str) -> list[RoI]:
    rois = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ArgumentError(f"RoI line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            b = int(parts[0])
            x1, y1, x2, y2 = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise ArgumentError(f"RoI line {lineno}: {exc}") from exc
        rois.append(RoI(b, x1, y1, x2, y2))
    return rois


def format_roi_lines(rois: list[RoI]) -> str:
    return "".join(
        f"{r.batch_index} {r.x1:.6g} {r.y1:.6g} {r.x2:.6g} {r.y2:.6g}\n" for r in rois
    )


def load_rois(path) -> list[RoI]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_roi_lines(fh.read())


def save_rois(rois: list[RoI], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_roi_lines(rois))
