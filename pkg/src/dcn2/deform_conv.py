"""Modulated deformable convolution: y(p) = sum_k w_k * x(p + p_k + dp_k) * dm_k.

Two implementations share one contract: a readable per-position reference
kernel (`mdconv_forward` / `mdconv_backward`) and a vectorized one
(`*_optimized`) that gathers all bilinear corners at once and reduces with a
single matrix product per row block. Offsets and modulation come from a
sibling regular convolution (`offset_branch_forward`) with 3K output
channels, zero-initialized so training starts at dp=0, dm=0.5.

Offset channel layout is pinned for file compatibility: channel pair
(2k, 2k+1) holds (dy_k, dx_k) for tap k in row-major kernel order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import runtime
from .errors import ArgumentError, ShapeError
from .sampling import bilinear_backward, bilinear_corner_gather, bilinear_sample
from .tensor import as_array

# learning-rate multiplier carried by offset/modulation branch weights (the
# descriptor asserted by tests; applied by the optimizer in net.py)
BRANCH_LR_MULTIPLIER = 0.1


@dataclass(frozen=True)
class KernelSpec:
    """Kernel geometry: K taps enumerated row-major starting at
    (-floor(kh/2)*dil_h, -floor(kw/2)*dil_w).
    """

    kernel_h: int
    kernel_w: int
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel {self.kernel_h}x{self.kernel_w} must be >= 1")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.pad) < 0:
            raise ShapeError("stride/dilation must be >= 1 and pad >= 0")

    @property
    def k(self) -> int:
        return self.kernel_h * self.kernel_w

    def taps(self) -> np.ndarray:
        """(K, 2) array of pre-specified (dy, dx) tap displacements in pixels."""
        dh, dw = self.dilation
        tap = np.empty((self.k, 2), dtype=np.float64)
        idx = 0
        for u in range(self.kernel_h):
            for v in range(self.kernel_w):
                tap[idx, 0] = (u - self.kernel_h // 2) * dh
                tap[idx, 1] = (v - self.kernel_w // 2) * dw
                idx += 1
        return tap

    def center(self) -> tuple[int, int]:
        """Displacement from the top-left tap's lattice position to the kernel
        center p, i.e. where the base sampling position sits.
        """
        return (self.kernel_h // 2 * self.dilation[0], self.kernel_w // 2 * self.dilation[1])

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_h, self.kernel_w
        sh, sw = self.stride
        ph, pw = self.pad
        dh, dw = self.dilation
        h_out = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        w_out = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if h_out < 0 or w_out < 0:
            raise ShapeError(f"kernel does not fit input {h}x{w} with spec {self}")
        return h_out, w_out


@dataclass
class ConvWeights:
    """Main convolution weights (C_out, C_in, kh, kw) plus optional bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = as_array(self.weight)
        if self.weight.ndim != 4:
            raise ShapeError(f"weights must be 4-D, got shape {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    def check_spec(self, spec: KernelSpec, c_in: int) -> None:
        c_out, ci, kh, kw = self.weight.shape
        if ci != c_in or (kh, kw) != (spec.kernel_h, spec.kernel_w):
            raise ShapeError(
                f"weights {self.weight.shape} inconsistent with C_in={c_in}, "
                f"kernel {spec.kernel_h}x{spec.kernel_w}"
            )


@dataclass
class OffsetModulationField:
    """Learned offsets (N, 2K, H_out, W_out) and modulation (N, K, H_out, W_out).

    Channel pair (2k, 2k+1) is (dy_k, dx_k); modulation lies in [0, 1] and is
    shared across all input and output channels at each spatial location.
    """

    offsets: np.ndarray
    modulation: np.ndarray

    def __post_init__(self):
        self.offsets = as_array(self.offsets)
        self.modulation = as_array(self.modulation)
        if self.offsets.ndim != 4 or self.modulation.ndim != 4:
            raise ShapeError("offset/modulation fields must be 4-D")
        n, twok, h, w = self.offsets.shape
        if twok % 2 != 0:
            raise ShapeError(f"offset channel count {twok} must be even (2K)")
        if self.modulation.shape != (n, twok // 2, h, w):
            raise ShapeError(
                f"modulation shape {self.modulation.shape} != {(n, twok // 2, h, w)}"
            )
        if self.modulation.size and (
            self.modulation.min() < 0.0 or self.modulation.max() > 1.0
        ):
            raise ArgumentError("modulation values must lie in [0, 1]")
        if self.offsets.size and not np.isfinite(self.offsets).all():
            raise ArgumentError("offsets must be finite")

    @property
    def k(self) -> int:
        return self.offsets.shape[1] // 2

    @staticmethod
    def identity(n: int, k: int, h_out: int, w_out: int, modulation: float = 1.0,
                 dtype=np.float64) -> "OffsetModulationField":
        """dp = 0 with constant modulation (1.0 recovers a rigid convolution)."""
        return OffsetModulationField(
            np.zeros((n, 2 * k, h_out, w_out), dtype=dtype),
            np.full((n, k, h_out, w_out), modulation, dtype=dtype),
        )


def _check_mdconv_args(x, w: ConvWeights, spec: KernelSpec, field: OffsetModulationField):
    x = as_array(x)
    if x.ndim != 4:
        raise ShapeError(f"input must be (N,C,H,W), got shape {x.shape}")
    n, c_in, h, win = x.shape
    w.check_spec(spec, c_in)
    h_out, w_out = spec.out_size(h, win)
    if field.offsets.shape != (n, 2 * spec.k, h_out, w_out):
        raise ShapeError(
            f"field offsets {field.offsets.shape} != {(n, 2 * spec.k, h_out, w_out)}"
        )
    return x, n, c_in, h, win, h_out, w_out


# ---------------------------------------------------------------------------
# reference kernel: one bilinear sample at a time
# ---------------------------------------------------------------------------

def mdconv_forward(x, w: ConvWeights, spec: KernelSpec, field: OffsetModulationField) -> np.ndarray:
    x, n, c_in, h, win, h_out, w_out = _check_mdconv_args(x, w, spec, field)
    c_out = w.weight.shape[0]
    taps = spec.taps()
    cy, cx = spec.center()
    sh, sw = spec.stride
    ph, pw = spec.pad
    wk = w.weight.reshape(c_out, c_in, spec.k).astype(np.float64)

    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for i in range(h_out):
            for j in range(w_out):
                py = i * sh - ph + cy
                px = j * sw - pw + cx
                sampled = np.zeros((c_in, spec.k), dtype=np.float64)
                for k in range(spec.k):
                    sy = py + taps[k, 0] + float(field.offsets[b, 2 * k, i, j])
                    sx = px + taps[k, 1] + float(field.offsets[b, 2 * k + 1, i, j])
                    m = float(field.modulation[b, k, i, j])
                    for ci in range(c_in):
                        sampled[ci, k] = bilinear_sample(x[b, ci], (sy, sx)) * m
                out[b, :, i, j] = wk.reshape(c_out, -1) @ sampled.reshape(-1)
    if w.bias is not None:
        out += np.asarray(w.bias, dtype=np.float64)[None, :, None, None]
    return out.astype(x.dtype)


def mdconv_backward(x, w: ConvWeights, spec: KernelSpec, field: OffsetModulationField,
                    upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray, np.ndarray]:
    """Analytic gradients of the reference forward: (grad_x, grad_w, grad_bias,
    grad_offsets, grad_modulation). The offset gradient routes through the
    bilinear coordinate derivative scaled by w_k * dm_k.
    """
    x, n, c_in, h, win, h_out, w_out = _check_mdconv_args(x, w, spec, field)
    g = as_array(upstream)
    c_out = w.weight.shape[0]
    if g.shape != (n, c_out, h_out, w_out):
        raise ShapeError(f"upstream shape {g.shape} != {(n, c_out, h_out, w_out)}")
    taps = spec.taps()
    cy, cx = spec.center()
    sh, sw = spec.stride
    ph, pw = spec.pad
    wk = w.weight.reshape(c_out, c_in, spec.k).astype(np.float64)

    grad_x = np.zeros((n, c_in, h, win), dtype=np.float64)
    grad_w = np.zeros((c_out, c_in, spec.k), dtype=np.float64)
    grad_b = g.sum(axis=(0, 2, 3), dtype=np.float64) if w.bias is not None else None
    grad_off = np.zeros_like(as_array(field.offsets), dtype=np.float64)
    grad_mod = np.zeros_like(as_array(field.modulation), dtype=np.float64)

    for b in range(n):
        for i in range(h_out):
            for j in range(w_out):
                gvec = g[b, :, i, j].astype(np.float64)
                py = i * sh - ph + cy
                px = j * sw - pw + cx
                for k in range(spec.k):
                    sy = py + taps[k, 0] + float(field.offsets[b, 2 * k, i, j])
                    sx = px + taps[k, 1] + float(field.offsets[b, 2 * k + 1, i, j])
                    m = float(field.modulation[b, k, i, j])
                    # per-channel chain through the bilinear surface
                    gk = wk[:, :, k].T @ gvec  # (c_in,) = dL/d(sample*m) per channel
                    gdy = 0.0
                    gdx = 0.0
                    for ci in range(c_in):
                        val = bilinear_sample(x[b, ci], (sy, sx))
                        grad_w[:, ci, k] += gvec * val * m
                        grad_mod[b, k, i, j] += gk[ci] * val
                        gplane, (dy, dx) = bilinear_backward(x[b, ci], (sy, sx), gk[ci] * m)
                        for (iy, ix), gv in gplane.items():
                            grad_x[b, ci, iy, ix] += gv
                        gdy += dy
                        gdx += dx
                    grad_off[b, 2 * k, i, j] = gdy
                    grad_off[b, 2 * k + 1, i, j] = gdx
    return (
        grad_x.astype(x.dtype),
        grad_w.reshape(w.weight.shape).astype(x.dtype),
        None if grad_b is None else grad_b.astype(x.dtype),
        grad_off.astype(x.dtype),
        grad_mod.astype(x.dtype),
    )


# ---------------------------------------------------------------------------
# optimized kernel: corner gather + GEMM over row blocks
# ---------------------------------------------------------------------------

# element budget (C_in * K * positions) per work chunk; small problems run as
# one whole-batch chunk, large ones split into per-item row blocks
_CHUNK_BUDGET = 2_000_000


def _conv_chunks(n: int, c_in: int, k: int, h_out: int, w_out: int):
    """Tasks (n0, n1, r0, r1) covering batch x output rows."""
    if n == 0 or h_out == 0 or w_out == 0:
        return []
    if n * c_in * k * h_out * w_out <= _CHUNK_BUDGET:
        return [(0, n, 0, h_out)]
    rows = max(1, _CHUNK_BUDGET // (c_in * k * w_out))
    return [(b, b + 1, r, min(r + rows, h_out))
            for b in range(n) for r in range(0, h_out, rows)]


def _compute_dtype(x: np.ndarray) -> np.dtype:
    """float32 inputs run in single precision, everything else in double."""
    return np.dtype(np.float32) if x.dtype == np.float32 else np.dtype(np.float64)


class _ConvGeometry:
    """Shared position/gather machinery for the optimized kernels."""

    def __init__(self, x, w: ConvWeights, spec: KernelSpec, field: OffsetModulationField):
        self.x = x
        self.dtype = _compute_dtype(x)
        self.n, self.c_in, self.h, self.w_in = x.shape
        self.c_out = w.weight.shape[0]
        self.h_out, self.w_out = spec.out_size(self.h, self.w_in)
        self.spec = spec
        self.wmat = w.weight.reshape(self.c_out, -1).astype(self.dtype)
        self.bias = None if w.bias is None else np.asarray(w.bias, dtype=self.dtype)
        self.offs = as_array(field.offsets).astype(np.float64)
        self.mods = as_array(field.modulation).astype(self.dtype)
        taps = spec.taps()
        cy, cx = spec.center()
        self.base_y = np.arange(self.h_out, dtype=np.float64) * spec.stride[0] - spec.pad[0] + cy
        self.base_x = np.arange(self.w_out, dtype=np.float64) * spec.stride[1] - spec.pad[1] + cx
        self.tap_y = taps[:, 0]
        self.tap_x = taps[:, 1]

    def planes(self, n0: int, n1: int) -> np.ndarray:
        """(C, (n1-n0)*H*W) copy/view of the input planes in compute dtype."""
        if n1 - n0 == 1:
            return self.x[n0].reshape(self.c_in, -1).astype(self.dtype)
        return self.x[n0:n1].transpose(1, 0, 2, 3).reshape(self.c_in, -1).astype(self.dtype)

    def gather(self, n0: int, n1: int, r0: int, r1: int):
        """Corner values/weights for the chunk; positions are (nb, K, nr, W)."""
        k = self.spec.k
        py = (self.tap_y[None, :, None, None]
              + self.base_y[r0:r1][None, None, :, None]
              + self.offs[n0:n1, 0::2, r0:r1])
        px = (self.tap_x[None, :, None, None]
              + self.base_x[None, None, None, :]
              + self.offs[n0:n1, 1::2, r0:r1])
        nb = n1 - n0
        pr = (r1 - r0) * self.w_out
        py = py.reshape(nb, k, pr)
        px = px.reshape(nb, k, pr)
        offset = None
        if nb > 1:
            offset = (np.arange(nb, dtype=np.int64) * (self.h * self.w_in))[:, None, None]
        xf = self.planes(n0, n1)
        return xf, bilinear_corner_gather(xf, py, px, self.h, self.w_in, flat_offset=offset)


def mdconv_forward_optimized(x, w: ConvWeights, spec: KernelSpec,
                             field: OffsetModulationField, threads: int | None = None) -> np.ndarray:
    """Same contract as mdconv_forward; gathers all bilinear corners at once
    and reduces each chunk with one batched matrix product. Output writes are
    disjoint across chunks, so the result is independent of thread count.
    """
    x, n, c_in, h, win, h_out, w_out = _check_mdconv_args(x, w, spec, field)
    c_out = w.weight.shape[0]
    out = np.empty((n, c_out, h_out, w_out), dtype=x.dtype)
    if out.size == 0 or x.size == 0:
        out[...] = 0.0 if w.bias is None else np.asarray(w.bias)[None, :, None, None]
        return out
    geo = _ConvGeometry(x, w, spec, field)
    k = spec.k

    def do_chunk(task):
        n0, n1, r0, r1 = task
        nb = n1 - n0
        pr = (r1 - r0) * w_out
        _, (vals, weights, _) = geo.gather(n0, n1, r0, r1)
        sampled = vals[0] * weights[0][None]
        for v, wt in zip(vals[1:], weights[1:]):
            sampled += v * wt[None]  # (C, nb, K, PR)
        sampled *= geo.mods[n0:n1, :, r0:r1].reshape(nb, k, pr)[None]
        smod = np.ascontiguousarray(sampled.transpose(1, 0, 2, 3)).reshape(nb, c_in * k, pr)
        res = np.matmul(geo.wmat[None], smod)  # (nb, C_out, PR)
        if geo.bias is not None:
            res += geo.bias[None, :, None]
        out[n0:n1, :, r0:r1] = res.reshape(nb, c_out, r1 - r0, w_out)

    tasks = _conv_chunks(n, c_in, k, h_out, w_out)
    for _ in runtime.run_chunks(do_chunk, tasks, threads=threads, ordered=True):
        pass
    return out


def mdconv_backward_optimized(x, w: ConvWeights, spec: KernelSpec,
                              field: OffsetModulationField, upstream,
                              threads: int | None = None,
                              deterministic: bool | None = None):
    """Vectorized analytic gradients; same return signature as mdconv_backward.

    Per-chunk partial sums for grad_x/grad_w/grad_bias are reduced in chunk
    order by default; deterministic=False reduces in completion order
    (agreement within 1e-4 of the ordered result).
    """
    x, n, c_in, h, win, h_out, w_out = _check_mdconv_args(x, w, spec, field)
    g = as_array(upstream)
    c_out = w.weight.shape[0]
    if g.shape != (n, c_out, h_out, w_out):
        raise ShapeError(f"upstream shape {g.shape} != {(n, c_out, h_out, w_out)}")
    if deterministic is None:
        deterministic = runtime.deterministic()

    grad_x = np.zeros((n, c_in, h, win), dtype=np.float64)
    grad_w = np.zeros((c_out, c_in * spec.k), dtype=np.float64)
    grad_b = np.zeros(c_out, dtype=np.float64) if w.bias is not None else None
    grad_off = np.zeros((n, 2 * spec.k, h_out, w_out), dtype=np.float64)
    grad_mod = np.zeros((n, spec.k, h_out, w_out), dtype=np.float64)
    if x.size == 0 or g.size == 0:
        if grad_b is not None and g.size:
            grad_b += g.sum(axis=(0, 2, 3), dtype=np.float64)
        return (grad_x.astype(x.dtype), grad_w.reshape(w.weight.shape).astype(x.dtype),
                None if grad_b is None else grad_b.astype(x.dtype),
                grad_off.astype(x.dtype), grad_mod.astype(x.dtype))

    geo = _ConvGeometry(x, w, spec, field)
    k = spec.k
    plane = h * win

    def do_chunk(task):
        n0, n1, r0, r1 = task
        nb = n1 - n0
        nr = r1 - r0
        pr = nr * w_out
        _, (vals, weights, (y0, x0, ly, lx)) = geo.gather(n0, n1, r0, r1)
        v00, v01, v10, v11 = vals
        sampled = v00 * weights[0][None]
        for v, wt in zip(vals[1:], weights[1:]):
            sampled += v * wt[None]  # (C, nb, K, PR)
        m = geo.mods[n0:n1, :, r0:r1].reshape(nb, k, pr)
        gmat = g[n0:n1, :, r0:r1].reshape(nb, c_out, pr).astype(geo.dtype)

        # dL/d(sample * m): batched (nb, C*K, PR) -> (C, nb, K, PR)
        gsm = np.matmul(geo.wmat.T[None], gmat)
        gsm = np.ascontiguousarray(
            gsm.reshape(nb, c_in, k, pr).transpose(1, 0, 2, 3))
        grad_mod[n0:n1, :, r0:r1] = (gsm * sampled).sum(axis=0).reshape(nb, k, nr, w_out)
        gs = gsm * m[None]  # dL/d(sample)
        hy = 1.0 - ly
        hx = 1.0 - lx
        dsdy = (v10 - v00) * hx[None] + (v11 - v01) * lx[None]
        dsdx = (v01 - v00) * hy[None] + (v11 - v10) * ly[None]
        grad_off[n0:n1, 0::2, r0:r1] = (gs * dsdy).sum(axis=0).reshape(nb, k, nr, w_out)
        grad_off[n0:n1, 1::2, r0:r1] = (gs * dsdx).sum(axis=0).reshape(nb, k, nr, w_out)

        # partial sums that may overlap across chunks
        smod = (sampled * m[None]).transpose(1, 0, 2, 3).reshape(nb, c_in * k, pr)
        gw = np.tensordot(gmat, smod, axes=([0, 2], [0, 2]))
        gb = gmat.sum(axis=(0, 2)) if grad_b is not None else None

        chunk_plane = nb * plane
        item_off = (np.arange(nb, dtype=np.int64) * plane)[:, None, None]
        chan_off = (np.arange(c_in, dtype=np.int64) * chunk_plane)[:, None, None, None]
        gxf = np.zeros(c_in * chunk_plane, dtype=np.float64)
        # out-of-bounds corners carry weight 0, so their clipped index gets 0
        for (dy, dx), wt in zip(((0, 0), (0, 1), (1, 0), (1, 1)), weights):
            idx = np.clip(y0 + dy, 0, h - 1) * win + np.clip(x0 + dx, 0, win - 1)
            flat = (chan_off + (idx + item_off)[None]).ravel()
            gxf += np.bincount(flat, weights=(gs * wt[None]).ravel(),
                               minlength=c_in * chunk_plane)
        return n0, n1, gxf.reshape(c_in, nb, h, win), gw, gb

    tasks = _conv_chunks(n, c_in, k, h_out, w_out)
    for n0, n1, gxf, gw, gb in runtime.run_chunks(do_chunk, tasks, threads=threads,
                                                  ordered=deterministic):
        grad_x[n0:n1] += gxf.transpose(1, 0, 2, 3)
        grad_w += gw
        if grad_b is not None:
            grad_b += gb
    return (
        grad_x.astype(x.dtype),
        grad_w.reshape(w.weight.shape).astype(x.dtype),
        None if grad_b is None else grad_b.astype(x.dtype),
        grad_off.astype(x.dtype),
        grad_mod.astype(x.dtype),
    )


# ---------------------------------------------------------------------------
# regular (rigid) convolution, im2col style: used by the offset branch and
# by rigid layers in toy networks
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, spec: KernelSpec):
    n, c, h, w = x.shape
    kh, kw = spec.kernel_h, spec.kernel_w
    sh, sw = spec.stride
    ph, pw = spec.pad
    dh, dw = spec.dilation
    h_out, w_out = spec.out_size(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    sb, sc, srow, scol = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, h_out, w_out),
        strides=(sb, sc, dh * srow, dw * scol, sh * srow, sw * scol),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, h_out * w_out), (h_out, w_out), xp.shape


def dense_conv_forward(x, w: ConvWeights, spec: KernelSpec) -> np.ndarray:
    """Regular zero-padded strided dilated convolution (vectorized)."""
    x = as_array(x)
    if x.ndim != 4:
        raise ShapeError(f"input must be (N,C,H,W), got {x.shape}")
    w.check_spec(spec, x.shape[1])
    dtype = _compute_dtype(x)
    cols, (h_out, w_out), _ = _im2col(x.astype(dtype), spec)
    wmat = w.weight.reshape(w.weight.shape[0], -1).astype(dtype)
    out = np.matmul(wmat, cols)
    if w.bias is not None:
        out += np.asarray(w.bias, dtype=dtype)[None, :, None]
    return out.reshape(x.shape[0], -1, h_out, w_out).astype(x.dtype)


def dense_conv_backward(x, w: ConvWeights, spec: KernelSpec, upstream):
    """Gradients (grad_x, grad_w, grad_bias) of dense_conv_forward."""
    x = as_array(x)
    dtype = _compute_dtype(x)
    g = as_array(upstream).astype(dtype)
    n, c, h, win = x.shape
    kh, kw = spec.kernel_h, spec.kernel_w
    sh, sw = spec.stride
    ph, pw = spec.pad
    dh, dw = spec.dilation
    cols, (h_out, w_out), padded_shape = _im2col(x.astype(dtype), spec)
    c_out = w.weight.shape[0]
    gmat = g.reshape(n, c_out, h_out * w_out)
    wmat = w.weight.reshape(c_out, -1).astype(dtype)

    grad_w = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(w.weight.shape)
    grad_b = g.sum(axis=(0, 2, 3), dtype=np.float64) if w.bias is not None else None
    grad_cols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, h_out, w_out)
    gxp = np.zeros(padded_shape, dtype=dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u * dh : u * dh + sh * h_out : sh,
                v * dw : v * dw + sw * w_out : sw] += grad_cols[:, :, u, v]
    grad_x = gxp[:, :, ph : ph + h, pw : pw + win] if (ph or pw) else gxp
    return (
        grad_x.astype(x.dtype),
        grad_w.astype(x.dtype),
        None if grad_b is None else grad_b.astype(x.dtype),
    )


# ---------------------------------------------------------------------------
# offset/modulation branch: a sibling regular convolution with 3K channels
# ---------------------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic sigmoid (dtype preserving for floats)."""
    z = np.asarray(z)
    dtype = z.dtype if z.dtype in (np.float32, np.float64) else np.float64
    out = np.empty_like(z, dtype=dtype)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def offset_branch_forward(x, branch_w: ConvWeights, spec: KernelSpec) -> OffsetModulationField:
    """Regular convolution producing 3K channels: the first 2K are offsets
    verbatim, the last K pass through a logistic sigmoid to give modulation.
    Zero weights (the standard init) therefore yield dp=0, dm=0.5 exactly.
    """
    x = as_array(x)
    k = spec.k
    if branch_w.weight.shape[0] != 3 * k:
        raise ShapeError(
            f"offset branch must output 3K={3 * k} channels, got {branch_w.weight.shape[0]}"
        )
    raw = dense_conv_forward(x, branch_w, spec)
    offsets = raw[:, : 2 * k]
    modulation = sigmoid(raw[:, 2 * k :]).astype(raw.dtype)
    return OffsetModulationField(offsets, modulation)


def offset_branch_backward(x, branch_w: ConvWeights, spec: KernelSpec,
                           field: OffsetModulationField, grad_offsets, grad_modulation):
    """Gradients (grad_x, grad_branch_w, grad_branch_bias) given gradients on
    the produced field. Modulation grads are pulled back through the sigmoid.
    """
    k = spec.k
    go = as_array(grad_offsets).astype(np.float64)
    gm = as_array(grad_modulation).astype(np.float64)
    m = as_array(field.modulation).astype(np.float64)
    grad_raw = np.concatenate([go, gm * m * (1.0 - m)], axis=1)
    if grad_raw.shape[1] != 3 * k:
        raise ShapeError("field gradients inconsistent with 3K branch channels")
    return dense_conv_backward(x, branch_w, spec, grad_raw)


# ---------------------------------------------------------------------------
# layer-configuration JSON
# ---------------------------------------------------------------------------

def layer_config_to_json(spec: KernelSpec, modulated: bool) -> str:
    return json.dumps(
        {
            "kernel": [spec.kernel_h, spec.kernel_w],
            "stride": list(spec.stride),
            "pad": list(spec.pad),
            "dilation": list(spec.dilation),
            "modulated": bool(modulated),
        },
        sort_keys=True,
    )


def layer_config_from_json(text: str) -> tuple[KernelSpec, bool]:
    obj = json.loads(text)
    spec = KernelSpec(
        kernel_h=int(obj["kernel"][0]),
        kernel_w=int(obj["kernel"][1]),
        stride=tuple(int(v) for v in obj["stride"]),
        pad=tuple(int(v) for v in obj["pad"]),
        dilation=tuple(int(v) for v in obj["dilation"]),
    )
    return spec, bool(obj["modulated"])
