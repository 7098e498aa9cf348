"""Spatial-support analysis: effective receptive fields, effective sampling
locations, and error-bounded saliency regions.

The saliency optimizer minimizes the mask area subject to a hard bound on the
reconstruction loss between node features on the masked and original image
(masked-out pixels are set to 0). It runs the two-step search: grow a
centered rectangle in even area increments until the bound holds, then
segment into superpixels and greedily remove the superpixel whose removal
raises the error least, stopping when any further removal would break the
bound. Vector nodes use one minus cosine similarity as the loss; scalar
nodes use relative absolute difference (an extension, the cosine form only
being defined for feature vectors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .deform_conv import mdconv_backward_optimized
from .deform_roipool import mdpool_backward
from .errors import ArgumentError, CapabilityError, ConvergenceError, ShapeError, UsageError
from .mimic import cosine_mimic_loss
from .net import DeformConv2dLayer, RoIPoolLayer, Sequential
from .tensor import as_array


def _chw(image) -> np.ndarray:
    arr = as_array(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError("analysis expects a single image")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got shape {arr.shape}")
    return arr.astype(np.float64)


class NodeProbe:
    """A deterministic closure from an image to a node response.

    `fn(image)` returns a scalar or a 1-D feature vector; `grad_fn(image)`,
    when available, returns the image-shaped gradient of the scalarized
    response (the response itself for scalar nodes, the vector's L2 norm for
    vector nodes).
    """

    def __init__(self, fn, grad_fn=None, name: str = "probe"):
        self._fn = fn
        self._grad_fn = grad_fn
        self.name = name

    @property
    def differentiable(self) -> bool:
        return self._grad_fn is not None

    def response(self, image) -> np.ndarray:
        out = np.asarray(self._fn(_chw(image)), dtype=np.float64)
        return out.reshape(-1)

    def gradient(self, image) -> np.ndarray:
        if self._grad_fn is None:
            raise CapabilityError(f"probe {self.name!r} exposes no gradient")
        return np.asarray(self._grad_fn(_chw(image)), dtype=np.float64)


# ---------------------------------------------------------------------------
# probe builders
# ---------------------------------------------------------------------------

def window_probe(y0: int, x0: int, h: int, w: int) -> NodeProbe:
    """Vector node: the raw pixels of a window (all channels)."""

    def fn(img):
        return img[:, y0 : y0 + h, x0 : x0 + w].reshape(-1)

    def grad_fn(img):
        f = fn(img)
        n = np.linalg.norm(f)
        g = np.zeros_like(img)
        if n > 0:
            g[:, y0 : y0 + h, x0 : x0 + w] = (f / n).reshape(img.shape[0], h, w)
        return g

    return NodeProbe(fn, grad_fn, name=f"window[{y0}:{y0+h},{x0}:{x0+w}]")


def window_mean_probe(y0: int, x0: int, h: int, w: int) -> NodeProbe:
    """Scalar node: the mean over a window (all channels)."""

    def fn(img):
        return img[:, y0 : y0 + h, x0 : x0 + w].mean()

    def grad_fn(img):
        g = np.zeros_like(img)
        g[:, y0 : y0 + h, x0 : x0 + w] = 1.0 / (img.shape[0] * h * w)
        return g

    return NodeProbe(fn, grad_fn, name=f"window-mean[{y0}:{y0+h},{x0}:{x0+w}]")


def constant_probe(value: float = 1.0) -> NodeProbe:
    return NodeProbe(lambda img: value, lambda img: np.zeros_like(img), name="const")


def conv_tap_probe(kernel: np.ndarray, center: tuple[int, int], channel: int = 0) -> NodeProbe:
    """Scalar node: one kernel applied to one channel at a fixed location."""
    k = np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    cy, cx = center

    def taps(img):
        h, w = img.shape[1:]
        for u in range(kh):
            for v in range(kw):
                iy = cy + u - kh // 2
                ix = cx + v - kw // 2
                if 0 <= iy < h and 0 <= ix < w:
                    yield u, v, iy, ix

    def fn(img):
        return sum(k[u, v] * img[channel, iy, ix] for u, v, iy, ix in taps(img))

    def grad_fn(img):
        g = np.zeros_like(img)
        for u, v, iy, ix in taps(img):
            g[channel, iy, ix] = k[u, v]
        return g

    return NodeProbe(fn, grad_fn, name="conv-tap")


def network_probe(trunk: Sequential, y: int, x: int) -> NodeProbe:
    """Vector node: the channel vector of a trunk's output at one location."""

    def fn(img):
        out = trunk.forward(img[None])
        return out[0, :, y, x]

    def grad_fn(img):
        out = trunk.forward(img[None])
        f = out[0, :, y, x]
        n = np.linalg.norm(f)
        upstream = np.zeros_like(out)
        if n > 0:
            upstream[0, :, y, x] = f / n
        return trunk.backward(upstream)[0]

    return NodeProbe(fn, grad_fn, name=f"net[{y},{x}]")


# ---------------------------------------------------------------------------
# effective receptive field / effective sampling locations
# ---------------------------------------------------------------------------

def effective_receptive_field(probe: NodeProbe, image) -> np.ndarray:
    """(H, W) map: per-pixel gradient magnitude of the node response, summed
    over color channels.
    """
    if not probe.differentiable:
        raise CapabilityError(f"probe {probe.name!r} is not differentiable")
    g = probe.gradient(image)
    return np.abs(g).sum(axis=0)


def effective_sampling_locations(layer, upstream) -> np.ndarray:
    """Gradient magnitude of a node with respect to each 2-D sampling (or
    bin) coordinate of a deformable layer, from its recorded forward state.

    For a deformable conv layer the result is (N, K, H_out, W_out); for a
    deformable pooling layer it is (R, K).
    """
    if isinstance(layer, DeformConv2dLayer):
        x, fld = layer.recorded_state()
        _, _, _, goff, _ = mdconv_backward_optimized(
            x, layer._weights(), layer.spec, fld, upstream)
        return np.hypot(goff[:, 0::2], goff[:, 1::2])
    if isinstance(layer, RoIPoolLayer):
        cache = layer.recorded_state()
        if not layer.deformable:
            raise UsageError("aligned pooling has no learned sampling locations")
        x, rois, fields, _ = cache
        _, goff, _ = mdpool_backward(x, rois, layer.spec, fields, upstream)
        return np.hypot(goff[:, 0::2], goff[:, 1::2])
    raise UsageError(f"no recorded deformable state on {type(layer).__name__}")


# ---------------------------------------------------------------------------
# SLIC superpixels
# ---------------------------------------------------------------------------

@dataclass
class SuperpixelLabeling:
    """(H, W) integer labels in [0, count); every segment 4-connected, nonempty."""

    labels: np.ndarray
    count: int


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def slic_segment(image, target_segments: int, compactness: float = 10.0,
                 iters: int = 10) -> SuperpixelLabeling:
    """Grid-seeded k-means in (color, position) space with distance
    d = d_color + (compactness / S) * d_spatial, S = sqrt(H*W/target), then
    connectivity enforcement merging orphan fragments into the largest
    adjacent segment.
    """
    img = _chw(image)
    c, h, w = img.shape
    if target_segments < 1:
        raise ArgumentError("target_segments must be >= 1")
    if target_segments > h * w:
        raise ArgumentError(f"target_segments {target_segments} exceeds pixel count {h * w}")

    s = math.sqrt(h * w / target_segments)
    gh = max(1, round(math.sqrt(target_segments * h / w)))
    gw = max(1, math.ceil(target_segments / gh))
    # half-pixel-center seeding keeps Voronoi boundaries between pixel centers
    seed_y = (np.arange(gh) + 0.5) * h / gh - 0.5
    seed_x = (np.arange(gw) + 0.5) * w / gw - 0.5
    centers_pos = np.array([(sy, sx) for sy in seed_y for sx in seed_x])
    iy = np.clip(np.round(centers_pos[:, 0]).astype(int), 0, h - 1)
    ix = np.clip(np.round(centers_pos[:, 1]).astype(int), 0, w - 1)
    centers_col = img[:, iy, ix].T.copy()  # (K0, C)
    k0 = len(centers_pos)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ratio = compactness / s
    assign = np.zeros((h, w), dtype=np.int64)

    for _ in range(max(1, iters)):
        best = np.full((h, w), np.inf)
        assign.fill(-1)
        for kc in range(k0):
            cy, cx = centers_pos[kc]
            r0 = max(0, int(cy - 2 * s))
            r1 = min(h, int(cy + 2 * s) + 1)
            c0 = max(0, int(cx - 2 * s))
            c1 = min(w, int(cx + 2 * s) + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            patch = img[:, r0:r1, c0:c1]
            d_col = np.sqrt(((patch - centers_col[kc][:, None, None]) ** 2).sum(axis=0))
            d_sp = np.hypot(yy[r0:r1, c0:c1] - cy, xx[r0:r1, c0:c1] - cx)
            d = d_col + ratio * d_sp
            win_best = best[r0:r1, c0:c1]
            better = d < win_best
            win_best[better] = d[better]
            assign[r0:r1, c0:c1][better] = kc
        missing = assign < 0
        if missing.any():
            # clusters drifted away from some pixels: full pass for those only
            my, mx = np.nonzero(missing)
            d_all = np.full(my.size, np.inf)
            for kc in range(k0):
                d_col = np.sqrt(((img[:, my, mx] - centers_col[kc][:, None]) ** 2).sum(axis=0))
                d_sp = np.hypot(my - centers_pos[kc, 0], mx - centers_pos[kc, 1])
                d = d_col + ratio * d_sp
                better = d < d_all
                d_all[better] = d[better]
                assign[my[better], mx[better]] = kc
        for kc in range(k0):
            mask = assign == kc
            if mask.any():
                centers_pos[kc] = (yy[mask].mean(), xx[mask].mean())
                centers_col[kc] = img[:, mask].mean(axis=1)

    labels = _enforce_connectivity(assign, k0)
    return SuperpixelLabeling(labels, int(labels.max()) + 1)


def _enforce_connectivity(assign: np.ndarray, k0: int) -> np.ndarray:
    """Keep each label's largest 4-connected component; merge every other
    fragment into the largest adjacent segment.
    """
    h, w = assign.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    canonical = []
    orphans = []
    next_id = 0
    for kc in range(k0):
        mask = assign == kc
        if not mask.any():
            continue
        lab, n = ndimage.label(mask, structure=_FOUR_CONN)
        sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
        order = np.argsort(-sizes, kind="stable")
        for rank, ci in enumerate(order):
            sel = lab == ci + 1
            comp[sel] = next_id
            (canonical if rank == 0 else orphans).append(next_id)
            next_id += 1

    sizes = np.bincount(comp.reshape(-1), minlength=next_id).astype(np.int64)
    is_orphan = np.zeros(next_id, dtype=bool)
    is_orphan[orphans] = True
    merged_into = np.arange(next_id)

    def resolve(i):
        while merged_into[i] != i:
            i = merged_into[i]
        return i

    pending = sorted(orphans)
    while pending:
        progressed = False
        deferred = []
        for frag in pending:
            mask = comp == frag
            if not mask.any():
                continue
            neighbors = set()
            padded = np.pad(comp, 1, constant_values=-1)
            core = np.pad(mask, 1)
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                shifted = np.roll(core, (dy, dx), axis=(0, 1))
                vals = padded[shifted & ~core]
                neighbors.update(int(v) for v in vals if v >= 0)
            neighbors = {resolve(v) for v in neighbors if resolve(v) != frag}
            solid = [v for v in neighbors if not is_orphan[v]]
            pool = solid if solid else sorted(neighbors)
            if not pool:
                deferred.append(frag)
                continue
            target = max(pool, key=lambda v: (sizes[v], -v))
            comp[mask] = target
            sizes[target] += sizes[frag]
            sizes[frag] = 0
            merged_into[frag] = target
            progressed = True
        if not progressed:
            break
        pending = deferred

    final_ids = np.unique(comp)
    remap = np.zeros(next_id, dtype=np.int64)
    remap[final_ids] = np.arange(len(final_ids))
    return remap[comp]


# ---------------------------------------------------------------------------
# error-bounded saliency region
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMask:
    """Binary pixel mask with the reconstruction error it achieves (always
    strictly below the requested bound).
    """

    mask: np.ndarray
    achieved_error: float
    epsilon: float
    rect: tuple[int, int, int, int] = (0, 0, 0, 0)  # x, y, w, h
    segments_kept: int = 0
    probe_calls: int = 0
    step2_sizes: list = field(default_factory=list)

    def __post_init__(self):
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ArgumentError("mask must be binary")
        if not self.achieved_error < self.epsilon:
            raise ConvergenceError(
                f"achieved error {self.achieved_error} not below bound {self.epsilon}")

    def report_json(self) -> str:
        return json.dumps(
            {
                "epsilon": self.epsilon,
                "achieved_error": self.achieved_error,
                "rect": list(self.rect),
                "segments_kept": self.segments_kept,
                "probe_calls": self.probe_calls,
            },
            sort_keys=True,
        )


def _reconstruction_loss(orig: np.ndarray, masked: np.ndarray) -> float:
    if orig.size > 1:
        return cosine_mimic_loss(orig, masked)
    a = float(orig.reshape(()) if orig.ndim == 0 else orig[0])
    b = float(masked.reshape(()) if masked.ndim == 0 else masked[0])
    return abs(a - b) / max(abs(a), 1e-9)


def saliency_region(probe: NodeProbe, image, epsilon: float = 0.1,
                    aspect=None, center: tuple[float, float] | None = None,
                    area_increment: float = 0.01, target_segments: int = 100,
                    compactness: float = 10.0, slic_iters: int = 10) -> SaliencyMask:
    """Find a small mask whose masked image keeps the probe response within
    `epsilon` reconstruction error.

    The rectangle is square unless `aspect` (an RoI) fixes its aspect ratio;
    it is centered on `center` (default: the RoI center when given, else the
    image center). `area_increment` is the growth step as a fraction of the
    image area.
    """
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    img = _chw(image)
    _, h, w = img.shape
    orig = probe.response(img)
    calls = 1

    def loss_for(mask: np.ndarray) -> float:
        nonlocal calls
        resp = probe.response(img * mask[None])
        calls += 1
        return _reconstruction_loss(orig, resp)

    if aspect is not None:
        ratio = (aspect.height / aspect.width) if aspect.width > 0 else 1.0
        if ratio <= 0:
            ratio = 1.0
        cy, cx = aspect.center() if center is None else center
    else:
        ratio = 1.0
        cy, cx = ((h - 1) / 2.0, (w - 1) / 2.0) if center is None else center

    # step 1: centered rectangle grown at even area increments
    step = max(1.0, area_increment * h * w)
    prev_rect = None
    rect = None
    rect_error = None
    t = 0
    while True:
        t += 1
        area = t * step
        rh = math.sqrt(area * ratio)
        rw = area / rh
        y0 = max(0, int(round(cy - rh / 2 + 0.5)))
        y1 = min(h, int(round(cy + rh / 2 + 0.5)))
        x0 = max(0, int(round(cx - rw / 2 + 0.5)))
        x1 = min(w, int(round(cx + rw / 2 + 0.5)))
        if y1 <= y0:
            y0 = min(max(0, int(cy)), h - 1)
            y1 = y0 + 1
        if x1 <= x0:
            x0 = min(max(0, int(cx)), w - 1)
            x1 = x0 + 1
        cand = (y0, y1, x0, x1)
        if cand == prev_rect:
            if cand == (0, h, 0, w):
                raise ConvergenceError(
                    f"reconstruction bound {epsilon} unreachable even with the full image")
            continue
        prev_rect = cand
        mask = np.zeros((h, w), dtype=np.float64)
        mask[y0:y1, x0:x1] = 1.0
        err = loss_for(mask)
        if err < epsilon:
            rect = cand
            rect_error = err
            break
        if cand == (0, h, 0, w):
            raise ConvergenceError(
                f"reconstruction bound {epsilon} unreachable even with the full image")

    y0, y1, x0, x1 = rect
    rect_mask = np.zeros((h, w), dtype=bool)
    rect_mask[y0:y1, x0:x1] = True

    # step 2: greedy superpixel removal inside the rectangle
    seg = slic_segment(img, min(target_segments, h * w), compactness, slic_iters)
    units = []
    for s_id in range(seg.count):
        cells = (seg.labels == s_id) & rect_mask
        if cells.any():
            units.append((s_id, cells))
    kept = {s_id for s_id, _ in units}
    cur_mask = rect_mask.copy()
    cur_error = rect_error
    sizes = [int(cur_mask.sum())]
    while kept:
        best = None
        for s_id, cells in units:
            if s_id not in kept:
                continue
            cand = cur_mask & ~cells
            err = loss_for(cand.astype(np.float64))
            if err < epsilon and (best is None or (err, s_id) < best[:2]):
                best = (err, s_id, cand)
        if best is None:
            break
        cur_error, removed, cur_mask = best
        kept.discard(removed)
        sizes.append(int(cur_mask.sum()))

    return SaliencyMask(
        mask=cur_mask.astype(np.uint8),
        achieved_error=float(cur_error),
        epsilon=float(epsilon),
        rect=(x0, y0, x1 - x0, y1 - y0),
        segments_kept=len(kept),
        probe_calls=calls,
        step2_sizes=sizes,
    )
