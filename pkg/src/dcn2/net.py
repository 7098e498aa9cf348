"""Minimal hand-backpropagated layers for the toy training harness.

Not an autograd system: each layer caches what its own backward pass needs,
and models wire layers together explicitly. Parameters carry a learning-rate
multiplier so offset/modulation branches can train at 0.1x the base rate.
"""

from __future__ import annotations

import numpy as np

from .deform_conv import (
    BRANCH_LR_MULTIPLIER,
    ConvWeights,
    KernelSpec,
    OffsetModulationField,
    dense_conv_backward,
    dense_conv_forward,
    mdconv_backward_optimized,
    mdconv_forward_optimized,
    sigmoid,
)
from .deform_roipool import (
    Affine,
    BinField,
    PoolSpec,
    RoI,
    aligned_pool_backward,
    aligned_pool_forward,
    mdpool_backward,
    mdpool_forward,
    roi_branch_backward,
    roi_branch_forward,
)
from .errors import ShapeError, UsageError


# toy networks train in single precision; gradient accumulators stay f64
COMPUTE_DTYPE = np.float32


class Param:
    """A trainable array with its gradient accumulator and rate multiplier."""

    def __init__(self, value: np.ndarray, lr_mult: float = 1.0, name: str = ""):
        self.value = np.asarray(value, dtype=COMPUTE_DTYPE)
        self.grad = np.zeros(self.value.shape, dtype=np.float64)
        self.lr_mult = float(lr_mult)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class SGD:
    """SGD with momentum and weight decay; updates honor each Param's lr_mult."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        seen = set()
        self.params = []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad + self.weight_decay * p.value
            p.value -= (self.lr * p.lr_mult * v).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2dLayer:
    """Regular convolution layer."""

    def __init__(self, c_in: int, c_out: int, spec: KernelSpec,
                 rng: np.random.Generator, name: str = "conv"):
        scale = 1.0 / np.sqrt(c_in * spec.k)
        self.spec = spec
        self.weight = Param(rng.normal(0.0, scale, (c_out, c_in, spec.kernel_h, spec.kernel_w)),
                            name=f"{name}.weight")
        self.bias = Param(np.zeros(c_out), name=f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def _weights(self) -> ConvWeights:
        return ConvWeights(self.weight.value, self.bias.value)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return dense_conv_forward(x, self._weights(), self.spec)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gx, gw, gb = dense_conv_backward(self._x, self._weights(), self.spec, gy)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class DeformConv2dLayer:
    """Deformable convolution layer; modulated=True adds the dm_k channels.

    The sibling branch convolution is zero-initialized and its parameters
    carry the 0.1 learning-rate multiplier. The last forward's input and
    field stay recorded for spatial-support analysis.
    """

    def __init__(self, c_in: int, c_out: int, spec: KernelSpec,
                 rng: np.random.Generator, modulated: bool = True, name: str = "dconv"):
        scale = 1.0 / np.sqrt(c_in * spec.k)
        self.spec = spec
        self.modulated = modulated
        self.weight = Param(rng.normal(0.0, scale, (c_out, c_in, spec.kernel_h, spec.kernel_w)),
                            name=f"{name}.weight")
        self.bias = Param(np.zeros(c_out), name=f"{name}.bias")
        branch_out = 3 * spec.k if modulated else 2 * spec.k
        self.branch_weight = Param(
            np.zeros((branch_out, c_in, spec.kernel_h, spec.kernel_w)),
            lr_mult=BRANCH_LR_MULTIPLIER, name=f"{name}.branch_weight")
        self.branch_bias = Param(np.zeros(branch_out),
                                 lr_mult=BRANCH_LR_MULTIPLIER, name=f"{name}.branch_bias")
        self._x = None
        self._field = None
        self._raw_mod = None

    def params(self):
        return [self.weight, self.bias, self.branch_weight, self.branch_bias]

    def _branch_weights(self) -> ConvWeights:
        return ConvWeights(self.branch_weight.value, self.branch_bias.value)

    def _weights(self) -> ConvWeights:
        return ConvWeights(self.weight.value, self.bias.value)

    def forward(self, x: np.ndarray) -> np.ndarray:
        k = self.spec.k
        raw = dense_conv_forward(x, self._branch_weights(), self.spec)
        offsets = raw[:, : 2 * k]
        if self.modulated:
            mod = sigmoid(raw[:, 2 * k :])
        else:
            mod = np.ones((raw.shape[0], k, raw.shape[2], raw.shape[3]), dtype=raw.dtype)
        field = OffsetModulationField(offsets, mod)
        self._x = x
        self._field = field
        y = mdconv_forward_optimized(x, self._weights(), self.spec, field)
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gx, gw, gb, goff, gmod = mdconv_backward_optimized(
            self._x, self._weights(), self.spec, self._field, gy)
        self.weight.grad += gw
        self.bias.grad += gb
        if self.modulated:
            m = self._field.modulation
            grad_raw = np.concatenate([goff, gmod * m * (1.0 - m)], axis=1)
        else:
            grad_raw = goff
        gx_branch, gbw, gbb = dense_conv_backward(
            self._x, self._branch_weights(), self.spec, grad_raw)
        self.branch_weight.grad += gbw
        self.branch_bias.grad += gbb
        return gx + gx_branch

    def recorded_state(self):
        """(input, field) of the last forward, for effective sampling analysis."""
        if self._x is None:
            raise UsageError("layer has no recorded forward state")
        return self._x, self._field

    def mean_abs_offset(self) -> float:
        if self._field is None:
            raise UsageError("layer has no recorded forward state")
        return float(np.abs(self._field.offsets).mean())


class ReLULayer:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = (x > 0).astype(x.dtype)
        return x * self._mask

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * self._mask


class AffineLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 std: float | None = None, name: str = "fc"):
        std = 1.0 / np.sqrt(in_dim) if std is None else std
        self.weight = Param(rng.normal(0.0, std, (out_dim, in_dim)), name=f"{name}.weight")
        self.bias = Param(np.zeros(out_dim), name=f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"affine expects (B, D), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, gy: np.ndarray) -> np.ndarray:
        self.weight.grad += gy.T @ self._x
        self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.value


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


class RoIPoolLayer:
    """Aligned or modulated-deformable RoI pooling over per-call RoIs.

    In deformable mode the sibling fc branch (Gaussian hidden layers, zero
    output layer) is trained jointly; its fc parameters use the base rate.
    """

    def __init__(self, c_in: int, spec: PoolSpec, rng: np.random.Generator,
                 deformable: bool = False, hidden: int = 64, name: str = "pool"):
        self.spec = spec
        self.deformable = deformable
        self._cache = None
        if deformable:
            in_dim = c_in * spec.k
            self.fc1_w = Param(rng.normal(0.0, 0.01, (hidden, in_dim)), name=f"{name}.fc1.weight")
            self.fc1_b = Param(np.zeros(hidden), name=f"{name}.fc1.bias")
            self.fc2_w = Param(rng.normal(0.0, 0.01, (hidden, hidden)), name=f"{name}.fc2.weight")
            self.fc2_b = Param(np.zeros(hidden), name=f"{name}.fc2.bias")
            self.out_w = Param(np.zeros((3 * spec.k, hidden)), name=f"{name}.out.weight")
            self.out_b = Param(np.zeros(3 * spec.k), name=f"{name}.out.bias")

    def params(self):
        if not self.deformable:
            return []
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b, self.out_w, self.out_b]

    def _affines(self):
        return (
            Affine(self.fc1_w.value, self.fc1_b.value),
            Affine(self.fc2_w.value, self.fc2_b.value),
            Affine(self.out_w.value, self.out_b.value),
        )

    def forward(self, x: np.ndarray, rois: list[RoI]) -> np.ndarray:
        if not self.deformable:
            self._cache = (x, rois)
            return aligned_pool_forward(x, rois, self.spec)
        fc1, fc2, out_w = self._affines()
        plain = aligned_pool_forward(x, rois, self.spec)
        fields = []
        caches = []
        for r, roi in enumerate(rois):
            f, cache = roi_branch_forward(plain[r], fc1, fc2, out_w, roi, want_cache=True)
            fields.append(f)
            caches.append(cache)
        self._cache = (x, rois, fields, caches)
        return mdpool_forward(x, rois, self.spec, fields)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if not self.deformable:
            x, rois = self._cache
            return aligned_pool_backward(x, rois, self.spec, gy)
        x, rois, fields, caches = self._cache
        fc1, fc2, out_w = self._affines()
        gx, goff, gmod = mdpool_backward(x, rois, self.spec, fields, gy)
        grad_plain = np.zeros((len(rois),) + gy.shape[1:], dtype=np.float64)
        for r in range(len(rois)):
            gp, (gw1, gb1), (gw2, gb2), (gwo, gbo) = roi_branch_backward(
                fc1, fc2, out_w, caches[r], goff[r], gmod[r])
            grad_plain[r] = gp
            self.fc1_w.grad += gw1
            self.fc1_b.grad += gb1
            self.fc2_w.grad += gw2
            self.fc2_b.grad += gb2
            self.out_w.grad += gwo
            self.out_b.grad += gbo
        gx += aligned_pool_backward(x, rois, self.spec, grad_plain)
        return gx

    def recorded_state(self):
        if self._cache is None:
            raise UsageError("layer has no recorded forward state")
        return self._cache


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries; returns (loss, grad_pred)."""
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float((diff * diff).mean())
    return loss, (2.0 * diff / diff.size).astype(pred.dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, grad_logits)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    b = z.shape[0]
    ll = -np.log(np.maximum(p[np.arange(b), labels], 1e-300))
    grad = p.copy()
    grad[np.arange(b), labels] -= 1.0
    return float(ll.mean()), (grad / b).astype(logits.dtype)
