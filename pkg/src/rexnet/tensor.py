"""Minimal dense NCHW tensor engine: the layers the saliency networks need.

All arrays are float64. Layers keep the context of their most recent forward
call and consume it in ``backward``; calling ``backward`` without a forward
raises ``RuntimeError``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class Tensor:
    """Parameter/feature container with a lazily allocated gradient buffer."""

    def __init__(self, data, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape})"


def _as4d(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"{what} must be N x C x H x W, got shape {x.shape}")
    return x


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    extent = dilation * (kernel - 1) + 1
    return (size + 2 * padding - extent) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int, dilation: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (C*kh*kw, N*oh*ow) column matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, oh, ow),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, xshape, kh, kw, oh, ow, stride, dilation, padding) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    cols6 = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride] += cols6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


@dataclass(eq=False)
class ConvLayer:
    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    _ctx: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ValueError(f"conv weights must be 4-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3, *,
               stride: int = 1, padding: int | None = None, dilation: int = 1, name: str = "") -> "ConvLayer":
        if padding is None:
            padding = dilation * (k - 1) // 2
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), f"{name}.weight")
        b = Tensor(np.zeros(out_ch), f"{name}.bias")
        return cls(w, b, stride=stride, padding=padding, dilation=dilation)

    @property
    def params(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as4d(x, "conv input")
        oc, ic, kh, kw = self.weights.shape
        if x.shape[1] != ic:
            raise ValueError(f"conv input shape {x.shape} incompatible with weight shape {self.weights.shape}")
        n, _, h, w = x.shape
        extent_h = self.dilation * (kh - 1) + 1
        extent_w = self.dilation * (kw - 1) + 1
        if extent_h > h + 2 * self.padding or extent_w > w + 2 * self.padding:
            raise ValueError(f"kernel extent {(extent_h, extent_w)} exceeds padded input {x.shape}")
        oh = conv_output_size(h, kh, self.stride, self.padding, self.dilation)
        ow = conv_output_size(w, kw, self.stride, self.padding, self.dilation)
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding,) * 2, (self.padding,) * 2)) if self.padding else x
        cols = _im2col(np.ascontiguousarray(xp), kh, kw, oh, ow, self.stride, self.dilation)
        out = self.weights.data.reshape(oc, -1) @ cols + self.bias.data[:, None]
        self._ctx = (x.shape, cols, oh, ow)
        return np.ascontiguousarray(out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate weight/bias grads; return the input gradient."""
        if self._ctx is None:
            raise RuntimeError("conv backward called without a forward context")
        xshape, cols, oh, ow = self._ctx
        oc, ic, kh, kw = self.weights.shape
        expected = (xshape[0], oc, oh, ow)
        if grad_out.shape != expected:
            raise ValueError(f"upstream grad shape {grad_out.shape} != conv output shape {expected}")
        g = grad_out.transpose(1, 0, 2, 3).reshape(oc, -1)
        self.weights.accumulate((g @ cols.T).reshape(self.weights.shape))
        self.bias.accumulate(g.sum(axis=1))
        dcols = self.weights.data.reshape(oc, -1).T @ g
        return _col2im(dcols, xshape, kh, kw, oh, ow, self.stride, self.dilation, self.padding)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return layer.forward(x)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray):
    """Return (input_grad, weight_grad, bias_grad) for ``layer`` applied to ``x``.

    Re-runs the forward pass on scratch parameters so the layer's own
    gradient buffers are left untouched.
    """
    scratch = ConvLayer(Tensor(layer.weights.data), Tensor(layer.bias.data),
                        layer.stride, layer.padding, layer.dilation)
    scratch.forward(x)
    dx = scratch.backward(np.asarray(upstream, dtype=DTYPE))
    return dx, scratch.weights.grad, scratch.bias.grad


@dataclass(eq=False)
class Linear:
    """Fully connected layer over (rows, features) matrices."""

    weights: Tensor
    bias: Tensor
    _x: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int, name: str = "", std: float | None = None):
        std = np.sqrt(2.0 / n_in) if std is None else std
        return cls(Tensor(rng.normal(0.0, std, size=(n_out, n_in)), f"{name}.weight"),
                   Tensor(np.zeros(n_out), f"{name}.bias"))

    @property
    def params(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ValueError(f"linear input shape {x.shape} incompatible with weight shape {self.weights.shape}")
        self._x = x
        return x @ self.weights.data.T + self.bias.data

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("linear backward called without a forward context")
        self.weights.accumulate(grad_out.T @ self._x)
        self.bias.accumulate(grad_out.sum(axis=0))
        return grad_out @ self.weights.data


# ---------------------------------------------------------------- pooling

EMPTY = -1  # argmax sentinel for windows with no source cell


@dataclass
class PoolRecord:
    output: np.ndarray
    argmax: np.ndarray  # flat index into input H*W per (n, c, oh, ow); EMPTY for none
    input_shape: tuple[int, int, int, int]


def pad_even(x: np.ndarray) -> np.ndarray:
    """Replication-pad bottom/right so H and W are even."""
    _, _, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x


def maxpool2x2_forward(x: np.ndarray) -> PoolRecord:
    x = _as4d(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 max-pool needs even spatial dims, got {x.shape}; use pad_even first")
    # window order (0,0),(0,1),(1,0),(1,1) is row-major, so argmax picks the first tie
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    k = win.argmax(axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    return PoolRecord(out, rows * w + cols, x.shape)


def maxpool2x2_backward(record: PoolRecord, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = record.input_shape
    if upstream.shape != record.output.shape:
        raise ValueError(f"upstream grad shape {upstream.shape} != pool output {record.output.shape}")
    dx = np.zeros((n * c, h * w), dtype=DTYPE)
    idx = record.argmax.reshape(n * c, -1)
    valid = idx != EMPTY
    g = np.where(valid, upstream.reshape(n * c, -1), 0.0)
    np.add.at(dx, (np.broadcast_to(np.arange(n * c)[:, None], idx.shape)[valid], idx[valid]), g[valid])
    return dx.reshape(n, c, h, w)


# ------------------------------------------------------------ activations

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Backward given the sigmoid *output* ``y``."""
    return upstream * y * (1.0 - y)


def softmax2_forward(logits: np.ndarray) -> np.ndarray:
    """Two-class softmax over the last axis."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.shape[-1] != 2:
        raise ValueError(f"softmax2 expects a trailing axis of size 2, got {logits.shape}")
    p1 = sigmoid_forward(logits[..., 1] - logits[..., 0])
    return np.stack([1.0 - p1, p1], axis=-1)


def softmax2_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    dot = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - dot)


# ------------------------------------------------------------- upsampling

def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) linear interpolation weights, half-pixel centres."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    x = _as4d(x, "upsample input")
    if factor == 1:
        return x.copy()
    mh = _interp_matrix(x.shape[2], factor)
    mw = _interp_matrix(x.shape[3], factor)
    return np.einsum("ih,nchw,jw->ncij", mh, x, mw, optimize=True)


def bilinear_upsample_backward(upstream: np.ndarray, factor: int, in_hw: tuple[int, int]) -> np.ndarray:
    if factor == 1:
        return upstream.copy()
    mh = _interp_matrix(in_hw[0], factor)
    mw = _interp_matrix(in_hw[1], factor)
    return np.einsum("ih,ncij,jw->nchw", mh, upstream, mw, optimize=True)


# -------------------------------------------------------------- optimizer

class SGD:
    """Momentum SGD with L2 weight decay.

    v <- momentum * v + g + weight_decay * p ;  p <- p - lr * v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'}")
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= self.lr * v


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: list[np.ndarray] | None = None):
    """Functional single step. Returns (new_params, new_velocity)."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        v = momentum * v + g + weight_decay * p
        new_v.append(v)
        new_p.append(p - learning_rate * v)
    return new_p, new_v


# --------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str = ""
    n_kinks: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(loss_fn: Callable[[], float], params: list[Tensor],
                            analytic: list[np.ndarray], step: float = 1e-5,
                            max_coords: int | None = None, rng: np.random.Generator | None = None,
                            floor: float = 1e-6, skip_kinks: bool = True) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_fn``.

    ``loss_fn`` reads the current values of ``params``; entries are perturbed
    in place and restored. With ``max_coords`` only a random subset of each
    tensor is probed. With ``skip_kinks`` a coordinate whose one-sided
    differences disagree by at least the observed error (the signature of a
    ReLU kink or max-pool switch inside the step) is counted, not scored.
    """
    rng = rng or np.random.default_rng(0)
    base = loss_fn() if skip_kinks else 0.0
    worst, worst_where, n, kinks = 0.0, "", 0, 0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            err = float(relative_error(np.array(gflat[i]), np.array(num), floor))
            if skip_kinks and err > 0:
                one_sided_gap = abs((lp - base) - (base - lm)) / step
                if one_sided_gap >= abs(gflat[i] - num) and one_sided_gap > 1e3 * step * max(abs(num), 1.0):
                    kinks += 1
                    continue
            n += 1
            if err > worst:
                worst, worst_where = err, f"{p.name}[{i}] analytic={gflat[i]:.6e} numeric={num:.6e}"
    return GradCheckReport(worst, n, worst_where, kinks)
