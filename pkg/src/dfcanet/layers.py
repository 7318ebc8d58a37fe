"""Parametric and pooling layers in channel-last (N,H,W,C) layout.

Every layer follows the same conventions:

* forward passes build on the autograd ops in :mod:`dfcanet.tensor`, or
  register a dedicated backward closure where a fused kernel is clearly
  faster (convolution runs as im2col + BLAS matmul, never as nested loops);
* convolution is cross-correlation (no kernel flip) with zero padding;
* layers with train/inference behaviour (batch norm, dropout) consult an
  explicit mode that must be set before use.

Weight init: He-uniform for kernels feeding ReLUs, Glorot-uniform for
linear/sigmoid heads, zero biases.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, accumulate_grad, make_op, relu, sigmoid, softmax_rows, clamp, log, tmean

TRAIN = "train"
INFER = "infer"


def _rng_or_default(rng):
    return rng if rng is not None else np.random.default_rng(0)


def he_uniform(shape, fan_in, rng, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(shape, fan_in, fan_out, rng, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal container: tracks child modules, parameters and buffers.

    ``named_parameters`` yields trainable tensors, ``named_state`` adds the
    non-trainable buffers (batch-norm running statistics) so checkpoints
    capture everything needed to reproduce inference.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "mode", None)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}{i + 1}"] = v
                object.__setattr__(self, f"{name}{i + 1}", v)
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_state(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p.data
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_state(prefix + cname + ".")

    def named_buffer_slots(self, prefix=""):
        """(full name, owning module, attribute) triples for each buffer."""
        for name in self._buffers:
            yield prefix + name, self, name
        for cname, child in self._children.items():
            yield from child.named_buffer_slots(prefix + cname + ".")

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def set_mode(self, mode: str):
        if mode not in (TRAIN, INFER):
            raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
        object.__setattr__(self, "mode", mode)
        for child in self._children.values():
            child.set_mode(mode)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# -- convolution -------------------------------------------------------------


def _pad_amount(size, k, stride, padding):
    if padding == "valid":
        if size < k:
            raise ShapeError(f"valid padding needs input >= kernel, got {size} < {k}")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max(0, (out - 1) * stride + k - size)
        lo = total // 2
        return lo, total - lo, out
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw, :]
    return cols


def _col2im(dcols, xp_shape, kh, kw, sh, sw, ho, wo):
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw, :] += dcols[:, :, :, i, j, :]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride=(1, 1), padding="same") -> Tensor:
    """Cross-correlate (N,H,W,Cin) with (kh,kw,Cin,Cout) kernels."""
    n, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"same padding requires odd kernel sizes, got {(kh, kw)}")
    sh, sw = stride
    pt, pb, ho = _pad_amount(h, kh, sh, padding)
    pl, pr, wo = _pad_amount(w, kw, sw, padding)

    if pt or pb or pl or pr:
        xp = np.zeros((n, h + pt + pb, w + pl + pr, cin), dtype=x.data.dtype)
        xp[:, pt : pt + h, pl : pl + w, :] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out_mat = cols.reshape(n * ho * wo, kh * kw * cin) @ kmat
    if bias is not None:
        out_mat += bias.data
    data = out_mat.reshape(n, ho, wo, cout)

    def backward():
        g = out.grad.reshape(n * ho * wo, cout)
        if kernel.requires_grad:
            dk = cols.reshape(n * ho * wo, kh * kw * cin).T @ g
            accumulate_grad(kernel, dk.reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))
        if x.requires_grad:
            dcols = (g @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, ho, wo)
            accumulate_grad(x, dxp[:, pt : pt + h, pl : pl + w, :])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = make_op(data, parents, backward)
    return out


class Conv2D(Module):
    """2-D convolution layer with optional fused ReLU."""

    def __init__(self, kh, kw, cin, cout, stride=(1, 1), padding="same",
                 activation="linear", init=None, rng=None, dtype=np.float32):
        super().__init__()
        if activation not in ("linear", "relu"):
            raise ValueError(f"unsupported conv activation {activation!r}")
        rng = _rng_or_default(rng)
        fan_in = kh * kw * cin
        if init is None:
            init = "he" if activation == "relu" else "glorot"
        if init == "he":
            k = he_uniform((kh, kw, cin, cout), fan_in, rng, dtype)
        else:
            k = glorot_uniform((kh, kw, cin, cout), fan_in, kh * kw * cout, rng, dtype)
        self.kernel = Tensor(k, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        object.__setattr__(self, "stride", tuple(stride))
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "activation", activation)

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, self.bias, self.stride, self.padding)
        return relu(y) if self.activation == "relu" else y


# -- batch normalization ------------------------------------------------------


class BatchNorm2D(Module):
    """Per-channel batch normalization over the (N,H,W) axes.

    Train mode normalizes with batch statistics and nudges the running
    buffers by ``momentum``; infer mode is the deterministic affine map
    using those buffers.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        object.__setattr__(self, "epsilon", epsilon)
        object.__setattr__(self, "momentum", momentum)
        object.__setattr__(self, "channels", channels)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode not in (TRAIN, INFER):
            raise RuntimeError("batch norm used before set_mode('train'|'infer')")
        if x.data.shape[-1] != self.channels:
            raise ShapeError(
                f"batch norm expects {self.channels} channels, got {x.data.shape[-1]}"
            )
        gamma, beta, eps = self.gamma, self.beta, self.epsilon
        if self.mode == TRAIN:
            axes = (0, 1, 2)
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            m = self.momentum
            self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mu).astype(x.data.dtype))
            self.set_buffer("running_var", ((1 - m) * self.running_var + m * var).astype(x.data.dtype))
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (x.data - mu) * inv_std
            data = gamma.data * xhat + beta.data
            count = x.data.size // self.channels

            def backward():
                g = out.grad
                if beta.requires_grad:
                    accumulate_grad(beta, g.sum(axis=axes))
                if gamma.requires_grad:
                    accumulate_grad(gamma, (g * xhat).sum(axis=axes))
                if x.requires_grad:
                    dxhat = g * gamma.data
                    mean_dxhat = dxhat.sum(axis=axes) / count
                    mean_dxhat_xhat = (dxhat * xhat).sum(axis=axes) / count
                    accumulate_grad(x, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))

            out = make_op(data, (x, gamma, beta), backward)
            return out

        inv_std = 1.0 / np.sqrt(self.running_var + eps)
        xhat = (x.data - self.running_mean) * inv_std
        data = gamma.data * xhat + beta.data

        def backward():
            g = out.grad
            if beta.requires_grad:
                accumulate_grad(beta, g.sum(axis=(0, 1, 2)))
            if gamma.requires_grad:
                accumulate_grad(gamma, (g * xhat).sum(axis=(0, 1, 2)))
            if x.requires_grad:
                accumulate_grad(x, g * (gamma.data * inv_std))

        out = make_op(data, (x, gamma, beta), backward)
        return out


# -- pooling -------------------------------------------------------------------


def avg_pool2d(x: Tensor, pool, stride=None, ceil_mode=False) -> Tensor:
    """Mean over sliding windows.  Partial windows under ceil mode average
    only the cells that exist (no zero padding enters the mean)."""
    ph, pw = pool
    if ph <= 0 or pw <= 0:
        raise ShapeError(f"pool window must be positive, got {(ph, pw)}")
    sh, sw = stride if stride is not None else (ph, pw)
    n, h, w, c = x.data.shape
    if ph > h or pw > w:
        raise ShapeError(f"pool window {(ph, pw)} exceeds spatial extent {(h, w)}")

    if not ceil_mode and sh == ph and sw == pw and h % ph == 0 and w % pw == 0:
        ho, wo = h // ph, w // pw
        data = x.data.reshape(n, ho, ph, wo, pw, c).mean(axis=(2, 4))

        def backward_fast():
            g = out.grad / (ph * pw)
            dx = np.broadcast_to(
                g[:, :, None, :, None, :], (n, ho, ph, wo, pw, c)
            ).reshape(n, h, w, c)
            accumulate_grad(x, dx)

        out = make_op(data, (x,), backward_fast)
        return out

    def n_out(size, k, s):
        base = (size - k) / s
        steps = math.ceil(base) if ceil_mode else math.floor(base)
        steps = max(steps, 0)
        # drop a trailing window that would start past the input
        while steps > 0 and steps * s >= size:
            steps -= 1
        return steps + 1

    ho, wo = n_out(h, ph, sh), n_out(w, pw, sw)
    data = np.empty((n, ho, wo, c), dtype=x.data.dtype)
    windows = []
    for oi in range(ho):
        r0, r1 = oi * sh, min(oi * sh + ph, h)
        for oj in range(wo):
            c0, c1 = oj * sw, min(oj * sw + pw, w)
            windows.append((oi, oj, r0, r1, c0, c1))
            data[:, oi, oj, :] = x.data[:, r0:r1, c0:c1, :].mean(axis=(1, 2))

    def backward():
        g = out.grad
        dx = np.zeros_like(x.data)
        for oi, oj, r0, r1, c0, c1 in windows:
            dx[:, r0:r1, c0:c1, :] += g[:, oi : oi + 1, oj : oj + 1, :] / ((r1 - r0) * (c1 - c0))
        accumulate_grad(x, dx)

    out = make_op(data, (x,), backward)
    return out


def max_pool2d(x: Tensor, pool=(3, 3), stride=(2, 2), padding="same") -> Tensor:
    ph, pw = pool
    sh, sw = stride
    n, h, w, c = x.data.shape
    pt, pb, ho = _pad_amount(h, ph, sh, padding)
    pl, pr, wo = _pad_amount(w, pw, sw, padding)
    xp = np.full((n, h + pt + pb, w + pl + pr, c), -np.inf, dtype=x.data.dtype)
    xp[:, pt : pt + h, pl : pl + w, :] = x.data
    cols = _im2col(xp, ph, pw, sh, sw, ho, wo).reshape(n, ho, wo, ph * pw, c)
    idx = cols.argmax(axis=3)
    data = np.take_along_axis(cols, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward():
        g = out.grad
        dcols = np.zeros_like(cols)
        np.put_along_axis(dcols, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dxp = _col2im(dcols.reshape(n, ho, wo, ph, pw, c), xp.shape, ph, pw, sh, sw, ho, wo)
        accumulate_grad(x, dxp[:, pt : pt + h, pl : pl + w, :])

    out = make_op(data, (x,), backward)
    return out


def interp_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-center bilinear resampling."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(int)
    t = src - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), (1.0 - t).astype(dtype))
    np.add.at(m, (rows, i1), t.astype(dtype))
    return m


def bilinear_upsample(x: Tensor, target) -> Tensor:
    """Half-pixel-center bilinear upsampling of (N,h,w,C) to (N,H,W,C)."""
    n, h, w, c = x.data.shape
    th, tw = target
    if th < h or tw < w:
        raise ShapeError(f"bilinear_upsample only upsamples: {(h, w)} -> {(th, tw)}")
    r = interp_matrix(th, h, x.data.dtype)
    s = interp_matrix(tw, w, x.data.dtype)
    data = np.einsum("ah,nhwc,bw->nabc", r, x.data, s, optimize=True)

    def backward():
        accumulate_grad(x, np.einsum("ah,nabc,bw->nhwc", r, out.grad, s, optimize=True))

    out = make_op(data, (x,), backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    data = x.data.mean(axis=(1, 2))

    def backward():
        g = out.grad[:, None, None, :] / (h * w)
        accumulate_grad(x, np.broadcast_to(g, x.data.shape))

    out = make_op(data, (x,), backward)
    return out


def dropout(x: Tensor, rate: float, mode: str, rng=None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    rescales survivors by 1/(1-rate); infer mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode not in (TRAIN, INFER):
        raise RuntimeError("dropout used before set_mode('train'|'infer')")
    if mode == INFER or rate == 0.0:
        return x
    rng = _rng_or_default(rng)
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    data = x.data * keep * scale

    def backward():
        accumulate_grad(x, out.grad * keep * scale)

    out = make_op(data, (x,), backward)
    return out


class Dropout(Module):
    def __init__(self, rate, seed=0):
        super().__init__()
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "rng", np.random.default_rng(seed))

    def reseed(self, seed):
        object.__setattr__(self, "rng", np.random.default_rng(seed))

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.mode, self.rng)


# -- dense ---------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"affine expects (N,in) input, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine input width {x.data.shape[1]} does not match weight {weight.data.shape}"
        )
    data = x.data @ weight.data + bias.data

    def backward():
        g = out.grad
        if weight.requires_grad:
            accumulate_grad(weight, x.data.T @ g)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))
        if x.requires_grad:
            accumulate_grad(x, g @ weight.data.T)

    out = make_op(data, (x, weight, bias), backward)
    return out


class Dense(Module):
    def __init__(self, n_in, n_out, activation="linear", rng=None, dtype=np.float32):
        super().__init__()
        if activation not in ("linear", "relu", "sigmoid", "softmax"):
            raise ValueError(f"unsupported dense activation {activation!r}")
        rng = _rng_or_default(rng)
        if activation == "relu":
            w = he_uniform((n_in, n_out), n_in, rng, dtype)
        else:
            w = glorot_uniform((n_in, n_out), n_in, n_out, rng, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        object.__setattr__(self, "activation", activation)

    def forward(self, x: Tensor) -> Tensor:
        y = affine(x, self.weight, self.bias)
        if self.activation == "relu":
            return relu(y)
        if self.activation == "sigmoid":
            return sigmoid(y)
        if self.activation == "softmax":
            return softmax_rows(y)
        return y


# -- losses ----------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross entropy; probabilities clamped to [eps, 1-eps]."""
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=p.data.dtype)
    if y_arr.shape != p.data.shape:
        raise ShapeError(f"bce_loss: predictions {p.data.shape} vs targets {y_arr.shape}")
    if not np.all((y_arr == 0) | (y_arr == 1)):
        raise ValueError("bce_loss targets must be exactly 0 or 1")
    y_t = Tensor(y_arr.astype(p.data.dtype))
    ph = clamp(p, BCE_EPS, 1.0 - BCE_EPS)
    term = y_t * log(ph) + (1.0 - y_t) * log(1.0 - ph)
    return -tmean(term)


def cross_entropy_loss(logits: Tensor, y) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects (N,K) logits, got {logits.data.shape}")
    n, k = logits.data.shape
    if k < 2:
        raise ShapeError(f"cross_entropy_loss needs K >= 2 classes, got {k}")
    idx = np.asarray(y, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"class indices must have shape ({n},), got {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"class index out of range [0,{k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    data = np.asarray((lse - logits.data[np.arange(n), idx]).mean(), dtype=logits.data.dtype)

    def backward():
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), idx] -= 1.0
        accumulate_grad(logits, out.grad * soft / n)

    out = make_op(data, (logits,), backward)
    return out
