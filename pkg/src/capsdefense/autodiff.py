"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float32 (or float64, for finite-difference shadow runs)
ndarray and records enough of the computation graph to backpropagate a
scalar loss to every tensor that requires gradients, including network
inputs. Gradients from repeated uses of the same tensor accumulate by
summation, so a parameter set appearing twice in one graph (e.g. a
classifier applied to both an image and its reconstruction) receives the
sum of both contributions.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Backpropagate from a scalar loss, populating .grad on the way."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic (numpy broadcasting allowed) --------------

    @staticmethod
    def _lift(x, dtype):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    def __add__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._node(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._node(-a.data, (a,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other, self.dtype)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._node(a.data / b.data, (a, b), backward)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise UsageError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._node(a.data**p, (a,), backward)

    # -- reductions and shape ops -----------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis, keepdims=False):
        a = self
        out = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == out).astype(a.dtype)
        # split ties evenly so the subgradient stays bounded
        mask /= mask.sum(axis=axis, keepdims=True)

        def backward(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(mask * gg)

        return Tensor._node(out if keepdims else out.squeeze(axis), (a,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._node(a.data.reshape(shape), (a,), backward)

    # -- unary nonlinearities ----------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._node(out_data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._node(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            denom = np.maximum(out_data, np.finfo(a.dtype).tiny)
            a._accumulate(g * 0.5 / denom)

        return Tensor._node(out_data, (a,), backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._node(out_data, (a,), backward)

    def relu(self):
        a = self

        def backward(g):
            a._accumulate(g * (a.data > 0))

        return Tensor._node(np.maximum(a.data, 0), (a,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    def backward(g):
        x._accumulate(g * np.where(x.data > 0, 1.0, slope).astype(x.dtype))

    return Tensor._node(np.where(x.data > 0, x.data, x.data * slope), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._node(out_data, (x,), backward)


def activation(x: Tensor, kind: str, slope: float = 0.1) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown activation kind: {kind!r}")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._node(a.data @ b.data, (a, b), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b. x may be (K,) or (B, K); W is (K, M), b is (M,)."""
    single = x.data.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != weight.shape[0]:
        raise ConfigurationError(
            f"dense shape mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(
            f"dense bias shape {bias.shape} does not match weight {weight.shape}"
        )
    out = matmul(x2, weight) + bias
    return out.reshape(-1) if single else out


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x is NCHW, weight is OIHW, bias is (O,)."""
    if x.data.ndim == 3:
        return conv2d(x.reshape((1,) + x.shape), weight, bias, stride, padding).reshape(
            *conv2d_output_shape(x.shape, weight.shape, stride, padding)
        )
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input/weight, got {x.shape}/{weight.shape}")
    B, C, H, W = x.shape
    O, I, kH, kW = weight.shape
    if C != I:
        raise ConfigurationError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    if H + 2 * padding < kH or W + 2 * padding < kW:
        raise ConfigurationError(
            f"conv2d kernel {weight.shape} larger than padded input {x.shape}"
        )
    if bias.shape != (O,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")

    xp = _pad_hw(x.data, padding)
    # (B, C, Ho, Wo, kH, kW)
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kH * kW)
    wmat = weight.data.reshape(O, C * kH * kW)
    out_data = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2) + bias.data.reshape(
        1, O, 1, 1
    )

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kH, kW)
            dxp = np.zeros_like(xp)
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding : padding + H, padding : padding + W]
            x._accumulate(dxp)

    return Tensor._node(out_data.astype(x.dtype, copy=False), (x, weight, bias), backward)


def conv2d_output_shape(in_shape, w_shape, stride, padding):
    C, H, W = in_shape[-3:]
    O, _, kH, kW = w_shape
    return (O, (H + 2 * padding - kH) // stride + 1, (W + 2 * padding - kW) // stride + 1)


def deconv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution. x is NCHW, weight is (I, O, kH, kW).

    Output spatial dims are (H-1)*stride + kH. The input gradient is exactly
    a conv2d forward with the same weight (adjoint pair).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"deconv2d expects 4-D input/weight, got {x.shape}/{weight.shape}")
    B, C, H, W = x.shape
    I, O, kH, kW = weight.shape
    if C != I:
        raise ConfigurationError(
            f"deconv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if stride < 1:
        raise ConfigurationError(f"deconv2d stride must be >= 1, got {stride}")
    Ho, Wo = (H - 1) * stride + kH, (W - 1) * stride + kW

    xmat = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = weight.data.reshape(I, O * kH * kW)
    contrib = (xmat @ wmat).reshape(B, H, W, O, kH, kW)
    out_data = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for i in range(kH):
        for j in range(kW):
            out_data[:, :, i : i + H * stride : stride, j : j + W * stride : stride] += contrib[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)

    def backward(g):
        # windows of g aligned with each input position: (B, O, H, W, kH, kW)
        win = sliding_window_view(g, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, O * kH * kW)
        wflat = weight.data.reshape(I, O * kH * kW)
        if x.requires_grad:
            dx = (cols @ wflat.T).reshape(B, H, W, I).transpose(0, 3, 1, 2)
            x._accumulate(dx.astype(x.dtype, copy=False))
        if weight.requires_grad:
            xflat = x.data.transpose(1, 0, 2, 3).reshape(I, B * H * W)
            dw = (xflat @ cols).reshape(weight.shape)
            weight._accumulate(dw.astype(weight.dtype, copy=False))

    return Tensor._node(out_data, (x, weight), backward)


def avg_pool2d(x: Tensor, pool: int, stride: int | None = None) -> Tensor:
    if stride is None:
        stride = pool
    if pool < 1:
        raise ConfigurationError(f"avg_pool2d pool must be >= 1, got {pool}")
    B, C, H, W = x.shape
    if pool > H or pool > W:
        raise ConfigurationError(f"avg_pool2d window {pool} larger than input {x.shape}")
    win = sliding_window_view(x.data, (pool, pool), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    out_data = win.mean(axis=(4, 5))

    def backward(g):
        dx = np.zeros_like(x.data)
        gscaled = g / (pool * pool)
        for i in range(pool):
            for j in range(pool):
                dx[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gscaled
        x._accumulate(dx)

    return Tensor._node(out_data.astype(x.dtype, copy=False), (x,), backward)


def caps_transform(u: Tensor, weight: Tensor) -> Tensor:
    """Per-(input-capsule, output-capsule) linear prediction vectors.

    u: (B, I, A) input poses; weight: (I, A, M, D). Returns (B, I, M, D).
    """
    if u.shape[1:] != weight.shape[:2]:
        raise ConfigurationError(
            f"caps_transform mismatch: poses {u.shape} vs weight {weight.shape}"
        )
    B, I, A = u.shape
    _, _, M, D = weight.shape
    ut = np.ascontiguousarray(u.data.transpose(1, 0, 2))  # (I, B, A)
    wt = weight.data.reshape(I, A, M * D)
    out_data = np.matmul(ut, wt).transpose(1, 0, 2).reshape(B, I, M, D)

    def backward(g):
        gt = np.ascontiguousarray(g.reshape(B, I, M * D).transpose(1, 0, 2))  # (I, B, MD)
        if u.requires_grad:
            du = np.matmul(gt, wt.transpose(0, 2, 1))  # (I, B, A)
            u._accumulate(du.transpose(1, 0, 2).astype(u.dtype, copy=False))
        if weight.requires_grad:
            dw = np.matmul(ut.transpose(0, 2, 1), gt)  # (I, A, MD)
            weight._accumulate(dw.reshape(weight.shape).astype(weight.dtype, copy=False))

    return Tensor._node(out_data.astype(u.dtype, copy=False), (u, weight), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """-log softmax(logits)[target]; per-row for 2-D logits (returns (B,))."""
    single = logits.data.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise UsageError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise UsageError(f"target out of range for {z.shape[1]} classes")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    losses = (lse[:, 0] - z[np.arange(z.shape[0]), t]).astype(logits.dtype)
    softmax = np.exp(z - lse)

    def backward(g):
        gg = np.atleast_1d(g)
        grad = softmax.copy()
        grad[np.arange(z.shape[0]), t] -= 1.0
        grad *= gg.reshape(-1, 1)
        logits._accumulate(grad.reshape(logits.data.shape).astype(logits.dtype, copy=False))

    out = losses[0] if single else losses
    return Tensor._node(out, (logits,), backward)


def _l2_core(a, b, axes, out_shape):
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=axes)).reshape(out_shape)

    def backward(g, a=a, b=b, diff=diff, dist=dist):
        safe = np.maximum(dist, np.finfo(diff.dtype).tiny)
        scale = (np.asarray(g).reshape(out_shape) / safe).reshape(
            out_shape + (1,) * (diff.ndim - len(out_shape))
        )
        if a.requires_grad:
            a._accumulate(diff * scale)
        if b.requires_grad:
            b._accumulate(-diff * scale)

    return Tensor._node(dist.reshape(out_shape) if out_shape else dist.reshape(()), (a, b), backward)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean norm of (a - b) over all elements; scalar output."""
    if a.shape != b.shape:
        raise ConfigurationError(f"l2_distance shape mismatch: {a.shape} vs {b.shape}")
    return _l2_core(a, b, None, ())


def l2_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample Euclidean distance for batched tensors; output shape (B,)."""
    if a.shape != b.shape:
        raise ConfigurationError(f"l2_distance shape mismatch: {a.shape} vs {b.shape}")
    axes = tuple(range(1, a.data.ndim))
    return _l2_core(a, b, axes, (a.shape[0],))


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Norm-compressing nonlinearity: |s|^2/(1+|s|^2) * s/|s|, squash(0) = 0."""
    n2 = (s * s).sum(axis=axis, keepdims=True)
    scale = n2 / ((n2 + 1.0) * (n2 + 1e-12).sqrt())
    return s * scale


def vector_norm(v: Tensor, axis: int = -1) -> Tensor:
    return (v * v).sum(axis=axis).sqrt()


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """Per-parameter moment buffers for the Adam update."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState) -> None:
    """One bias-corrected Adam update over state.params, consuming .grad."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(state.params):
        if p.grad is None:
            raise UsageError("adam_step: parameter has no gradient")
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


class Adam:
    """Thin object wrapper around AdamState for training loops."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(params, lr, beta1, beta2, eps)

    def step(self):
        adam_step(self.state)

    def zero_grad(self):
        for p in self.state.params:
            p.grad = None
