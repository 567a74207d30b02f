"""Reverse-mode automatic differentiation over dense numpy arrays.

Implements exactly the primitives a small convolutional encoder-decoder and
its quadratic losses need: conv2d, relu, 2x max-pool / nearest-neighbor
upsample, channel concat, elementwise arithmetic, sum/mean reductions and a
fused mean-squared-error, plus the Adam optimizer. No broadcasting beyond
scalar-with-array; no GPU; graphs are consumed by a single backward pass.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from n2c import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / target evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional position in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b):
    """Python-number operands become constants in the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce an array gradient back to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=g.dtype).reshape(shape)


# -- elementwise and reduction primitives -------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out_data, (a, b), backward_fn)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out_data, (a, b), backward_fn)


def tensor_sum(a):
    a = _as_tensor(a)
    out_data = np.sum(a.data)

    def backward_fn(g):
        return (np.full(a.shape, g, dtype=a.dtype),) if a.requires_grad else (None,)

    return _result(out_data, (a,), backward_fn)


def tensor_mean(a):
    a = _as_tensor(a)
    out_data = np.mean(a.data)
    n = a.size

    def backward_fn(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),) if a.requires_grad else (None,)

    return _result(out_data, (a,), backward_fn)


def mse_mean(a, b):
    """Mean of squared differences; gradient w.r.t. a is 2(a-b)/numel."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out_data = np.mean(diff * diff)
    n = a.size

    def backward_fn(g):
        base = (2.0 * g / n) * diff
        ga = base.astype(a.dtype, copy=False) if a.requires_grad else None
        gb = (-base).astype(b.dtype, copy=False) if b.requires_grad else None
        return ga, gb

    return _result(out_data, (a, b), backward_fn)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    out_data = np.where(mask, a.data, 0)

    def backward_fn(g):
        return (g * mask,) if a.requires_grad else (None,)

    return _result(out_data, (a,), backward_fn)


# -- spatial primitives --------------------------------------------------


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding over [B,C,H,W] inputs."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x[B,Ci,H,W] and kernel[Co,Ci,kH,kW]")
    b, ci, h, w = x.shape
    co, ci_k, kh, kw = kernel.shape
    if ci != ci_k:
        raise ValueError(f"conv2d: input has {ci} channels, kernel expects {ci_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if x.dtype != kernel.dtype:
        raise ValueError(f"conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d: non-integral output dims for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("conv2d: kernel larger than padded input")

    out_data = kernels.conv2d_forward(x.data, kernel.data, stride, padding)
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (co,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_grad_input(g, kernel.data, h, w, stride, padding) \
            if x.requires_grad else None
        gk = kernels.conv2d_grad_kernel(g, x.data, kh, kw, stride, padding) \
            if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return _result(out_data, parents, backward_fn)


def downsample2x(x):
    """2x2 max pooling; gradient routes to the first max in row-major order."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x: spatial dims must be even, got {h}x{w}")
    windows = np.ascontiguousarray(
        x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(b, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.ascontiguousarray(
            gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(b, c, h, w)
        return (gx,)

    return _result(np.ascontiguousarray(out_data), (x,), backward_fn)


def upsample2x(x):
    """Nearest-neighbor 2x upsample; gradient sums each replicated block."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out_data, (x,), backward_fn)


def concat_channels(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape}, {b.shape}")
    c1 = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        ga = np.ascontiguousarray(g[:, :c1]) if a.requires_grad else None
        gb = np.ascontiguousarray(g[:, c1:]) if b.requires_grad else None
        return ga, gb

    return _result(out_data, (a, b), backward_fn)


# -- backward pass -------------------------------------------------------


def backward(loss):
    """Populate .grad on every reachable requires_grad tensor.

    The graph is consumed: parent links are cleared so a second call fails.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar Tensor loss")
    if loss._backward is None:
        raise ValueError("backward requires a loss attached to a gradient graph")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.dtype) if loss.shape == () else \
        np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(topo):
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                _accumulate(parent, g)
        node._parents = ()
        node._backward = None
        if node is not loss and not node.requires_grad:
            node.grad = None


# -- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates plus step count for a parameter list."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    if lr <= 0:
        raise ValueError(f"Adam lr must be positive, got {lr}")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params/grads/state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.dtype, copy=False
        )
    return params, state


class Adam:
    """Optimizer wrapper collecting gradients straight off the tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = init_adam(self.params, lr, beta1, beta2, eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
