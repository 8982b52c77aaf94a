"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (typically NCHW feature maps, but scalars and other
ranks are allowed for loss plumbing).  Every differentiable op builds a node
holding references to its parents and a closure that maps the upstream
gradient to per-parent gradients; ``backward`` replays the recorded graph in
reverse topological order and accumulates gradients into the leaves that were
created with ``requires_grad=True``.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "bilinear_resize",
    "concat_channels",
    "global_avg_pool",
    "sum_all",
    "mean_all",
    "Adam",
]


class _EngineState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.flop_recorder = None


_state = _EngineState()


class no_grad:
    """Context manager that disables graph recording (eval-mode forwards)."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _record_flops(kind, count):
    rec = _state.flop_recorder
    if rec is not None:
        rec.add(kind, int(count))


def set_flop_recorder(rec):
    """Install (or clear, with None) the active FLOP recorder."""
    _state.flop_recorder = rec


class scoped:
    """Attribute recorded FLOPs to `name` while the block is active.

    No-op when no recorder is installed or name is None.
    """

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        rec = _state.flop_recorder
        if rec is not None and self.name is not None:
            self._prev = rec.scope
            rec.scope = self.name
        else:
            self._prev = None
        return self

    def __exit__(self, *exc):
        rec = _state.flop_recorder
        if rec is not None and self._prev is not None:
            rec.scope = self._prev
        return False


class Tensor:
    """A numpy array plus optional gradient and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make_node(data, parents, backward_fn):
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad or p._backward_fn is not None
                                   for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def add(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    try:
        data = x.data + y.data
    except ValueError:
        raise ValueError(f"add: shapes {x.shape} and {y.shape} not broadcastable")
    _record_flops("elementwise", data.size)

    def bwd(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make_node(data, (x, y), bwd)


def sub(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    try:
        data = x.data - y.data
    except ValueError:
        raise ValueError(f"sub: shapes {x.shape} and {y.shape} not broadcastable")
    _record_flops("elementwise", data.size)

    def bwd(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _make_node(data, (x, y), bwd)


def mul(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    try:
        data = x.data * y.data
    except ValueError:
        raise ValueError(f"mul: shapes {x.shape} and {y.shape} not broadcastable")
    _record_flops("elementwise", data.size)

    def bwd(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _make_node(data, (x, y), bwd)


def div(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    try:
        data = x.data / y.data
    except ValueError:
        raise ValueError(f"div: shapes {x.shape} and {y.shape} not broadcastable")
    _record_flops("elementwise", data.size)

    def bwd(g):
        gx = _unbroadcast(g / y.data, x.shape)
        gy = _unbroadcast(-g * x.data / (y.data * y.data), y.shape)
        return gx, gy

    return _make_node(data, (x, y), bwd)


def relu(x):
    data = np.maximum(x.data, 0)
    _record_flops("elementwise", data.size)

    def bwd(g):
        return (g * (x.data > 0),)

    return _make_node(data, (x,), bwd)


def sigmoid(x):
    # split by sign to stay overflow-free in float32
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    _record_flops("elementwise", out.size)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make_node(out, (x,), bwd)


def exp(x):
    data = np.exp(x.data)
    _record_flops("elementwise", data.size)

    def bwd(g):
        return (g * data,)

    return _make_node(data, (x,), bwd)


def log(x):
    data = np.log(x.data)
    _record_flops("elementwise", data.size)

    def bwd(g):
        return (g / x.data,)

    return _make_node(data, (x,), bwd)


# -- reductions --------------------------------------------------------------


def sum_all(x):
    data = np.asarray(x.data.sum(), dtype=x.dtype)
    _record_flops("elementwise", x.size)

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make_node(data, (x,), bwd)


def mean_all(x):
    n = x.size
    data = np.asarray(x.data.mean(), dtype=x.dtype)
    _record_flops("elementwise", n)

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _make_node(data, (x,), bwd)


def global_avg_pool(x):
    """Spatial mean: (N,C,H,W) -> (N,C,1,1)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)
    _record_flops("pool", n * c)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype, copy=True),)

    return _make_node(data, (x,), bwd)


# -- structural ops ----------------------------------------------------------


def concat_channels(xs):
    """Concatenate NCHW tensors along the channel axis."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4:
            raise ValueError(f"concat_channels expects 4-D tensors, got shape {t.shape}")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels: shape {t.shape} incompatible with {ref} "
                "(batch/spatial dims must match)")
    data = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return _make_node(data, tuple(xs), bwd)


def _conv_out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation over NCHW input.

    weight: (Cout, Cin, kh, kw).  Output spatial size follows the usual
    floor((H + 2p - d*(k-1) - 1)/s) + 1 rule.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D (Cout,Cin,kh,kw), got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if h + 2 * padding < eff_h or w + 2 * padding < eff_w:
        raise ValueError(
            f"conv2d: effective kernel ({eff_h}x{eff_w}) exceeds padded input "
            f"({h + 2 * padding}x{w + 2 * padding})")
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(w, kw, stride, padding, dilation)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, cin, oh, ow, kh, kw),
        strides=(sn, sc, stride * sh, stride * sw, dilation * sh, dilation * sw),
        writeable=False,
    )
    # im2col: one GEMM instead of nested loops
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    _record_flops("conv", 2 * cout * cin * kh * kw * oh * ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        gcols = (gmat @ wmat).reshape(n, oh, ow, cin, kh, kw)
        gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :,
                    i * dilation:i * dilation + stride * oh:stride,
                    j * dilation:j * dilation + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make_node(out, parents, bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N,H,W).

    ``running_mean``/``running_var`` are plain numpy buffers updated in place
    in train mode (exponential moving average) and consumed in eval mode.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm: input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match C={c}")
    _record_flops("elementwise", x.size)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gxhat = g * gamma.data[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            gx = gx.astype(x.dtype, copy=False)
        else:
            gx = g * (gamma.data * inv_std)[None, :, None, None]
        return gx, ggamma, gbeta

    return _make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def _resize_matrix(n_in, n_out, align_corners, dtype):
    """Dense (n_out, n_in) linear-interpolation matrix for one axis."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if align_corners:
        if n_out == 1:
            src = np.zeros(1)
        else:
            src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    else:
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear_np(arr, out_h, out_w, align_corners=True):
    """Bilinear resize of the trailing two axes of a plain numpy array."""
    h, w = arr.shape[-2], arr.shape[-1]
    if out_h == h and out_w == w:
        return arr.copy()
    mh = _resize_matrix(h, out_h, align_corners, arr.dtype)
    mw = _resize_matrix(w, out_w, align_corners, arr.dtype)
    tmp = arr @ mw.T
    return np.swapaxes(np.swapaxes(tmp, -1, -2) @ mh.T, -1, -2)


def bilinear_resize(x, out_h, out_w, align_corners=True):
    """Differentiable bilinear resize of an NCHW tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize expects a 4-D tensor, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        def bwd_id(g):
            return (g,)
        return _make_node(x.data.copy(), (x,), bwd_id)
    mh = _resize_matrix(h, out_h, align_corners, x.dtype)
    mw = _resize_matrix(w, out_w, align_corners, x.dtype)
    tmp = x.data @ mw.T
    out = np.swapaxes(np.swapaxes(tmp, -1, -2) @ mh.T, -1, -2)
    _record_flops("resize", out.size)

    def bwd(g):
        t = np.swapaxes(np.swapaxes(g, -1, -2) @ mh, -1, -2)
        return (np.ascontiguousarray(t @ mw),)

    return _make_node(np.ascontiguousarray(out), (x,), bwd)


# -- backward pass -----------------------------------------------------------


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad leaf of ``loss``.

    Gradients accumulate additively into existing ``grad`` buffers; callers
    (or the optimizer) clear them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo = []
    visiting = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visiting:
            continue
        visiting.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visiting:
                stack.append((p, False))

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not (parent.requires_grad or parent._backward_fn is not None):
                continue
            acc = flowing.get(id(parent))
            if acc is None:
                # copy: backward closures may alias the upstream gradient
                flowing[id(parent)] = np.array(pg, dtype=parent.dtype)
            else:
                acc += pg


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {i} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.dtype, copy=False)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self):
        """Moment buffers as named arrays, for optional checkpointing."""
        out = {}
        for i in range(len(self.params)):
            out[f"adam.m.{i}"] = self.m[i]
            out[f"adam.v.{i}"] = self.v[i]
        return out
