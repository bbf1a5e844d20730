"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Tape` are appended to it in
execution order; :func:`backward` replays the tape in reverse. Outside a
tape nothing is recorded, which is how inference and the frozen tower of an
alternating update are run.

    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    with Tape():
        loss = (affine(x, w, b) ** 2).sum()
    loss.backward()          # w.grad now holds d loss / d w
"""
import contextvars
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateBatchError, DimensionError, GraphError, ParameterError

__all__ = [
    "Tensor", "Tape", "BatchNormState", "no_grad", "backward", "current_tape",
    "add", "sub", "mul", "div", "neg", "power", "tsum", "mean", "reshape",
    "getitem", "norm_rows", "relu", "sigmoid", "activation", "affine",
    "conv2d", "conv_transpose2d", "pad2d", "batch_norm",
]

_active_tape = contextvars.ContextVar("bridgenet_active_tape", default=None)

_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - 2.0**-53


class Node:
    __slots__ = ("op", "inputs", "output", "backward", "tape")

    def __init__(self, op, inputs, output, backward, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape

    def __repr__(self):
        return f"Node({self.op}, out={self.output.shape})"


class Tape:
    """Ordered record of the operations executed while the tape is active.

    A tape belongs to one thread of execution; the active tape is held in a
    context variable so concurrent threads each see their own.
    """

    def __init__(self):
        self.nodes = []
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        node = Node(op, inputs, output, backward_fn, self)
        output._node = node
        self.nodes.append(node)
        return node

    def backward(self, loss):
        backward(loss, self)


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


def current_tape():
    return _active_tape.get()


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, inputs, backward_fn):
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss, tape=None):
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf.

    Repeated calls accumulate; call ``zero_grad`` on the leaves in between to
    start fresh.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    node = loss._node
    if node is None:
        raise GraphError("loss was not produced by an operation recorded on a tape")
    if tape is None:
        tape = node.tape
    elif node.tape is not tape:
        raise GraphError("loss is not on the given tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = pending.pop(id(nd.output), None)
        if g is None:
            continue
        for t, gi in zip(nd.inputs, nd.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def grad(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), grad)


def neg(a):
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    return _make("pow", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), grad)


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = _as_tensor(a)
    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", a.data[idx], (a,), grad)


def norm_rows(a):
    """Euclidean norm over the last axis. The gradient at a zero row is taken as 0."""
    a = _as_tensor(a)
    out = np.sqrt(np.sum(a.data**2, axis=-1))

    def grad(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return (a.data * scale[..., None],)

    return _make("norm_rows", out, (a,), grad)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the range open: float rounding would otherwise hit 0 or 1 exactly
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(a, kind):
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ParameterError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- layers


def affine(x, weight, bias):
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")

    def grad(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _make("affine", x.data @ weight.data + bias.data, (x, weight, bias), grad)


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x, kernel, bias=None):
    """Cross-correlation with stride 1 and no padding."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    bias = _as_tensor(np.zeros(F) if bias is None else bias)
    if bias.shape != (F,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({F},)")
    Ho, Wo = H - kh + 1, W - kw + 1

    cols = kernels.im2col(x.data, kh, kw, 1, Ho, Wo)
    wmat = kernel.data.reshape(F, -1)
    out = (cols @ wmat.T + bias.data).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def grad(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(gm @ wmat, (B, C, H, W), kh, kw, 1, Ho, Wo)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk, gm.sum(axis=0)

    return _make("conv2d", out, (x, kernel, bias), grad)


def conv_transpose2d(x, kernel, bias=None, stride=1, output_padding=0):
    """Adjoint of a strided valid convolution.

    ``kernel`` has shape ``[C_in, F_out, kh, kw]``; the output spatial size is
    ``(H - 1) * stride + kh + output_padding`` per axis.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(output_padding)
    if sh != sw:
        raise ParameterError("conv_transpose2d supports equal strides only")
    s = int(sh)
    if s < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if ph < 0 or pw < 0 or ph >= s or pw >= s:
        raise ParameterError(f"output_padding {output_padding} must be in [0, stride={s})")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4-d input and kernel")
    B, C, H, W = x.shape
    Ck, F, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv_transpose2d: input has {C} channels but kernel expects {Ck}")
    bias = _as_tensor(np.zeros(F) if bias is None else bias)
    Ho, Wo = (H - 1) * s + kh + ph, (W - 1) * s + kw + pw

    xm = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = kernel.data.reshape(C, F * kh * kw)
    out = kernels.col2im(xm @ wmat, (B, F, Ho, Wo), kh, kw, s, H, W)
    out += bias.data[None, :, None, None]

    def grad(g):
        gcols = kernels.im2col(g, kh, kw, s, H, W)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        gk = (xm.T @ gcols).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make("conv_transpose2d", out, (x, kernel, bias), grad)


def pad2d(x, pad):
    """Zero-pad both spatial axes by ``pad`` on every side."""
    p = int(pad)
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    H, W = x.shape[2:]
    return _make("pad2d", out, (x,), lambda g: (g[:, :, p : p + H, p : p + W],))


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics.

    ``momentum`` weights the previous running value:
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    num_channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    training: bool = True
    scale: Tensor = field(default=None)
    shift: Tensor = field(default=None)
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ParameterError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ParameterError("eps must be positive")
        c = self.num_channels
        if self.scale is None:
            self.scale = Tensor(np.ones(c), requires_grad=True)
        if self.shift is None:
            self.shift = Tensor(np.zeros(c), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)

    @property
    def mode(self):
        return "training" if self.training else "inference"


def batch_norm(x, state, update_running=True):
    """Normalize each channel of an NCHW tensor.

    In training mode the batch statistics are used and, unless
    ``update_running`` is false, folded into the running estimates. In
    inference mode only the running estimates are read.
    """
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != state.num_channels:
        raise DimensionError(f"batch_norm: input {x.shape} does not have {state.num_channels} channels")
    scale, shift = state.scale, state.shift
    axes = (0, 2, 3)
    bshape = (1, -1, 1, 1)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if state.training:
        if m < 2:
            raise DegenerateBatchError(
                f"training-mode batch norm needs at least 2 values per channel, got {m}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            k = state.momentum
            state.running_mean = k * state.running_mean + (1.0 - k) * mu
            state.running_var = k * state.running_var + (1.0 - k) * var * (m / (m - 1))
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    training = state.training

    def grad(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data.reshape(bshape)
            if training:
                gx = (inv_std.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return _make("batch_norm", out, (x, scale, shift), grad)
