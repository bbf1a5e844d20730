"""Finite-difference checks for every differentiable op and the full losses.

Each case builds small random inputs from a seed and returns ``(fn, tensors)``
for :func:`bridgenet.gradcheck.check_gradients`. Inputs that feed a kink
(relu, the norm at zero) are kept away from it so central differences stay
valid.
"""
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import check_gradients
from .model import (
    BnnModel, DecoderConfig, ReconModel, TowerConfig, bnn_output, loss_bnn, loss_pair, loss_recon,
    loss_total, pair_distance, tower_forward,
)

TOLERANCE = 1e-4
STEP = 1e-5


def _t(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.where(np.abs(data) < low, np.sign(data + 1e-300) * low, data)
    return Tensor(data, requires_grad=True)


def _weighted(out, rng):
    # a random projection turns any output into a scalar with a generic gradient
    w = rng.standard_normal(out.shape)
    return (out * w).sum()


def _elementwise(name):
    def case(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        if name == "div":
            b = Tensor(np.abs(b.data) + 0.5, requires_grad=True)
        if name == "power":
            a = Tensor(np.abs(a.data) + 0.5, requires_grad=True)
        w = rng.standard_normal((3, 4))
        ops = {
            "add": lambda: ((a + b) * w).sum(),
            "sub": lambda: ((a - b) * w).sum(),
            "mul": lambda: ((a * b) * w).sum(),
            "div": lambda: ((a / b) * w).sum(),
            "neg": lambda: ((-a) * w).sum(),
            "power": lambda: ((a ** 2.5) * w).sum(),
        }
        return ops[name], [a, b] if name in ("add", "sub", "mul", "div") else [a]
    return case


def _broadcast(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    w = rng.standard_normal((3, 4))
    return lambda: ((a * b + b) * w).sum(), [a, b]


def _reductions(rng):
    a = _t(rng, 3, 4, 2)
    w = rng.standard_normal((3, 2))
    return lambda: (ad.tsum(a, axis=1) * w).sum() + ad.mean(a) * 3.0, [a]


def _reshape_getitem(rng):
    a = _t(rng, 4, 6)
    idx = rng.integers(0, 4, size=7)
    w = rng.standard_normal((7, 3, 2))
    return lambda: (ad.reshape(a[idx], (7, 3, 2)) * w).sum(), [a]


def _norm_rows(rng):
    a = _t(rng, 5, 3)
    w = rng.standard_normal(5)
    return lambda: (ad.norm_rows(a) * w).sum(), [a]


def _relu(rng):
    a = _t(rng, 4, 5, low=1e-2)
    w = rng.standard_normal((4, 5))
    return lambda: (ad.relu(a) * w).sum(), [a]


def _sigmoid(rng):
    a = Tensor(rng.standard_normal((4, 5)) * 3.0, requires_grad=True)
    w = rng.standard_normal((4, 5))
    return lambda: (ad.sigmoid(a) * w).sum(), [a]


def _affine(rng):
    x, W, b = _t(rng, 4, 3), _t(rng, 3, 5), _t(rng, 5)
    w = rng.standard_normal((4, 5))
    return lambda: (ad.affine(x, W, b) * w).sum(), [x, W, b]


def _conv2d(rng):
    x, k, b = _t(rng, 2, 2, 5, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    w = rng.standard_normal((2, 3, 3, 4))
    return lambda: (ad.conv2d(x, k, b) * w).sum(), [x, k, b]


def _conv_transpose2d(rng):
    x, k, b = _t(rng, 2, 2, 3, 2), _t(rng, 2, 3, 3, 3), _t(rng, 3)
    out_shape = ad.conv_transpose2d(x, k, b, stride=2, output_padding=1).shape
    w = rng.standard_normal(out_shape)
    return lambda: (ad.conv_transpose2d(x, k, b, stride=2, output_padding=1) * w).sum(), [x, k, b]


def _pad2d(rng):
    x = _t(rng, 2, 1, 3, 2)
    w = rng.standard_normal((2, 1, 5, 4))
    return lambda: (ad.pad2d(x, 1) * w).sum(), [x]


def _batch_norm(rng):
    x = _t(rng, 4, 2, 3, 3)
    state = ad.BatchNormState(2)
    state.scale = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    state.shift = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal(x.shape)
    return lambda: (ad.batch_norm(x, state) * w).sum(), [x, state.scale, state.shift]


def _batch_norm_inference(rng):
    x = _t(rng, 3, 2, 2, 2)
    state = ad.BatchNormState(2, training=False)
    state.running_mean = rng.standard_normal(2)
    state.running_var = rng.uniform(0.5, 2.0, 2)
    state.scale = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    w = rng.standard_normal(x.shape)
    return lambda: (ad.batch_norm(x, state) * w).sum(), [x, state.scale, state.shift]


TINY_VIEW = (1, 8, 6)


def tiny_bnn(seed):
    cfg = TowerConfig(input_shape=TINY_VIEW, num_conv_layers=2, filters=2, representation_dim=3)
    return BnnModel(cfg, seed=seed).train()


def tiny_recon(seed):
    bnn = tiny_bnn(seed)
    dec = DecoderConfig(representation_dim=3, output_shape=TINY_VIEW, seed_shape=(2, 2, 2), filters=(2, 2))
    model = ReconModel(bnn, dec, dec, seed=seed + 1)
    # zero biases put relu inputs exactly on the kink wherever a whole
    # receptive field is dead; nudge them off it
    rng = np.random.default_rng(seed + 2)
    for name, p in model.named_parameters().items():
        if name.endswith("bias"):
            p.data += rng.uniform(0.05, 0.1, p.shape)
    return model


def _tower(rng):
    model = tiny_bnn(int(rng.integers(2**31)))
    x = rng.standard_normal((4, *TINY_VIEW))
    w = rng.standard_normal((4, 3))
    return lambda: (tower_forward(model, "left", x) * w).sum(), model.parameters("left")


def _l_bnn(rng):
    model = tiny_bnn(int(rng.integers(2**31)))
    x1 = rng.standard_normal((6, *TINY_VIEW))
    x2 = rng.standard_normal((6, *TINY_VIEW))

    def fn():
        f = bnn_output(model, x1, x2)
        return loss_bnn(loss_pair(f[:2], 0), loss_pair(f[2:], 1), 0.7)
    return fn, model.parameters()


def _l_total(rng):
    model = tiny_recon(int(rng.integers(2**31)))
    x1 = rng.uniform(0, 1, (6, *TINY_VIEW))
    x2 = rng.uniform(0, 1, (6, *TINY_VIEW))

    def fn():
        h1, h2 = tower_forward(model, "left", x1), tower_forward(model, "right", x2)
        f = pair_distance(h1, h2)
        l_bnn = loss_bnn(loss_pair(f[:3], 0), loss_pair(f[3:], 1), 1.0)
        l_self, l_cross = loss_recon(model, x1[:3], x2[:3], reps=(h1[:3], h2[:3]))
        return loss_total(l_bnn, l_self, l_cross)
    return fn, model.parameters()


CASES = {
    "add": _elementwise("add"),
    "sub": _elementwise("sub"),
    "mul": _elementwise("mul"),
    "div": _elementwise("div"),
    "neg": _elementwise("neg"),
    "power": _elementwise("power"),
    "broadcast": _broadcast,
    "sum/mean": _reductions,
    "reshape/index": _reshape_getitem,
    "norm_rows": _norm_rows,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "affine": _affine,
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "pad2d": _pad2d,
    "batch_norm": _batch_norm,
    "batch_norm_eval": _batch_norm_inference,
    "tower": _tower,
    "l_bnn": _l_bnn,
    "l_total": _l_total,
}


def case_error(name, seed, eps=STEP):
    fn, tensors = CASES[name](np.random.default_rng([seed, len(name)]))
    return check_gradients(fn, tensors, eps)


def run_suite(seeds=20, names=None, tolerance=TOLERANCE):
    """Rows of ``(op, worst_relative_error, tolerance, passed)``."""
    rows = []
    for name in names or CASES:
        worst = max(case_error(name, s) for s in range(seeds))
        rows.append((name, worst, tolerance, bool(worst <= tolerance)))
    return rows
