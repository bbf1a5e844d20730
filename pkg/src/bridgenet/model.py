"""Two-tower bridge network, its pair losses, and the reconstruction decoders.

Each tower is ``k - 1`` blocks of (valid 3x3 conv -> batch norm -> relu)
followed by a linear projection to ``n`` dimensions and a sigmoid. The two
towers never share weights. The bridge output of a pair is the Euclidean
distance of the two tower outputs scaled by ``1 / sqrt(n)``, which lies in
``[0, 1)``.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    BatchNormState, Tensor, affine, batch_norm, conv2d, conv_transpose2d, getitem,
    norm_rows, pad2d, relu, reshape, sigmoid,
)
from .errors import ContractError, DimensionError, ParameterError

SIDES = ("left", "right")


def _check_side(side):
    if side not in SIDES:
        raise ParameterError(f"side must be 'left' or 'right', got {side!r}")


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass(frozen=True)
class TowerConfig:
    input_shape: tuple = (1, 28, 14)
    num_conv_layers: int = 3
    filters: int = 10
    kernel: tuple = (3, 3)
    representation_dim: int = 50
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        if len(self.input_shape) != 3:
            raise DimensionError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.representation_dim < 1:
            raise ParameterError("representation_dim must be >= 1")
        if self.num_conv_layers < 1 or self.filters < 1:
            raise ParameterError("need at least one conv layer with one filter")
        _, h, w = self.conv_output_shape
        if h < 1 or w < 1:
            raise DimensionError(
                f"{self.num_conv_layers} valid {self.kernel} convolutions do not fit "
                f"input {self.input_shape}")

    @property
    def conv_output_shape(self):
        c, h, w = self.input_shape
        kh, kw = self.kernel
        L = self.num_conv_layers
        return self.filters, h - L * (kh - 1), w - L * (kw - 1)

    @property
    def feature_dim(self):
        return int(np.prod(self.conv_output_shape))

    @classmethod
    def for_images(cls, height=28, width=14, representation_dim=50, **kw):
        return cls(input_shape=(1, height, width), representation_dim=representation_dim, **kw)

    @classmethod
    def for_sequences(cls, length, representation_dim=112, **kw):
        # 1-D signals are height-1 images convolved with 1x3 kernels
        return cls(input_shape=(1, 1, length), kernel=(1, 3), representation_dim=representation_dim, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Tower:
    def __init__(self, config, rng):
        self.config = config
        kh, kw = config.kernel
        self.conv_weights, self.conv_biases, self.norms = [], [], []
        channels = config.input_shape[0]
        for _ in range(config.num_conv_layers):
            fan_in = channels * kh * kw
            self.conv_weights.append(Tensor(_he_normal(rng, (config.filters, channels, kh, kw), fan_in),
                                            requires_grad=True))
            self.conv_biases.append(Tensor(np.zeros(config.filters), requires_grad=True))
            self.norms.append(BatchNormState(config.filters, momentum=config.bn_momentum, eps=config.bn_eps))
            channels = config.filters
        d, n = config.feature_dim, config.representation_dim
        self.fc_weight = Tensor(_he_normal(rng, (d, n), d), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(n), requires_grad=True)

    def named_parameters(self):
        params = {}
        for i, (w, b, bn) in enumerate(zip(self.conv_weights, self.conv_biases, self.norms)):
            params[f"conv{i}.weight"] = w
            params[f"conv{i}.bias"] = b
            params[f"bn{i}.scale"] = bn.scale
            params[f"bn{i}.shift"] = bn.shift
        params["fc.weight"] = self.fc_weight
        params["fc.bias"] = self.fc_bias
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self):
        buffers = {}
        for i, bn in enumerate(self.norms):
            buffers[f"bn{i}.running_mean"] = bn.running_mean
            buffers[f"bn{i}.running_var"] = bn.running_var
        return buffers

    def set_buffer(self, name, value):
        layer, stat = name.split(".")
        setattr(self.norms[int(layer[2:])], stat, np.array(value, dtype=np.float64))

    def set_training(self, flag):
        for bn in self.norms:
            bn.training = bool(flag)

    def forward(self, x, update_running=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"tower expects input [B, {', '.join(map(str, expected))}], got {x.shape}")
        h = x
        for w, b, bn in zip(self.conv_weights, self.conv_biases, self.norms):
            h = relu(batch_norm(conv2d(h, w, b), bn, update_running=update_running))
        h = reshape(h, (h.shape[0], -1))
        return sigmoid(affine(h, self.fc_weight, self.fc_bias))

    __call__ = forward


class _StateMixin:
    def named_parameters(self):
        out = {}
        for prefix, module in self._modules():
            for name, p in module.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def named_buffers(self):
        out = {}
        for prefix, module in self._modules():
            for name, b in getattr(module, "named_buffers", dict)().items():
                out[f"{prefix}.{name}"] = b
        return out

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: np.array(b, copy=True) for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{k}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, copy=True)
        modules = dict(self._modules())
        for k in buffers:
            prefix, rest = k.split(".", 1)
            modules[prefix].set_buffer(rest, state[k])


class BnnModel(_StateMixin):
    def __init__(self, left, right=None, seed=0):
        right = left if right is None else right
        if left.representation_dim != right.representation_dim:
            raise ContractError("both towers must output the same representation_dim")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.left = Tower(left, rng)
        self.right = Tower(right, rng)

    @property
    def representation_dim(self):
        return self.left.config.representation_dim

    def tower(self, side):
        _check_side(side)
        return self.left if side == "left" else self.right

    def _modules(self):
        return [("left", self.left), ("right", self.right)]

    def parameters(self, side=None):
        if side is None:
            return self.left.parameters() + self.right.parameters()
        return self.tower(side).parameters()

    def train(self):
        self.left.set_training(True)
        self.right.set_training(True)
        return self

    def eval(self):
        self.left.set_training(False)
        self.right.set_training(False)
        return self

    def config_dict(self):
        return {"left": self.left.config.to_dict(), "right": self.right.config.to_dict()}


def tower_forward(model, side, x, update_running=True):
    return model.tower(side).forward(x, update_running=update_running)


def pair_distance(h1, h2):
    """Bridge output from precomputed tower outputs ``[B, n]``."""
    if h1.shape != h2.shape:
        raise ContractError(f"tower outputs differ in shape: {h1.shape} vs {h2.shape}")
    return norm_rows(h1 - h2) * (1.0 / math.sqrt(h1.shape[1]))


def bnn_output(model, x1, x2):
    if len(x1) != len(x2):
        raise ContractError(f"batch sizes differ: {len(x1)} vs {len(x2)}")
    return pair_distance(tower_forward(model, "left", x1), tower_forward(model, "right", x2))


def loss_pair(outputs, target):
    """Mean squared deviation of bridge outputs from 0 (matched) or 1 (mismatched)."""
    if target not in (0, 1):
        raise ContractError(f"target must be 0 or 1, got {target}")
    outputs = outputs if isinstance(outputs, Tensor) else Tensor(outputs)
    if outputs.size == 0:
        raise ContractError("loss over an empty pair set")
    return ((outputs - float(target)) ** 2).mean()


def loss_bnn(l_p, l_n, alpha):
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return (l_p + l_n * alpha) * (1.0 / (1.0 + alpha))


# ---------------------------------------------------------------- reconstruction


@dataclass(frozen=True)
class DecoderConfig:
    """Projection to a small seed feature map, a stack of stride-2 transposed
    convolutions that each double the spatial size, a centre crop to the view
    size and a final same-size convolution down to the view's channels.

    Each transposed convolution trims ``trim`` pixels from every border after
    the scatter, with ``output_padding = stride - kernel + 2 * trim`` so that
    the size exactly doubles (4x2 -> 8x4 -> 16x8 -> 32x16).
    """

    representation_dim: int = 50
    output_shape: tuple = (1, 28, 14)
    seed_shape: tuple = (8, 4, 2)
    filters: tuple = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    trim: int = 1

    def __post_init__(self):
        for name in ("output_shape", "seed_shape", "filters"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not 0 <= self.output_padding < self.stride:
            raise ParameterError("kernel/stride/trim combination cannot double the spatial size")
        _, h, w = self.stack_output_shape
        _, oh, ow = self.output_shape
        if oh > h or ow > w:
            raise DimensionError(f"decoder stack yields {h}x{w}, smaller than target {oh}x{ow}")
        if self.kernel % 2 != 1:
            raise ParameterError("final same-size convolution needs an odd kernel")

    @property
    def hidden(self):
        return int(np.prod(self.seed_shape))

    @property
    def output_padding(self):
        return self.stride - self.kernel + 2 * self.trim

    @property
    def stack_output_shape(self):
        _, h, w = self.seed_shape
        scale = self.stride ** len(self.filters)
        return self.filters[-1], h * scale, w * scale

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Decoder:
    def __init__(self, config, rng):
        self.config = config
        n, k = config.representation_dim, config.kernel
        self.fc_weight = Tensor(_he_normal(rng, (n, config.hidden), n), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(config.hidden), requires_grad=True)
        self.deconv_weights, self.deconv_biases = [], []
        channels = config.seed_shape[0]
        for f in config.filters:
            self.deconv_weights.append(Tensor(_he_normal(rng, (channels, f, k, k), channels * k * k),
                                              requires_grad=True))
            self.deconv_biases.append(Tensor(np.zeros(f), requires_grad=True))
            channels = f
        out_c = config.output_shape[0]
        self.out_weight = Tensor(_he_normal(rng, (out_c, channels, k, k), channels * k * k),
                                 requires_grad=True)
        self.out_bias = Tensor(np.zeros(out_c), requires_grad=True)

    def named_parameters(self):
        params = {"fc.weight": self.fc_weight, "fc.bias": self.fc_bias}
        for i, (w, b) in enumerate(zip(self.deconv_weights, self.deconv_biases)):
            params[f"deconv{i}.weight"] = w
            params[f"deconv{i}.bias"] = b
        params["out.weight"] = self.out_weight
        params["out.bias"] = self.out_bias
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def forward(self, z):
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != cfg.representation_dim:
            raise ContractError(f"decoder expects [B, {cfg.representation_dim}] codes, got {z.shape}")
        B = z.shape[0]
        h = reshape(affine(z, self.fc_weight, self.fc_bias), (B,) + cfg.seed_shape)
        t = cfg.trim
        for w, b in zip(self.deconv_weights, self.deconv_biases):
            h = conv_transpose2d(h, w, b, stride=cfg.stride, output_padding=cfg.output_padding)
            if t:
                h = getitem(h, (slice(None), slice(None), slice(t, h.shape[2] - t), slice(t, h.shape[3] - t)))
            h = relu(h)
        _, oh, ow = cfg.output_shape
        top = (h.shape[2] - oh) // 2
        left = (h.shape[3] - ow) // 2
        h = getitem(h, (slice(None), slice(None), slice(top, top + oh), slice(left, left + ow)))
        h = pad2d(h, (cfg.kernel - 1) // 2)
        return conv2d(h, self.out_weight, self.out_bias)

    __call__ = forward


class ReconModel(_StateMixin):
    """A bridge network plus one decoder per view."""

    def __init__(self, bnn, left_decoder=None, right_decoder=None, seed=1):
        self.bnn = bnn
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = bnn.representation_dim
        if left_decoder is None:
            left_decoder = DecoderConfig(representation_dim=n, output_shape=bnn.left.config.input_shape)
        if right_decoder is None:
            right_decoder = DecoderConfig(representation_dim=n, output_shape=bnn.right.config.input_shape)
        for cfg, tower in ((left_decoder, bnn.left), (right_decoder, bnn.right)):
            if cfg.representation_dim != n:
                raise ContractError("decoder representation_dim differs from the towers'")
            if cfg.output_shape != tower.config.input_shape:
                raise DimensionError(f"decoder output {cfg.output_shape} != view shape {tower.config.input_shape}")
        self.left_decoder = Decoder(left_decoder, rng)
        self.right_decoder = Decoder(right_decoder, rng)

    @property
    def left(self):
        return self.bnn.left

    @property
    def right(self):
        return self.bnn.right

    @property
    def representation_dim(self):
        return self.bnn.representation_dim

    def tower(self, side):
        return self.bnn.tower(side)

    def decoder(self, side):
        _check_side(side)
        return self.left_decoder if side == "left" else self.right_decoder

    def _modules(self):
        return [("left", self.bnn.left), ("right", self.bnn.right),
                ("left_decoder", self.left_decoder), ("right_decoder", self.right_decoder)]

    def parameters(self, side=None):
        if side is None:
            return self.bnn.parameters() + self.left_decoder.parameters() + self.right_decoder.parameters()
        return self.bnn.parameters(side) + self.decoder(side).parameters()

    def train(self):
        self.bnn.train()
        return self

    def eval(self):
        self.bnn.eval()
        return self

    def config_dict(self):
        d = self.bnn.config_dict()
        d["left_decoder"] = self.left_decoder.config.to_dict()
        d["right_decoder"] = self.right_decoder.config.to_dict()
        return d


def decode(recon, side, z):
    return recon.decoder(side).forward(z)


def _view_error(recon_x, x):
    diff = recon_x - x
    return norm_rows(reshape(diff, (diff.shape[0], -1)))


def loss_recon(recon, x1, x2, targets=None, reps=None):
    """Self- and cross-reconstruction losses over matched pairs.

    ``reps`` may carry already computed tower outputs ``(h1, h2)`` for the
    same batch so the towers are not run twice.
    """
    if targets is not None and np.any(np.asarray(targets) != 0):
        raise ContractError("reconstruction losses are defined on matched pairs only")
    x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
    x2 = x2 if isinstance(x2, Tensor) else Tensor(x2)
    if x1.shape[0] == 0 or x1.shape[0] != x2.shape[0]:
        raise ContractError("reconstruction needs a non-empty batch of aligned pairs")
    if reps is None:
        h1, h2 = tower_forward(recon, "left", x1), tower_forward(recon, "right", x2)
    else:
        h1, h2 = reps
    l_self = (_view_error(decode(recon, "left", h1), x1) + _view_error(decode(recon, "right", h2), x2)).mean()
    l_cross = (_view_error(decode(recon, "left", h2), x1) + _view_error(decode(recon, "right", h1), x2)).mean()
    return l_self, l_cross


def loss_total(l_bnn, l_self, l_cross):
    return l_bnn + l_self + l_cross
