"""Alternating mini-batch SGD over the two towers, and checkpoint persistence.

Every epoch draws a fresh negative set of size ``N * np_ratio``. For each
mini-batch the left tower (with its decoder in reconstruction mode) takes a
plain SGD step first; the right tower's gradient is then computed from a new
forward pass that already sees the updated left tower.
"""
import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write_bytes, write_csv
from .autodiff import Tape, backward
from .data import batch_iter, make_positive_pairs, sample_negatives
from .errors import CheckpointError, ContractError, DimensionError, DivergenceError, ModeError, ParameterError
from .model import (
    BnnModel, DecoderConfig, ReconModel, TowerConfig, loss_bnn, loss_pair, loss_recon, loss_total,
    pair_distance, tower_forward,
)

MODES = ("bnn", "bnn+reconstruction")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr: float = 0.01
    np_ratio: float = 2.0
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0
    mode: str = "bnn"
    joint_update: bool = False
    positives_per_epoch: int = None
    eval_every: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.lr >= 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr}")
        if not self.np_ratio > 0:
            raise ParameterError(f"NP ratio must be positive, got {self.np_ratio}")
        if self.batch_size < 2:
            raise ParameterError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    l_bnn: float
    l_self: float = None
    l_cross: float = None
    wall_time: float = 0.0


@dataclass
class TrainState:
    epoch: int = 0
    history: list = field(default_factory=list)
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, seed):
        return cls(rng=np.random.default_rng(seed))

    def epoch_means(self):
        """Mean ``l_bnn`` per completed epoch, in epoch order."""
        by_epoch = {}
        for r in self.history:
            by_epoch.setdefault(r.epoch, []).append(r.l_bnn)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def sgd_update(params, grads, lr):
    """In-place ``p <- p - lr * g``."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p.data -= lr * g
    return params


def _set_trainable(model, sides):
    trainable = set()
    for side in sides:
        trainable.update(id(p) for p in model.parameters(side))
    for p in model.parameters():
        p.requires_grad = id(p) in trainable
        p.zero_grad()
    return [p for p in model.parameters() if id(p) in trainable]


def batch_losses(model, x1, x2, n_pos, alpha, reconstruction=False, update=("left", "right")):
    """Forward pass over a mixed batch whose first ``n_pos`` rows are matched pairs.

    Returns the objective tensor plus the individual terms. Batch-norm running
    statistics are updated only for the towers listed in ``update``.
    """
    h1 = tower_forward(model, "left", x1, update_running="left" in update)
    h2 = tower_forward(model, "right", x2, update_running="right" in update)
    f = pair_distance(h1, h2)
    l_bnn = loss_bnn(loss_pair(f[:n_pos], 0), loss_pair(f[n_pos:], 1), alpha)
    if not reconstruction:
        return l_bnn, l_bnn, None, None
    l_self, l_cross = loss_recon(model, x1[:n_pos], x2[:n_pos], reps=(h1[:n_pos], h2[:n_pos]))
    return loss_total(l_bnn, l_self, l_cross), l_bnn, l_self, l_cross


def _step(model, x1, x2, n_pos, config, sides, batch_index, epoch):
    params = _set_trainable(model, sides)
    with Tape() as tape:
        objective, l_bnn, l_self, l_cross = batch_losses(
            model, x1, x2, n_pos, config.alpha, config.mode == "bnn+reconstruction", update=sides)
    if not np.isfinite(objective.data).all():
        raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_index}",
                              batch_index=batch_index, epoch=epoch)
    backward(objective, tape)
    sgd_update(params, [p.grad for p in params], config.lr)
    for p in params:
        p.zero_grad()
    return tuple(None if t is None else float(t.data) for t in (l_bnn, l_self, l_cross))


def train_epoch(model, dataset, config, state):
    """Run one epoch and append one :class:`BatchRecord` per mini-batch."""
    if config.mode == "bnn+reconstruction" and not isinstance(model, ReconModel):
        raise ModeError("reconstruction mode needs a ReconModel")
    shapes = (model.left.config.input_shape, model.right.config.input_shape)
    if tuple(dataset.view_shapes) != shapes:
        raise DimensionError(f"dataset views {dataset.view_shapes} do not match towers {shapes}")
    if state.rng is None:
        state.rng = np.random.default_rng(config.seed)
    rng = state.rng
    epoch = state.epoch

    negatives = sample_negatives(dataset, config.np_ratio, rng, epoch=epoch)
    count = None
    if dataset.pairing == "same_label":
        count = config.positives_per_epoch or len(dataset)
    positives = make_positive_pairs(dataset, count=count, rng=rng)

    model.train()
    start = time.perf_counter()
    for b, (pos, neg) in enumerate(batch_iter(positives, negatives, config.batch_size, rng)):
        idx1 = np.concatenate([pos[:, 0], neg[:, 0]])
        idx2 = np.concatenate([pos[:, 1], neg[:, 1]])
        x1, x2 = dataset.view1[idx1], dataset.view2[idx2]
        if config.joint_update:
            losses = _step(model, x1, x2, len(pos), config, ("left", "right"), b, epoch)
        else:
            losses = _step(model, x1, x2, len(pos), config, ("left",), b, epoch)
            _step(model, x1, x2, len(pos), config, ("right",), b, epoch)
        state.history.append(BatchRecord(epoch, b, *losses, wall_time=time.perf_counter() - start))
    for p in model.parameters():
        p.requires_grad = True
    model.eval()
    state.epoch += 1
    return state


def fit(model, dataset, config, state=None, on_epoch=None):
    """Train until ``state.epoch == config.epochs``; resumes from ``state`` if given.

    ``on_epoch(model, state)`` runs after every epoch; a true return value
    stops training early.
    """
    state = state or TrainState.fresh(config.seed)
    while state.epoch < config.epochs:
        train_epoch(model, dataset, config, state)
        if on_epoch is not None and on_epoch(model, state):
            break
    return state


# ---------------------------------------------------------------- logs

LOSS_HEADER = ["epoch", "batch", "l_bnn", "l_self", "l_cross"]
TIMING_HEADER = ["epoch", "batch", "wall_time"]


def write_loss_log(path, history):
    rows = [(r.epoch, r.batch, r.l_bnn, r.l_self, r.l_cross) for r in history]
    write_csv(path, "bridgenet.train_log", LOSS_HEADER, rows)


def write_timing_log(path, history):
    write_csv(path, "bridgenet.timing", TIMING_HEADER, [(r.epoch, r.batch, r.wall_time) for r in history])


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"BRDGCKPT"
CHECKPOINT_VERSION = 1
_DIGEST = 32


def _model_spec(model):
    if isinstance(model, ReconModel):
        return {"kind": "recon", "config": model.config_dict()}
    return {"kind": "bnn", "config": model.config_dict()}


def build_model(spec):
    cfg = spec["config"]
    bnn = BnnModel(TowerConfig.from_dict(cfg["left"]), TowerConfig.from_dict(cfg["right"]), seed=0)
    if spec["kind"] == "bnn":
        return bnn
    return ReconModel(bnn, DecoderConfig.from_dict(cfg["left_decoder"]),
                      DecoderConfig.from_dict(cfg["right_decoder"]), seed=0)


def checkpoint_bytes(model, state=None, train_config=None, extra=None):
    tensors, chunks, offset = [], [], 0
    for name, value in model.state_dict().items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model": _model_spec(model),
        "tensors": tensors,
        "train_config": None if train_config is None else train_config.to_dict(),
        "state": None,
        "extra": extra or {},
    }
    if state is not None:
        header["state"] = {
            "epoch": state.epoch,
            "rng": None if state.rng is None else state.rng.bit_generator.state,
            "history": [asdict(r) for r in state.history],
        }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def checkpoint_save(model, state, path, train_config=None, extra=None):
    atomic_write_bytes(path, checkpoint_bytes(model, state, train_config, extra))


def _restore_rng(saved):
    name = saved["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = saved
    return np.random.Generator(bitgen)


def checkpoint_load(path):
    """Return ``(model, state, meta)``; ``meta`` holds the train config and extras."""
    with open(path, "rb") as f:
        blob = f.read()
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < fixed + _DIGEST or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a bridgenet checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, payload is corrupt")
    version, head_len = struct.unpack_from("<IQ", body, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    header = json.loads(body[fixed : fixed + head_len].decode("utf-8"))
    payload = body[fixed + head_len :]

    model = build_model(header["model"])
    tensors = {}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    model.load_state_dict(tensors)
    model.eval()

    state = None
    if header["state"] is not None:
        s = header["state"]
        state = TrainState(
            epoch=s["epoch"],
            history=[BatchRecord(**r) for r in s["history"]],
            rng=None if s["rng"] is None else _restore_rng(s["rng"]),
        )
    cfg = header["train_config"]
    meta = {"train_config": None if cfg is None else TrainConfig(**cfg), "extra": header["extra"],
            "kind": header["model"]["kind"]}
    return model, state, meta
