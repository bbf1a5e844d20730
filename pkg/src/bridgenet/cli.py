"""Command-line front end.

    bridgenet train       --preset desk --out runs/desk
    bridgenet eval-match  --checkpoint runs/desk/checkpoint.bnn --out runs/desk
    bridgenet corr        --checkpoint runs/desk/checkpoint.bnn --out runs/desk
    bridgenet transfer    --checkpoint runs/tl/checkpoint.bnn --direction all --out runs/tl
    bridgenet reconstruct --checkpoint runs/rec/checkpoint.bnn --count 8 --out runs/rec
    bridgenet gradcheck   --seeds 20

Settings come from four layers, later ones winning: built-in defaults, the
``--preset``, the ``--config`` file (INI sections ``[data]``, ``[tower]``,
``[train]``, ``[eval]``), and command-line flags (``--set section.key=value``
or the dedicated flags). Unknown sections or keys are rejected. The fully
resolved configuration is written to ``<out>/config.ini`` before any work
starts, and is sufficient to repeat the run.

Output CSVs start with a ``# schema: <name> v1`` line followed by a header.
Schemas:

* ``train_log.csv``   epoch, batch, l_bnn, l_self, l_cross
* ``timing.csv``      epoch, batch, wall_time
* ``match.csv``       gamma, accuracy, precision, recall, f1, tp, fp, tn, fn, total
* ``corr.csv``        split, n_samples, n, r1, total_correlation, upper_bound
* ``transfer.csv``    direction, fold, accuracy   (fold ``mean`` for the average)
* ``recon_errors.csv`` index, self_left, self_right, cross_left, cross_right, mean_left, mean_right
  (per-pixel mean squared errors; ``cross_left`` decodes the left view from the
  right view's representation)
"""
import argparse
import configparser
import io
import os
import sys

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text, write_csv
from .data import (
    PairDataset, default_data_dir, load_mnist_pairs, make_positive_pairs, sample_negatives, synth_two_view,
)
from .errors import BridgeError, ContractError, DivergenceError, ModeError, ParameterError
from .metrics import (
    DIRECTIONS, match_report, representation_correlation, transfer_eval,
)
from .model import BnnModel, ReconModel, TowerConfig, decode
from .train import TrainConfig, TrainState, checkpoint_load, checkpoint_save, fit, write_loss_log, write_timing_log

# section -> key -> (type, default)
SCHEMA = {
    "data": {
        "source": (str, "mnist"),
        "mnist_dir": (str, ""),
        "train_limit": (int, 0),
        "test_limit": (int, 0),
        "pairing": (str, "aligned"),
        "synth_latent_dim": (int, 5),
        "synth_dim1": (int, 273),
        "synth_dim2": (int, 112),
        "synth_noise": (float, 0.1),
        "synth_train": (int, 2000),
        "synth_test": (int, 1000),
        "synth_seed": (int, 0),
    },
    "tower": {
        "representation_dim": (int, 50),
        "conv_layers": (int, 3),
        "filters": (int, 10),
    },
    "train": {
        "alpha": (float, 1.0),
        "lr": (float, 0.01),
        "np_ratio": (float, 2.0),
        "batch_size": (int, 100),
        "epochs": (int, 10),
        "mode": (str, "bnn"),
        "joint_update": (bool, False),
        "positives_per_epoch": (int, 0),
        "seed": (int, 0),
    },
    "eval": {
        "gamma": (float, 0.5),
        "np_ratio": (float, 2.0),
        "positives": (int, 0),
        "r1": (float, 1e-4),
        "folds": (int, 5),
        "recon_count": (int, 8),
        "seed": (int, 1234),
    },
}

PRESETS = {
    # desk scale: 10k training images (or all available), n = 20, 10 epochs
    "desk": {
        "data.train_limit": "10000",
        "tower.representation_dim": "20",
        "train.epochs": "10",
        "train.lr": "0.5",
        "train.batch_size": "50",
        "eval.positives": "2000",
    },
}


class ConfigError(BridgeError, ValueError):
    pass


def _parse_value(kind, raw, where):
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def _apply(config, dotted, raw, origin):
    if "." not in dotted:
        raise ConfigError(f"{origin}: setting {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    config[section][key] = _parse_value(SCHEMA[section][key][0], raw, f"{origin} {dotted}")


def resolve_config(config_file=None, preset=None, overrides=()):
    """Merge defaults, preset, config file and ``(dotted_key, value)`` overrides."""
    config = {s: {k: v[1] for k, v in keys.items()} for s, keys in SCHEMA.items()}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for dotted, raw in PRESETS[preset].items():
            _apply(config, dotted, raw, f"preset {preset}")
    if config_file:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(config_file):
            raise ConfigError(f"cannot read config file {config_file}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(config, f"{section}.{key}", raw, config_file)
    for dotted, raw in overrides:
        _apply(config, dotted, raw, "command line")
    _validate(config)
    return config


def _validate(config):
    if config["data"]["source"] not in ("mnist", "synthetic"):
        raise ConfigError("data.source must be 'mnist' or 'synthetic'")
    if config["data"]["pairing"] not in ("aligned", "same_label"):
        raise ConfigError("data.pairing must be 'aligned' or 'same_label'")
    if config["data"]["source"] == "synthetic" and config["data"]["pairing"] != "aligned":
        raise ConfigError("synthetic data has no labels; use aligned pairing")
    try:
        train_config(config)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    if not 0 < config["eval"]["gamma"] < 1:
        raise ConfigError("eval.gamma must be in (0, 1)")


def config_text(config):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
    buf = io.StringIO()
    buf.write(f"# resolved bridgenet {__version__} configuration\n")
    parser.write(buf)
    return buf.getvalue()


def train_config(config):
    t = config["train"]
    return TrainConfig(alpha=t["alpha"], lr=t["lr"], np_ratio=t["np_ratio"], batch_size=t["batch_size"],
                       epochs=t["epochs"], seed=t["seed"], mode=t["mode"], joint_update=t["joint_update"],
                       positives_per_epoch=t["positives_per_epoch"] or None)


def load_split(config, split):
    """The train or test :class:`PairDataset` described by ``config['data']``."""
    d = config["data"]
    if d["source"] == "synthetic":
        n_train, n_test = d["synth_train"], d["synth_test"]
        full = synth_two_view(d["synth_latent_dim"], (d["synth_dim1"], d["synth_dim2"]), d["synth_noise"],
                              n_train + n_test, seed=d["synth_seed"])
        idx = np.arange(n_train) if split == "train" else np.arange(n_train, n_train + n_test)
        return full.subset(idx)
    limit = d["train_limit"] if split == "train" else d["test_limit"]
    return load_mnist_pairs(d["mnist_dir"] or default_data_dir(), split, limit or None, d["pairing"])


def tower_configs(config, dataset):
    tw = config["tower"]
    configs = []
    for shape in dataset.view_shapes:
        kernel = (1, 3) if shape[1] == 1 else (3, 3)
        configs.append(TowerConfig(input_shape=shape, num_conv_layers=tw["conv_layers"], filters=tw["filters"],
                                   kernel=kernel, representation_dim=tw["representation_dim"]))
    return configs


def build_model(config, dataset):
    seed = config["train"]["seed"]
    bnn = BnnModel(*tower_configs(config, dataset), seed=np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    if config["train"]["mode"] == "bnn+reconstruction":
        return ReconModel(bnn, seed=np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    return bnn


def train_from_config(config, out_dir=None, dataset=None, on_epoch=None):
    """Build, train and (when ``out_dir`` is set) persist a model; returns ``(model, state)``."""
    dataset = dataset if dataset is not None else load_split(config, "train")
    model = build_model(config, dataset)
    tc = train_config(config)
    state = TrainState.fresh(np.random.SeedSequence([tc.seed, 2]).generate_state(1)[0])
    fit(model, dataset, tc, state, on_epoch=on_epoch)
    if out_dir:
        checkpoint_save(model, state, os.path.join(out_dir, "checkpoint.bnn"), tc,
                        extra={"config": config_text(config)})
        write_loss_log(os.path.join(out_dir, "train_log.csv"), state.history)
        write_timing_log(os.path.join(out_dir, "timing.csv"), state.history)
    return model, state


def _check_shapes(model, dataset):
    expected = (model.left.config.input_shape, model.right.config.input_shape)
    if tuple(dataset.view_shapes) != expected:
        raise ContractError(f"checkpoint expects views {expected}, dataset has {dataset.view_shapes}")


def evaluation_pairs(config, dataset):
    e = config["eval"]
    aligned = dataset.with_pairing("aligned")
    positives = make_positive_pairs(aligned)
    if e["positives"]:
        positives = positives[: e["positives"]]
        aligned = aligned.subset(np.arange(len(positives)))
    negatives = sample_negatives(aligned, e["np_ratio"], np.random.default_rng(e["seed"])).pairs
    return aligned, positives, negatives


# ---------------------------------------------------------------- commands


def cmd_train(config, out_dir):
    model, state = train_from_config(config, out_dir)
    means = state.epoch_means()
    last = f"{means[-1]:.5f}" if means else "n/a"
    print(f"trained {state.epoch} epoch(s), {len(state.history)} batches; final epoch mean l_bnn {last}")
    return 0


def cmd_eval_match(config, out_dir, checkpoint, gammas):
    model, _, _ = checkpoint_load(checkpoint)
    test = load_split(config, "test")
    _check_shapes(model, test)
    aligned, positives, negatives = evaluation_pairs(config, test)
    rows = []
    for gamma in gammas or [config["eval"]["gamma"]]:
        r = match_report(model, aligned, positives, negatives, gamma)
        rows.append((gamma, r.accuracy, r.precision, r.recall, r.f1, r.tp, r.fp, r.tn, r.fn, r.total))
        print(f"gamma {gamma:g}: accuracy {r.accuracy:.2f} precision {r.precision:.2f} "
              f"recall {r.recall:.2f} F1 {r.f1:.2f}")
    write_csv(os.path.join(out_dir, "match.csv"), "bridgenet.match",
              ["gamma", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn", "total"], rows)
    return 0


def cmd_corr(config, out_dir, checkpoint):
    model, _, _ = checkpoint_load(checkpoint)
    test = load_split(config, "test")
    _check_shapes(model, test)
    aligned, _, _ = evaluation_pairs(config, test)
    rep = representation_correlation(model, aligned, config["eval"]["r1"])
    write_csv(os.path.join(out_dir, "corr.csv"), "bridgenet.corr",
              ["split", "n_samples", "n", "r1", "total_correlation", "upper_bound"],
              [("test", rep.n_samples, rep.n, rep.r1, rep.value, rep.upper_bound)])
    print(f"total correlation on {rep.n_samples} test positives: {rep.value:.4f} of {rep.upper_bound}")
    return 0


def transfer_directions(choice):
    if choice == "both":
        return ["left->right", "right->left"]
    if choice == "all":
        return ["left->right", "right->left", "left", "right"]
    return [choice]


def cmd_transfer(config, out_dir, checkpoint, direction):
    model, _, _ = checkpoint_load(checkpoint)
    test = load_split(config, "test")
    _check_shapes(model, test)
    if test.labels is None:
        raise ContractError("transfer evaluation needs a labelled dataset")
    rows = []
    for d in transfer_directions(direction):
        rep = transfer_eval(model, test, d, folds=config["eval"]["folds"], seed=config["eval"]["seed"])
        rows.extend((d, k + 1, acc) for k, acc in enumerate(rep.fold_accuracies))
        rows.append((d, "mean", rep.mean_accuracy))
        print(f"{d}: mean {config['eval']['folds']}-fold accuracy {rep.mean_accuracy:.2f}")
    write_csv(os.path.join(out_dir, "transfer.csv"), "bridgenet.transfer", ["direction", "fold", "accuracy"], rows)
    return 0


def pgm_bytes(image):
    """Binary PGM (P5) of a 2-d array in [0, 1]; values are clamped and scaled to 8 bits."""
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def reconstruction_panels(model, x1, x2):
    """Self and cross reconstructions of both views, as numpy arrays."""
    from .autodiff import no_grad
    from .model import tower_forward

    model.eval()
    with no_grad():
        h1 = tower_forward(model, "left", x1)
        h2 = tower_forward(model, "right", x2)
        return {
            "left_self": decode(model, "left", h1).data,
            "right_self": decode(model, "right", h2).data,
            "right_to_left": decode(model, "left", h2).data,
            "left_to_right": decode(model, "right", h1).data,
        }


def cmd_reconstruct(config, out_dir, checkpoint, count):
    model, _, meta = checkpoint_load(checkpoint)
    if not isinstance(model, ReconModel):
        raise ModeError("checkpoint has no decoder weights; train with train.mode = bnn+reconstruction")
    test = load_split(config, "test")
    _check_shapes(model, test)
    count = min(count or config["eval"]["recon_count"], len(test))
    x1, x2 = test.view1[:count], test.view2[:count]
    panels = reconstruction_panels(model, x1, x2)
    train = load_split(config, "train")
    mean1, mean2 = train.view1.mean(axis=0), train.view2.mean(axis=0)

    tiles = {name: np.concatenate(list(p[:, 0]), axis=0) for name, p in panels.items()}
    tiles["originals"] = np.concatenate([np.concatenate([a[0], b[0]], axis=1) for a, b in zip(x1, x2)], axis=0)
    for name, img in tiles.items():
        atomic_write_bytes(os.path.join(out_dir, f"{name}.pgm"), pgm_bytes(img))
    order = ["left_self", "right_self", "right_to_left", "left_to_right", "originals"]
    atomic_write_bytes(os.path.join(out_dir, "grid.pgm"),
                       pgm_bytes(np.concatenate([tiles[k] for k in order], axis=1)))

    def mse(a, b):
        return ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)

    cols = [mse(panels["left_self"], x1), mse(panels["right_self"], x2),
            mse(panels["right_to_left"], x1), mse(panels["left_to_right"], x2),
            mse(np.broadcast_to(mean1, x1.shape), x1), mse(np.broadcast_to(mean2, x2.shape), x2)]
    rows = [(i, *(float(c[i]) for c in cols)) for i in range(count)]
    write_csv(os.path.join(out_dir, "recon_errors.csv"), "bridgenet.recon_errors",
              ["index", "self_left", "self_right", "cross_left", "cross_right", "mean_left", "mean_right"], rows)
    print(f"wrote {count} reconstructions to {out_dir}")
    return 0


def cmd_gradcheck(out_dir, seeds):
    from .gradsuite import run_suite

    rows = run_suite(seeds)
    failed = [r for r in rows if not r[3]]
    for op, worst, tol, ok in rows:
        print(f"{op:<16} worst relative error {worst:.2e}  (tolerance {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    if out_dir:
        write_csv(os.path.join(out_dir, "gradcheck.csv"), "bridgenet.gradcheck",
                  ["op", "worst_relative_error", "tolerance", "passed"], rows)
    return 1 if failed else 0


# ---------------------------------------------------------------- argument parsing


def _common(parser, with_checkpoint=False):
    parser.add_argument("--config", help="INI file with [data]/[tower]/[train]/[eval] sections")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--seed", type=int, help="training seed (train.seed)")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration value; repeatable")
    parser.add_argument("--dataset", choices=["mnist", "synthetic"], help="data.source")
    parser.add_argument("--data-dir", help="directory with MNIST IDX files (data.mnist_dir)")
    parser.add_argument("--pairing", choices=["aligned", "same_label"], help="data.pairing")
    parser.add_argument("--mode", choices=["bnn", "bnn+reconstruction"], help="train.mode")
    if with_checkpoint:
        parser.add_argument("--checkpoint", required=True)


def make_parser():
    parser = argparse.ArgumentParser(prog="bridgenet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"bridgenet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a bridge network")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--np-ratio", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval-match", help="pair-matching accuracy/precision/recall/F1")
    _common(p, with_checkpoint=True)
    p.add_argument("--gamma", type=float, action="append", help="threshold; repeat for a sweep")
    p.add_argument("--np-ratio", type=float, help="negatives per positive in the test set")

    p = sub.add_parser("corr", help="total correlation of the test representations")
    _common(p, with_checkpoint=True)
    p.add_argument("--r1", type=float)

    p = sub.add_parser("transfer", help="cross-view transfer with a linear classifier")
    _common(p, with_checkpoint=True)
    p.add_argument("--direction", default="all", choices=sorted(DIRECTIONS) + ["both", "all"])

    p = sub.add_parser("reconstruct", help="write self/cross reconstruction panels")
    _common(p, with_checkpoint=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer gradient")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", default=None)
    return parser


FLAG_KEYS = {
    "seed": "train.seed", "dataset": "data.source", "data_dir": "data.mnist_dir", "epochs": "train.epochs",
    "lr": "train.lr", "alpha": "train.alpha", "batch_size": "train.batch_size", "mode": "train.mode",
    "pairing": "data.pairing", "r1": "eval.r1", "count": "eval.recon_count",
}


def _overrides(args):
    out = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out.append(tuple(item.split("=", 1)))
    for attr, dotted in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append((dotted, str(value)))
    np_ratio = getattr(args, "np_ratio", None)
    if np_ratio is not None:
        out.append(("train.np_ratio" if args.command == "train" else "eval.np_ratio", str(np_ratio)))
    return out


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.out, args.seeds)
    try:
        config = resolve_config(args.config, args.preset, _overrides(args))
    except ConfigError as exc:
        parser.error(str(exc))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "config.ini"), config_text(config))
    try:
        if args.command == "train":
            return cmd_train(config, args.out)
        if args.command == "eval-match":
            return cmd_eval_match(config, args.out, args.checkpoint, args.gamma)
        if args.command == "corr":
            return cmd_corr(config, args.out, args.checkpoint)
        if args.command == "transfer":
            return cmd_transfer(config, args.out, args.checkpoint, args.direction)
        if args.command == "reconstruct":
            return cmd_reconstruct(config, args.out, args.checkpoint, args.count)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
