"""Two-view datasets, positive-pair strategies and the negative-pair sampler."""
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, NoNegativesError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

STRATEGIES = ("aligned", "same_label")


# ---------------------------------------------------------------- IDX files


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic):
    """Parse one IDX file of unsigned bytes into an ndarray of uint8."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header: {len(raw)} bytes", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for dimensions {dims}, got {len(raw)}",
            offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array, magic):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim != (magic & 0xFF):
        raise ContractError(f"magic 0x{magic:08x} needs a {magic & 0xFF}-d array, got {array.ndim}-d")
    payload = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write(payload)


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair.

    Returns ``(images, labels)``: images as float64 ``[N, H, W]`` scaled to
    [0, 1] by dividing by 255, labels as int64 ``[N]``.
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", offset=4)
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def find_mnist(directory, split):
    """Locate the standard MNIST file pair for ``split`` in ``directory``.

    Plain and ``.gz`` names are both accepted.
    """
    paths = []
    for stem in MNIST_FILES[split]:
        for candidate in (stem, stem + ".gz"):
            p = os.path.join(directory, candidate)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return tuple(paths)


def default_data_dir():
    return os.environ.get("BRIDGENET_DATA") or os.path.join(os.getcwd(), "data", "mnist-subset")


# ---------------------------------------------------------------- views


def split_halves(images):
    """Cut ``[N, H, W]`` images vertically into left and right ``[N, 1, H, W/2]`` views."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ContractError(f"expected [N, H, W] images, got shape {images.shape}")
    w = images.shape[2]
    if w % 2:
        raise ContractError(f"image width {w} is odd")
    half = w // 2
    return (np.ascontiguousarray(images[:, None, :, :half]),
            np.ascontiguousarray(images[:, None, :, half:]))


@dataclass
class PairDataset:
    """Aligned two-view samples: ``view1[i]`` and ``view2[i]`` describe sample ``i``."""

    view1: np.ndarray
    view2: np.ndarray
    labels: np.ndarray = None
    pairing: str = "aligned"

    def __post_init__(self):
        self.view1 = np.ascontiguousarray(self.view1, dtype=np.float64)
        self.view2 = np.ascontiguousarray(self.view2, dtype=np.float64)
        if len(self.view1) != len(self.view2):
            raise ContractError(f"views differ in length: {len(self.view1)} vs {len(self.view2)}")
        if len(self.view1) < 2:
            raise ContractError("a pair dataset needs at least 2 samples")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.view1):
                raise ContractError("labels and views differ in length")
        if self.pairing not in STRATEGIES:
            raise ParameterError(f"pairing must be one of {STRATEGIES}, got {self.pairing!r}")
        if self.pairing == "same_label" and self.labels is None:
            raise ContractError("same_label pairing requires labels")

    def __len__(self):
        return len(self.view1)

    @property
    def view_shapes(self):
        return self.view1.shape[1:], self.view2.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return PairDataset(self.view1[indices], self.view2[indices], labels, self.pairing)

    def with_pairing(self, pairing):
        return PairDataset(self.view1, self.view2, self.labels, pairing)

    @classmethod
    def from_images(cls, images, labels=None, pairing="aligned"):
        v1, v2 = split_halves(images)
        return cls(v1, v2, labels, pairing)


def load_mnist_pairs(directory=None, split="train", limit=None, pairing="aligned"):
    directory = directory or default_data_dir()
    images, labels = load_idx(*find_mnist(directory, split))
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return PairDataset.from_images(images, labels, pairing)


# ---------------------------------------------------------------- pairs


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _label_groups(labels):
    order = np.argsort(labels, kind="stable")
    values, starts, counts = np.unique(labels[order], return_index=True, return_counts=True)
    return [order[s : s + c] for s, c in zip(starts, counts)]


def make_positive_pairs(dataset, count=None, rng=None):
    """Index pairs ``(i, j)`` treated as matched.

    ``aligned`` gives ``(i, i)`` for every sample. ``same_label`` gives every
    ordered pair with equal labels when ``count`` is None, otherwise ``count``
    such pairs drawn uniformly without replacement.
    """
    n = len(dataset)
    if dataset.pairing == "aligned":
        idx = np.arange(n)
        return np.stack([idx, idx], axis=1)
    if dataset.labels is None:
        raise ContractError("same_label pairing requires labels")
    groups = _label_groups(dataset.labels)
    sizes = np.array([len(g) ** 2 for g in groups], dtype=np.int64)
    total = int(sizes.sum())
    if count is None:
        flat = np.arange(total)
    else:
        if count > total:
            raise ContractError(f"requested {count} positive pairs but only {total} exist")
        flat = np.sort(_rng(rng).choice(total, size=int(count), replace=False))
    bounds = np.cumsum(sizes)
    gid = np.searchsorted(bounds, flat, side="right")
    offset = flat - (bounds[gid] - sizes[gid])
    pairs = np.empty((len(flat), 2), dtype=np.int64)
    for g, members in enumerate(groups):
        sel = gid == g
        m = len(members)
        pairs[sel, 0] = members[offset[sel] // m]
        pairs[sel, 1] = members[offset[sel] % m]
    return pairs


@dataclass
class NegativeSet:
    """Mismatched index pairs for one epoch.

    ``rng_state`` is the bit-generator state from before drawing, so the set
    can be regenerated exactly.
    """

    pairs: np.ndarray
    epoch: int = 0
    rng_state: dict = field(default=None, repr=False)

    def __len__(self):
        return len(self.pairs)


def negative_count(n, np_ratio):
    # half-up rounding of N * xi
    return int(np.floor(n * np_ratio + 0.5))


def sample_negatives(dataset, np_ratio, rng, epoch=0):
    """Draw ``round(N * np_ratio)`` pairs uniformly, with replacement, from
    ``{(i, j): i != j}``; under ``same_label`` pairing only pairs with
    different labels qualify."""
    if not np_ratio > 0:
        raise ParameterError(f"NP ratio must be positive, got {np_ratio}")
    rng = _rng(rng)
    n = len(dataset)
    if n < 2:
        raise NoNegativesError(f"need at least 2 samples to form a mismatched pair, got {n}")
    same_label = dataset.pairing == "same_label"
    if same_label and len(np.unique(dataset.labels)) < 2:
        raise NoNegativesError("all samples share one label: no label-disjoint pairs exist")
    state = rng.bit_generator.state
    m = negative_count(n, np_ratio)
    out = np.empty((m, 2), dtype=np.int64)
    filled = 0
    while filled < m:
        want = m - filled
        i = rng.integers(0, n, size=want)
        j = (i + rng.integers(1, n, size=want)) % n
        if same_label:
            keep = dataset.labels[i] != dataset.labels[j]
            i, j = i[keep], j[keep]
        out[filled : filled + len(i), 0] = i
        out[filled : filled + len(i), 1] = j
        filled += len(i)
    return NegativeSet(out, epoch=epoch, rng_state=state)


# ---------------------------------------------------------------- synthetic views


def synth_two_view(latent_dim=5, dims=(273, 112), noise=0.1, n_samples=1000, seed=0, linear=False):
    """Two views driven by one shared Gaussian latent.

    ``view_k = tanh(W_k z) + noise * eps`` with fixed random ``W_k``; with
    ``linear=True`` the tanh is dropped. Views are returned as height-1
    sequences ``[N, 1, 1, d_k]`` so the 1x3-kernel towers apply directly.
    """
    d1, d2 = (int(d) for d in dims)
    if noise < 0:
        raise ParameterError(f"noise level must be non-negative, got {noise}")
    if latent_dim < 1 or latent_dim > min(d1, d2):
        raise ParameterError(f"latent_dim must be in [1, {min(d1, d2)}], got {latent_dim}")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((latent_dim, d1)) / np.sqrt(latent_dim)
    w2 = rng.standard_normal((latent_dim, d2)) / np.sqrt(latent_dim)
    z = rng.standard_normal((n_samples, latent_dim))
    a, b = z @ w1, z @ w2
    if not linear:
        a, b = np.tanh(a), np.tanh(b)
    a = a + noise * rng.standard_normal(a.shape)
    b = b + noise * rng.standard_normal(b.shape)
    return PairDataset(a.reshape(n_samples, 1, 1, d1), b.reshape(n_samples, 1, 1, d2))


# ---------------------------------------------------------------- batching


def batch_iter(positives, negatives, batch_size, rng):
    """Yield ``(positive_pairs, negative_pairs)`` mini-batches covering one epoch.

    Both sets are shuffled and cut into the same number of contiguous chunks,
    so every batch keeps roughly the epoch's positive:negative ratio. The
    number of batches is capped so that no batch lacks either class.
    """
    if batch_size < 2:
        raise ParameterError(f"batch_size must be >= 2, got {batch_size}")
    positives = np.asarray(positives)
    negatives = np.asarray(getattr(negatives, "pairs", negatives))
    if len(positives) == 0:
        raise ContractError("no positive pairs to iterate")
    rng = _rng(rng)
    pos = positives[rng.permutation(len(positives))]
    neg = negatives[rng.permutation(len(negatives))] if len(negatives) else negatives
    n_batches = -(-(len(pos) + len(neg)) // batch_size)
    n_batches = min(n_batches, len(pos), len(neg)) if len(neg) else min(n_batches, len(pos))
    n_batches = max(n_batches, 1)
    neg_chunks = np.array_split(neg, n_batches) if len(neg) else [neg[:0]] * n_batches
    for p, q in zip(np.array_split(pos, n_batches), neg_chunks):
        yield p, q
