"""Evaluation protocols on learned representations.

* total correlation between the two views' representations (sum of the
  canonical correlations, i.e. the trace norm of the whitened
  cross-covariance),
* pair matching by thresholding the bridge output,
* transfer across views with a linear classifier under k-fold
  cross-validation, and the single-view baseline.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .errors import ContractError, NumericalError, ParameterError
from .model import pair_distance, tower_forward

DEFAULT_REGULARIZATION = 1e-4
EIGENVALUE_FLOOR = 1e-12


# ---------------------------------------------------------------- correlation


@dataclass
class CorrelationReport:
    value: float
    n: int
    n_samples: int
    r1: float
    r2: float
    warnings: list = field(default_factory=list)

    @property
    def upper_bound(self):
        return self.n

    def __float__(self):
        return float(self.value)


def inverse_sqrt_psd(S, floor=EIGENVALUE_FLOOR, notes=None):
    """``S^(-1/2)`` for a symmetric positive semi-definite matrix.

    Eigenvalues below ``floor`` are clamped to it (and noted); eigenvalues
    that are negative beyond rounding error raise :class:`NumericalError`.
    """
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max()))
    if vals.min() < -tol:
        raise NumericalError(f"covariance has eigenvalue {vals.min():.3e}; matrix is not PSD")
    if vals.min() < floor:
        if notes is not None:
            notes.append(f"{int((vals < floor).sum())} eigenvalue(s) clamped to {floor:g}; "
                         f"condition number >= {vals.max() / floor:.3g}")
        vals = np.maximum(vals, floor)
    return (vecs * vals**-0.5) @ vecs.T


def total_correlation(h1, h2, r1=DEFAULT_REGULARIZATION, r2=None, floor=EIGENVALUE_FLOOR):
    """Total correlation of two ``n x N`` representation matrices (columns are samples).

    The value is the sum of all singular values of
    ``S11^(-1/2) S12 S22^(-1/2)`` with ``S11 = cov(H1) + r1 I`` (likewise
    ``S22``) and lies in ``[0, n]``.
    """
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.ndim == 1:
        h1 = h1[None, :]
    if h2.ndim == 1:
        h2 = h2[None, :]
    if h1.shape[1] != h2.shape[1]:
        raise ContractError(f"sample counts differ: {h1.shape[1]} vs {h2.shape[1]}")
    if not (np.isfinite(h1).all() and np.isfinite(h2).all()):
        raise ContractError("representation matrices contain non-finite values")
    r2 = r1 if r2 is None else r2
    if r1 < 0 or r2 < 0:
        raise ParameterError("regularization must be non-negative")
    n1, N = h1.shape
    n2 = h2.shape[0]
    if N < 2:
        raise ContractError("need at least 2 samples")
    notes = []
    if N <= max(n1, n2):
        notes.append(f"only {N} samples for {max(n1, n2)} dimensions; estimate is ill-conditioned")

    c1 = h1 - h1.mean(axis=1, keepdims=True)
    c2 = h2 - h2.mean(axis=1, keepdims=True)
    s11 = c1 @ c1.T / (N - 1) + r1 * np.eye(n1)
    s22 = c2 @ c2.T / (N - 1) + r2 * np.eye(n2)
    s12 = c1 @ c2.T / (N - 1)
    t = inverse_sqrt_psd(s11, floor, notes) @ s12 @ inverse_sqrt_psd(s22, floor, notes)
    value = float(np.linalg.svd(t, compute_uv=False).sum())
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return CorrelationReport(value, min(n1, n2), N, r1, r2, notes)


def representations(model, side, views, batch_size=1000):
    """Tower outputs ``[N, n]`` in inference mode."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(views), batch_size):
            out.append(tower_forward(model, side, views[start : start + batch_size]).data)
    return np.concatenate(out)


def representation_correlation(model, dataset, r1=DEFAULT_REGULARIZATION):
    z1 = representations(model, "left", dataset.view1)
    z2 = representations(model, "right", dataset.view2)
    return total_correlation(z1.T, z2.T, r1)


# ---------------------------------------------------------------- matching


@dataclass
class MatchReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    gamma: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def match_report_from_scores(positive_scores, negative_scores, gamma=0.5):
    """Score pairs as matched when the bridge output is below ``gamma``.

    The matched class is the positive class; all metrics are percentages.
    """
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must be in (0, 1), got {gamma}")
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size + neg.size == 0:
        raise ContractError("empty evaluation set")
    tp = int((pos < gamma).sum())
    fn = pos.size - tp
    fp = int((neg < gamma).sum())
    tn = neg.size - fp
    total = tp + fp + tn + fn
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MatchReport(100.0 * (tp + tn) / total, precision, recall, f1, gamma, tp, fp, tn, fn)


def pair_scores(model, dataset, pairs, batch_size=1000):
    """Bridge outputs for index pairs ``(i, j)`` -> ``(view1[i], view2[j])``."""
    pairs = np.asarray(pairs)
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            h1 = tower_forward(model, "left", dataset.view1[chunk[:, 0]])
            h2 = tower_forward(model, "right", dataset.view2[chunk[:, 1]])
            out.append(pair_distance(h1, h2).data)
    return np.concatenate(out) if out else np.empty(0)


def match_report(model, dataset, positive_pairs, negative_pairs, gamma=0.5):
    if len(positive_pairs) + len(negative_pairs) == 0:
        raise ContractError("empty evaluation set")
    return match_report_from_scores(pair_scores(model, dataset, positive_pairs),
                                    pair_scores(model, dataset, negative_pairs), gamma)


# ---------------------------------------------------------------- linear classifier


class LinearClassifier:
    """Multiclass linear classifier ``argmax_k (w_k . z + b_k)``.

    Trained by full-batch gradient descent on the Crammer-Singer multiclass
    hinge loss (or softmax cross-entropy) with a small L2 penalty, on
    standardized features.
    """

    def __init__(self, loss="hinge", lr=0.1, max_epochs=2000, tol=1e-5, l2=1e-4):
        if loss not in ("hinge", "logistic"):
            raise ParameterError(f"loss must be 'hinge' or 'logistic', got {loss!r}")
        self.loss, self.lr, self.max_epochs, self.tol, self.l2 = loss, lr, max_epochs, tol, l2
        self.classes_ = None
        self.epochs_run = 0

    def _objective(self, z, y, W, b):
        scores = z @ W + b
        m = len(y)
        rows = np.arange(m)
        if self.loss == "hinge":
            margins = scores + 1.0
            margins[rows, y] -= 1.0
            top = margins.argmax(axis=1)
            value = float(np.mean(margins[rows, top] - scores[rows, y]))
            g = np.zeros_like(scores)
            g[rows, top] += 1.0
            g[rows, y] -= 1.0
        else:
            shifted = scores - scores.max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            value = float(-np.mean(np.log(p[rows, y] + 1e-300)))
            g = p
            g[rows, y] -= 1.0
        g /= m
        value += 0.5 * self.l2 * float((W * W).sum())
        return value, z.T @ g + self.l2 * W, g.sum(axis=0)

    def fit(self, features, labels):
        z = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if z.ndim != 2 or len(z) != len(labels):
            raise ContractError("features must be [M, d] with one label per row")
        if not np.isfinite(z).all():
            raise ContractError("features contain non-finite values")
        self.classes_, y = np.unique(labels, return_inverse=True)
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes to train a classifier")
        if len(z) < len(self.classes_):
            raise ContractError("fewer samples than classes")
        self.mean_ = z.mean(axis=0)
        self.scale_ = z.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        z = (z - self.mean_) / self.scale_
        W = np.zeros((z.shape[1], len(self.classes_)))
        b = np.zeros(len(self.classes_))
        previous = np.inf
        for epoch in range(self.max_epochs):
            value, gW, gb = self._objective(z, y, W, b)
            W -= self.lr * gW
            b -= self.lr * gb
            self.epochs_run = epoch + 1
            if abs(previous - value) < self.tol:
                break
            previous = value
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.mean_) / self.scale_
        return z @ self.coef_ + self.intercept_

    def predict(self, features):
        return self.classes_[self.decision_function(features).argmax(axis=1)]

    def score(self, features, labels):
        """Accuracy in percent."""
        return 100.0 * float(np.mean(self.predict(features) == np.asarray(labels)))


def linear_classifier_fit(features, labels, epochs=2000, lr=0.1, loss="hinge", tol=1e-5):
    return LinearClassifier(loss=loss, lr=lr, max_epochs=epochs, tol=tol).fit(features, labels)


# ---------------------------------------------------------------- transfer

DIRECTIONS = {
    "left->right": ("left", "right"),
    "right->left": ("right", "left"),
    "left": ("left", "left"),
    "right": ("right", "right"),
}


@dataclass
class TransferReport:
    direction: str
    fold_accuracies: list

    @property
    def mean_accuracy(self):
        return float(np.mean(self.fold_accuracies))


def kfold_indices(n, folds=5, seed=0):
    """Seeded permutation of ``range(n)`` cut into ``folds`` nearly equal parts."""
    if folds < 2 or folds > n:
        raise ParameterError(f"need 2 <= folds <= {n}, got {folds}")
    return np.array_split(np.random.default_rng(seed).permutation(n), folds)


def transfer_from_features(features, labels, direction, folds=5, seed=0, **classifier):
    """Cross-validated transfer accuracy.

    ``features`` maps ``"left"``/``"right"`` to ``[N, n]`` representations.
    For each fold the classifier is fit on the source view of the other folds
    and scored on the target view of the held-out fold.
    """
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    if labels is None:
        raise ContractError("transfer evaluation needs labels")
    labels = np.asarray(labels)
    source, target = DIRECTIONS[direction]
    parts = kfold_indices(len(labels), folds, seed)
    accuracies = []
    for k, test_idx in enumerate(parts):
        train_idx = np.concatenate([p for i, p in enumerate(parts) if i != k])
        clf = LinearClassifier(**classifier).fit(features[source][train_idx], labels[train_idx])
        accuracies.append(clf.score(features[target][test_idx], labels[test_idx]))
    return TransferReport(direction, accuracies)


def transfer_eval(model, dataset, direction, folds=5, seed=0, **classifier):
    if dataset.labels is None:
        raise ContractError("transfer evaluation needs labels")
    features = {"left": representations(model, "left", dataset.view1),
                "right": representations(model, "right", dataset.view2)}
    return transfer_from_features(features, dataset.labels, direction, folds, seed, **classifier)
