"""Training losses.

Each loss returns ``(value, gradient)``. The cross-entropy returns its
gradient wrt logits; the uncertainty and clustering losses return theirs
wrt probabilities, to be chained through :func:`core_math.softmax_backward`.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core_math import DTYPE

log = logging.getLogger(__name__)

_TINY = np.finfo(DTYPE).tiny


def _log_probs(probs, logits=None):
    if logits is not None:
        z = logits - logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.log(np.maximum(probs, _TINY))


def smoothed_targets(labels, num_classes, smoothing):
    a = np.full((len(labels), num_classes), smoothing / (num_classes - 1) if num_classes > 1 else 0.0)
    a[np.arange(len(labels)), labels] = 1.0 - smoothing
    return a


def reweighted_ce(probs, labels, weights=None, smoothing=0.1, logits=None):
    """Per-sample weighted, label-smoothed cross-entropy averaged over the batch.

    The true class gets target mass ``1 - smoothing`` and every other class
    ``smoothing / (K - 1)``. Returns ``(loss, dloss/dlogits)``.
    """
    probs = np.asarray(probs, dtype=DTYPE)
    labels = np.asarray(labels)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ValueError("labels must have one entry per row")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=DTYPE)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    a = smoothed_targets(labels, k, smoothing)
    logp = _log_probs(probs, logits)
    # 0 * log(0) terms vanish
    per_sample = -np.sum(np.where(a > 0, a * logp, 0.0), axis=1)
    loss = float(np.sum(w * per_sample) / b)
    grad = (w / b)[:, None] * (probs - a)
    return loss, grad


@dataclass(frozen=True)
class UncertaintyLossKind:
    kind: str = "alpha_power"
    alpha: float = 6.0

    def __post_init__(self):
        if self.kind not in ("alpha_power", "entropy", "tsallis", "square"):
            raise ValueError(f"unknown uncertainty loss {self.kind!r}")
        if self.kind in ("alpha_power", "tsallis") and not self.alpha > 1:
            raise ValueError("alpha must exceed 1")

    @classmethod
    def parse(cls, text):
        """``"alpha_power:6"``, ``"tsallis:1.5"``, ``"entropy"`` or ``"square"``."""
        name, _, arg = text.partition(":")
        return cls(name, float(arg)) if arg else cls(name)


def alpha_power(probs, alpha):
    """Row-wise sum of ``p_k ** alpha``."""
    return np.sum(np.asarray(probs, dtype=DTYPE) ** alpha, axis=-1)


def uncertainty_loss(probs, kind=UncertaintyLossKind()):
    """Mean uncertainty loss over rows and its gradient wrt ``probs``.

    alpha_power  ``-mean sum p^a``              (minimised by one-hot rows)
    square       alpha_power with ``a = 2``
    tsallis      ``mean (1 - sum p^a) / (a - 1)``
    entropy      ``mean -sum p log p``
    """
    if isinstance(kind, str):
        kind = UncertaintyLossKind.parse(kind)
    p = np.asarray(probs, dtype=DTYPE)
    if np.any(p < 0):
        raise ValueError("negative probability")
    b = p.shape[0]
    if kind.kind in ("alpha_power", "square"):
        a = 2.0 if kind.kind == "square" else kind.alpha
        loss = -float(np.mean(alpha_power(p, a)))
        grad = -a * p ** (a - 1) / b
    elif kind.kind == "tsallis":
        a = kind.alpha
        loss = float(np.mean((1.0 - alpha_power(p, a)) / (a - 1)))
        grad = -a * p ** (a - 1) / ((a - 1) * b)
    else:
        logp = np.log(np.maximum(p, _TINY))
        loss = float(np.mean(-np.sum(np.where(p > 0, p * logp, 0.0), axis=1)))
        grad = -(logp + 1.0) / b
    return loss, grad


# feature / score banks and neighbourhood reciprocity clustering

@dataclass
class Banks:
    Z: np.ndarray  # n x feature_dim
    S: np.ndarray  # n x num_classes
    initialized: bool = True

    @classmethod
    def empty(cls, n, feature_dim, num_classes):
        return cls(np.zeros((n, feature_dim)), np.full((n, num_classes), 1.0 / num_classes), False)


def update_banks(banks, batch_indices, features, scores):
    """Overwrite the rows of ``batch_indices``; last write wins on duplicates."""
    idx = np.asarray(batch_indices, dtype=int)
    if idx.size == 0:
        return
    n = banks.Z.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError("bank index out of range")
    features = np.asarray(features, dtype=DTYPE)
    scores = np.asarray(scores, dtype=DTYPE)
    uniq, first_in_reversed = np.unique(idx[::-1], return_index=True)
    if len(uniq) != len(idx):
        warnings.warn("duplicate bank indices in one batch; keeping the last write", stacklevel=2)
    keep = len(idx) - 1 - first_in_reversed
    banks.Z[idx[keep]] = features[keep]
    banks.S[idx[keep]] = scores[keep]


def _unit_rows(Z):
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    return Z / np.where(norms == 0, 1.0, norms)


def _top_k_excluding_self(sim, self_idx, k):
    """Column indices of the ``k`` largest entries per row, self excluded.

    Same result as a stable descending sort (equal similarities ordered by
    index); a full sort is only paid on rows with a tie at the k-th place.
    """
    sim = -sim  # ascending order on the negation
    rows = np.arange(len(self_idx))
    sim[rows, self_idx] = np.inf
    top = np.argpartition(sim, k - 1, axis=1)[:, :k]
    vals = sim[rows[:, None], top]
    order = np.lexsort((top, vals), axis=1)
    top = np.take_along_axis(top, order, axis=1)
    kth = vals.max(axis=1, keepdims=True)
    tied = np.count_nonzero(sim <= kth, axis=1) > k
    if tied.any():
        top[tied] = np.argsort(sim[tied], axis=1, kind="stable")[:, :k]
    return top


def nrc_neighbors(banks, batch_indices, K, M):
    """K nearest bank neighbours (cosine) of each batch row and their affinity.

    The affinity is 1 when the batch row is also among the neighbour's own
    ``M`` nearest bank entries (reciprocal pair) and 0.1 otherwise. A row is
    never its own neighbour.
    """
    if not banks.initialized:
        raise RuntimeError("banks uninitialized")
    n = banks.Z.shape[0]
    if not (1 <= K < n and 1 <= M < n):
        raise ValueError("K and M must lie in [1, n)")
    idx = np.asarray(batch_indices, dtype=int)
    Zn = _unit_rows(banks.Z)
    nbrs = _top_k_excluding_self(Zn[idx] @ Zn.T, idx, K)
    flat = nbrs.ravel()
    back = _top_k_excluding_self(Zn[flat] @ Zn.T, flat, M)
    reciprocal = np.any(back == np.repeat(idx, K)[:, None], axis=1).reshape(nbrs.shape)
    affinity = np.where(reciprocal, 1.0, 0.1)
    return nbrs, affinity


def nrc_objective(batch_probs, neighbor_scores, affinity):
    """``-mean_j sum_k A_jk <s_jk, p_j>`` with neighbours held fixed.

    ``neighbor_scores`` has shape (batch, K, classes). Returns the loss and
    its gradient wrt ``batch_probs``.
    """
    p = np.asarray(batch_probs, dtype=DTYPE)
    b = p.shape[0]
    target = np.einsum("bk,bkc->bc", affinity, neighbor_scores)
    loss = -float(np.sum(target * p) / b)
    return loss, -target / b


def nrc_loss(banks, batch_indices, batch_probs, K=4, M=3):
    """Neighbourhood reciprocity clustering loss over the current banks."""
    nbrs, affinity = nrc_neighbors(banks, batch_indices, K, M)
    return nrc_objective(batch_probs, banks.S[nbrs], affinity)


# data for the loss-landscape plots

def simplex_grid(resolution):
    """Barycentric grid over the 3-class simplex, ``(r+1)(r+2)/2`` points."""
    pts = [(i / resolution, j / resolution, (resolution - i - j) / resolution)
           for i in range(resolution + 1) for j in range(resolution + 1 - i)]
    return np.array(pts)


def alpha_power_surface(points, alpha):
    """``H_alpha`` and its gradient norm (scaled so the max is 1) on simplex points."""
    h = alpha_power(points, alpha)
    g = np.linalg.norm(alpha * points ** (alpha - 1), axis=1)
    gmax = g.max()
    return h, g / gmax if gmax > 0 else g


def two_class_gradient(p, alpha=None, p_range=(0.5, 0.99), n_ref=2000):
    """|d/dp| of the two-class loss, divided by its max over ``p_range``.

    ``alpha=None`` gives the entropy curve, ``d/dp [p log p + (1-p) log(1-p)]``.
    """
    def raw(q):
        q = np.asarray(q, dtype=DTYPE)
        if alpha is None:
            return np.abs(np.log(q) - np.log1p(-q))
        return np.abs(alpha * (q ** (alpha - 1) - (1 - q) ** (alpha - 1)))

    ref = raw(np.linspace(*p_range, n_ref)).max()
    return raw(p) / ref
