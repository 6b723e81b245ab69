"""Dense linear algebra and small statistical primitives.

Everything here works in float64. Vectors are 1-D arrays, matrices 2-D
row-major arrays; the batched helpers operate row-wise.
"""

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis`` (rows for a matrix)."""
    z = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, dprobs):
    """Pull a gradient wrt softmax outputs back to the logits, row-wise."""
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def l2_normalize(v, target_norm=1.0):
    """Rescale ``v`` (or each row of a matrix) to L2 norm ``target_norm``."""
    v = np.asarray(v, dtype=DTYPE)
    if target_norm <= 0:
        raise ValueError("target_norm must be positive")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("degenerate feature")
    return target_norm * v / norms


def power_iteration(W, u, iters=1):
    """Run ``iters`` rounds of power iteration from left vector ``u``.

    Returns ``(sigma, u, v)`` where ``sigma = u^T W v`` is the current
    estimate of the top singular value.
    """
    v = None
    for _ in range(iters):
        v = W.T @ u
        v /= np.linalg.norm(v)
        u = W @ v
        u /= np.linalg.norm(u)
    sigma = float(u @ W @ v)
    return sigma, u, v


def top_singular_value(W, iters=100, seed=0):
    """Power-iteration estimate of the largest singular value of ``W``."""
    W = np.asarray(W, dtype=DTYPE)
    if W.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.any(W):
        raise ValueError("zero operator")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u = np.random.default_rng(seed).standard_normal(W.shape[0])
    u /= np.linalg.norm(u)
    sigma, _, _ = power_iteration(W, u, iters)
    return sigma


@dataclass
class PCAResult:
    components: np.ndarray  # dims x k, columns ordered by descending eigenvalue
    eigenvalues: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False
    metadata: dict = field(default_factory=dict)


def _orient(columns):
    # Largest-magnitude entry of every column made positive.
    idx = np.argmax(np.abs(columns), axis=0)
    signs = np.sign(columns[idx, np.arange(columns.shape[1])])
    signs[signs == 0] = 1.0
    return columns * signs


def pca(X, k, rank_tol=1e-12):
    """Principal components of ``X`` (samples x dims) via covariance eigh."""
    X = np.asarray(X, dtype=DTYPE)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    if k < 1 or k > min(n, d):
        raise ValueError(f"k={k} exceeds min(samples, dims)={min(n, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals[0] > 0 else 1.0
    n_informative = int(np.sum(evals > rank_tol * top))
    deficient = k > n_informative
    comps = _orient(evecs[:, :k])
    return PCAResult(
        components=comps,
        eigenvalues=evals[:k].copy(),
        mean=mean,
        rank_deficient=deficient,
        metadata={"informative_components": n_informative},
    )


def pca_components(X, k):
    """Top-``k`` principal directions as a dims x k matrix."""
    return pca(X, k).components


def margin(p):
    """Top-1 minus top-2 probability; works on a vector or row-wise."""
    p = np.asarray(p, dtype=DTYPE)
    if p.shape[-1] < 2:
        raise ValueError("margin needs at least 2 classes")
    top2 = np.sort(p, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]
