"""Adversarial source reweighting.

A spectrally normalised critic ``D`` estimates the Wasserstein-1 dual
potential between source and target features. Given its source scores
``d``, the weights solve

    min_w  d.w   s.t.  w >= 0,  sum(w) = m,  sum((w - 1)^2) <= rho * m

so samples the critic finds "source-like" (large ``d``) lose weight.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .core_math import DTYPE
from .nets import Adam, apply_spectral_norm

log = logging.getLogger(__name__)

GROUP_THRESHOLD = 20_000
SUBSAMPLE_THRESHOLD = 1_000_000
SUBSAMPLE_SIZE = 64 * 2000


@dataclass
class WeightVector:
    w: np.ndarray
    rho: float

    def __len__(self):
        return len(self.w)

    def check(self, tol=1e-6):
        """Raise ``ValueError`` if the feasibility invariants are violated."""
        m = len(self.w)
        if np.any(self.w < 0):
            raise ValueError("negative weight")
        if abs(self.w.sum() - m) > tol * m:
            raise ValueError(f"weights sum to {self.w.sum()}, expected {m}")
        dev = np.sum((self.w - 1.0) ** 2)
        if dev > self.rho * m + tol * m:
            raise ValueError(f"deviation {dev} exceeds rho*m = {self.rho * m}")
        return self


@dataclass
class DualPotentialReport:
    wasserstein_estimate: float
    discriminator_steps: int
    source_scores: np.ndarray
    target_scores: np.ndarray = None
    curve: list = field(default_factory=list)


def solve_weights(d, rho=5.0, tol=1e-10):
    """Exact minimiser of ``d.w`` over ``{w >= 0, sum w = m, |w - 1|^2 <= rho m}``.

    Optimality forces ``w_i = max(0, a - b d_i)``, so the zero set is always
    the ``k`` largest scores. For each ``k`` the free block has the closed
    form ``w_F = m/|F| - r (d_F - mean d_F) / |d_F - mean d_F|`` with ``r``
    the ball radius left after the clamped coordinates; the first ``k``
    whose free block is nonnegative and whose clamped coordinates have
    nonnegative multipliers is optimal. When ``d`` is constant on the free
    block every feasible point ties and the uniform one (closest to 1) is
    returned.
    """
    d = np.asarray(d, dtype=DTYPE).ravel()
    m = d.size
    if m < 2:
        raise ValueError("need at least 2 weights")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite scores")
    if rho <= 0:
        raise ValueError("rho must be positive")
    spread = d.max() - d.min()
    if spread == 0:
        return WeightVector(np.ones(m), rho)
    d = (d - d.mean()) / spread  # objective is invariant to affine rescaling

    order = np.argsort(-d, kind="stable")
    ds = d[order]
    # suffix sums over the free block ds[k:]
    s1 = np.cumsum(ds[::-1])[::-1]
    s2 = np.cumsum((ds ** 2)[::-1])[::-1]
    k = np.arange(m)
    f = m - k
    mean_f = s1 / f
    ss = np.maximum(s2 - s1 * mean_f, 0.0)
    spread_f = np.sqrt(ss)
    rem = rho * m - k - k ** 2 / f
    radius = np.sqrt(np.maximum(rem, 0.0))
    feasible = rem >= -tol * m
    flat = spread_f <= 1e-12 * np.sqrt(f)

    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(flat, 0.0, radius / np.where(flat, 1.0, spread_f))
    base = 1.0 + k / f
    w_lowest_free = base - slope * (ds - mean_f)
    prev = np.concatenate(([np.inf], ds[:-1]))
    w_last_clamped = np.where(k > 0, base - slope * (prev - mean_f), -np.inf)
    ok_free = w_lowest_free >= -tol
    ok_clamped = np.where(flat, prev >= ds, w_last_clamped <= tol)
    ok = feasible & ok_free & ok_clamped

    if not np.any(ok):
        # numerical corner: pick the best feasible candidate after clipping
        candidates = np.flatnonzero(feasible)
        best, best_obj = None, np.inf
        for kk in candidates:
            w = _block_weights(ds, kk, slope[kk], mean_f[kk], base[kk])
            obj = ds @ w
            if obj < best_obj:
                best, best_obj = w, obj
        ws = best
    else:
        kk = int(np.argmax(ok))
        ws = _block_weights(ds, kk, slope[kk], mean_f[kk], base[kk])
    w = np.empty(m)
    w[order] = ws
    return WeightVector(w, rho)


def _block_weights(ds, k, slope, mean_f, base):
    w = np.zeros(ds.size)
    w[k:] = base - slope * (ds[k:] - mean_f)
    w = np.maximum(w, 0.0)
    return w * (ds.size / w.sum())


def train_dual_discriminator(disc, src_feats, tgt_feats, steps, batch_size=64, rng=None,
                             optimizer=None, source_weights=None, curve_every=0):
    """Adam ascent on ``mean D(source) - mean D(target)`` with spectral norm.

    Mini-batches of ``batch_size`` are drawn uniformly from each side. With
    ``source_weights`` the source mean is weighted. ``curve`` collects the
    mini-batch objective every step, or the full-data estimate every
    ``curve_every`` steps when that is positive.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    src = np.asarray(src_feats, dtype=DTYPE)
    tgt = np.asarray(tgt_feats, dtype=DTYPE)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("empty feature set")
    rng = np.random.default_rng(rng)
    if optimizer is None:
        optimizer = Adam(disc.params.keys(), lr=1e-3)
    ws = None if source_weights is None else np.asarray(source_weights, dtype=DTYPE)

    curve = []
    bs_s, bs_t = min(batch_size, len(src)), min(batch_size, len(tgt))
    for step in range(steps):
        i_s = rng.integers(0, len(src), bs_s)
        i_t = rng.integers(0, len(tgt), bs_t)
        scores = disc.forward(np.concatenate([src[i_s], tgt[i_t]]))
        coef_s = np.full(bs_s, 1.0 / bs_s) if ws is None else ws[i_s] / bs_s
        objective = float(coef_s @ scores[:bs_s] - scores[bs_s:].mean())
        if not np.isfinite(objective):
            raise FloatingPointError(f"non-finite critic objective at step {step}")
        dscores = np.concatenate([-coef_s, np.full(bs_t, 1.0 / bs_t)])  # descend on -objective
        grads = disc.backward(dscores)
        optimizer.step(disc.params, grads)
        apply_spectral_norm(disc)
        if curve_every <= 0:
            curve.append(objective)
        elif (step + 1) % curve_every == 0:
            curve.append(float(disc.score(src).mean() - disc.score(tgt).mean()))

    d_src = disc.score(src)
    d_tgt = disc.score(tgt)
    src_mean = d_src.mean() if ws is None else (ws @ d_src) / len(d_src)
    return DualPotentialReport(float(src_mean - d_tgt.mean()), steps, d_src, d_tgt, curve)


def strided_groups(m, group_threshold=GROUP_THRESHOLD):
    """Index groups ``{i, l+i, 2l+i, ...}`` with ``l = floor(m / group_threshold)``."""
    if m <= group_threshold:
        return [np.arange(m)]
    n_groups = m // group_threshold
    return [np.arange(i, m, n_groups) for i in range(n_groups)]


def solve_grouped(d, rho, group_threshold=GROUP_THRESHOLD):
    d = np.asarray(d, dtype=DTYPE)
    w = np.empty_like(d)
    for g in strided_groups(len(d), group_threshold):
        w[g] = solve_weights(d[g], rho).w
    return WeightVector(w, rho)


@dataclass
class ReweightResult:
    weights: WeightVector
    active: np.ndarray  # source indices that took part in this round
    report: DualPotentialReport


def learn_weights(disc, src_feats, tgt_feats, rho=5.0, steps=500, group_threshold=GROUP_THRESHOLD,
                  subsample_threshold=SUBSAMPLE_THRESHOLD, subsample_size=SUBSAMPLE_SIZE,
                  rng=None, optimizer=None, prev_weights=None, batch_size=64, inner_rounds=1):
    """One reweighting round: train the critic at ``w = 1``, then solve for ``w``.

    Above ``subsample_threshold`` source samples only a random subset of
    ``subsample_size`` takes part and the rest keep ``prev_weights``.
    Above ``group_threshold`` the solve is split into strided groups, each
    summing to its own size. With ``inner_rounds > 1`` the critic is
    retrained against the current weights and the solve repeated.
    """
    if group_threshold < 1 or subsample_threshold < 1:
        raise ValueError("thresholds must be positive")
    rng = np.random.default_rng(rng)
    src = np.asarray(src_feats, dtype=DTYPE)
    m = len(src)
    full = np.ones(m) if prev_weights is None else np.asarray(prev_weights, dtype=DTYPE).copy()
    if m > subsample_threshold:
        active = np.sort(rng.choice(m, size=min(subsample_size, m), replace=False))
    else:
        active = np.arange(m)

    current = None
    report = None
    for _ in range(max(1, inner_rounds)):
        report = train_dual_discriminator(disc, src[active], tgt_feats, steps, batch_size, rng,
                                          optimizer, source_weights=current)
        current = solve_grouped(report.source_scores, rho, group_threshold).w
    full[active] = current
    return ReweightResult(WeightVector(full, rho), active, report)


def class_weight_summary(labels, weights, num_classes=None):
    """Mean weight per class label: list of ``(class, count, mean_weight)``."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=DTYPE)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    rows = []
    for c in range(k):
        mask = labels == c
        rows.append((c, int(mask.sum()), float(weights[mask].mean()) if mask.any() else float("nan")))
    return rows


def write_weight_report(path, sample_ids, labels, scores, weights):
    """CSV with columns ``sample_id,class_label,discriminator_score,weight``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_label", "discriminator_score", "weight"])
        for row in zip(sample_ids, labels, scores, weights):
            writer.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3]))])


def read_weight_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "sample_id": [r["sample_id"] for r in rows],
        "class_label": np.array([int(r["class_label"]) for r in rows]),
        "discriminator_score": np.array([float(r["discriminator_score"]) for r in rows]),
        "weight": np.array([float(r["weight"]) for r in rows]),
    }
