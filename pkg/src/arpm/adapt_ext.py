"""Open-set / universal adaptation and test-time adaptation by power maximization.

Open-set training reverses the roles of the two domains in the reweighting
round: the weights live on target samples, so target samples the critic
finds far from the source (likely unknown classes) get small weights.
After each round target samples are sorted by weight (ascending, stable by
index). The ``ceil(n * tau)`` largest-weight samples get a weighted
power-maximization term, ``L_com``; the same number of smallest-weight ones
get ``L_pri``, whose negation pushes their predictions toward uniform. The
source classification loss stays unweighted:

    L = L_cls + lam_prime * (L_com - L_pri)

Test-time adaptation (TPM) takes one gradient-ascent step on the mean
power score ``H_alpha`` of each incoming batch, updating only the batch-norm
scale and shift, and then predicts that batch with the updated parameters.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import DTYPE, softmax_backward
from .losses import UncertaintyLossKind, alpha_power, uncertainty_loss
from .nets import pca_init_classifier
from .reweight import WeightVector, learn_weights
from .scenario import UNKNOWN, classify_with_unknown as _classify_probs
from .scenario import h_score_from_predictions, predict_proba
from .trainer import Trainer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpenSetConfig:
    tau: float = 0.25
    lam_prime: float = 0.05
    unknown_threshold: float = 0.65

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.lam_prime <= 0:
            raise ValueError("lam_prime must be positive")
        if not 0 < self.unknown_threshold < 1:
            raise ValueError("unknown_threshold must lie in (0, 1)")

    @classmethod
    def from_train_config(cls, config):
        return cls(config.tau, config.lam_prime, config.threshold)

    def slice_size(self, n):
        """Samples per slice, ``ceil(n * tau)``; raises when ``n * tau < 1``."""
        if n * self.tau < 1:
            raise ValueError(f"n * tau = {n * self.tau} < 1: slices would be empty")
        return math.ceil(n * self.tau - 1e-12)


def weight_slices(weights, size, scores=None):
    """Indices of the ``size`` smallest and ``size`` largest weights.

    Ties are broken by a stable ascending sort, so with equal weights the
    bottom slice is the first ``size`` indices and the top slice the last.
    With critic ``scores`` (lower means closer to the other domain), tied
    weights are first ordered by descending score; this matters for the
    many weights the solver clamps to exactly zero.
    """
    weights = np.asarray(weights)
    if scores is None:
        order = np.argsort(weights, kind="stable")
    else:
        scores = np.asarray(scores, dtype=DTYPE)
        scores = np.where(np.isnan(scores), -np.inf, scores)
        order = np.lexsort((-scores, weights))
    return order[:size], order[len(order) - size:]


def classify_with_unknown(model, x, threshold=0.65):
    """Argmax class per row of ``x``, or ``UNKNOWN`` when the top probability is below ``threshold``."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    return _classify_probs(predict_proba(model, x), threshold)


def open_set_scores(model, dataset, threshold):
    """``(h_score, known_accuracy, unknown_recall)`` with target-private rows as unknown."""
    pred = classify_with_unknown(model, dataset.features, threshold)
    return h_score_from_predictions(pred, dataset.labels, dataset.roles == "target_private")


class OpenSetTrainer(Trainer):
    """Trainer with target-side weights and the ``L_com`` / ``L_pri`` pair."""

    def __init__(self, config, source, target, checkpoint_dir=None):
        super().__init__(config, source, target, checkpoint_dir)
        self.open_set = OpenSetConfig.from_train_config(config)
        self.slice_size = self.open_set.slice_size(len(target))
        self.target_weights = WeightVector(np.ones(len(target)), config.rho)
        self.target_scores = None
        n = len(target)
        # no slices until a reweighting round has produced informative weights
        self.in_pri = np.zeros(n, dtype=bool)
        self.in_com = np.zeros(n, dtype=bool)

    def _set_slices(self):
        n = len(self.target)
        bottom, top = weight_slices(self.target_weights.w, self.slice_size, self.target_scores)
        self.in_pri = np.zeros(n, dtype=bool)
        self.in_pri[bottom] = True
        self.in_com = np.zeros(n, dtype=bool)
        self.in_com[top] = True

    @property
    def uses_target_batch(self):
        return True

    def setup(self):
        # no banks here: the open-set objective has no neighbourhood term
        cfg = self.config
        if cfg.pca_init:
            src_f, _ = self.model.extract(self.source.features)
            tgt_f, _ = self.model.extract(self.target.features)
            self.model.params["cls.W"] = pca_init_classifier(
                src_f, self.source.labels, tgt_f, self.num_classes, normalize=cfg.normalize_classifier)
            self.model.mark_updated()

    def target_loss(self, step, idx_t, feats_t, probs_t):
        cfg = self.config
        h = alpha_power(probs_t, cfg.alpha)
        dh = cfg.alpha * probs_t ** (cfg.alpha - 1)  # dH/dp per row
        com = self.in_com[idx_t]
        pri = self.in_pri[idx_t]
        w = self.target_weights.w[idx_t]
        dprobs = np.zeros_like(probs_t)
        values = {"L_com": 0.0, "L_pri": 0.0}
        # each term is a mean over the slice rows present in the batch
        # L_com = -mean w H over the top slice, L_pri = -mean H over the bottom slice
        if com.any():
            n_com = com.sum()
            values["L_com"] = float(-(w[com] @ h[com]) / n_com)
            dprobs[com] -= cfg.lam_prime * (w[com] / n_com)[:, None] * dh[com]
        if pri.any():
            n_pri = pri.sum()
            values["L_pri"] = float(-h[pri].sum() / n_pri)
            dprobs[pri] += cfg.lam_prime * dh[pri] / n_pri
        return values, dprobs

    def reweight_round(self, step):
        cfg = self.config
        src_f, _ = self.model.extract(self.source.features)
        tgt_f, _ = self.model.extract(self.target.features)
        # roles swapped: the weighted side is the target
        res = learn_weights(self.disc, tgt_f, src_f, cfg.rho, cfg.disc_steps, cfg.group_threshold,
                            cfg.subsample_threshold, cfg.n_prime, rng=self.rng_disc,
                            optimizer=self.opt.disc, prev_weights=self.target_weights.w,
                            batch_size=cfg.disc_batch, inner_rounds=cfg.inner_rounds)
        old = self.target_weights.w
        self.target_weights = res.weights
        self.target_scores = np.full(len(self.target), np.nan)
        self.target_scores[res.active] = res.report.source_scores
        self._set_slices()
        rel = float(np.linalg.norm(res.weights.w - old) / np.linalg.norm(old))
        self.log.weight_snapshots.append(res.weights.w.copy())
        self.log.add("reweight", step, rel_change=rel,
                     wasserstein=res.report.wasserstein_estimate,
                     zero_weights=int(np.sum(res.weights.w == 0)))

    def evaluate(self, step):
        if self.target.labels is None:
            return
        pred = classify_with_unknown(self.model, self.target.features, self.open_set.unknown_threshold)
        is_private = self.target.roles == "target_private"
        truth = np.where(is_private, UNKNOWN, self.target.labels)
        values = {"accuracy": float(np.mean(pred == truth))}
        if is_private.any() and (~is_private).any():
            h, a, r = h_score_from_predictions(pred, self.target.labels, is_private)
            values.update(h_score=h, known_accuracy=a, unknown_recall=r)
        self.log.add("eval", step, **values)


def train_open_universal(config, source, target, checkpoint_dir=None):
    """Open-set / universal training; returns ``(model, TrainLog)``.

    Uses ``config.tau``, ``config.lam_prime`` and ``config.threshold``; the
    closed-set terms of ``config`` (``lam``, NRC) are not part of this objective.
    """
    return OpenSetTrainer(config, source, target, checkpoint_dir).run()


# test-time adaptation

@dataclass
class TTAState:
    tta_lr: float = 1e-3
    alpha: float = 6.0
    steps: int = 0
    history: list = field(default_factory=list)  # mean H_alpha before each step

    def __post_init__(self):
        if self.tta_lr < 0:
            raise ValueError("tta_lr must be non-negative")
        UncertaintyLossKind("alpha_power", self.alpha)  # validates alpha


def tta_step(state, model, batch):
    """One ascent step on mean ``H_alpha`` wrt BN scale/shift, then predict the batch.

    Batch-norm runs on the batch's own statistics and the running
    statistics are left alone. Only the BN parameters change, and the
    change carries over to the next call.
    """
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("test-time adaptation needs a batch of at least 2 rows")
    _, _, probs = model.forward(x, mode="tta")
    loss, dprobs = uncertainty_loss(probs, UncertaintyLossKind("alpha_power", state.alpha))
    state.history.append(-loss)
    state.steps += 1
    if state.tta_lr == 0:
        return np.argmax(probs, axis=1)
    # loss = -mean H_alpha, so descending the loss ascends H_alpha
    grads = model.backward(softmax_backward(probs, dprobs))
    for k in model.bn_keys:
        model.params[k] = model.params[k] - state.tta_lr * grads[k]
    model.mark_updated()
    _, _, probs = model.forward(x, mode="tta")
    return np.argmax(probs, axis=1)


def stream_batches(n, batch_size):
    """Consecutive ``(start, stop)`` slices; a trailing single row joins the previous batch."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if n < 2:
        raise ValueError("stream needs at least 2 rows")
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if bounds[-1][1] - bounds[-1][0] == 1:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def stream_tpm(model, features, labels=None, batch_size=64, tta_lr=1e-3, alpha=6.0):
    """Run TPM over a stream in arrival order next to a no-adaptation twin.

    The twin is a frozen copy predicting with batch statistics. Returns
    ``(adapted_model, rows)``. Each row describes one batch:
    ``batch, start, size, accuracy_tpm, accuracy_noadapt`` (accuracies are
    ``nan`` without labels), with the predictions in ``pred_tpm`` and ``pred_noadapt``.
    """
    adapted = model.copy()
    frozen = model.copy()
    state = TTAState(tta_lr, alpha)
    features = np.asarray(features, dtype=DTYPE)
    rows = []
    for b, (start, stop) in enumerate(stream_batches(len(features), batch_size)):
        x = features[start:stop]
        pred_base = np.argmax(frozen.forward(x, mode="tta")[2], axis=1)
        pred = tta_step(state, adapted, x)
        row = {"batch": b, "start": start, "size": stop - start,
               "pred_tpm": pred, "pred_noadapt": pred_base}
        if labels is not None:
            y = np.asarray(labels)[start:stop]
            row["accuracy_tpm"] = float(np.mean(pred == y))
            row["accuracy_noadapt"] = float(np.mean(pred_base == y))
        else:
            row["accuracy_tpm"] = row["accuracy_noadapt"] = float("nan")
        rows.append(row)
    return adapted, rows


def stream_accuracy(rows, key):
    """Sample-weighted accuracy over a stream's per-batch rows."""
    sizes = np.array([r["size"] for r in rows])
    return float(np.dot(sizes, [r[key] for r in rows]) / sizes.sum())
