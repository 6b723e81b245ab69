"""The alternating training loop.

Every step updates F and C on ``L_cls + lam * L_unc + L_nrc``; every ``N``
steps (after step 0) features are re-extracted in eval mode and the
source weights are re-learned by the adversarial reweighting round.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core_math import softmax_backward
from .losses import (Banks, UncertaintyLossKind, nrc_loss, reweighted_ce, uncertainty_loss,
                     update_banks)
from .nets import (Discriminator, OptimizerState, RecognitionModel, optimizer_step,
                   pca_init_classifier, save_checkpoint)
from .reweight import (GROUP_THRESHOLD, SUBSAMPLE_SIZE, SUBSAMPLE_THRESHOLD, WeightVector,
                       learn_weights)

log = logging.getLogger(__name__)

SAMPLER_MODES = ("auto", "weighted_loss", "weighted_sampler")
SAMPLER_SWITCH = 10_000
SUMMARY_VERSION = 1


@dataclass
class TrainConfig:
    kappa: float = 0.01
    lam: float = 0.3
    rho: float = 5.0
    alpha: float = 6.0
    K: int = 4
    M: int = 3
    N: int = 500
    n_prime: int = SUBSAMPLE_SIZE
    batch_size: int = 64
    total_steps: int = 5000
    feature_norm: float = 20.0
    smoothing: float = 0.1
    seed: int = 2019
    sampler_mode: str = "auto"
    normalize_classifier: bool = True
    # ablation switches: R, N and the uncertainty term (P, or E via "entropy")
    use_reweight: bool = True
    use_nrc: bool = True
    uncertainty: str = "alpha_power"
    # architecture / optimisation details
    hidden: tuple = (256, 256)
    feature_dim: int = 64
    disc_hidden: tuple = (1024, 1024)
    disc_steps: int = 500
    disc_batch: int = 64
    disc_lr: float = 1e-3
    inner_rounds: int = 1
    group_threshold: int = GROUP_THRESHOLD
    subsample_threshold: int = SUBSAMPLE_THRESHOLD
    pca_init: bool = True
    eval_every: int = 100
    # open-set / universal extension
    tau: float = 0.25
    lam_prime: float = 0.05
    threshold: float = 0.65

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        self.validate()

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("kappa", "rho", "N", "total_steps", "feature_norm", "K", "M", "disc_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.lam_prime < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ValueError(f"sampler_mode must be one of {SAMPLER_MODES}")
        self.uncertainty_kind  # raises on an unknown kind or alpha <= 1

    @property
    def uncertainty_kind(self):
        if self.uncertainty in ("alpha_power", "tsallis"):
            return UncertaintyLossKind(self.uncertainty, self.alpha)
        return UncertaintyLossKind(self.uncertainty)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainLog:
    """Append-only record of a run. ``step`` doubles as the timestamp."""

    events: list = field(default_factory=list)
    weight_snapshots: list = field(default_factory=list)

    def add(self, event, step, **values):
        if self.events and step < self.events[-1]["step"]:
            raise ValueError("log timestamps must be monotone")
        self.events.append({"event": event, "step": int(step), **values})

    def of(self, event):
        return [e for e in self.events if e["event"] == event]

    def accuracy_curve(self):
        evs = self.of("eval")
        return np.array([e["step"] for e in evs]), np.array([e["accuracy"] for e in evs])

    def relative_weight_changes(self):
        return np.array([e["rel_change"] for e in self.of("reweight")])

    def final(self, key):
        for e in reversed(self.events):
            if key in e:
                return e[key]
        return None

    def write_ndjson(self, path):
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read_ndjson(cls, path):
        log_ = cls()
        with open(path) as fh:
            log_.events = [json.loads(line) for line in fh if line.strip()]
        return log_


def cell_name(config):
    """Ablation label of a config: ``SO`` plus the enabled toggles, e.g. ``SO+R+N+P``.

    ``E`` replaces ``P`` when the uncertainty term is the entropy.
    """
    parts = ["SO"]
    if config.use_reweight:
        parts.append("R")
    if config.use_nrc:
        parts.append("N")
    if config.lam > 0:
        parts.append({"alpha_power": "P", "entropy": "E"}.get(config.uncertainty, config.uncertainty))
    return "+".join(parts)


def summary_row(name, config, log_):
    steps, acc = log_.accuracy_curve()
    changes = log_.relative_weight_changes()
    return {
        "summary_version": SUMMARY_VERSION,
        "run": name,
        "seed": config.seed,
        "R": int(config.use_reweight),
        "P": int(config.lam > 0),
        "N": int(config.use_nrc),
        "uncertainty": config.uncertainty if config.lam > 0 else "none",
        "final_accuracy": f"{acc[-1]:.6f}" if len(acc) else "",
        "final_h_score": "" if log_.final("h_score") is None else f"{log_.final('h_score'):.6f}",
        "rounds": len(changes),
        "final_rel_weight_change": f"{changes[-1]:.6e}" if len(changes) else "",
    }


SUMMARY_FIELDS = ["summary_version", "run", "seed", "R", "P", "N", "uncertainty",
                  "final_accuracy", "final_h_score", "rounds", "final_rel_weight_change"]


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def resolve_sampler_mode(mode, m):
    if mode == "auto":
        return "weighted_sampler" if m > SAMPLER_SWITCH else "weighted_loss"
    return mode


def sample_batch(weights, mode, batch_size, rng, active=None):
    """Draw source indices and the per-sample loss weights that go with them.

    ``weighted_sampler`` draws with probability proportional to ``w`` and
    returns unit loss weights; ``weighted_loss`` draws uniformly and returns
    ``w`` for the loss. Both give the same expected reweighted loss.
    """
    w = np.asarray(weights.w if isinstance(weights, WeightVector) else weights, dtype=float)
    pool = np.arange(len(w)) if active is None else np.asarray(active)
    if mode == "weighted_sampler":
        mass = w[pool]
        total = mass.sum()
        if not total > 0:
            raise ValueError("all-zero weights")
        idx = pool[rng.choice(len(pool), size=batch_size, p=mass / total)]
        return idx, np.ones(batch_size)
    if mode == "weighted_loss":
        if not w[pool].sum() > 0:
            raise ValueError("all-zero weights")
        idx = pool[rng.integers(0, len(pool), batch_size)]
        return idx, w[idx]
    raise ValueError(f"unknown sampler mode {mode!r}")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good_model=None, checkpoint=None):
        super().__init__(message)
        self.last_good_model = last_good_model
        self.checkpoint = checkpoint


class Trainer:
    """Stateful driver for one run; :func:`train` is the functional entry point."""

    def __init__(self, config, source, target, checkpoint_dir=None):
        if source.labels is None:
            raise ValueError("source must be labeled")
        self.config = config
        self.source = source
        self.target = target
        self.checkpoint_dir = checkpoint_dir
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.rng_batch = np.random.default_rng(seeds[0])
        self.rng_disc = np.random.default_rng(seeds[2])
        self.num_classes = int(source.labels.max()) + 1
        self.model = RecognitionModel(source.features.shape[1], self.num_classes, config.hidden,
                                      config.feature_dim, config.feature_norm,
                                      config.normalize_classifier, rng=seeds[1])
        self.disc = Discriminator(config.feature_dim, config.disc_hidden, rng=seeds[3])
        self.opt = OptimizerState(self.model, self.disc, base_lr=config.kappa, disc_lr=config.disc_lr)
        self.weights = WeightVector(np.ones(len(source)), config.rho)
        self.scores = np.full(len(source), np.nan)  # critic scores from the latest round
        self.active = np.arange(len(source))
        self.sampler = resolve_sampler_mode(config.sampler_mode, len(source))
        self.banks = None
        self.log = TrainLog()
        self.last_checkpoint = None
        self._last_good = None

    # hooks

    @property
    def uses_target_batch(self):
        return self.config.lam > 0 or self.config.use_nrc

    @property
    def reweight_enabled(self):
        return self.config.use_reweight

    def setup(self):
        cfg = self.config
        if cfg.pca_init:
            src_f, _ = self.model.extract(self.source.features)
            tgt_f, _ = self.model.extract(self.target.features)
            self.model.params["cls.W"] = pca_init_classifier(
                src_f, self.source.labels, tgt_f, self.num_classes, normalize=cfg.normalize_classifier)
            self.model.mark_updated()
        if cfg.use_nrc:
            tgt_f, tgt_p = self.model.extract(self.target.features)
            self.banks = Banks(tgt_f.copy(), tgt_p.copy())

    def target_loss(self, step, idx_t, feats_t, probs_t):
        """Loss terms on the target rows: ``(dict of values, dL/dprobs)``."""
        cfg = self.config
        dprobs = np.zeros_like(probs_t)
        values = {}
        if cfg.lam > 0:
            val, g = uncertainty_loss(probs_t, cfg.uncertainty_kind)
            values["L_pow"] = val
            dprobs += cfg.lam * g
        if cfg.use_nrc:
            update_banks(self.banks, idx_t, feats_t, probs_t)
            val, g = nrc_loss(self.banks, idx_t, probs_t, cfg.K, cfg.M)
            values["L_nrc"] = val
            dprobs += g
        return values, dprobs

    def reweight_round(self, step):
        cfg = self.config
        src_f, _ = self.model.extract(self.source.features)
        tgt_f, _ = self.model.extract(self.target.features)
        res = learn_weights(self.disc, src_f, tgt_f, cfg.rho, cfg.disc_steps, cfg.group_threshold,
                            cfg.subsample_threshold, cfg.n_prime, rng=self.rng_disc,
                            optimizer=self.opt.disc, prev_weights=self.weights.w,
                            batch_size=cfg.disc_batch, inner_rounds=cfg.inner_rounds)
        old = self.weights.w
        self.weights = res.weights
        self.active = res.active
        self.scores[res.active] = res.report.source_scores
        rel = float(np.linalg.norm(res.weights.w - old) / np.linalg.norm(old))
        self.log.weight_snapshots.append(res.weights.w.copy())
        self.log.add("reweight", step, rel_change=rel,
                     wasserstein=res.report.wasserstein_estimate,
                     zero_weights=int(np.sum(res.weights.w == 0)))

    def evaluate(self, step):
        if self.target.labels is None:
            return
        _, probs = self.model.extract(self.target.features)
        pred = np.argmax(probs, axis=1)
        self.log.add("eval", step, accuracy=float(np.mean(pred == self.target.labels)))

    # loop

    def step(self, step):
        cfg = self.config
        bs = cfg.batch_size
        progress = step / cfg.total_steps
        idx_s, w_s = sample_batch(self.weights, self.sampler, bs, self.rng_batch, self.active)
        x = self.source.features[idx_s]
        idx_t = None
        if self.uses_target_batch:
            idx_t = self.rng_batch.choice(len(self.target), size=bs, replace=False)
            x = np.concatenate([x, self.target.features[idx_t]])
        feats, logits, probs = self.model.forward(x, mode="train")
        l_cls, dlogits_s = reweighted_ce(probs[:bs], self.source.labels[idx_s], w_s,
                                         cfg.smoothing, logits=logits[:bs])
        values = {"L_cls": l_cls}
        dlogits = dlogits_s
        if idx_t is not None:
            tvals, dprobs_t = self.target_loss(step, idx_t, feats[bs:], probs[bs:])
            values.update(tvals)
            dlogits = np.concatenate([dlogits_s, softmax_backward(probs[bs:], dprobs_t)])
        total = sum(values.values())
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}", self._last_good, self.last_checkpoint)
        grads = self.model.backward(dlogits, classifier_rows=slice(0, bs))
        optimizer_step(self.opt, self.model, grads, progress)
        self.log.add("step", step, **values)

    def checkpoint(self, step):
        self._last_good = self.model.copy()
        if self.checkpoint_dir is None:
            return
        path = f"{self.checkpoint_dir}/checkpoint_{step:06d}.npz"
        save_checkpoint(path, self.model, self.opt, self.disc, self.config.to_dict(),
                        extra={"step": step})
        self.last_checkpoint = path

    def run(self):
        cfg = self.config
        self.setup()
        self.checkpoint(0)
        for step in range(cfg.total_steps):
            self.step(step)
            if self.reweight_enabled and step % cfg.N == 0 and step > 0:
                self.reweight_round(step)
                self.checkpoint(step)
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                self.evaluate(step + 1)
        if not cfg.eval_every or cfg.total_steps % cfg.eval_every:
            self.evaluate(cfg.total_steps)
        return self.model, self.log


def train(config, source, target, checkpoint_dir=None):
    """Run the full alternating loop; returns ``(model, TrainLog)``."""
    trainer = Trainer(config, source, target, checkpoint_dir)
    return trainer.run()
