"""Synthetic partial / open-set scenarios, dataset files and evaluation metrics.

Each class is an isotropic Gaussian cluster in input space. Target samples
are drawn from the same class-conditional distributions as the source and
then pushed through a fixed affine map (the domain shift). Source-private
classes sit far from every target cluster, as partial adaptation assumes.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from .core_math import DTYPE, margin

log = logging.getLogger(__name__)

ROLES = ("common", "source_private", "target_private", "na")
UNKNOWN = -1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray = None  # None for unlabeled rows; -1 marks a missing label in files
    domain: str = "source"
    roles: np.ndarray = None  # per-row role annotation, evaluation only
    ids: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        n = len(self.features)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if len(self.labels) != n:
                raise ValueError("labels and features differ in length")
        if self.roles is None:
            self.roles = np.array(["na"] * n)
        else:
            self.roles = np.asarray(self.roles)
        if self.ids is None:
            prefix = "s" if self.domain == "source" else "t"
            self.ids = [f"{prefix}{i}" for i in range(n)]

    def __len__(self):
        return len(self.features)

    @property
    def has_labels(self):
        return self.labels is not None and np.all(self.labels >= 0)

    @property
    def class_roles(self):
        if self.labels is None:
            return {}
        return {int(c): str(self.roles[np.argmax(self.labels == c)]) for c in np.unique(self.labels) if c >= 0}

    def unlabeled(self):
        return Dataset(self.features, None, self.domain, self.roles, list(self.ids))


@dataclass
class ScenarioSpec:
    seed: int = 2019
    input_dim: int = 16
    n_common: int = 6
    n_source_private: int = 6
    n_target_private: int = 0
    samples_per_class: int = 100
    target_samples_per_class: int = None
    cluster_spread: float = 1.0
    centroid_radius: float = 4.0
    min_separation: float = 3.0
    # affine domain shift: rotation angle (radians) in a seeded random plane
    # pencil, isotropic scale, and translation length along a seeded direction
    shift_rotation: float = 1.2
    shift_scale: float = 1.0
    shift_translation: float = 3.0
    private_distance_factor: float = 2.0

    def validate(self):
        if self.n_common < 2:
            raise ValueError("n_common must be >= 2")
        if self.n_source_private < 0 or self.n_target_private < 0:
            raise ValueError("private class counts must be non-negative")
        if self.samples_per_class < 1 or self.input_dim < 1:
            raise ValueError("counts must be positive")
        if self.cluster_spread <= 0 or self.shift_scale <= 0:
            raise ValueError("spread and scale must be positive")

    @property
    def num_source_classes(self):
        return self.n_common + self.n_source_private

    def shift_is_identity(self):
        return self.shift_rotation == 0 and self.shift_scale == 1 and self.shift_translation == 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class Scenario:
    source: Dataset
    target: Dataset
    spec: ScenarioSpec
    centroids: np.ndarray
    shift_matrix: np.ndarray
    shift_offset: np.ndarray
    meta: dict = field(default_factory=dict)


def _shift_map(spec, rng):
    d = spec.input_dim
    S = rng.standard_normal((d, d))
    S = S - S.T
    norm = np.linalg.norm(S, 2)
    A = expm(spec.shift_rotation * S / norm) if norm > 0 else np.eye(d)
    A = spec.shift_scale * A
    u = rng.standard_normal(d)
    b = spec.shift_translation * u / np.linalg.norm(u)
    return A, b


def _sample_direction(rng, d, radius):
    v = rng.standard_normal(d)
    return radius * v / np.linalg.norm(v)


def generate(spec):
    """Build a :class:`Scenario`; rows of each domain are shuffled."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    A, b = _shift_map(spec, rng)

    def far_enough(c, existing):
        return all(np.linalg.norm(c - e) >= spec.min_separation for e in existing)

    centroids = []
    radius = spec.centroid_radius
    for _ in range(spec.n_common):
        for attempt in range(10_000):
            c = _sample_direction(rng, d, radius)
            if far_enough(c, centroids):
                break
            if attempt % 100 == 99:
                radius *= 1.05
        centroids.append(c)
    common = np.array(centroids)
    tgt_common = common @ A.T + b
    shift_dist = float(np.max(np.linalg.norm(tgt_common - common, axis=1)))

    tgt_private = []
    radius_t = spec.centroid_radius
    for _ in range(spec.n_target_private):
        for attempt in range(10_000):
            c = _sample_direction(rng, d, radius_t)
            if far_enough(c, centroids) and far_enough(c @ A.T + b, list(tgt_common) + tgt_private):
                break
            if attempt % 100 == 99:
                radius_t *= 1.05
        centroids.append(c)
        tgt_private.append(c @ A.T + b)
    target_centroids = np.concatenate([tgt_common, np.array(tgt_private).reshape(-1, d)])

    # source-private centroids must be far from every target cluster
    needed = max(spec.private_distance_factor * shift_dist, spec.min_separation)
    radius_p = spec.centroid_radius
    src_private = []
    for _ in range(spec.n_source_private):
        for attempt in range(100_000):
            c = _sample_direction(rng, d, radius_p)
            if (far_enough(c, centroids)
                    and np.min(np.linalg.norm(target_centroids - c, axis=1)) >= needed):
                break
            if attempt % 100 == 99:
                radius_p *= 1.05
        else:
            raise RuntimeError("could not place source-private centroids")
        centroids.append(c)
        src_private.append(c)

    # label layout: common, target-private, source-private appended in that
    # sampling order above; remap so source classes are dense in [0, |Y|)
    n_c, n_tp, n_sp = spec.n_common, spec.n_target_private, spec.n_source_private
    cents = np.concatenate([common, np.array(src_private).reshape(-1, d),
                            np.array(centroids[n_c:n_c + n_tp]).reshape(-1, d)])
    roles = (["common"] * n_c + ["source_private"] * n_sp + ["target_private"] * n_tp)

    per_tgt = spec.target_samples_per_class or spec.samples_per_class
    src_x, src_y, tgt_x, tgt_y = [], [], [], []
    for cls in range(n_c + n_sp + n_tp):
        if roles[cls] != "target_private":
            src_x.append(cents[cls] + spec.cluster_spread * rng.standard_normal((spec.samples_per_class, d)))
            src_y.append(np.full(spec.samples_per_class, cls))
        if roles[cls] != "source_private":
            x = cents[cls] + spec.cluster_spread * rng.standard_normal((per_tgt, d))
            tgt_x.append(x @ A.T + b)
            tgt_y.append(np.full(per_tgt, cls))
    src_x, src_y = np.concatenate(src_x), np.concatenate(src_y)
    tgt_x, tgt_y = np.concatenate(tgt_x), np.concatenate(tgt_y)
    ps, pt = rng.permutation(len(src_y)), rng.permutation(len(tgt_y))
    role_arr = np.array(roles)
    source = Dataset(src_x[ps], src_y[ps], "source", role_arr[src_y[ps]])
    target = Dataset(tgt_x[pt], tgt_y[pt], "target", role_arr[tgt_y[pt]])
    meta = {"shift_distance": shift_dist, "private_min_distance": needed}
    return Scenario(source, target, spec, cents, A, b, meta)


def generate_scenario(spec):
    """``(source, target)`` datasets for ``spec``; target labels are for evaluation only."""
    sc = generate(spec)
    return sc.source, sc.target


# dataset files

def write_dataset_csv(path, datasets):
    """Write one or more datasets into a single CSV.

    Header ``id,domain,label,role,f0..f{d-1}``; unlabeled rows carry -1.
    """
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    dim = datasets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "domain", "label", "role"] + [f"f{i}" for i in range(dim)])
        for ds in datasets:
            labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
            for i in range(len(ds)):
                writer.writerow([ds.ids[i], ds.domain, int(labels[i]), ds.roles[i]]
                                + [repr(float(v)) for v in ds.features[i]])


def read_dataset_csv(path, domain=None):
    """Read a dataset CSV; returns a dict ``{domain: Dataset}`` or one domain's Dataset."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["id", "domain", "label", "role"]:
            raise ValueError(f"{path}: unexpected header {header[:4]}")
        rows = list(reader)
    by_domain = {}
    for r in rows:
        if r[3] not in ROLES:
            raise ValueError(f"{path}: unknown role {r[3]!r}")
        by_domain.setdefault(r[1], []).append(r)
    out = {}
    for dom, rs in by_domain.items():
        labels = np.array([int(r[2]) for r in rs])
        out[dom] = Dataset(np.array([[float(v) for v in r[4:]] for r in rs]),
                           None if np.all(labels < 0) else labels, dom,
                           np.array([r[3] for r in rs]), [r[0] for r in rs])
    if domain is not None:
        if domain not in out:
            raise ValueError(f"{path}: no rows with domain {domain!r}")
        return out[domain]
    return out


# metrics

def predict_proba(model, x):
    """Eval-mode probabilities from a model or from a plain callable."""
    if hasattr(model, "extract"):
        return model.extract(x)[1]
    return np.asarray(model(x), dtype=DTYPE)


def accuracy(model, dataset):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    pred = np.argmax(predict_proba(model, dataset.features), axis=1)
    return float(np.mean(pred == dataset.labels))


def classify_with_unknown(probs, threshold):
    """Argmax class, or ``UNKNOWN`` when the top probability is below ``threshold``."""
    probs = np.asarray(probs, dtype=DTYPE)
    pred = np.argmax(probs, axis=-1)
    return np.where(probs.max(axis=-1) >= threshold, pred, UNKNOWN)


def h_score_from_predictions(pred, labels, is_private):
    """Harmonic mean of known-class accuracy and unknown recall (sample level)."""
    pred, labels, is_private = map(np.asarray, (pred, labels, is_private))
    known = ~is_private
    if not known.any() or not is_private.any():
        raise ValueError("h-score needs both common and private samples")
    acc_known = float(np.mean(pred[known] == labels[known]))
    recall_unknown = float(np.mean(pred[is_private] == UNKNOWN))
    if acc_known + recall_unknown == 0:
        return 0.0, acc_known, recall_unknown
    return 2 * acc_known * recall_unknown / (acc_known + recall_unknown), acc_known, recall_unknown


def h_score(model, dataset, threshold=0.65, return_parts=False):
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    pred = classify_with_unknown(predict_proba(model, dataset.features), threshold)
    is_private = dataset.roles == "target_private"
    h, a, r = h_score_from_predictions(pred, dataset.labels, is_private)
    return (h, a, r) if return_parts else h


def empirical_margin(model, dataset):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(margin(predict_proba(model, dataset.features))))


def uniform_ball(rng, n, d, radius):
    """``n`` points uniform in the d-dimensional L2 ball of ``radius``."""
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return v * r


def empirical_robustness(model, dataset, xi, probes=16, rng=None):
    """Fraction of samples whose prediction flips for some probe within radius ``xi``.

    Probes are uniform in the L2 ball. A fixed probe set is drawn once and
    scaled by ``xi``. For classifiers with convex decision regions (linear
    ones, say) the estimate is then monotone in ``xi`` for a fixed seed.
    """
    if xi < 0 or probes < 1:
        raise ValueError("need xi >= 0 and probes >= 1")
    rng = np.random.default_rng(rng)
    x = dataset.features
    n, d = x.shape
    if n == 0 or xi == 0:
        return 0.0
    unit = uniform_ball(rng, n * probes, d, 1.0).reshape(n, probes, d)
    base = np.argmax(predict_proba(model, x), axis=1)
    flipped = np.zeros(n, dtype=bool)
    for j in range(probes):
        pj = np.argmax(predict_proba(model, x + xi * unit[:, j]), axis=1)
        flipped |= pj != base
    return float(flipped.mean())
