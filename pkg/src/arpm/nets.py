"""Recognition model, domain discriminator, optimizers and checkpoints.

Both networks are small fixed-architecture MLPs with hand-written reverse
mode. Parameters live in flat ``{name: ndarray}`` dicts so optimizers and
checkpoints can treat them uniformly.
"""

import hashlib
import json
import logging
import warnings

import numpy as np

from .core_math import DTYPE, l2_normalize, pca, power_iteration, softmax

log = logging.getLogger(__name__)

MODES = ("train", "eval", "tta")
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


class RecognitionModel:
    """Feature extractor F (MLP + BN + L2 norm) followed by a linear classifier C.

    Hidden blocks are ``Linear -> BN -> ReLU``; the bottleneck is
    ``Linear -> BN`` and its output is rescaled to norm ``feature_norm``.
    Linear layers carry no bias because BN supplies the shift. The
    classifier has no bias either, so ``logits = features @ W_cls.T``.
    """

    def __init__(self, input_dim, num_classes, hidden=(256, 256), feature_dim=64,
                 feature_norm=20.0, normalize_classifier=True, bn_momentum=0.1,
                 bn_eps=1e-5, rng=None):
        rng = np.random.default_rng(rng)
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.feature_dim = int(feature_dim)
        self.feature_norm = float(feature_norm)
        self.normalize_classifier = bool(normalize_classifier)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)

        self.params = {}
        self.buffers = {}
        dims = (self.input_dim,) + self.hidden + (self.feature_dim,)
        self.n_blocks = len(dims) - 1
        for i in range(self.n_blocks):
            fan_in, fan_out = dims[i], dims[i + 1]
            gain = 2.0 if i < self.n_blocks - 1 else 1.0
            self.params[f"fc{i}.W"] = rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)
            self.params[f"bn{i}.gamma"] = np.ones(fan_out)
            self.params[f"bn{i}.beta"] = np.zeros(fan_out)
            self.buffers[f"bn{i}.mean"] = np.zeros(fan_out)
            self.buffers[f"bn{i}.var"] = np.ones(fan_out)
        W = rng.standard_normal((self.num_classes, self.feature_dim)) / np.sqrt(self.feature_dim)
        self.params["cls.W"] = W
        if self.normalize_classifier:
            self.renormalize_classifier()
        self._version = 0
        self._cache = None

    # parameter groups

    @property
    def classifier_keys(self):
        return ["cls.W"]

    @property
    def extractor_keys(self):
        return [k for k in self.params if not k.startswith("cls.")]

    @property
    def bn_keys(self):
        return [k for k in self.params if k.startswith("bn")]

    def mark_updated(self):
        """Invalidate any cached forward pass after a parameter change."""
        self._version += 1

    def renormalize_classifier(self):
        self.params["cls.W"] = l2_normalize(self.params["cls.W"], 1.0)

    def copy(self):
        other = object.__new__(RecognitionModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._cache = None
        return other

    # forward / backward

    def forward(self, x, mode="eval"):
        """Return ``(features, logits, probs)`` for a batch ``x``.

        ``train`` uses batch statistics and updates the running ones,
        ``tta`` uses batch statistics without touching running ones, and
        ``eval`` uses running statistics and leaves the model untouched.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (batch, {self.input_dim}), got {x.shape}")
        batch_stats = mode != "eval"
        if batch_stats and x.shape[0] < 2:
            raise ValueError("batch-norm undefined for a batch of 1")

        cache = {"x": x, "blocks": []} if batch_stats else None
        a = x
        for i in range(self.n_blocks):
            W = self.params[f"fc{i}.W"]
            gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
            h = a @ W.T
            if batch_stats:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                if mode == "train":
                    n = h.shape[0]
                    m = self.bn_momentum
                    self.buffers[f"bn{i}.mean"] = (1 - m) * self.buffers[f"bn{i}.mean"] + m * mu
                    self.buffers[f"bn{i}.var"] = (1 - m) * self.buffers[f"bn{i}.var"] + m * var * n / (n - 1)
            else:
                mu, var = self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"]
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            xhat = (h - mu) * inv_std
            y = gamma * xhat + beta
            last = i == self.n_blocks - 1
            out = y if last else np.maximum(y, 0.0)
            if cache is not None:
                cache["blocks"].append({"a_in": a, "xhat": xhat, "inv_std": inv_std, "y": y})
            a = out

        h_norm = np.linalg.norm(a, axis=1, keepdims=True)
        if np.any(h_norm == 0):
            raise ValueError("degenerate feature")
        features = self.feature_norm * a / h_norm
        logits = features @ self.params["cls.W"].T
        probs = softmax(logits)
        if cache is not None:
            cache.update(pre_norm=a, pre_norm_len=h_norm, features=features,
                         version=self._version)
            self._cache = cache
        return features, logits, probs

    def extract(self, x, batch_size=1024):
        """Eval-mode features and probabilities for a whole dataset."""
        feats, probs = [], []
        for start in range(0, len(x), batch_size):
            f, _, p = self.forward(x[start:start + batch_size], mode="eval")
            feats.append(f)
            probs.append(p)
        return np.concatenate(feats), np.concatenate(probs)

    def backward(self, dlogits, classifier_rows=None, dfeatures=None):
        """Reverse pass for the most recent train/tta forward.

        ``dlogits`` is the loss gradient wrt the logits of every row. Only
        rows selected by ``classifier_rows`` (bool mask or index array;
        default all) contribute to the classifier gradient, which is how
        target-only losses are routed into the extractor alone.
        """
        cache = self._cache
        if cache is None or cache["version"] != self._version:
            raise StaleCacheError("no valid forward cache for this parameter state")
        dlogits = np.asarray(dlogits, dtype=DTYPE)
        feats = cache["features"]
        if dlogits.shape != (feats.shape[0], self.num_classes):
            raise ValueError("dlogits shape does not match the cached batch")

        grads = {}
        rows = slice(None) if classifier_rows is None else classifier_rows
        grads["cls.W"] = dlogits[rows].T @ feats[rows]
        dz = dlogits @ self.params["cls.W"]
        if dfeatures is not None:
            dz = dz + dfeatures

        # z = r * a / |a|  =>  da = (r/|a|) (dz - ahat <ahat, dz>)
        a, a_len = cache["pre_norm"], cache["pre_norm_len"]
        ahat = a / a_len
        da = (self.feature_norm / a_len) * (dz - ahat * np.sum(ahat * dz, axis=1, keepdims=True))

        for i in reversed(range(self.n_blocks)):
            blk = cache["blocks"][i]
            if i < self.n_blocks - 1:
                dy = da * (blk["y"] > 0)
            else:
                dy = da
            xhat, inv_std = blk["xhat"], blk["inv_std"]
            grads[f"bn{i}.gamma"] = np.sum(dy * xhat, axis=0)
            grads[f"bn{i}.beta"] = np.sum(dy, axis=0)
            dxhat = dy * self.params[f"bn{i}.gamma"]
            n = dxhat.shape[0]
            dh = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                  - xhat * np.sum(dxhat * xhat, axis=0))
            grads[f"fc{i}.W"] = dh.T @ blk["a_in"]
            da = dh @ self.params[f"fc{i}.W"]
        return grads


class Discriminator:
    """Scalar critic ``feature_dim -> 1024 -> 1024 -> 1`` with ReLU, no output squashing."""

    def __init__(self, feature_dim, hidden=(1024, 1024), rng=None, sn_warmup=300):
        rng = np.random.default_rng(rng)
        dims = (int(feature_dim),) + tuple(int(h) for h in hidden) + (1,)
        self.feature_dim = int(feature_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_layers = len(dims) - 1
        self.params = {}
        self.sn_vectors = []
        for i in range(self.n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"l{i}.W"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            self.params[f"l{i}.b"] = rng.uniform(-bound, bound, fan_out)
            u = rng.standard_normal(fan_out)
            u /= np.linalg.norm(u)
            # Random square layers have a tiny top singular gap; warm the
            # persisted vector so one iteration per call tracks sigma closely.
            if sn_warmup:
                _, u, _ = power_iteration(self.params[f"l{i}.W"], u, sn_warmup)
            self.sn_vectors.append(u)
        self._cache = None

    def weight_keys(self):
        return [f"l{i}.W" for i in range(self.n_layers)]

    def forward(self, z, keep_cache=True):
        z = np.asarray(z, dtype=DTYPE)
        acts = [z]
        a = z
        for i in range(self.n_layers):
            h = a @ self.params[f"l{i}.W"].T + self.params[f"l{i}.b"]
            a = h if i == self.n_layers - 1 else np.maximum(h, 0.0)
            acts.append(a)
        self._cache = acts if keep_cache else None
        return a[:, 0]

    def score(self, z, batch_size=4096):
        """Scores without caching, in chunks."""
        z = np.asarray(z, dtype=DTYPE)
        return np.concatenate([self.forward(z[s:s + batch_size], keep_cache=False)
                               for s in range(0, len(z), batch_size)]) if len(z) else np.zeros(0)

    def backward(self, dscores):
        if self._cache is None:
            raise StaleCacheError("no cached discriminator forward")
        acts = self._cache
        d = np.asarray(dscores, dtype=DTYPE)[:, None]
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                d = d * (acts[i + 1] > 0)
            grads[f"l{i}.W"] = d.T @ acts[i]
            grads[f"l{i}.b"] = d.sum(axis=0)
            d = d @ self.params[f"l{i}.W"]
        return grads


def apply_spectral_norm(disc):
    """One persisted power iteration per layer, then divide each weight by its sigma."""
    sigmas = []
    for i, key in enumerate(disc.weight_keys()):
        W = disc.params[key]
        sigma, u, _ = power_iteration(W, disc.sn_vectors[i], iters=1)
        disc.sn_vectors[i] = u
        W /= sigma
        sigmas.append(sigma)
    return sigmas


def lr_schedule(base_lr, progress):
    """Annealed rate ``base_lr * (1 + 10 p) ** -0.75``; ``p`` clamped to [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"progress {progress} outside [0, 1]; clamping", stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return base_lr * (1.0 + 10.0 * progress) ** -0.75


def pca_init_classifier(source_feats, source_labels, target_feats, num_classes,
                        normalize=True, return_confusion=False):
    """Classifier weight ``M @ V.T`` from target principal components.

    ``V`` holds the top ``num_classes`` principal directions of the target
    features. Every source feature is assigned to the component with the
    largest score, and ``M[i, j]`` is the share of class ``i`` samples that
    landed on component ``j``.
    """
    source_labels = np.asarray(source_labels)
    res = pca(target_feats, num_classes)
    V = res.components
    scores = (np.asarray(source_feats, dtype=DTYPE) - res.mean) @ V
    assigned = np.argmax(scores, axis=1)
    M = np.zeros((num_classes, num_classes))
    for c in range(num_classes):
        mask = source_labels == c
        if not np.any(mask):
            raise ValueError(f"empty class {c}")
        M[c] = np.bincount(assigned[mask], minlength=num_classes) / mask.sum()
    W = M @ V.T
    if normalize:
        W = l2_normalize(W, 1.0)
    return (W, M) if return_confusion else W


class SGD:
    """Heavy-ball SGD, ``buf = mu * buf + g; p -= lr * buf``."""

    def __init__(self, keys, momentum=0.9):
        self.keys = list(keys)
        self.momentum = momentum
        self.buffers = {}

    def step(self, params, grads, lr):
        for k in self.keys:
            if k not in grads:
                continue
            g = grads[k]
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {params[k].shape}")
            buf = self.buffers.get(k)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[k] = buf
            params[k] = params[k] - lr * buf


class Adam:
    def __init__(self, keys, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.keys = list(keys)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        self._scratch = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in self.keys:
            g = grads[k]
            p = params[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            # in place with one scratch buffer: the critic layers are large
            tmp = self._scratch.get(k)
            if tmp is None:
                tmp = self._scratch[k] = np.empty_like(p)
            np.multiply(g, g, out=tmp)
            tmp *= 1 - self.beta2
            v *= self.beta2
            v += tmp
            np.multiply(g, 1 - self.beta1, out=tmp)
            m *= self.beta1
            m += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p -= tmp


class OptimizerState:
    """SGD-momentum for F and C, Adam for D.

    C steps at the scheduled rate, F at one tenth of it.
    """

    def __init__(self, model, discriminator=None, base_lr=0.01, momentum=0.9,
                 classifier_lr_multiplier=10.0, disc_lr=1e-3):
        self.base_lr = base_lr
        self.classifier_lr_multiplier = classifier_lr_multiplier
        self.extractor = SGD(model.extractor_keys, momentum)
        self.classifier = SGD(model.classifier_keys, momentum)
        self.disc = Adam(discriminator.params.keys(), lr=disc_lr) if discriminator is not None else None


def optimizer_step(state, model, grads, progress, discriminator=None, disc_grads=None):
    """Apply one update to ``model`` (and optionally ``discriminator``)."""
    if grads:
        unknown = set(grads) - set(model.params)
        if unknown:
            raise ValueError(f"gradients for unknown parameters: {sorted(unknown)}")
        lr_c = lr_schedule(state.base_lr, progress)
        state.classifier.step(model.params, grads, lr_c)
        state.extractor.step(model.params, grads, lr_c / state.classifier_lr_multiplier)
        if model.normalize_classifier:
            model.renormalize_classifier()
        model.mark_updated()
    if disc_grads is not None:
        if discriminator is None or state.disc is None:
            raise ValueError("discriminator gradients given without a discriminator optimizer")
        state.disc.step(discriminator.params, disc_grads)


# checkpoints

def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _model_meta(model):
    return {
        "input_dim": model.input_dim, "num_classes": model.num_classes,
        "hidden": list(model.hidden), "feature_dim": model.feature_dim,
        "feature_norm": model.feature_norm,
        "normalize_classifier": model.normalize_classifier,
        "bn_momentum": model.bn_momentum, "bn_eps": model.bn_eps,
    }


def save_checkpoint(path, model, optimizer=None, discriminator=None, config=None, extra=None):
    """Write an ``.npz`` archive; float64 payloads round-trip bit-exactly.

    Layout: ``model/<param>``, ``buffer/<name>``, ``disc/<param>``,
    ``disc_sn/<i>``, ``opt/<group>/<kind>/<param>`` arrays plus one
    ``__meta__`` JSON string (version, architecture, config, config hash).
    """
    arrays = {}
    for k, v in model.params.items():
        arrays[f"model/{k}"] = v
    for k, v in model.buffers.items():
        arrays[f"buffer/{k}"] = v
    meta = {"version": CHECKPOINT_VERSION, "model": _model_meta(model),
            "config": config, "config_hash": config_hash(config) if config is not None else None,
            "extra": extra}
    if discriminator is not None:
        for k, v in discriminator.params.items():
            arrays[f"disc/{k}"] = v
        for i, u in enumerate(discriminator.sn_vectors):
            arrays[f"disc_sn/{i}"] = u
        meta["disc"] = {"feature_dim": discriminator.feature_dim, "hidden": list(discriminator.hidden)}
    if optimizer is not None:
        meta["optimizer"] = {"base_lr": optimizer.base_lr,
                             "classifier_lr_multiplier": optimizer.classifier_lr_multiplier,
                             "momentum": optimizer.extractor.momentum}
        for group in ("extractor", "classifier"):
            for k, v in getattr(optimizer, group).buffers.items():
                arrays[f"opt/{group}/buf/{k}"] = v
        if optimizer.disc is not None:
            meta["optimizer"]["adam_t"] = optimizer.disc.t
            meta["optimizer"]["disc_lr"] = optimizer.disc.lr
            for k, v in optimizer.disc.m.items():
                arrays[f"opt/disc/m/{k}"] = v
            for k, v in optimizer.disc.v.items():
                arrays[f"opt/disc/v/{k}"] = v
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns a dict of restored objects."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    mm = meta["model"]
    model = RecognitionModel(mm["input_dim"], mm["num_classes"], mm["hidden"], mm["feature_dim"],
                             mm["feature_norm"], mm["normalize_classifier"], mm["bn_momentum"],
                             mm["bn_eps"], rng=0)
    for k in model.params:
        model.params[k] = arrays[f"model/{k}"]
    for k in model.buffers:
        model.buffers[k] = arrays[f"buffer/{k}"]
    out = {"model": model, "config": meta.get("config"), "meta": meta}
    if "disc" in meta:
        disc = Discriminator(meta["disc"]["feature_dim"], meta["disc"]["hidden"], rng=0, sn_warmup=0)
        for k in disc.params:
            disc.params[k] = arrays[f"disc/{k}"]
        disc.sn_vectors = [arrays[f"disc_sn/{i}"] for i in range(disc.n_layers)]
        out["discriminator"] = disc
    if "optimizer" in meta:
        om = meta["optimizer"]
        opt = OptimizerState(model, out.get("discriminator"), base_lr=om["base_lr"],
                             momentum=om["momentum"],
                             classifier_lr_multiplier=om["classifier_lr_multiplier"],
                             disc_lr=om.get("disc_lr", 1e-3))
        for k, v in arrays.items():
            parts = k.split("/", 3)
            if parts[0] != "opt":
                continue
            if parts[1] in ("extractor", "classifier"):
                getattr(opt, parts[1]).buffers[parts[3]] = v
            elif parts[1] == "disc":
                getattr(opt.disc, parts[2])[parts[3]] = v
        if opt.disc is not None:
            opt.disc.t = om.get("adam_t", 0)
        out["optimizer"] = opt
    return out
