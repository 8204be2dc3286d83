"""Sparse-feature baseline: binary cross-argument word-pair features (plus
second-argument single-word presence) fed to one-vs-rest binary logistic
regressions trained by seeded minibatch SGD with L2.

Features are tuples: ("pair", w1, w2) for w1 in the first argument and w2 in
the second, ("arg2", w), and optionally ("arg1", w). A feature must occur in
at least `min_support` training samples (counted once per sample) to get an
index; indices follow lexicographic feature order, so the dictionary is
independent of training-set order.
"""

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import nn

WP_MAGIC = b"WPLR1"


class WpError(Exception):
    pass


class WpTrainingDiverged(WpError):
    pass


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def example_features(arg1_tokens, arg2_tokens, include_arg1_singles=False):
    """The feature set of one sample (each feature present at most once)."""
    a1 = {t.lower() for t in arg1_tokens}
    a2 = {t.lower() for t in arg2_tokens}
    feats = {("pair", w1, w2) for w1 in a1 for w2 in a2}
    feats.update(("arg2", w) for w in a2)
    if include_arg1_singles:
        feats.update(("arg1", w) for w in a1)
    return feats


class FeatureDict:
    def __init__(self, features, min_support, include_arg1_singles=False):
        self.features = list(features)
        self.min_support = min_support
        self.include_arg1_singles = include_arg1_singles
        self.index_of = {f: i for i, f in enumerate(self.features)}

    def __len__(self):
        return len(self.features)

    @classmethod
    def build(cls, examples, min_support=5, include_arg1_singles=False):
        counts = {}
        n = 0
        for ex in examples:
            n += 1
            for f in example_features(ex.arg1.tokens, ex.arg2.tokens, include_arg1_singles):
                counts[f] = counts.get(f, 0) + 1
        if n == 0:
            raise WpError("empty training set")
        kept = sorted(f for f, c in counts.items() if c >= min_support)
        return cls(kept, min_support, include_arg1_singles)

    def featurize(self, arg1_tokens, arg2_tokens):
        """Strictly increasing int32 indices of the sample's known features."""
        idx = {
            self.index_of[f]
            for f in example_features(arg1_tokens, arg2_tokens, self.include_arg1_singles)
            if f in self.index_of
        }
        return np.array(sorted(idx), dtype=np.int32)

    def save_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, f in enumerate(self.features):
                fh.write(str(i) + "\t" + "\t".join(f) + "\n")

    @classmethod
    def load_tsv(cls, path, min_support, include_arg1_singles=False):
        feats = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 3 or int(parts[0]) != lineno - 1:
                    raise WpError("%s:%d: malformed feature row" % (path, lineno))
                feats.append(tuple(parts[1:]))
        return cls(feats, min_support, include_arg1_singles)


class HashedFeaturizer:
    """Alternative featurizer for memory-constrained full-scale runs: every
    feature maps to one of 2^22 buckets via a stable digest. No support
    filtering or dictionary; collisions are accepted. Off by default (the
    reference setup uses the exact dictionary)."""

    def __init__(self, buckets=2 ** 22, include_arg1_singles=False):
        self.buckets = buckets
        self.include_arg1_singles = include_arg1_singles

    def __len__(self):
        return self.buckets

    def _bucket(self, feat):
        digest = hashlib.md5("\x1f".join(feat).encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % self.buckets

    def featurize(self, arg1_tokens, arg2_tokens):
        idx = {
            self._bucket(f)
            for f in example_features(arg1_tokens, arg2_tokens, self.include_arg1_singles)
        }
        return np.array(sorted(idx), dtype=np.int32)


def featurize(example, fdict):
    return fdict.featurize(example.arg1.tokens, example.arg2.tokens)


@dataclass
class WpConfig:
    min_support: int = 5
    include_arg1_singles: bool = False
    learning_rate: float = 0.1
    l2: float = 1e-5
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    hashed: bool = False
    hash_buckets: int = 2 ** 22

    def __post_init__(self):
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


def binary_logistic_loss_grad(w, b, sample_indices, y, l2):
    """Full-batch loss and gradients of one binary regressor.

    loss = mean over samples of softplus(z) - y*z with z = b + sum(w[idx]),
    plus 0.5*l2*||w||^2. Returns (loss, dw, db).
    """
    n = len(y)
    z = np.array([b + w[idx].sum() for idx in sample_indices])
    y = np.asarray(y, dtype=w.dtype)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
    r = (_sigmoid(z) - y) / n
    dw = np.zeros_like(w)
    for idx, ri in zip(sample_indices, r):
        dw[idx] += ri
    dw += l2 * w
    db = float(r.sum())
    return loss, dw, db


@dataclass
class OvrModel:
    """K binary regressors sharing one feature space: weights (K, F) and
    biases (K,). Class k's score is sigmoid(b_k + sum of its weights at the
    sample's feature indices); prediction is the argmax, ties broken toward
    the smaller label id."""

    weights: np.ndarray
    biases: np.ndarray
    labels: list
    config: WpConfig
    features: list = None  # None in hashed mode

    def scores(self, feature_indices):
        z = self.biases + self.weights[:, feature_indices].sum(axis=1)
        return _sigmoid(z)

    def predict(self, feature_indices):
        s = self.scores(feature_indices)
        order = sorted(range(len(self.labels)), key=lambda k: (-s[k], k))
        return [(self.labels[k], float(s[k])) for k in order]

    def predict_batch(self, vectors):
        """Label ids; np.argmax keeps the first maximum, so ties resolve
        toward the smaller id."""
        out = np.empty(len(vectors), dtype=np.int64)
        for i, v in enumerate(vectors):
            out[i] = int(np.argmax(self.scores(v)))
        return out

    def save(self, path):
        header = {
            "kind": "wordpairs-ovr",
            "labels": self.labels,
            "config": asdict(self.config),
            "features": None if self.features is None else ["\x1f".join(f) for f in self.features],
        }
        arrays = [("W", self.weights), ("b", self.biases)]
        nn.save_checkpoint(path, header, arrays, magic=WP_MAGIC)

    @classmethod
    def load(cls, path):
        header, arrays, _ = nn.load_checkpoint(path, magic=WP_MAGIC)
        if header.get("kind") != "wordpairs-ovr":
            raise WpError("%s: not a word-pair baseline model" % path)
        feats = header.get("features")
        features = None if feats is None else [tuple(f.split("\x1f")) for f in feats]
        return cls(
            weights=arrays["W"],
            biases=arrays["b"],
            labels=header["labels"],
            config=WpConfig(**header["config"]),
            features=features,
        )

    def feature_dict(self):
        if self.features is None:
            raise WpError("hashed model has no feature dictionary")
        return FeatureDict(
            self.features, self.config.min_support, self.config.include_arg1_singles
        )


def train_ovr(vectors, y, labels, config: WpConfig, num_features, features=None):
    """Seeded minibatch SGD over all K regressors at once (they are
    independent; the vectorized update trains them in parallel). The L2 term
    applies to weights only, never biases. Raises on non-finite loss.
    """
    n = len(vectors)
    if n == 0:
        raise WpError("empty training set")
    if len(y) != n:
        raise WpError("labels and vectors differ in length")
    k = len(labels)
    y = np.asarray(y)
    if y.min() < 0 or y.max() >= k:
        raise WpError("label id outside the label set")
    rng = np.random.default_rng(config.seed)
    weights = np.zeros((k, num_features), dtype=np.float64)
    biases = np.zeros(k, dtype=np.float64)
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), y] = 1.0
    lr = config.learning_rate
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            bsz = len(batch)
            z = np.empty((bsz, k))
            for row, i in enumerate(batch):
                z[row] = biases + weights[:, vectors[i]].sum(axis=1)
            yb = onehot[batch]
            loss = float(np.mean(np.sum(np.logaddexp(0.0, z) - yb * z, axis=1)))
            loss += 0.5 * config.l2 * float((weights * weights).sum())
            if not np.isfinite(loss):
                raise WpTrainingDiverged("loss became %r" % loss)
            r = (_sigmoid(z) - yb) / bsz
            biases -= lr * r.sum(axis=0)
            if config.l2:
                weights *= 1.0 - lr * config.l2
            for row, i in enumerate(batch):
                weights[:, vectors[i]] -= lr * r[row][:, None]
    return OvrModel(
        weights=weights.astype(np.float32),
        biases=biases.astype(np.float32),
        labels=list(labels),
        config=config,
        features=features,
    )
