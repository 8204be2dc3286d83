"""Sentence-pair classifier built on soft alignment: embed both argument
sentences, score all cross-sentence token pairs through a shared transform,
align each token to a weighted sub-phrase of the other sentence, compare
token and sub-phrase, and classify the concatenated per-sentence sums.

The whole network trains by manual backpropagation through the kernels in
`nn`. Tokens are matched case-insensitively against a trained vocabulary;
sequences are right-padded with a reserved null token and padded positions
carry zero attention weight in both directions.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .evaluation import macro_f1_ids

log = logging.getLogger(__name__)

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
MASK_NEG = -1e9


class DaError(Exception):
    pass


class TrainingDiverged(DaError):
    pass


class Vocab:
    """Dense token -> id map. Id 0 is the padding token, id 1 the unknown
    token; everything else is ordered by descending count, ties by token."""

    def __init__(self, tokens):
        if len(tokens) < 2 or tokens[0] != NULL_TOKEN or tokens[1] != UNK_TOKEN:
            raise DaError("vocab must start with the null and unknown tokens")
        self.tokens = list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise DaError("duplicate token in vocab")

    @classmethod
    def build(cls, token_seqs, min_count=2):
        counts = Counter()
        for seq in token_seqs:
            counts.update(t.lower() for t in seq)
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count),
            key=lambda t: (-counts[t], t),
        )
        return cls([NULL_TOKEN, UNK_TOKEN] + kept)

    def encode_tokens(self, tokens):
        return [self.id_of.get(t.lower(), 1) for t in tokens]

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class EncodedPair:
    a: np.ndarray
    b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray


def encode_ids(vocab, tokens, max_len):
    """Lowercased lookup, right-truncate, right-pad with the null id.
    Returns (ids int32 (max_len,), mask float32 (max_len,))."""
    ids = vocab.encode_tokens(tokens)[:max_len]
    n = len(ids)
    out = np.zeros(max_len, dtype=np.int32)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=np.float32)
    mask[:n] = 1.0
    return out, mask


def encode(example, vocab, max_len=50):
    a, ma = encode_ids(vocab, example.arg1.tokens, max_len)
    b, mb = encode_ids(vocab, example.arg2.tokens, max_len)
    return EncodedPair(a=a, b=b, mask_a=ma, mask_b=mb)


def encode_matrix(vocab, token_seqs, max_len):
    ids = np.zeros((len(token_seqs), max_len), dtype=np.int32)
    mask = np.zeros((len(token_seqs), max_len), dtype=np.float32)
    for i, seq in enumerate(token_seqs):
        ids[i], mask[i] = encode_ids(vocab, seq, max_len)
    return ids, mask


@dataclass
class DaConfig:
    embed_dim: int = 100
    hidden: int = 200
    max_len: int = 50
    dropout_attend: float = 0.68
    dropout_compare: float = 0.14
    dropout_classify: float = 0.44
    layer_norm: bool = True
    learning_rate: float = 0.0018
    batch_size: int = 64
    max_steps: int = 300_000
    optimizer: str = "adam"
    min_count: int = 2
    eval_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden < 1 or self.max_len < 1:
            raise ValueError("dims must be positive")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")


class DaModel:
    """Holds the config, vocab, label names, and the flat parameter dict.

    Prediction and explanation are pure with respect to the parameters and
    safe to call concurrently; training owns the dict exclusively.
    """

    def __init__(self, config: DaConfig, vocab: Vocab, labels, params):
        self.config = config
        self.vocab = vocab
        self.labels = list(labels)
        k = len(self.labels)
        d, h = config.embed_dim, config.hidden
        self.attend_net = nn.FeedForward(
            [d, h, h], dropout=config.dropout_attend, layer_norm=config.layer_norm,
            prefix="attend",
        )
        self.compare_net = nn.FeedForward(
            [2 * d, h, h], dropout=config.dropout_compare, layer_norm=config.layer_norm,
            prefix="compare",
        )
        self.classify_net = nn.FeedForward(
            [2 * h, h, k], dropout=config.dropout_classify, layer_norm=config.layer_norm,
            prefix="classify",
        )
        expected = set(self.param_names())
        if set(params) != expected:
            missing = sorted(expected - set(params))
            surplus = sorted(set(params) - expected)
            raise DaError(
                "parameter set mismatch (missing %s, surplus %s)" % (missing, surplus)
            )
        if params["emb/E"].shape != (len(vocab), d):
            raise DaError("embedding shape does not match vocab")
        self.params = params

    def param_names(self):
        names = ["emb/E"]
        names += self.attend_net.param_names()
        names += self.compare_net.param_names()
        names += self.classify_net.param_names()
        return names

    def save(self, path):
        header = {
            "kind": "da-classifier",
            "config": asdict(self.config),
            "labels": self.labels,
            "vocab_size": len(self.vocab),
            "init": "glorot_uniform",
            "layer_norm_placement": "after_affine_before_relu",
        }
        arrays = [(k, self.params[k]) for k in sorted(self.params)]
        extra = "\n".join(self.vocab.tokens).encode("utf-8")
        nn.save_checkpoint(path, header, arrays, extra=extra)

    @classmethod
    def load(cls, path):
        header, arrays, extra = nn.load_checkpoint(path)
        if header.get("kind") != "da-classifier":
            raise DaError("%s: not a sentence-pair classifier checkpoint" % path)
        config = DaConfig(**header["config"])
        tokens = extra.decode("utf-8").split("\n") if extra else []
        if len(tokens) != header.get("vocab_size"):
            raise DaError(
                "%s: vocab size %d does not match header %s"
                % (path, len(tokens), header.get("vocab_size"))
            )
        vocab = Vocab(tokens)
        return cls(config, vocab, header["labels"], arrays)

    # ---- forward / backward -------------------------------------------------

    def forward_batch(self, ids_a, mask_a, ids_b, mask_b, train=False, rng=None):
        p = self.params
        emb = p["emb/E"]
        ea = emb[ids_a]
        eb = emb[ids_b]
        fa, c_fa = self.attend_net.forward(p, ea, train=train, rng=rng)
        fb, c_fb = self.attend_net.forward(p, eb, train=train, rng=rng)
        scores = np.einsum("bih,bjh->bij", fa, fb)
        add_b = ((1.0 - mask_b) * MASK_NEG)[:, None, :]
        add_a = ((1.0 - mask_a) * MASK_NEG)[:, :, None]
        sab = nn.softmax(scores + add_b, axis=2)
        sba = nn.softmax(scores + add_a, axis=1)
        wab = sab * mask_a[:, :, None]
        wba = sba * mask_b[:, None, :]
        beta = np.einsum("bij,bjd->bid", wab, eb)
        alpha = np.einsum("bij,bid->bjd", wba, ea)
        va, c_ga = self.compare_net.forward(
            p, np.concatenate([ea, beta], axis=2), train=train, rng=rng
        )
        vb, c_gb = self.compare_net.forward(
            p, np.concatenate([eb, alpha], axis=2), train=train, rng=rng
        )
        v1 = (va * mask_a[:, :, None]).sum(axis=1)
        v2 = (vb * mask_b[:, :, None]).sum(axis=1)
        logits, c_h = self.classify_net.forward(
            p, np.concatenate([v1, v2], axis=1), train=train, rng=rng
        )
        cache = {
            "ids_a": ids_a, "ids_b": ids_b, "mask_a": mask_a, "mask_b": mask_b,
            "ea": ea, "eb": eb, "fa": fa, "fb": fb, "sab": sab, "sba": sba,
            "wab": wab, "wba": wba,
            "c_fa": c_fa, "c_fb": c_fb, "c_ga": c_ga, "c_gb": c_gb, "c_h": c_h,
        }
        return logits, cache

    def backward_batch(self, cache, dlogits):
        p = self.params
        h = self.config.hidden
        d = self.config.embed_dim
        mask_a, mask_b = cache["mask_a"], cache["mask_b"]

        dh_in, g_h = self.classify_net.backward(p, cache["c_h"], dlogits)
        dva = dh_in[:, None, :h] * mask_a[:, :, None]
        dvb = dh_in[:, None, h:] * mask_b[:, :, None]
        dga_in, g_ga = self.compare_net.backward(p, cache["c_ga"], dva)
        dgb_in, g_gb = self.compare_net.backward(p, cache["c_gb"], dvb)
        dea = dga_in[:, :, :d].copy()
        dbeta = dga_in[:, :, d:]
        deb = dgb_in[:, :, :d].copy()
        dalpha = dgb_in[:, :, d:]

        dwab = np.einsum("bid,bjd->bij", dbeta, cache["eb"])
        deb += np.einsum("bij,bid->bjd", cache["wab"], dbeta)
        dwba = np.einsum("bjd,bid->bij", dalpha, cache["ea"])
        dea += np.einsum("bij,bjd->bid", cache["wba"], dalpha)

        sab, sba = cache["sab"], cache["sba"]
        dsab = dwab * mask_a[:, :, None]
        dscores = sab * (dsab - (dsab * sab).sum(axis=2, keepdims=True))
        dsba = dwba * mask_b[:, None, :]
        dscores = dscores + sba * (dsba - (dsba * sba).sum(axis=1, keepdims=True))

        dfa = np.einsum("bij,bjh->bih", dscores, cache["fb"])
        dfb = np.einsum("bij,bih->bjh", dscores, cache["fa"])
        dea2, g_fa = self.attend_net.backward(p, cache["c_fa"], dfa)
        deb2, g_fb = self.attend_net.backward(p, cache["c_fb"], dfb)
        dea += dea2
        deb += deb2

        grads = {}
        for g in (g_h, g_ga, g_gb, g_fa, g_fb):
            nn.accumulate(grads, g)
        d_emb = np.zeros_like(p["emb/E"])
        np.add.at(d_emb, cache["ids_a"], dea)
        np.add.at(d_emb, cache["ids_b"], deb)
        grads["emb/E"] = d_emb
        return grads

    def loss_and_grads(self, ids_a, mask_a, ids_b, mask_b, labels, rng=None, train=True):
        logits, cache = self.forward_batch(ids_a, mask_a, ids_b, mask_b, train=train, rng=rng)
        loss, dlogits = nn.softmax_xent(logits, labels)
        grads = self.backward_batch(cache, dlogits)
        return loss, grads

    # ---- the three alignment stages on a single encoded pair ----------------

    def attend(self, enc: EncodedPair):
        """Cross-sentence token scores and both soft-alignment weight
        matrices; padded positions get exactly zero weight."""
        p = self.params
        ea = p["emb/E"][enc.a[None, :]]
        eb = p["emb/E"][enc.b[None, :]]
        fa, _ = self.attend_net.forward(p, ea)
        fb, _ = self.attend_net.forward(p, eb)
        scores = np.einsum("bih,bjh->bij", fa, fb)
        sab = nn.softmax(scores + ((1.0 - enc.mask_b[None, :]) * MASK_NEG)[:, None, :], axis=2)
        sba = nn.softmax(scores + ((1.0 - enc.mask_a[None, :]) * MASK_NEG)[:, :, None], axis=1)
        wab = sab * enc.mask_a[None, :, None]
        wba = sba * enc.mask_b[None, None, :]
        return scores[0], wab[0], wba[0]

    def compare(self, enc: EncodedPair, wab, wba):
        """Per-token comparison of each token with its aligned sub-phrase (a
        weighted combination of the other sentence's embeddings)."""
        p = self.params
        ea = p["emb/E"][enc.a]
        eb = p["emb/E"][enc.b]
        beta = wab @ eb
        alpha = wba.T @ ea
        v1, _ = self.compare_net.forward(p, np.concatenate([ea, beta], axis=1))
        v2, _ = self.compare_net.forward(p, np.concatenate([eb, alpha], axis=1))
        return v1, v2

    def aggregate(self, v1, v2, mask_a, mask_b):
        """Masked per-sentence sums, concatenated and classified."""
        s1 = (v1 * mask_a[:, None]).sum(axis=0)
        s2 = (v2 * mask_b[:, None]).sum(axis=0)
        logits, _ = self.classify_net.forward(
            self.params, np.concatenate([s1, s2])[None, :]
        )
        return logits[0]

    # ---- inference ----------------------------------------------------------

    def predict_ids(self, ids_a, mask_a, ids_b, mask_b, chunk=256):
        """Softmax class probabilities, dropout off. Returns (N, K)."""
        outs = []
        for start in range(0, len(ids_a), chunk):
            sl = slice(start, start + chunk)
            logits, _ = self.forward_batch(ids_a[sl], mask_a[sl], ids_b[sl], mask_b[sl])
            outs.append(nn.softmax(logits, axis=1))
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, len(self.labels)))

    def predict_examples(self, examples, chunk=256):
        ids_a, mask_a = encode_matrix(
            self.vocab, [e.arg1.tokens for e in examples], self.config.max_len
        )
        ids_b, mask_b = encode_matrix(
            self.vocab, [e.arg2.tokens for e in examples], self.config.max_len
        )
        probs = self.predict_ids(ids_a, mask_a, ids_b, mask_b, chunk=chunk)
        return probs.argmax(axis=1), probs

    def predict(self, arg1_tokens, arg2_tokens):
        """Ranked (label, probability) list, best first; ties break toward
        the smaller label id."""
        ids_a, mask_a = encode_matrix(self.vocab, [arg1_tokens], self.config.max_len)
        ids_b, mask_b = encode_matrix(self.vocab, [arg2_tokens], self.config.max_len)
        probs = self.predict_ids(ids_a, mask_a, ids_b, mask_b)[0]
        order = sorted(range(len(self.labels)), key=lambda i: (-probs[i], i))
        return [(self.labels[i], float(probs[i])) for i in order]

    def explain(self, arg1_tokens, arg2_tokens):
        """Soft-alignment matrices restricted to real tokens, plus the
        prediction. ab_weights[i][j] weights arg2 token j in the sub-phrase
        aligned to arg1 token i (rows sum to 1); ba_weights[i][j] weights
        arg1 token i in the sub-phrase aligned to arg2 token j (columns sum
        to 1)."""
        max_len = self.config.max_len
        ids_a, ma = encode_ids(self.vocab, arg1_tokens, max_len)
        ids_b, mb = encode_ids(self.vocab, arg2_tokens, max_len)
        enc = EncodedPair(ids_a, ids_b, ma, mb)
        la = int(ma.sum())
        lb = int(mb.sum())
        _, wab, wba = self.attend(enc)
        ranked = self.predict(arg1_tokens, arg2_tokens)
        return {
            "arg1_tokens": list(arg1_tokens)[:la],
            "arg2_tokens": list(arg2_tokens)[:lb],
            "ab_weights": [[float(w) for w in row[:lb]] for row in wab[:la]],
            "ba_weights": [[float(w) for w in row[:lb]] for row in wba[:la]],
            "predicted": ranked[0][0],
            "scores": {label: score for label, score in ranked},
        }


def _init_params(config, vocab, labels, rng, pretrained=None, dtype=np.float32):
    """Fan-based uniform init everywhere except the classifier's output
    layer, which starts at zero so the untrained model predicts the uniform
    distribution exactly. Rows of `pretrained` (token -> vector) replace
    matching embedding rows."""
    k = len(labels)
    d, h = config.embed_dim, config.hidden
    attend = nn.FeedForward([d, h, h], layer_norm=config.layer_norm, prefix="attend")
    compare = nn.FeedForward([2 * d, h, h], layer_norm=config.layer_norm, prefix="compare")
    classify = nn.FeedForward([2 * h, h, k], layer_norm=config.layer_norm, prefix="classify")
    params = {"emb/E": nn.glorot_uniform(rng, len(vocab), d, dtype)}
    for net in (attend, compare, classify):
        params.update(net.init_params(rng, dtype))
    last = classify.n_layers - 1
    params[classify.key("W", last)] = np.zeros_like(params[classify.key("W", last)])
    params[classify.key("b", last)] = np.zeros_like(params[classify.key("b", last)])
    if pretrained:
        emb = params["emb/E"]
        hits = 0
        for token, vec in pretrained.items():
            idx = vocab.id_of.get(token.lower())
            if idx is not None:
                if len(vec) != d:
                    raise DaError(
                        "pretrained vector for %r has dim %d, expected %d"
                        % (token, len(vec), d)
                    )
                emb[idx] = np.asarray(vec, dtype=dtype)
                hits += 1
        log.info("pretrained embeddings: %d/%d vocab rows covered", hits, len(vocab))
    return params


def build_model(config, vocab, labels, rng, pretrained=None, dtype=np.float32):
    params = _init_params(config, vocab, labels, rng, pretrained, dtype)
    return DaModel(config, vocab, labels, params)


def load_embeddings_text(path, dim):
    """Text embedding file: `token v1 ... v<dim>` per line."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DaError(
                    "%s:%d: expected token + %d values, got %d fields"
                    % (path, lineno, dim, len(parts))
                )
            try:
                out[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float32)
            except ValueError:
                raise DaError("%s:%d: non-numeric vector component" % (path, lineno)) from None
    return out


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    dev_macro_f1: Optional[float] = None


@dataclass
class TrainResult:
    final: DaModel
    best: DaModel
    best_step: int
    best_dev_f1: Optional[float]
    history: list = field(default_factory=list)


def _batch_loss_grads(model, ids_a, mask_a, ids_b, mask_b, y, idx, rng, threads, pool):
    if threads <= 1 or len(idx) < 2 * threads:
        return model.loss_and_grads(
            ids_a[idx], mask_a[idx], ids_b[idx], mask_b[idx], y[idx], rng=rng
        )
    shards = np.array_split(idx, threads)
    child_rngs = rng.spawn(len(shards))

    def run(k):
        s = shards[k]
        return model.loss_and_grads(
            ids_a[s], mask_a[s], ids_b[s], mask_b[s], y[s], rng=child_rngs[k]
        )

    results = list(pool.map(run, range(len(shards))))
    total = 0.0
    grads = {}
    for s, (loss, g) in zip(shards, results):
        w = len(s) / len(idx)
        total += w * loss
        for name, arr in g.items():
            if name in grads:
                grads[name] = grads[name] + w * arr
            else:
                grads[name] = w * arr
    return total, grads


def train(examples, labels, config: DaConfig, dev_examples=None, pretrained=None,
          threads=1, on_step=None):
    """Seeded minibatch training with per-epoch shuffling.

    Logs the pre-update loss each step and the dev macro-F1 every
    `eval_every` steps; both the final parameters and the best-dev snapshot
    are returned. Identical seeds (and thread counts) reproduce identical
    logs. Raises TrainingDiverged when the loss or a gradient goes
    non-finite.
    """
    if not examples:
        raise DaError("no training examples")
    rng = np.random.default_rng(config.seed)
    vocab = Vocab.build(
        (e.arg1.tokens + e.arg2.tokens for e in examples), config.min_count
    )
    model = build_model(config, vocab, labels, rng, pretrained)
    max_len = config.max_len
    ids_a, mask_a = encode_matrix(vocab, [e.arg1.tokens for e in examples], max_len)
    ids_b, mask_b = encode_matrix(vocab, [e.arg2.tokens for e in examples], max_len)
    y = np.array([e.label_id for e in examples], dtype=np.int64)
    if y.min() < 0 or y.max() >= len(labels):
        raise DaError("label id outside the label set")
    dev = None
    if dev_examples:
        dev = (
            encode_matrix(vocab, [e.arg1.tokens for e in dev_examples], max_len),
            encode_matrix(vocab, [e.arg2.tokens for e in dev_examples], max_len),
            np.array([e.label_id for e in dev_examples], dtype=np.int64),
        )
    opt = nn.make_optimizer(config.optimizer, config.learning_rate)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    history = []
    best_params = None
    best_f1 = None
    best_step = 0
    n = len(examples)
    step = 0
    try:
        while step < config.max_steps:
            perm = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                if step >= config.max_steps:
                    break
                idx = perm[start : start + config.batch_size]
                step += 1
                loss, grads = _batch_loss_grads(
                    model, ids_a, mask_a, ids_b, mask_b, y, idx, rng, threads, pool
                )
                if not np.isfinite(loss):
                    raise TrainingDiverged("loss became %r at step %d" % (loss, step))
                try:
                    opt.step(model.params, grads)
                except nn.NonFiniteGradient as exc:
                    raise TrainingDiverged("step %d: %s" % (step, exc)) from exc
                entry = TrainLogEntry(step=step, loss=float(loss))
                if dev is not None and (
                    step % config.eval_every == 0 or step == config.max_steps
                ):
                    (dia, dma), (dib, dmb), dy = dev
                    probs = model.predict_ids(dia, dma, dib, dmb)
                    f1 = macro_f1_ids(probs.argmax(axis=1), dy, len(labels))
                    entry.dev_macro_f1 = f1
                    if best_f1 is None or f1 > best_f1:
                        best_f1 = f1
                        best_step = step
                        best_params = {k: v.copy() for k, v in model.params.items()}
                history.append(entry)
                if on_step:
                    on_step(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    if best_params is None:
        best = model
        best_step = step
    else:
        best = DaModel(config, vocab, labels, best_params)
    return TrainResult(
        final=model, best=best, best_step=best_step, best_dev_f1=best_f1, history=history
    )
