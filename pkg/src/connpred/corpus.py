"""Sentence-pair harvesting and balanced, article-disjoint dataset splits.

Articles arrive as (article_id, paragraphs) where each paragraph is an
ordered list of sentence strings. Every adjacent pair inside a paragraph
yields one labeled example; pairs never span paragraph boundaries. Split
building first assigns whole articles to dev/test/train pools (so no
article leaks across splits) and then samples per-class counts inside each
pool.

Determinism: article pool assignment orders articles by a salted SHA-256
hash, and all sampling uses `random.Random(seed)` over index-sorted
candidate lists. Both are stable across platforms and Python versions, so
repeated runs with one seed produce byte-identical datasets.
"""

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .text import Sentence, match_span, split_sentences, strip_and_recase, tokenize

log = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


class DatasetFormatError(CorpusError):
    pass


class InsufficientClassData(CorpusError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    """One adjacent sentence pair; arg2 is connective-stripped."""

    arg1: Sentence
    arg2: Sentence
    label_id: int
    article_id: str


@dataclass(frozen=True)
class SplitSpec:
    dev_per_class: int = 500
    test_per_class: int = 500
    train_per_class: int = 20000
    seed: int = 0
    oversample_warn_ratio: float = 20.0

    def __post_init__(self):
        if min(self.dev_per_class, self.test_per_class, self.train_per_class) <= 0:
            raise ValueError("per-class counts must be positive")


@dataclass
class DatasetSplit:
    train: list
    dev: list
    test: list


@dataclass
class ExtractStats:
    articles: int = 0
    paragraphs: int = 0
    pairs: int = 0
    skipped_records: int = 0
    dropped_sentences: int = 0
    connective_only_pairs: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def iter_jsonl_articles(path, stats=None):
    """Yield (article_id, paragraphs) from a JSON-lines corpus file.

    Malformed records (bad JSON, missing/ill-typed fields) are skipped and
    counted on `stats`.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                article_id = rec["id"]
                paragraphs = rec["paragraphs"]
                ok = isinstance(article_id, str) and isinstance(paragraphs, list) and all(
                    isinstance(p, list) and all(isinstance(s, str) for s in p)
                    for p in paragraphs
                )
                if not ok:
                    raise ValueError("bad record shape")
            except (ValueError, KeyError, TypeError):
                if stats is not None:
                    stats.skipped_records += 1
                log.warning("%s:%d: skipping malformed article record", path, lineno)
                continue
            yield article_id, paragraphs


def iter_text_articles(paths, stats=None):
    """Raw-text mode: each file is one article; blank lines separate
    paragraphs; sentences come from the rule-based splitter."""
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        paragraphs = []
        for block in text.split("\n\n"):
            block = " ".join(block.split())
            if block:
                sentences = split_sentences(block)
                if sentences:
                    paragraphs.append(sentences)
        yield _article_id_from_path(path), paragraphs


def _article_id_from_path(path):
    import os

    return os.path.splitext(os.path.basename(str(path)))[0]


def _extract_from_article(article, lexicon, stats):
    article_id, paragraphs = article
    out = []
    stats.articles += 1
    for paragraph in paragraphs:
        stats.paragraphs += 1
        sentences = []
        for raw in paragraph:
            try:
                sentences.append(tokenize(raw))
            except ValueError:
                stats.dropped_sentences += 1
        for s1, s2 in zip(sentences, sentences[1:]):
            m = match_span(s2, lexicon)
            if m is None:
                out.append(LabeledExample(s1, s2, lexicon.no_connective_id, article_id))
            elif m[1] == len(s2.tokens):
                # The sentence is nothing but a connective (plus comma):
                # unusable as either a positive or a clean negative.
                stats.connective_only_pairs += 1
            else:
                entry, span = m
                stripped = strip_and_recase(s2, span)
                out.append(LabeledExample(s1, stripped, entry.label_id, article_id))
    stats.pairs += len(out)
    return out


def extract_pairs(articles, lexicon, stats=None, threads=1):
    """Harvest labeled pairs from an article stream.

    Articles may be processed concurrently, but results are emitted in the
    input article order so output never depends on scheduling.
    """
    if stats is None:
        stats = ExtractStats()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for batch in pool.map(lambda a: _extract_from_article(a, lexicon, stats), articles):
                yield from batch
    else:
        for article in articles:
            yield from _extract_from_article(article, lexicon, stats)


def class_histogram(examples):
    """Exact per-label counts."""
    counts = {}
    for ex in examples:
        counts[ex.label_id] = counts.get(ex.label_id, 0) + 1
    return counts


def _article_hash(article_id, seed):
    digest = hashlib.sha256(("%d:%s" % (seed, article_id)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def build_splits(examples, num_classes, spec):
    """Balanced train/dev/test with whole-article disjointness.

    Articles are ordered by salted hash and greedily assigned to the dev
    pool until it can cover `dev_per_class` for every class, then likewise
    for test; everything else becomes the train pool. Dev/test are sampled
    without replacement; train under-samples majority classes and tops up
    minority classes by sampling with replacement (after including each
    example once).

    Raises:
        InsufficientClassData: naming the first class whose demand cannot
        be met from the available pool.
    """
    examples = list(examples)
    by_article = {}
    for idx, ex in enumerate(examples):
        by_article.setdefault(ex.article_id, []).append(idx)

    ordered_articles = sorted(
        by_article, key=lambda a: (_article_hash(a, spec.seed), a)
    )

    def class_counts(indices):
        counts = [0] * num_classes
        for i in indices:
            counts[examples[i].label_id] += 1
        return counts

    demands = [
        ("dev", spec.dev_per_class),
        ("test", spec.test_per_class),
    ]
    pools = {"dev": [], "test": [], "train": []}
    counts = [0] * num_classes
    cursor = 0
    for pool_name, per_class in demands:
        counts = [0] * num_classes
        while cursor < len(ordered_articles) and min(counts) < per_class:
            article = ordered_articles[cursor]
            pools[pool_name].extend(by_article[article])
            for i in by_article[article]:
                counts[examples[i].label_id] += 1
            cursor += 1
        if min(counts) < per_class:
            short = counts.index(min(counts))
            raise InsufficientClassData(
                "class %d has only %d distinct examples available for the %s "
                "split (%d needed)" % (short, min(counts), pool_name, per_class)
            )
    for article in ordered_articles[cursor:]:
        pools["train"].extend(by_article[article])

    train_counts = class_counts(pools["train"])
    if min(train_counts) == 0:
        short = train_counts.index(0)
        raise InsufficientClassData(
            "class %d has no examples left for the train split" % short
        )

    rng = random.Random(spec.seed)

    def sample_exact(pool, per_class, with_replacement):
        by_class = [[] for _ in range(num_classes)]
        for i in sorted(pool):
            by_class[examples[i].label_id].append(i)
        chosen = []
        for label in range(num_classes):
            candidates = by_class[label]
            if len(candidates) >= per_class:
                chosen.extend(rng.sample(candidates, per_class))
            elif with_replacement:
                ratio = per_class / len(candidates)
                if ratio > spec.oversample_warn_ratio:
                    log.warning(
                        "class %d oversampled %.1fx (%d -> %d)",
                        label, ratio, len(candidates), per_class,
                    )
                chosen.extend(candidates)
                chosen.extend(
                    rng.choice(candidates) for _ in range(per_class - len(candidates))
                )
            else:
                raise InsufficientClassData(
                    "class %d has only %d distinct examples (%d needed)"
                    % (label, len(candidates), per_class)
                )
        chosen.sort()
        return [examples[i] for i in chosen]

    dev = sample_exact(pools["dev"], spec.dev_per_class, with_replacement=False)
    test = sample_exact(pools["test"], spec.test_per_class, with_replacement=False)
    train = sample_exact(pools["train"], spec.train_per_class, with_replacement=True)
    return DatasetSplit(train=train, dev=dev, test=test)


def write_examples_tsv(path, examples, lexicon):
    """`label<TAB>arg1<TAB>arg2<TAB>article_id`, args space-joined."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(
                "%s\t%s\t%s\t%s\n"
                % (lexicon.id_to_label(ex.label_id), ex.arg1.text(), ex.arg2.text(), ex.article_id)
            )


def read_examples_tsv(path, lexicon):
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DatasetFormatError(
                    "%s:%d: expected 4 tab-separated fields, got %d"
                    % (path, lineno, len(fields))
                )
            label, arg1, arg2, article_id = fields
            try:
                label_id = lexicon.label_to_id(label)
            except Exception:
                raise DatasetFormatError(
                    "%s:%d: unknown label %r" % (path, lineno, label)
                ) from None
            if not arg1 or not arg2:
                raise DatasetFormatError("%s:%d: empty argument" % (path, lineno))
            examples.append(
                LabeledExample(
                    arg1=Sentence(tuple(arg1.split(" ")), arg1),
                    arg2=Sentence(tuple(arg2.split(" ")), arg2),
                    label_id=label_id,
                    article_id=article_id,
                )
            )
    return examples


def write_split_dir(out_dir, split, lexicon):
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name in ("train", "dev", "test"):
        path = os.path.join(out_dir, name + ".tsv")
        write_examples_tsv(path, getattr(split, name), lexicon)
        paths[name] = path
    return paths


def read_split_dir(in_dir, lexicon):
    import os

    parts = {
        name: read_examples_tsv(os.path.join(in_dir, name + ".tsv"), lexicon)
        for name in ("train", "dev", "test")
    }
    return DatasetSplit(**parts)
