"""Tokenization, sentence handling, and connective matching.

The tokenizer is a deterministic rule-based splitter: whitespace separates
tokens and punctuation is detached into standalone tokens, while intra-word
hyphens and apostrophes are kept ("on-time" stays one token). Connective
matching is case-insensitive, anchored at the sentence start, and honors a
per-entry "comma required" rule for entries that are only unambiguous when
followed by a comma.
"""

import re
from dataclasses import dataclass
from importlib import resources

NO_CONNECTIVE_LABEL = "[No connective]"

# Word chunks (with internal apostrophes/hyphens), else one non-space char.
_TOKEN_RE = re.compile(r"\w+(?:['’-]\w+)*|\S")

# Sentence boundary: terminal punctuation, optional closing quote, whitespace.
_SENT_RE = re.compile(r"(?<=[.!?])[\"'”’)]*\s+")


@dataclass(frozen=True)
class Sentence:
    """A tokenized sentence plus the raw span it came from."""

    tokens: tuple
    raw: str

    def text(self):
        """Space-joined rendering of the tokens (the dataset TSV form)."""
        return " ".join(self.tokens)


def tokenize(text):
    """Split raw text into a Sentence.

    Args:
        text: source string; must be non-empty after trimming.

    Raises:
        ValueError: if the input is empty or whitespace-only.
    """
    stripped = text.strip()
    if not stripped:
        raise ValueError("cannot tokenize empty input")
    tokens = tuple(_TOKEN_RE.findall(stripped))
    return Sentence(tokens=tokens, raw=stripped)


def sentence_from_tokens(tokens):
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("sentence must have at least one token")
    return Sentence(tokens=tokens, raw=" ".join(tokens))


def split_sentences(text):
    """Rule-based sentence splitting for the raw-text corpus mode."""
    parts = _SENT_RE.split(text.strip())
    return [p.strip() for p in parts if p.strip()]


@dataclass(frozen=True)
class LexiconEntry:
    label_id: int
    surface: tuple  # lowercase tokens
    comma_required: bool

    @property
    def name(self):
        return " ".join(self.surface)


class LexiconError(Exception):
    pass


class ConnectiveLexicon:
    """Ordered connective entries plus the reserved no-connective class.

    Label ids are dense: entry order defines ids 0..K-2 and the
    no-connective class is always last (id K-1).
    """

    def __init__(self, entries):
        """entries: iterable of (surface string, comma_required bool)."""
        self.entries = []
        seen = set()
        for label_id, (surface, comma_required) in enumerate(entries):
            tokens = tuple(t.lower() for t in _TOKEN_RE.findall(surface.strip()))
            if not tokens:
                raise LexiconError("empty connective surface")
            if tokens in seen:
                raise LexiconError("duplicate connective surface: %r" % (surface,))
            seen.add(tokens)
            self.entries.append(
                LexiconEntry(label_id=label_id, surface=tokens, comma_required=bool(comma_required))
            )
        if not self.entries:
            raise LexiconError("lexicon needs at least one connective")
        self.no_connective_id = len(self.entries)
        self.label_names = [e.name for e in self.entries] + [NO_CONNECTIVE_LABEL]
        self._name_to_id = {name: i for i, name in enumerate(self.label_names)}

    @property
    def num_classes(self):
        return len(self.label_names)

    def label_to_id(self, name):
        try:
            return self._name_to_id[name]
        except KeyError:
            raise LexiconError("unknown label: %r" % (name,)) from None

    def id_to_label(self, label_id):
        return self.label_names[label_id]

    @classmethod
    def load(cls, path):
        """Read `surface<TAB>comma_required(0|1)` lines; order defines ids."""
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 2 or fields[1] not in ("0", "1"):
                    raise LexiconError("%s:%d: expected `surface<TAB>0|1`" % (path, lineno))
                entries.append((fields[0], fields[1] == "1"))
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write("%s\t%d\n" % (e.name, int(e.comma_required)))

    @classmethod
    def default(cls):
        """The bundled lexicon: the 19 studied connectives, 20 classes total."""
        ref = resources.files("connpred.data").joinpath("connectives.tsv")
        entries = []
        for line in ref.read_text(encoding="utf-8").splitlines():
            if line.strip():
                surface, flag = line.split("\t")
                entries.append((surface, flag == "1"))
        return cls(entries)


@dataclass(frozen=True)
class MatchResult:
    label_id: int
    matched_tokens: int  # prefix length consumed, including a trailing comma
    stripped: Sentence


def strip_and_recase(sentence, matched_tokens):
    """Drop a matched prefix and upper-case the first remaining character.

    Raises:
        ValueError: if removal would leave an empty sentence.
    """
    rest = sentence.tokens[matched_tokens:]
    if not rest:
        raise ValueError("stripping the connective would leave an empty sentence")
    first = rest[0]
    recased = first[0].upper() + first[1:]
    return sentence_from_tokens((recased,) + rest[1:])


def match_span(sentence, lexicon):
    """Raw prefix match: returns (entry, consumed token count) or None.

    Case-insensitive; entries with comma_required only match when the token
    right after the surface is ",". Among satisfied entries the longest
    surface wins; an immediately following comma is part of the span.
    """
    lowered = tuple(t.lower() for t in sentence.tokens)
    best = None
    for entry in lexicon.entries:
        n = len(entry.surface)
        if lowered[:n] != entry.surface:
            continue
        has_comma = len(lowered) > n and lowered[n] == ","
        if entry.comma_required and not has_comma:
            continue
        if best is None or len(entry.surface) > len(best[0].surface):
            best = (entry, n + (1 if has_comma else 0))
    return best


def match_connective(sentence, lexicon):
    """Match a lexicon entry at the start of the sentence and strip it.

    Returns None when nothing matches, and also when the sentence consists
    of nothing but the connective (stripping would leave it empty).
    """
    best = match_span(sentence, lexicon)
    if best is None:
        return None
    entry, span = best
    try:
        stripped = strip_and_recase(sentence, span)
    except ValueError:
        return None
    return MatchResult(label_id=entry.label_id, matched_tokens=span, stripped=stripped)
