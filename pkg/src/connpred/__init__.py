"""Discourse connective prediction toolkit.

Pipeline pieces: sentence-pair harvesting from paragraph-structured text,
balanced article-disjoint splits, a decomposable attention classifier with a
hand-rolled numeric kernel, a sparse word-pair baseline, and evaluation
utilities (macro-F1, confusion matrices, rater consensus analysis).
"""

__version__ = "0.1.0"

FORMAT_VERSIONS = {
    "lexicon-tsv": "1",
    "dataset-tsv": "1",
    "checkpoint": "DANN1",
    "wordpairs-model": "WPLR1",
}
