"""Bulk synthesis of labeled code-switched corpora from a trained model."""
import json

import numpy as np

from vacs.data import Corpus, write_corpus
from vacs.metrics import length_histogram


def sentence_seed(seed, index):
    """Per-sentence seed derived from (seed, index); independent of generation order."""
    return np.random.SeedSequence([int(seed), int(index)])


def generate_corpus(model, n, max_len=30, temperature=1.0, seed=0):
    if n < 1:
        raise ValueError("n must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    sents = []
    for i in range(n):
        rng = np.random.default_rng(sentence_seed(seed, i))
        sent, _ = model.prior_sample(rng=rng, max_len=max_len, temperature=temperature)
        sents.append(sent)
    return Corpus(sents, "synthetic-gCS")


def summary(corpus):
    hist = length_histogram(corpus)
    labels = {"s": 0, "t": 0}
    for s in corpus:
        for y in s.labels:
            labels[y] += 1
    return {"n": len(corpus), "length_mean": hist.mean, "length_max": hist.max,
            "label_counts": labels}


def write_generated(path, corpus):
    """Write the corpus file plus a ``<path>.summary.json`` sidecar."""
    write_corpus(path, corpus)
    with open(str(path) + ".summary.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary(corpus), f, sort_keys=True)
        f.write("\n")
