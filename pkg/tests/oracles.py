"""Brute-force re-implementations of the corpus metrics, written from the
formulas alone and sharing no code with vacs.metrics."""
import math


def cmi(labels):
    n = len(labels)
    biggest = max(sum(1 for y in labels if y == lang) for lang in set(labels))
    switches = 0
    for i in range(1, n):
        if labels[i] != labels[i - 1]:
            switches += 1
    return (n - biggest + switches) / (2 * n)


def spans(corpus):
    out = []
    for labels in corpus:
        start = 0
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                out.append(i - start)
                start = i
    return out


def m_index(corpus):
    n_s = sum(1 for labels in corpus for y in labels if y == "s")
    n_t = sum(1 for labels in corpus for y in labels if y == "t")
    total = n_s + n_t
    sq = (n_s / total) ** 2 + (n_t / total) ** 2
    return (1 - sq) / sq


def burstiness(corpus):
    xs = spans(corpus)
    m = sum(xs) / len(xs)
    var = sum((x - m) ** 2 for x in xs) / len(xs)
    sd = var ** 0.5
    return (sd - m) / (sd + m)


def span_entropy(corpus):
    xs = spans(corpus)
    h = 0.0
    for value in set(xs):
        p = xs.count(value) / len(xs)
        h -= p * math.log(p, 2)
    return h
