"""Code-switching metrics over language-labeled corpora.

Spans are maximal runs of identical labels inside one sentence.
"""
import math
from collections import Counter
from dataclasses import asdict, dataclass, field


def _labels(sent):
    return sent.labels if hasattr(sent, "labels") else tuple(sent)


def switch_count(labels):
    return sum(1 for a, b in zip(labels, labels[1:]) if a != b)


def span_lengths(labels):
    spans = []
    run = 1
    for a, b in zip(labels, labels[1:]):
        if a == b:
            run += 1
        else:
            spans.append(run)
            run = 1
    if labels:
        spans.append(run)
    return spans


def cmi(sent):
    """Code-mixing index (N - max_y |S_y| + switches) / 2N, in [0, 1)."""
    labels = _labels(sent)
    n = len(labels)
    if n == 0:
        raise ValueError("cmi of an empty sentence")
    dominant = max(Counter(labels).values())
    return (n - dominant + switch_count(labels)) / (2 * n)


def avg_cmi(corpus):
    vals = [cmi(s) for s in corpus]
    if not vals:
        raise ValueError("avg_cmi of an empty corpus")
    return math.fsum(vals) / len(vals)


def m_index(corpus, k=2):
    counts = Counter(y for s in corpus for y in _labels(s))
    total = sum(counts.values())
    if total == 0:
        raise ValueError("m_index of an empty corpus")
    sq = sum((n / total) ** 2 for n in counts.values())
    return (1.0 - sq) / ((k - 1) * sq)


def _all_spans(corpus):
    spans = [n for s in corpus for n in span_lengths(_labels(s))]
    if not spans:
        raise ValueError("corpus has no spans")
    return spans


def burstiness(corpus):
    spans = _all_spans(corpus)
    m = math.fsum(spans) / len(spans)
    sd = math.sqrt(math.fsum((x - m) ** 2 for x in spans) / len(spans))
    return (sd - m) / (sd + m)


def span_entropy(corpus):
    spans = _all_spans(corpus)
    n = len(spans)
    return -math.fsum((c / n) * math.log2(c / n) for c in Counter(spans).values()) + 0.0


@dataclass
class LengthHistogram:
    counts: dict
    mean: float
    max: int

    @property
    def total(self):
        return sum(self.counts.values())


def length_histogram(corpus):
    lengths = [len(_labels(s)) for s in corpus]
    if not lengths:
        raise ValueError("length_histogram of an empty corpus")
    return LengthHistogram(dict(sorted(Counter(lengths).items())),
                           math.fsum(lengths) / len(lengths), max(lengths))


@dataclass
class MetricsReport:
    avg_cmi: float
    m_index: float
    burstiness: float
    span_entropy: float
    length: LengthHistogram
    tokens: dict = field(default_factory=dict)
    n_sentences: int = 0

    def to_record(self):
        d = asdict(self)
        d["length"] = {"counts": {str(k): v for k, v in self.length.counts.items()},
                       "mean": self.length.mean, "max": self.length.max}
        return d


def report(corpus):
    tokens = Counter(y for s in corpus for y in _labels(s))
    return MetricsReport(avg_cmi(corpus), m_index(corpus), burstiness(corpus),
                         span_entropy(corpus), length_histogram(corpus),
                         {"s": tokens.get("s", 0), "t": tokens.get("t", 0)}, len(corpus))


COLUMNS = ("Avg CMI", "M-index", "Burstiness", "Span Entropy")


def format_table(rows, reference=None):
    """Aligned text table of (name, MetricsReport) rows.

    With ``reference`` set to a row name, other rows print signed deltas
    against it, the way generated corpora are compared to training data.
    """
    ref = dict(rows).get(reference) if reference else None
    width = max([len("Dataset")] + [len(n) for n, _ in rows])
    lines = [f"{'Dataset':<{width}} | " + " | ".join(f"{c:>12}" for c in COLUMNS)]
    lines.append("-" * len(lines[0]))
    for name, r in rows:
        vals = (r.avg_cmi, r.m_index, r.burstiness, r.span_entropy)
        if ref is not None and name != reference:
            base = (ref.avg_cmi, ref.m_index, ref.burstiness, ref.span_entropy)
            cells = [f"{v - b:>+12.3f}" for v, b in zip(vals, base)]
        else:
            cells = [f"{v:>12.3f}" for v in vals]
        lines.append(f"{name:<{width}} | " + " | ".join(cells))
    return "\n".join(lines)
