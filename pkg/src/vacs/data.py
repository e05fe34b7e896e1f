"""Corpora, vocabulary, batching, embeddings and the synthetic toy corpus.

Corpus files hold one JSON record per line::

    {"words": ["run", "banaake"], "labels": ["t", "s"]}

Embedding files are plain text, one ``word v1 v2 ... vE`` per line.
"""
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

LABELS = ("s", "t")
LABEL_ID = {"s": 0, "t": 1}
# label-decoder alphabet: s, t, EOS are outputs, SOS only ever an input
LABEL_EOS = 2
LABEL_SOS = 3
N_LABEL_OUT = 3
N_LABEL_IN = 4

PAD, SOS, EOS, UNK_S = "<pad>", "<s>", "</s>", "<unk-s>"
UNK_T = "<unk-t>"
SPECIALS = frozenset({PAD, SOS, EOS, UNK_S, UNK_T})
STRUCTURAL = frozenset({PAD, SOS, EOS})

PROVENANCES = ("real-CS", "parallel-mono", "synthetic-gCS", "toy")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSentence:
    words: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.words) != len(self.labels):
            raise DataError(f"{len(self.words)} words but {len(self.labels)} labels")
        if not self.words:
            raise DataError("empty sentence")
        bad = [y for y in self.labels if y not in LABEL_ID]
        if bad:
            raise DataError(f"unknown label {bad[0]!r}; expected one of {LABELS}")
        for w in self.words:
            if not isinstance(w, str) or not w:
                raise DataError(f"invalid word {w!r}")
            if w in STRUCTURAL:
                raise DataError(f"special symbol {w!r} used as a word")

    def __len__(self):
        return len(self.words)

    def to_json(self):
        return json.dumps({"words": list(self.words), "labels": list(self.labels)},
                          ensure_ascii=False)


@dataclass
class Corpus:
    sentences: list
    provenance: str = "toy"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


def parse_labeled_line(line, lineno=None):
    where = f"line {lineno}: " if lineno is not None else ""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{where}not a JSON record ({e.msg})") from None
    if not isinstance(rec, dict) or "words" not in rec or "labels" not in rec:
        raise DataError(f"{where}record needs 'words' and 'labels'")
    words, labels = rec["words"], rec["labels"]
    if not isinstance(words, list) or not isinstance(labels, list):
        raise DataError(f"{where}'words' and 'labels' must be arrays")
    if len(words) != len(labels):
        raise DataError(f"{where}length mismatch: {len(words)} words, {len(labels)} labels")
    try:
        return LabeledSentence(words, labels)
    except DataError as e:
        raise DataError(f"{where}{e}") from None


def read_corpus(path, provenance="real-CS"):
    sents = []
    with open(path, encoding="utf-8") as f:
        for k, line in enumerate(f, 1):
            if line.strip():
                try:
                    sents.append(parse_labeled_line(line, k))
                except DataError as e:
                    raise DataError(f"{path}: {e}") from None
    return Corpus(sents, provenance)


def write_corpus(path, corpus):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in corpus:
            f.write(s.to_json() + "\n")


# ---------------------------------------------------------------------------
# vocabulary

class Vocabulary:
    """Two disjoint per-language word maps plus special symbols.

    Ids: 0 PAD, 1 SOS, 2 EOS, then the source block ``[UNK-s, src words...]``
    followed by the target block ``[UNK-t, tgt words...]``. Word-output layers
    cover only the two language blocks; :attr:`offset` converts between ids
    and output positions.
    """

    offset = 3

    def __init__(self, source_words, target_words):
        self.itos = [PAD, SOS, EOS, UNK_S, *source_words, UNK_T, *target_words]
        self.unk_s = 3
        self.unk_t = 4 + len(source_words)
        self.source = {w: 4 + k for k, w in enumerate(source_words)}
        self.target = {w: self.unk_t + 1 + k for k, w in enumerate(target_words)}
        if len(set(source_words)) != len(source_words) or len(set(target_words)) != len(target_words):
            raise DataError("duplicate words within a language")
        if SPECIALS & (set(source_words) | set(target_words)):
            raise DataError("special symbol in word list")

    def __len__(self):
        return len(self.itos)

    @property
    def pad(self):
        return 0

    @property
    def sos(self):
        return 1

    @property
    def eos(self):
        return 2

    @property
    def n_out(self):
        return len(self.itos) - self.offset

    def unk(self, label):
        return self.unk_s if label == "s" else self.unk_t

    def word_map(self, label):
        return self.source if label == "s" else self.target

    def language(self, wid):
        """Owning language of a word id ('s' or 't'); None for PAD/SOS/EOS."""
        if wid < self.unk_s or wid >= len(self.itos):
            return None
        return "s" if wid < self.unk_t else "t"

    def lookup(self, word, label):
        return self.word_map(label).get(word, self.unk(label))

    def allowed_outputs(self, with_unk=True):
        """Boolean masks over output positions, indexed by label id (s=0, t=1)."""
        n = self.n_out
        masks = np.zeros((2, n), dtype=bool)
        s_lo, t_lo = self.unk_s - self.offset, self.unk_t - self.offset
        masks[0, s_lo:t_lo] = True
        masks[1, t_lo:n] = True
        if not with_unk:
            masks[0, s_lo] = False
            masks[1, t_lo] = False
        return masks

    def to_dict(self):
        n_src = self.unk_t - 4
        return {"source": self.itos[4:4 + n_src], "target": self.itos[self.unk_t + 1:]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["source"]), list(d["target"]))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpora, max_per_lang=None, min_count=1):
    if not corpora or all(len(c) == 0 for c in corpora):
        raise DataError("build_vocab needs at least one non-empty corpus")
    counts = {"s": Counter(), "t": Counter()}
    for c in corpora:
        for sent in c:
            for w, y in zip(sent.words, sent.labels):
                if w not in SPECIALS:
                    counts[y][w] += 1
    kept = {}
    for y in LABELS:
        ranked = sorted((w for w, n in counts[y].items() if n >= min_count),
                        key=lambda w: (-counts[y][w], w))
        kept[y] = ranked if max_per_lang is None else ranked[:max_per_lang]
    return Vocabulary(kept["s"], kept["t"])


def encode_sentence(vocab, sent):
    """Word ids through each token's own language map, and label ids (s=0, t=1)."""
    wids = [vocab.lookup(w, y) for w, y in zip(sent.words, sent.labels)]
    return wids, [LABEL_ID[y] for y in sent.labels]


def decode_sentence(vocab, wids, lids):
    return LabeledSentence([vocab.itos[w] for w in wids], [LABELS[y] for y in lids])


@dataclass
class Batch:
    words: np.ndarray      # (B, T) int, PAD=0 beyond each length
    labels: np.ndarray     # (B, T) int, label ids, 0 in padding
    mask: np.ndarray       # (B, T) float, 1 for real tokens
    index: np.ndarray      # (B,) position of each row in the source corpus

    @property
    def lengths(self):
        return self.mask.sum(axis=1).astype(np.int64)

    def __len__(self):
        return self.words.shape[0]


def pad_batch(encoded, index=None):
    T = max(len(w) for w, _ in encoded)
    B = len(encoded)
    words = np.zeros((B, T), dtype=np.int64)
    labels = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, (w, y) in enumerate(encoded):
        words[b, :len(w)] = w
        labels[b, :len(y)] = y
        mask[b, :len(w)] = 1.0
    idx = np.arange(B) if index is None else np.asarray(index)
    return Batch(words, labels, mask, idx)


def bucket_order(lengths, batch_size, rng):
    """Index chunks of similar length, with the chunk order shuffled by ``rng``."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.permutation(len(lengths)), lengths))
    chunks = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    return [chunks[k] for k in rng.permutation(len(chunks))]


def make_batches(corpus, batch_size, seed, vocab):
    """Length-bucketed, padded batches in a seeded random order."""
    rng = np.random.default_rng(seed)
    encoded = [encode_sentence(vocab, s) for s in corpus]
    chunks = bucket_order([len(w) for w, _ in encoded], batch_size, rng)
    return [pad_batch([encoded[i] for i in ch], ch) for ch in chunks]


# ---------------------------------------------------------------------------
# embeddings

@dataclass
class EmbeddingTable:
    dim: int
    vectors: np.ndarray    # (len(vocab), dim); zero rows where not covered
    covered: np.ndarray    # (len(vocab),) bool

    @property
    def coverage(self):
        return float(self.covered.mean()) if self.covered.size else 0.0


def load_embeddings(path, vocab):
    rows = {}
    dim = None
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read embeddings {path}: {e.strerror}") from None
    with f:
        for k, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            word, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise DataError(f"{path} line {k}: {len(vals)} values, expected {dim}")
            try:
                rows[word] = np.array([float(v) for v in vals])
            except ValueError:
                raise DataError(f"{path} line {k}: non-numeric value") from None
    dim = dim or 0
    vectors = np.zeros((len(vocab), dim))
    covered = np.zeros(len(vocab), dtype=bool)
    for word, vec in rows.items():
        for m in (vocab.source, vocab.target):
            if word in m:
                vectors[m[word]] = vec
                covered[m[word]] = True
    return EmbeddingTable(dim, vectors, covered)


def save_embeddings(path, words, vectors):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w, v in zip(words, vectors):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")


# ---------------------------------------------------------------------------
# synthetic bilingual toy corpus

@dataclass
class ToyConfig:
    vocab_size: int = 200          # words per language
    n_parallel: int = 1000         # concept chains rendered in both languages
    n_cs: int = 1000
    n_valid: int = 500
    n_test: int = 500
    concentration: float = 0.05    # Dirichlet concentration of each bigram row
    rho: float = 0.75              # probability of staying in the current language
    length_mean: float = 12.0
    length_std: float = 4.0
    min_len: int = 3
    max_len: int = 25
    embed_dim: int = 64
    embed_noise: float = 0.1

    def validate(self):
        if not (0.0 < self.rho <= 1.0) or math.isnan(self.rho):
            raise DataError(f"rho must lie in (0, 1], got {self.rho}")
        if self.vocab_size < 1 or self.min_len < 1 or self.max_len < self.min_len:
            raise DataError("invalid toy vocabulary or length bounds")
        if self.concentration <= 0:
            raise DataError("concentration must be positive")


_SRC_SYL = ([c + v for c in "bdgkmnpr" for v in "aeiou"])
_TGT_SYL = ([c + v for c in "fhjlstvz" for v in "aeiou"])


def _lexicon(rng, syllables, n):
    words, seen = [], set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(syllables[int(i)] for i in rng.integers(0, len(syllables), k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class ToyWorld:
    """Hidden concept bigram chain rendered in two lexicons.

    Source and target words share concept indices, so a concept sequence
    has an exact translation; code-switched text renders each concept in a
    Markov language state that stays with probability ``rho``.
    """

    def __init__(self, cfg, seed):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        K = cfg.vocab_size
        self.lex = {"s": _lexicon(rng, _SRC_SYL, K), "t": _lexicon(rng, _TGT_SYL, K)}
        self.start = rng.dirichlet(np.full(K, 0.5))
        self.trans = rng.dirichlet(np.full(K, cfg.concentration), size=K)
        self._cum_trans = np.cumsum(self.trans, axis=1)
        self._cum_start = np.cumsum(self.start)
        concept_vecs = rng.normal(0.0, 1.0, (K, cfg.embed_dim))
        self.embeddings = {
            y: concept_vecs + rng.normal(0.0, cfg.embed_noise, (K, cfg.embed_dim)) for y in LABELS}

    def _length(self, rng):
        c = self.cfg
        n = int(round(rng.normal(c.length_mean, c.length_std))) if c.length_std > 0 else int(round(c.length_mean))
        return min(max(n, c.min_len), c.max_len)

    def _concepts(self, rng, n):
        seq = [int(np.searchsorted(self._cum_start, rng.random(), side="right"))]
        for _ in range(n - 1):
            row = self._cum_trans[seq[-1]]
            seq.append(int(np.searchsorted(row, rng.random() * row[-1], side="right")))
        return [min(k, self.cfg.vocab_size - 1) for k in seq]

    def _render(self, concepts, labels):
        return LabeledSentence([self.lex[y][k] for k, y in zip(concepts, labels)], labels)

    def code_switched(self, n, rng, rho=None):
        rho = self.cfg.rho if rho is None else rho
        if not (0.0 < rho <= 1.0):
            raise DataError(f"rho must lie in (0, 1], got {rho}")
        out = []
        for _ in range(n):
            concepts = self._concepts(rng, self._length(rng))
            y = LABELS[int(rng.integers(0, 2))]
            labels = []
            for _k in concepts:
                labels.append(y)
                if rng.random() >= rho:
                    y = "t" if y == "s" else "s"
            out.append(self._render(concepts, labels))
        return Corpus(out, "toy")

    def parallel(self, n, rng):
        out = []
        for _ in range(n):
            concepts = self._concepts(rng, self._length(rng))
            for y in LABELS:
                out.append(self._render(concepts, [y] * len(concepts)))
        return Corpus(out, "parallel-mono")

    def embedding_rows(self):
        words = self.lex["s"] + self.lex["t"]
        return words, np.vstack([self.embeddings["s"], self.embeddings["t"]])


def synth_toy_corpus(cfg, seed):
    """(parallel monolingual corpus, code-switched corpus), deterministic in seed."""
    world = ToyWorld(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return world.parallel(cfg.n_parallel, rng), world.code_switched(cfg.n_cs, rng)


def synth_toy_splits(cfg, seed):
    """Toy corpora for a full experiment: mono, CS train/valid/test, and the world."""
    world = ToyWorld(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    mono = world.parallel(cfg.n_parallel, rng)
    cs = world.code_switched(cfg.n_cs, rng)
    held = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return {"mono": mono, "cs_train": cs,
            "cs_valid": world.code_switched(cfg.n_valid, held),
            "cs_test": world.code_switched(cfg.n_test, held),
            "world": world}
