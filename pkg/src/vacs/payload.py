"""Character-aware payload language model, curricula and perplexity.

The model follows the character-aware recipe at desk scale: a character
CNN (max-over-time pooling per filter width), one highway layer, a
single-layer word LSTM and a softmax over the word vocabulary. Word
features are computed once per step for the whole vocabulary and then
looked up, which is equivalent to running the CNN per token.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from vacs import checkpoint
from vacs.autodiff import Graph, backward
from vacs.data import LABELS, bucket_order
from vacs.training import AdamState, DivergenceError, NonFiniteGradientError, adam_step

EOS, UNK_S, UNK_T = "</s>", "<unk-s>", "<unk-t>"
BOS = "<s>"
# character specials: 0 pad, 1 begin-of-word, 2 end-of-word
N_CHAR_SPECIAL = 3


@dataclass
class PayloadConfig:
    char_dim: int = 15
    filter_widths: tuple = (1, 2, 3, 4)
    n_filters: int = 16
    hidden: int = 128
    max_word_len: int = 20        # characters, including the boundary markers
    init_scale: float = 0.05
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 20

    def __post_init__(self):
        self.filter_widths = tuple(int(w) for w in self.filter_widths)
        if max(self.filter_widths) > self.max_word_len:
            raise ValueError("filter widths must not exceed max_word_len")


class PayloadVocab:
    """Word types keyed by (word, label). Output ids: 0 EOS, 1 UNK-s, 2 UNK-t, then words."""

    def __init__(self, entries, chars):
        self.entries = [tuple(e) for e in entries]
        self.index = {e: 3 + k for k, e in enumerate(self.entries)}
        self.chars = list(chars)
        self.char_index = {c: N_CHAR_SPECIAL + k for k, c in enumerate(self.chars)}

    @classmethod
    def build(cls, corpora):
        entries, chars = set(), set()
        for c in corpora:
            for s in c:
                for w, y in zip(s.words, s.labels):
                    entries.add((w, y))
                    chars.update(w)
        return cls(sorted(entries), sorted(chars))

    @property
    def n_out(self):
        return 3 + len(self.entries)

    @property
    def bos(self):
        """Input-only id for the sentence-start token."""
        return self.n_out

    def id(self, word, label):
        return self.index.get((word, label), 1 if label == "s" else 2)

    def strings(self):
        return [EOS, UNK_S, UNK_T] + [w for w, _ in self.entries] + [BOS]

    def char_matrix(self, max_len):
        """(n_out + 1, max_len) character ids for every input/output type."""
        rows = np.zeros((self.n_out + 1, max_len), dtype=np.int64)
        for k, s in enumerate(self.strings()):
            ids = [1] + [self.char_index.get(ch, 0) for ch in s][:max_len - 2] + [2]
            rows[k, :len(ids)] = ids
        return rows

    def to_dict(self):
        return {"entries": [list(e) for e in self.entries], "chars": self.chars}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(e) for e in d["entries"]], d["chars"])


def param_shapes(cfg, vocab):
    n_chars = N_CHAR_SPECIAL + len(vocab.chars)
    F = cfg.n_filters * len(cfg.filter_widths)
    H = cfg.hidden
    shapes = {"char_emb": (n_chars, cfg.char_dim)}
    for w in cfg.filter_widths:
        shapes[f"conv{w}_w"] = (w * cfg.char_dim, cfg.n_filters)
        shapes[f"conv{w}_b"] = (cfg.n_filters,)
    shapes.update({"hw_t_w": (F, F), "hw_t_b": (F,), "hw_h_w": (F, F), "hw_h_b": (F,),
                   "lstm_wx": (F, 4 * H), "lstm_wh": (H, 4 * H), "lstm_b": (4 * H,),
                   "out_w": (H, vocab.n_out), "out_b": (vocab.n_out,)})
    return shapes


@dataclass
class Curriculum:
    """Ordered (corpus, epochs) stages trained without parameter reset."""
    stages: list
    name: str = ""

    def __post_init__(self):
        if not self.stages:
            raise ValueError("curriculum needs at least one stage")
        for corpus, epochs in self.stages:
            if len(corpus) == 0:
                raise ValueError("curriculum stage with an empty corpus")
            if epochs < 0:
                raise ValueError("negative epoch count")


class PayloadLM:
    def __init__(self, cfg, vocab, params):
        self.cfg, self.vocab, self.params = cfg, vocab, params
        self._chars = vocab.char_matrix(cfg.max_word_len)

    @classmethod
    def init(cls, cfg, vocab, seed):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(cfg, vocab).items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.uniform(-cfg.init_scale, cfg.init_scale, shape)
        H = cfg.hidden
        params["lstm_b"][H:2 * H] = 1.0
        params["hw_t_b"][:] = -2.0   # highway starts close to the identity
        return cls(cfg, vocab, params)

    def copy(self):
        return PayloadLM(self.cfg, self.vocab, {k: v.copy() for k, v in self.params.items()})

    def encode(self, sent):
        return [self.vocab.id(w, y) for w, y in zip(sent.words, sent.labels)]

    # --- graph ---------------------------------------------------------

    def _word_features(self, g, P):
        emb = g.gather(P["char_emb"], self._chars)            # (N, C, E)
        C = self._chars.shape[1]
        pooled = []
        for w in self.cfg.filter_widths:
            if w == 1:
                win = emb
            else:
                win = g.concat([g.slice(emb, k, C - w + 1 + k, axis=1) for k in range(w)], axis=-1)
            conv = g.tanh(g.add(g.matmul(win, P[f"conv{w}_w"]), P[f"conv{w}_b"]))
            pooled.append(g.max(conv, axis=1))
        x = g.concat(pooled)
        t = g.sigmoid(g.add(g.matmul(x, P["hw_t_w"]), P["hw_t_b"]))
        h = g.relu(g.add(g.matmul(x, P["hw_h_w"]), P["hw_h_b"]))
        return g.add(g.mul(t, h), g.mul(g.sub(1.0, t), x))

    def _loglik_graph(self, g, P, ids, lengths):
        """Per-token log-probs (T+1, B) for padded id rows; EOS target after each sentence."""
        B, T = ids.shape
        H = self.cfg.hidden
        feats = self._word_features(g, P)
        inputs = np.concatenate([np.full((B, 1), self.vocab.bos), ids], axis=1)
        targets = np.concatenate([ids, np.zeros((B, 1), dtype=np.int64)], axis=1)
        targets[np.arange(B), lengths] = 0
        step_mask = (np.arange(T + 1)[None, :] <= lengths[:, None]).astype(np.float64)
        state = g.const(np.zeros((B, 2 * H)))
        hs = []
        for o in range(T + 1):
            m = step_mask[:, o]
            state = g.lstm(g.gather(feats, inputs[:, o]), state, P["lstm_wx"], P["lstm_wh"],
                           P["lstm_b"], None if m.all() else m)
            hs.append(g.slice(state, 0, H))
        hstack = g.reshape(g.stack(hs), ((T + 1) * B, H))
        logits = g.add(g.matmul(hstack, P["out_w"]), P["out_b"])
        logp = g.pick(g.log_softmax(logits), targets.T.reshape(-1))
        return g.mul(g.reshape(logp, (T + 1, B)), step_mask.T), step_mask

    def _pad(self, encoded):
        lengths = np.array([len(e) for e in encoded], dtype=np.int64)
        ids = np.zeros((len(encoded), lengths.max()), dtype=np.int64)
        for b, e in enumerate(encoded):
            ids[b, :len(e)] = e
        return ids, lengths

    def loss_and_grads(self, encoded):
        g = Graph()
        P = {k: g.param(k, v) for k, v in self.params.items()}
        ids, lengths = self._pad(encoded)
        logp, step_mask = self._loglik_graph(g, P, ids, lengths)
        loss = g.scale(g.sum(logp), -1.0 / step_mask.sum())
        return float(loss.value), backward(g, loss)

    def sentence_logprobs(self, corpus, batch_size=64):
        """Log-probabilities of every predicted token (words then EOS) per sentence.

        Batches are formed from a canonical sort of the corpus so results do
        not depend on sentence order.
        """
        encoded = [self.encode(s) for s in corpus]
        order = sorted(range(len(encoded)), key=lambda i: (len(encoded[i]), encoded[i]))
        out = [None] * len(encoded)
        for k in range(0, len(order), batch_size):
            chunk = order[k:k + batch_size]
            g = Graph()
            P = {n: g.const(v) for n, v in self.params.items()}
            ids, lengths = self._pad([encoded[i] for i in chunk])
            logp, _ = self._loglik_graph(g, P, ids, lengths)
            for b, i in enumerate(chunk):
                out[i] = logp.value[:lengths[b] + 1, b].copy()
        return out

    # --- persistence ---------------------------------------------------

    def meta(self, extra=None):
        m = {"kind": "payload", "config": asdict(self.cfg), "vocab": self.vocab.to_dict()}
        if extra:
            m["extra"] = extra
        return m

    def save(self, path, extra=None):
        return checkpoint.save(path, self.params, self.meta(extra))

    def digest(self):
        return checkpoint.digest(self.params, self.meta())

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "payload":
            raise checkpoint.CheckpointError(f"{path} is not a payload-LM checkpoint")
        cfg = meta["config"]
        cfg["filter_widths"] = tuple(cfg["filter_widths"])
        return cls(PayloadConfig(**cfg), PayloadVocab.from_dict(meta["vocab"]), tensors)


class UniformPredictor:
    """Assigns probability 1/V to every token; a reference point for perplexity."""

    def __init__(self, size):
        self.size = size

    def sentence_logprobs(self, corpus):
        return [np.full(len(s) + 1, -math.log(self.size)) for s in corpus]


def perplexity_from_logprobs(logprobs):
    total = math.fsum(float(x) for row in logprobs for x in row)
    count = sum(len(row) for row in logprobs)
    if count == 0:
        raise ValueError("no tokens to score")
    return math.exp(-total / count)


def perplexity(model, corpus):
    """Word-level perplexity, counting one EOS prediction per sentence."""
    if len(corpus) == 0:
        raise ValueError("perplexity of an empty corpus")
    return perplexity_from_logprobs(model.sentence_logprobs(corpus))


# ---------------------------------------------------------------------------
# training

def fit(model, corpus, epochs, seed, stage=0, log=None):
    """Train ``model`` in place for ``epochs`` passes over ``corpus``."""
    cfg = model.cfg
    state = getattr(model, "_adam", None)
    if state is None:
        state = model._adam = AdamState.zeros_like(model.params)
    encoded = [model.encode(s) for s in corpus]
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))
        for chunk in bucket_order([len(e) for e in encoded], cfg.batch_size, rng):
            loss, grads = model.loss_and_grads([encoded[i] for i in chunk])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite payload loss (stage {stage}, epoch {epoch})")
            try:
                adam_step(model.params, grads, state, cfg)
            except NonFiniteGradientError as e:
                raise DivergenceError(str(e)) from None
            if log is not None:
                log.append({"stage": stage, "epoch": epoch, "loss": loss})
    return model


def train_payload(curriculum, cfg, seed, vocab=None, log=None):
    """Train a fresh payload LM through the curriculum stages in order.

    Optimizer state carries across stages along with the parameters.
    """
    if vocab is None:
        vocab = PayloadVocab.build([c for c, _ in curriculum.stages])
    model = PayloadLM.init(cfg, vocab, seed)
    for stage, (corpus, epochs) in enumerate(curriculum.stages):
        fit(model, corpus, epochs, seed, stage, log)
    return model


@dataclass
class PplRow:
    curriculum: str
    valid: float
    test: float


def experiment_table(models, valid, test):
    """One row per named trained model, with held-out valid and test perplexity."""
    return [PplRow(name, perplexity(m, valid), perplexity(m, test)) for name, m in models.items()]


def run_curricula(curricula, cfg, seed, valid, test, vocab=None):
    """Train each curriculum on a shared vocabulary and tabulate perplexities."""
    if vocab is None:
        vocab = PayloadVocab.build([c for cur in curricula for c, _ in cur.stages])
    models = {cur.name: train_payload(cur, cfg, seed, vocab) for cur in curricula}
    return experiment_table(models, valid, test), models


def format_ppl_table(rows):
    width = max([len("Training Curricula")] + [len(r.curriculum) for r in rows])
    lines = [f"{'Training Curricula':<{width}} | {'Valid PPL':>10} | {'Test PPL':>10}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r.curriculum:<{width}} | {r.valid:>10.3f} | {r.test:>10.3f}")
    return "\n".join(lines)
