"""The two-level code-switching VAE: encoder, prior and decoder.

Latents: ``z_c`` (context, dim ``ctx_dim``) and ``z_l`` (switching, dim
``switch_dim``). Inference is q(z_c|W) q(z_l|z_c,Y); generation draws
z_l ~ N(0, I), decodes labels, then z_c ~ p(z_c|z_l, h_O), then words with
the output distribution restricted to each label's language.

Training-time code operates on padded batches through an autodiff
:class:`~vacs.autodiff.Graph`; sampling runs on plain numpy.
"""
from dataclasses import asdict, dataclass

import numpy as np

from vacs import checkpoint, kernels
from vacs.autodiff import Graph
from vacs.data import (LABEL_EOS, LABEL_SOS, LABELS, N_LABEL_IN, N_LABEL_OUT,
                       LabeledSentence, Vocabulary, decode_sentence, pad_batch)
from vacs.ops import kl_diag_gaussian_node, kl_standard_normal_node, softmax

CELLS = ("qc", "ql", "pl", "pc")


class ModelCollapseError(RuntimeError):
    """Prior sampling kept producing empty sentences."""


@dataclass
class VacsConfig:
    word_dim: int = 64
    label_dim: int = 16
    hidden: int = 128
    ctx_dim: int = 32
    switch_dim: int = 16
    init_scale: float = 0.08
    forget_bias: float = 1.0


@dataclass
class GaussianParams:
    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.logvar):
            raise ValueError("mean and logvar lengths differ")

    @property
    def std(self):
        return np.exp(0.5 * np.asarray(self.logvar))


@dataclass
class LatentPair:
    z_c: np.ndarray
    z_l: np.ndarray


def param_shapes(cfg, vocab):
    E, L, H, dc, dl = cfg.word_dim, cfg.label_dim, cfg.hidden, cfg.ctx_dim, cfg.switch_dim
    shapes = {"emb_word": (len(vocab), E), "emb_label": (N_LABEL_IN, L)}
    for cell, d in zip(CELLS, (E, L, L, E)):
        shapes[f"{cell}_wx"] = (d, 4 * H)
        shapes[f"{cell}_wh"] = (H, 4 * H)
        shapes[f"{cell}_b"] = (4 * H,)
    heads = {"fqc": (H, 2 * dc), "fql": (H, 2 * dl), "fpl": (H, N_LABEL_OUT),
             "fpc": (H + dl, 2 * dc), "fpw": (H + L, vocab.n_out),
             # initial-state bridges: z -> packed [h | c]
             "acl": (dc, 2 * H), "apl": (dl, 2 * H), "apc": (dc, 2 * H)}
    for name, (i, o) in heads.items():
        shapes[f"{name}_w"] = (i, o)
        shapes[f"{name}_b"] = (o,)
    return shapes


def reparameterize(g, noise):
    """z = mean + exp(0.5 * logvar) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    mean = np.asarray(g.mean, dtype=np.float64)
    if noise.shape != mean.shape:
        raise ValueError(f"noise shape {noise.shape} != mean shape {mean.shape}")
    return mean + np.exp(0.5 * np.asarray(g.logvar)) * noise


def _reparam_node(g, mu, logvar, noise):
    return g.add(mu, g.mul(g.exp(g.scale(logvar, 0.5)), noise))


class Net:
    """Batched model pieces built on one graph with parameter nodes ``P``."""

    def __init__(self, g, P, cfg, vocab):
        self.g, self.P, self.cfg, self.vocab = g, P, cfg, vocab

    def affine(self, x, name):
        return self.g.add(self.g.matmul(x, self.P[f"{name}_w"]), self.P[f"{name}_b"])

    def _split(self, x, d):
        return self.g.slice(x, 0, d), self.g.slice(x, d, 2 * d)

    def _step(self, cell, x, state, mask):
        P = self.P
        if mask is not None and mask.all():
            mask = None
        return self.g.lstm(x, state, P[f"{cell}_wx"], P[f"{cell}_wh"], P[f"{cell}_b"], mask)

    def hidden(self, state):
        return self.g.slice(state, 0, self.cfg.hidden)

    def encode_context(self, words, mask):
        g, H = self.g, self.cfg.hidden
        state = g.const(np.zeros((words.shape[0], 2 * H)))
        for t in range(words.shape[1]):
            x = g.gather(self.P["emb_word"], words[:, t])
            state = self._step("qc", x, state, mask[:, t])
        return self._split(self.affine(self.hidden(state), "fqc"), self.cfg.ctx_dim)

    def encode_switching(self, z_c, labels, mask):
        g = self.g
        state = self.affine(z_c, "acl")
        for t in range(labels.shape[1]):
            x = g.gather(self.P["emb_label"], labels[:, t])
            state = self._step("ql", x, state, mask[:, t])
        return self._split(self.affine(self.hidden(state), "fql"), self.cfg.switch_dim)

    def decode_labels(self, z_l, labels, mask):
        """Teacher-forced label decoder.

        Returns per-row label log-likelihood (n labels + the EOS event), the
        final hidden state h_O, and the stacked (T+1, B, 3) logits node.
        """
        g = self.g
        B, T = labels.shape
        lengths = mask.sum(axis=1).astype(np.int64)
        inputs = np.concatenate([np.full((B, 1), LABEL_SOS), labels], axis=1)
        targets = np.concatenate([labels, np.zeros((B, 1), dtype=np.int64)], axis=1)
        targets[np.arange(B), lengths] = LABEL_EOS
        step_mask = (np.arange(T + 1)[None, :] <= lengths[:, None]).astype(np.float64)
        state = self.affine(z_l, "apl")
        hs = []
        for o in range(T + 1):
            x = g.gather(self.P["emb_label"], inputs[:, o])
            state = self._step("pl", x, state, step_mask[:, o])
            hs.append(self.hidden(state))
        hstack = g.reshape(g.stack(hs), ((T + 1) * B, self.cfg.hidden))
        logits = self.affine(hstack, "fpl")
        logp = g.pick(g.log_softmax(logits), targets.T.reshape(-1))
        logp = g.mul(g.reshape(logp, (T + 1, B)), step_mask.T)
        return g.sum(logp, axis=0), self.hidden(state), g.reshape(logits, (T + 1, B, N_LABEL_OUT))

    def decode_context_params(self, z_l, h_last):
        return self._split(self.affine(self.g.concat([h_last, z_l]), "fpc"), self.cfg.ctx_dim)

    def decode_words(self, z_c, words, labels, mask):
        """Teacher-forced word decoder; returns per-row word log-likelihood and per-token log-probs (T, B)."""
        g, v = self.g, self.vocab
        B, T = words.shape
        inputs = np.concatenate([np.full((B, 1), v.sos), words[:, :-1]], axis=1)
        state = self.affine(z_c, "apc")
        hs = []
        for o in range(T):
            x = g.gather(self.P["emb_word"], inputs[:, o])
            state = self._step("pc", x, state, mask[:, o])
            hs.append(self.hidden(state))
        hstack = g.reshape(g.stack(hs), (T * B, self.cfg.hidden))
        lab = g.reshape(g.gather(self.P["emb_label"], labels.T), (T * B, self.cfg.label_dim))
        logits = self.affine(g.concat([hstack, lab]), "fpw")
        allowed = v.allowed_outputs()[labels.T.reshape(-1)]
        real = mask.T.reshape(-1) > 0
        target = np.where(real, words.T.reshape(-1) - v.offset, 0)
        # padded rows: label 0 and target 0 (UNK-s) keep the pick finite
        allowed[~real] = v.allowed_outputs()[0]
        logp = g.pick(g.log_softmax(logits, allowed), target)
        logp = g.mul(g.reshape(logp, (T, B)), mask.T)
        return g.sum(logp, axis=0), logp


class Vacs:
    def __init__(self, cfg, vocab, params):
        self.cfg = cfg
        self.vocab = vocab
        expected = param_shapes(cfg, vocab)
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"{k}: shape {params[k].shape}, expected {shape}")
        self.params = params

    @classmethod
    def init(cls, cfg, vocab, seed, embeddings=None):
        """Uniform(-scale, scale) weights, forget-gate bias ``forget_bias``, zero head biases.

        ``embeddings`` (an :class:`~vacs.data.EmbeddingTable` of width
        ``word_dim``) overrides the rows it covers.
        """
        rng = np.random.default_rng(seed)
        params = {}
        s, H = cfg.init_scale, cfg.hidden
        for name, shape in param_shapes(cfg, vocab).items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
                if name[:2] in CELLS and len(shape) == 1 and shape[0] == 4 * H:
                    params[name][H:2 * H] = cfg.forget_bias
            else:
                params[name] = rng.uniform(-s, s, shape)
        if embeddings is not None and embeddings.dim:
            if embeddings.dim != cfg.word_dim:
                raise ValueError(f"embedding dim {embeddings.dim} != word_dim {cfg.word_dim}")
            params["emb_word"][embeddings.covered] = embeddings.vectors[embeddings.covered]
        return cls(cfg, vocab, params)

    @classmethod
    def zeros(cls, cfg, vocab):
        return cls(cfg, vocab, {k: np.zeros(s) for k, s in param_shapes(cfg, vocab).items()})

    def copy(self):
        return Vacs(self.cfg, self.vocab, {k: v.copy() for k, v in self.params.items()})

    def bind(self, g):
        """Parameter nodes on ``g`` and a :class:`Net` over them."""
        P = {k: g.param(k, v) for k, v in self.params.items()}
        return Net(g, P, self.cfg, self.vocab)

    # --- single-sentence API (numpy in, numpy out) ---------------------

    def _net(self):
        return self.bind(Graph())

    @staticmethod
    def _ids(seq):
        seq = np.asarray(seq, dtype=np.int64)
        if seq.ndim != 1 or seq.size == 0:
            raise ValueError("expected a non-empty id sequence")
        return seq[None, :]

    def encode_context(self, word_ids):
        W = self._ids(word_ids)
        mu, lv = self._net().encode_context(W, np.ones(W.shape))
        return GaussianParams(mu.value[0], lv.value[0])

    def encode_switching(self, z_c, label_ids):
        Y = self._ids(label_ids)
        z_c = np.asarray(z_c, dtype=np.float64)
        if z_c.shape != (self.cfg.ctx_dim,):
            raise ValueError(f"z_c must have length {self.cfg.ctx_dim}")
        mu, lv = self._net().encode_switching(z_c[None, :], Y, np.ones(Y.shape))
        return GaussianParams(mu.value[0], lv.value[0])

    def decode_context_params(self, z_l, h_last):
        z_l = np.asarray(z_l, dtype=np.float64)
        h_last = np.asarray(h_last, dtype=np.float64)
        if z_l.shape != (self.cfg.switch_dim,) or h_last.shape != (self.cfg.hidden,):
            raise ValueError("z_l / h_last dimensions do not match the model")
        net = self._net()
        mu, lv = net.decode_context_params(net.g.const(z_l[None]), net.g.const(h_last[None]))
        return GaussianParams(mu.value[0], lv.value[0])

    def decode_labels(self, z_l, *, labels=None, seed=None, rng=None, temperature=1.0, max_len=30):
        """Teacher-forced when ``labels`` is given, otherwise sampled.

        Returns ``(labels, logits, h_last)``; logits has one row per label
        plus the EOS step.
        """
        z_l = np.asarray(z_l, dtype=np.float64)
        if labels is not None:
            Y = self._ids(labels)
            net = self._net()
            _, h, logits = net.decode_labels(net.g.const(z_l[None]), Y, np.ones(Y.shape))
            return list(Y[0]), logits.value[:, 0, :], h.value[0]
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(seed)
        return _sample_labels(self, z_l, rng, temperature, max_len)

    def decode_words(self, z_c, labels, *, words=None, seed=None, rng=None, temperature=1.0):
        """Returns ``(word ids, per-token log-probs)``, teacher-forced when ``words`` is given."""
        labels = [int(y) for y in labels]
        if not labels:
            raise ValueError("label sequence is empty")
        if any(y not in (0, 1) for y in labels):
            raise ValueError("label sequence may only hold s/t labels (no interior EOS)")
        z_c = np.asarray(z_c, dtype=np.float64)
        if words is not None:
            W, Y = self._ids(words), self._ids(labels)
            if W.shape != Y.shape:
                raise ValueError("words and labels differ in length")
            net = self._net()
            _, logp = net.decode_words(net.g.const(z_c[None]), W, Y, np.ones(W.shape))
            return list(W[0]), logp.value[:, 0]
        rng = rng if rng is not None else np.random.default_rng(seed)
        return _sample_words(self, z_c, labels, rng, temperature)

    def prior_sample(self, seed=None, *, rng=None, max_len=30, temperature=1.0, retries=100):
        """Draw (LabeledSentence, LatentPair) from the prior.

        Empty label sequences are redrawn up to ``retries`` times.
        """
        rng = rng if rng is not None else np.random.default_rng(seed)
        for _ in range(retries):
            z_l = rng.standard_normal(self.cfg.switch_dim)
            labels, _, h_last = _sample_labels(self, z_l, rng, temperature, max_len)
            if labels:
                break
        else:
            raise ModelCollapseError(f"{retries} consecutive empty label sequences")
        out = _np_affine(np.concatenate([h_last, z_l]), self.params, "fpc")
        dc = self.cfg.ctx_dim
        z_c = reparameterize(GaussianParams(out[:dc], out[dc:]), rng.standard_normal(dc))
        words, _ = _sample_words(self, z_c, labels, rng, temperature)
        return decode_sentence(self.vocab, words, labels), LatentPair(z_c, z_l)

    def log_likelihood(self, sentence, z):
        """Teacher-forced (label, word) log-likelihood of ``sentence`` given latents."""
        from vacs.data import encode_sentence
        wids, lids = encode_sentence(self.vocab, sentence)
        b = pad_batch([(wids, lids)])
        net = self._net()
        g = net.g
        ll_y, _, _ = net.decode_labels(g.const(np.asarray(z.z_l)[None]), b.labels, b.mask)
        ll_w, _ = net.decode_words(g.const(np.asarray(z.z_c)[None]), b.words, b.labels, b.mask)
        return float(ll_y.value[0]), float(ll_w.value[0])

    # --- persistence ---------------------------------------------------

    def meta(self, extra=None):
        m = {"kind": "vacs", "config": asdict(self.cfg), "vocab": self.vocab.to_dict()}
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
        if meta.get("kind") != "vacs":
            raise checkpoint.CheckpointError(f"{path} is not a VACS checkpoint")
        return cls(VacsConfig(**meta["config"]), Vocabulary.from_dict(meta["vocab"]), tensors)


# ---------------------------------------------------------------------------
# numpy sampling path

def _np_affine(x, P, name):
    return x @ P[f"{name}_w"] + P[f"{name}_b"]


def _np_step(P, cell, x, state, H):
    pre = x @ P[f"{cell}_wx"] + state[:H] @ P[f"{cell}_wh"] + P[f"{cell}_b"]
    _, c, _, h = kernels.lstm_forward(pre[None, :], state[None, H:])
    return np.concatenate([h[0], c[0]])


def _draw(rng, logits, temperature):
    p = softmax(np.asarray(logits) / temperature)
    return int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right").clip(0, p.size - 1))


def _sample_labels(model, z_l, rng, temperature, max_len):
    P, H = model.params, model.cfg.hidden
    state = _np_affine(z_l, P, "apl")
    prev, labels, rows = LABEL_SOS, [], []
    while True:
        state = _np_step(P, "pl", P["emb_label"][prev], state, H)
        logits = state[:H] @ P["fpl_w"] + P["fpl_b"]
        rows.append(logits)
        if len(labels) == max_len:
            break  # forced EOS: this state plays the role of h_O
        y = _draw(rng, logits, temperature)
        if y == LABEL_EOS:
            break
        labels.append(y)
        prev = y
    return labels, np.array(rows), state[:H]


def _sample_words(model, z_c, labels, rng, temperature, allow_unk=False):
    P, H, v = model.params, model.cfg.hidden, model.vocab
    allowed = v.allowed_outputs(with_unk=allow_unk)
    for y in set(labels):
        if not allowed[y].any():
            raise ValueError(f"language {LABELS[y]!r} has no known words to sample")
    state = _np_affine(z_c, P, "apc")
    prev, words, logps = v.sos, [], []
    for y in labels:
        state = _np_step(P, "pc", P["emb_word"][prev], state, H)
        logits = np.concatenate([state[:H], P["emb_label"][y]]) @ P["fpw_w"] + P["fpw_b"]
        logits = np.where(allowed[y], logits / temperature, -np.inf)
        k = _draw(rng, logits, 1.0)
        logps.append(float(logits[k] - np.logaddexp.reduce(logits[allowed[y]])))
        prev = k + v.offset
        words.append(prev)
    return words, np.array(logps)
