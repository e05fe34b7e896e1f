import math

import numpy as np
import pytest

from vacs.autodiff import Graph, grad_check
from vacs.data import LabeledSentence, Vocabulary, encode_sentence, pad_batch
from vacs.model import (GaussianParams, LatentPair, ModelCollapseError, Vacs, VacsConfig,
                        param_shapes, reparameterize)

TINY = VacsConfig(word_dim=4, label_dim=3, hidden=5, ctx_dim=2, switch_dim=2)
VOCAB = Vocabulary(["ek", "do", "teen"], ["one", "two"])


def rand_model(seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    params = {k: rng.uniform(-scale, scale, s) for k, s in param_shapes(TINY, VOCAB).items()}
    return Vacs(TINY, VOCAB, params)


def zero_model(vocab=VOCAB):
    return Vacs.zeros(TINY, vocab)


def test_encode_context_zero_params():
    g = zero_model().encode_context([4, 5, 8])
    np.testing.assert_array_equal(g.mean, 0.0)
    np.testing.assert_array_equal(g.logvar, 0.0)
    np.testing.assert_array_equal(g.std, 1.0)


def test_encode_context_deterministic_and_order_sensitive():
    m = rand_model()
    a, b = m.encode_context([4, 8]), m.encode_context([4, 8])
    np.testing.assert_array_equal(a.mean, b.mean)
    c = m.encode_context([8, 4])
    assert not np.allclose(a.mean, c.mean)


def test_encode_context_empty():
    with pytest.raises(ValueError):
        zero_model().encode_context([])


def test_encode_switching():
    z = zero_model().encode_switching(np.ones(2), [0, 1, 1])
    np.testing.assert_array_equal(z.mean, 0.0)
    m = rand_model()
    a = m.encode_switching(np.zeros(2), [0, 1])
    b = m.encode_switching(np.array([1.0, -1.0]), [0, 1])
    assert not np.allclose(a.mean, b.mean)
    s = m.encode_switching(np.zeros(2), [0, 0, 0])
    t = m.encode_switching(np.zeros(2), [1, 1, 1])
    assert not np.allclose(s.mean, t.mean)
    with pytest.raises(ValueError):
        m.encode_switching(np.zeros(2), [])


def test_reparameterize():
    g = GaussianParams(np.array([1.5, -2.0]), np.array([0.3, 1.0]))
    np.testing.assert_array_equal(reparameterize(g, np.zeros(2)), g.mean)
    eps = np.array([0.7, -0.1])
    np.testing.assert_array_equal(reparameterize(GaussianParams(np.zeros(2), np.zeros(2)), eps), eps)
    z = reparameterize(GaussianParams(np.array([1.0]), np.array([math.log(4)])), np.array([0.5]))
    assert z[0] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        reparameterize(g, np.zeros(3))


def test_decode_labels_teacher_forced_rows():
    m = rand_model()
    for n in (1, 4):
        labels, logits, h = m.decode_labels(np.zeros(2), labels=[0, 1, 1, 0][:n])
        assert logits.shape == (n + 1, 3) and h.shape == (5,)


def test_decode_labels_zero_params_uniform():
    _, logits, _ = zero_model().decode_labels(np.zeros(2), seed=0, max_len=5)
    for row in logits:
        p = np.exp(row) / np.exp(row).sum()
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_decode_labels_sampling_deterministic_and_capped():
    m = rand_model(scale=1.0)
    a = m.decode_labels(np.ones(2), seed=5)[0]
    b = m.decode_labels(np.ones(2), seed=5)[0]
    assert a == b
    for s in range(30):
        assert len(m.decode_labels(np.ones(2), seed=s, max_len=2)[0]) <= 2
    with pytest.raises(ValueError):
        m.decode_labels(np.ones(2), seed=0, max_len=0)


def test_decode_context_params():
    m = zero_model()
    g = m.decode_context_params(np.ones(2), np.ones(5))
    np.testing.assert_array_equal(g.mean, 0.0)
    assert g.mean.shape == g.logvar.shape == (2,)
    r = rand_model()
    a = r.decode_context_params(np.ones(2), np.zeros(5))
    b = r.decode_context_params(np.ones(2), np.full(5, 0.3))
    assert not np.allclose(a.mean, b.mean)
    with pytest.raises(ValueError):
        r.decode_context_params(np.ones(3), np.zeros(5))


def test_sampled_words_respect_language():
    m = rand_model(scale=1.0)
    rng = np.random.default_rng(0)
    for _ in range(1000 // 5):
        labels = list(rng.integers(0, 2, 5))
        words, _ = m.decode_words(rng.normal(size=2), labels, rng=rng)
        for w, y in zip(words, labels):
            assert VOCAB.language(w) == "st"[y]


def test_decode_words_zero_params_uniform_over_language():
    # with UNK excluded from sampling, the s side has 3 words and the t side 2
    _, logps = zero_model().decode_words(np.zeros(2), [0, 1, 0], seed=1)
    np.testing.assert_allclose(logps, [math.log(1 / 3), math.log(1 / 2), math.log(1 / 3)], atol=1e-14)


def test_decode_words_rejects_eos_labels():
    with pytest.raises(ValueError):
        zero_model().decode_words(np.zeros(2), [0, 2, 1], seed=0)


def _np_lstm(x, h, c, wx, wh, b):
    pre = x @ wx + h @ wh + b
    H = h.size
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o, gg = sig(pre[:H]), sig(pre[H:2 * H]), sig(pre[2 * H:3 * H]), np.tanh(pre[3 * H:])
    c = f * c + i * gg
    return o * np.tanh(c), c


def test_teacher_forced_word_logprob_hand_accumulation():
    # a two-word vocabulary: one s word and one t word, plus each side's UNK
    vocab = Vocabulary(["ek"], ["one"])
    rng = np.random.default_rng(4)
    P = {k: rng.uniform(-0.7, 0.7, s) for k, s in param_shapes(TINY, vocab).items()}
    m = Vacs(TINY, vocab, P)
    z_c = np.array([0.4, -1.1])
    words, labels = [vocab.source["ek"], vocab.target["one"], vocab.unk_s], [0, 1, 0]
    _, logps = m.decode_words(z_c, labels, words=words)

    init = z_c @ P["apc_w"] + P["apc_b"]
    h, c = init[:5], init[5:]
    prev, total, steps = vocab.sos, 0.0, []
    allowed = {0: [0, 1], 1: [2, 3]}  # output positions for (UNK-s, ek) and (UNK-t, one)
    for w, y in zip(words, labels):
        h, c = _np_lstm(P["emb_word"][prev], h, c, P["pc_wx"], P["pc_wh"], P["pc_b"])
        logits = np.concatenate([h, P["emb_label"][y]]) @ P["fpw_w"] + P["fpw_b"]
        sel = logits[allowed[y]]
        lp = logits[w - vocab.offset] - math.log(sum(math.exp(v) for v in sel))
        steps.append(lp)
        total += lp
        prev = w
    np.testing.assert_allclose(logps, steps, atol=1e-12)
    assert logps.sum() == pytest.approx(total, abs=1e-12)


def test_masked_word_distribution():
    m = rand_model(1, scale=1.0)
    g = Graph()
    net = m.bind(g)
    W = np.array([[4, 8, 5]])
    Y = np.array([[0, 1, 0]])
    _, logp = net.decode_words(g.const(np.ones((1, 2))), W, Y, np.ones((1, 3)))
    # read the full masked log-softmax rows off the graph
    allowed = VOCAB.allowed_outputs()
    logits_node = [n for n in g.nodes if n.op == "log_softmax"][0]
    probs = np.exp(logits_node.value)
    for row, y in zip(probs, Y[0]):
        assert abs(row[allowed[y]].sum() - 1.0) < 1e-6
        assert (row[~allowed[y]] == 0.0).all()


def test_factorization_halves_sum_to_joint():
    m = rand_model(2)
    sent = LabeledSentence(["ek", "one", "two", "do"], ["s", "t", "t", "s"])
    z = LatentPair(np.array([0.2, -0.3]), np.array([1.0, 0.5]))
    ll_y, ll_w = m.log_likelihood(sent, z)
    labels, logits, _ = m.decode_labels(z.z_l, labels=[0, 1, 1, 0])
    targets = [0, 1, 1, 0, 2]
    ly = sum(r[t] - np.logaddexp.reduce(r) for r, t in zip(logits, targets))
    wids, lids = encode_sentence(VOCAB, sent)
    _, lw = m.decode_words(z.z_c, lids, words=wids)
    assert abs((ll_y + ll_w) - (ly + lw.sum())) < 1e-10


def test_prior_sample_deterministic_and_consistent():
    m = rand_model(3, scale=1.0)
    a, za = m.prior_sample(seed=11)
    b, zb = m.prior_sample(seed=11)
    assert a == b
    np.testing.assert_array_equal(za.z_c, zb.z_c)
    for s in range(20):
        sent, _ = m.prior_sample(seed=s)
        for w, y in zip(sent.words, sent.labels):
            assert w in (VOCAB.source if y == "s" else VOCAB.target)


def test_prior_zero_params_geometric_length():
    # zero logits give EOS with probability 1/3 at each step; conditioning on a
    # non-empty sequence leaves a mean of 1 + (2/3)/(1/3) = 3
    m = zero_model()
    rng = np.random.default_rng(0)
    lengths = [len(m.prior_sample(rng=rng, max_len=200)[0]) for _ in range(10_000)]
    assert np.mean(lengths) == pytest.approx(3.0, abs=0.1)


def test_prior_collapse():
    m = zero_model()
    m.params["fpl_b"][:] = [-50.0, -50.0, 50.0]  # EOS always
    with pytest.raises(ModelCollapseError):
        m.prior_sample(seed=0, retries=5)


def test_checkpoint_roundtrip(tmp_path):
    m = Vacs.init(TINY, VOCAB, seed=3)
    m.save(tmp_path / "m.ckpt")
    back = Vacs.load(tmp_path / "m.ckpt")
    assert back.vocab == m.vocab and back.cfg == m.cfg
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.digest() == m.digest()


def test_init_forget_bias_and_range():
    m = Vacs.init(TINY, VOCAB, seed=0)
    np.testing.assert_array_equal(m.params["pc_b"][5:10], 1.0)
    assert np.abs(m.params["qc_wx"]).max() <= 0.08
    np.testing.assert_array_equal(m.params["fpw_b"], 0.0)


def test_heads_variance_positive():
    m = rand_model(5, scale=3.0)
    assert (m.encode_context([4, 5]).std > 0).all()


def test_joint_loglik_gradient():
    vocab = Vocabulary(["ek"], ["one"])
    cfg = VacsConfig(word_dim=2, label_dim=2, hidden=3, ctx_dim=2, switch_dim=2)
    rng = np.random.default_rng(8)
    point = {k: rng.uniform(-0.5, 0.5, s) for k, s in param_shapes(cfg, vocab).items()}
    enc = [encode_sentence(vocab, LabeledSentence(w, y)) for w, y in
           [(["ek", "one"], ["s", "t"]), (["one"], ["t"])]]
    b = pad_batch(enc)
    z_c, z_l = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))

    def fn(g, P):
        from vacs.model import Net
        net = Net(g, P, cfg, vocab)
        ll_y, h, _ = net.decode_labels(g.const(z_l), b.labels, b.mask)
        ll_w, _ = net.decode_words(g.const(z_c), b.words, b.labels, b.mask)
        mu, lv = net.encode_context(b.words, b.mask)
        return g.add(g.sum(g.add(ll_y, ll_w)), g.sum(g.mul(mu, lv)))

    assert grad_check(fn, point, 1e-6) < 1e-4
