import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vacs.autodiff import Graph, grad_check
from vacs.data import (LabeledSentence, ToyConfig, Vocabulary, build_vocab, encode_sentence,
                       pad_batch, synth_toy_corpus, Corpus)
from vacs.model import Net, Vacs, VacsConfig, param_shapes
from vacs.training import (AdamState, DivergenceError, NonFiniteGradientError, TrainConfig,
                           adam_step, elbo, elbo_graph, kl_anneal, smoothed, train)

TINY = VacsConfig(word_dim=4, label_dim=3, hidden=5, ctx_dim=2, switch_dim=2)
VOCAB = Vocabulary(["ek", "do", "teen"], ["one", "two"])


def rand_model(seed=0, scale=0.5, cfg=TINY, vocab=VOCAB):
    rng = np.random.default_rng(seed)
    return Vacs(cfg, vocab, {k: rng.uniform(-scale, scale, s)
                             for k, s in param_shapes(cfg, vocab).items()})


def batch_of(*pairs, vocab=VOCAB):
    return pad_batch([encode_sentence(vocab, LabeledSentence(w, y)) for w, y in pairs])


def test_zero_params_single_word_closed_form():
    b = batch_of((["ek"], ["s"]))
    br = elbo(Vacs.zeros(TINY, VOCAB), b, beta=1.0, seed=0)
    # label step + EOS step at 1/3 each; the s side offers 3 words plus its UNK
    assert br.recon == pytest.approx(2 * math.log(1 / 3) + math.log(1 / 4), abs=1e-12)
    assert br.kl_l == pytest.approx(0.0, abs=1e-15)
    assert br.kl_c == pytest.approx(0.0, abs=1e-15)
    assert br.total == pytest.approx(br.recon, abs=1e-12)


def test_beta_out_of_range():
    b = batch_of((["ek"], ["s"]))
    with pytest.raises(ValueError):
        elbo(Vacs.zeros(TINY, VOCAB), b, beta=1.5, seed=0)


def test_kl_terms_nonnegative_random_batches():
    rng = np.random.default_rng(0)
    words = {"s": ["ek", "do", "teen"], "t": ["one", "two"]}
    for k in range(100):
        m = rand_model(k, scale=1.5)
        pairs = []
        for _ in range(rng.integers(1, 4)):
            ys = list(rng.choice(["s", "t"], rng.integers(1, 5)))
            pairs.append(([rng.choice(words[y]) for y in ys], ys))
        g = Graph()
        nodes = elbo_graph(m.bind(g), batch_of(*pairs), 0.3,
                           rng.normal(size=(len(pairs), 2)), rng.normal(size=(len(pairs), 2)))
        assert (nodes["kl_l"].value >= 0).all() and (nodes["kl_c"].value >= 0).all()
        total = nodes["ll_y"].value + nodes["ll_w"].value - 0.3 * (nodes["kl_l"].value + nodes["kl_c"].value)
        np.testing.assert_allclose(nodes["per_row"].value, total, rtol=1e-12)


# --- an independent single-sentence numpy forward of the whole objective ---

def _sig(v):
    return 1 / (1 + np.exp(-v))


def _cell(P, name, x, h, c):
    pre = x @ P[name + "_wx"] + h @ P[name + "_wh"] + P[name + "_b"]
    H = h.size
    c = _sig(pre[H:2 * H]) * c + _sig(pre[:H]) * np.tanh(pre[3 * H:])
    return _sig(pre[2 * H:3 * H]) * np.tanh(c), c


def _head(P, name, x):
    return x @ P[name + "_w"] + P[name + "_b"]


def _log_softmax(v):
    m = v.max()
    return v - m - math.log(np.exp(v - m).sum())


def _kl(mq, lq, mp, lp):
    return 0.5 * float(np.sum(lp - lq + (np.exp(lq) + (mq - mp) ** 2) / np.exp(lp) - 1))


def np_elbo_row(model, wids, lids, eps_c, eps_l, beta):
    P, cfg, v = model.params, model.cfg, model.vocab
    H, dc, dl = cfg.hidden, cfg.ctx_dim, cfg.switch_dim
    h = c = np.zeros(H)
    for w in wids:
        h, c = _cell(P, "qc", P["emb_word"][w], h, c)
    out = _head(P, "fqc", h)
    mu_c, lv_c = out[:dc], out[dc:]
    z_c = mu_c + np.exp(0.5 * lv_c) * eps_c
    s = _head(P, "acl", z_c)
    h, c = s[:H], s[H:]
    for y in lids:
        h, c = _cell(P, "ql", P["emb_label"][y], h, c)
    out = _head(P, "fql", h)
    mu_l, lv_l = out[:dl], out[dl:]
    z_l = mu_l + np.exp(0.5 * lv_l) * eps_l
    s = _head(P, "apl", z_l)
    h, c = s[:H], s[H:]
    ll_y = 0.0
    for prev, target in zip([3] + list(lids), list(lids) + [2]):
        h, c = _cell(P, "pl", P["emb_label"][prev], h, c)
        ll_y += _log_softmax(_head(P, "fpl", h))[target]
    out = _head(P, "fpc", np.concatenate([h, z_l]))
    mu_p, lv_p = out[:dc], out[dc:]
    s = _head(P, "apc", z_c)
    h, c = s[:H], s[H:]
    ll_w, prev = 0.0, v.sos
    masks = v.allowed_outputs()
    for w, y in zip(wids, lids):
        h, c = _cell(P, "pc", P["emb_word"][prev], h, c)
        logits = _head(P, "fpw", np.concatenate([h, P["emb_label"][y]]))
        allowed = np.flatnonzero(masks[y])
        ll_w += _log_softmax(logits[allowed])[list(allowed).index(w - v.offset)]
        prev = w
    kl_l = _kl(mu_l, lv_l, np.zeros(dl), np.zeros(dl))
    kl_c = _kl(mu_c, lv_c, mu_p, lv_p)
    return ll_y + ll_w - beta * (kl_l + kl_c)


SENT = (["ek", "one", "two", "do"], ["s", "t", "t", "s"])


def test_graph_elbo_matches_numpy_forward_on_same_noise():
    m = rand_model(3, scale=0.8)
    wids, lids = encode_sentence(VOCAB, LabeledSentence(*SENT))
    b = batch_of(SENT, (["two"], ["t"]))
    rng = np.random.default_rng(1)
    ec, el = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    g = Graph()
    nodes = elbo_graph(m.bind(g), b, 0.7, ec, el)
    rows = nodes["per_row"].value
    assert abs(rows[0] - np_elbo_row(m, wids, lids, ec[0], el[0], 0.7)) < 1e-10
    w2, l2 = encode_sentence(VOCAB, LabeledSentence(["two"], ["t"]))
    assert abs(rows[1] - np_elbo_row(m, w2, l2, ec[1], el[1], 0.7)) < 1e-10


def test_batched_estimate_matches_monte_carlo_oracle():
    n = 10_000
    m = rand_model(4, scale=0.8)
    wids, lids = encode_sentence(VOCAB, LabeledSentence(*SENT))
    b = pad_batch([(wids, lids)] * n)
    g = Graph()
    rng = np.random.default_rng(10)
    nodes = elbo_graph(m.bind(g), b, 1.0, rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    est = nodes["per_row"].value
    oracle_rng = np.random.default_rng(99)
    ref = np.array([np_elbo_row(m, wids, lids, oracle_rng.normal(size=2), oracle_rng.normal(size=2), 1.0)
                    for _ in range(n)])
    sigma = math.sqrt(est.var(ddof=1) / n + ref.var(ddof=1) / n)
    assert abs(est.mean() - ref.mean()) < 2 * sigma


def test_kl_anneal_values():
    assert kl_anneal(2500, 2500, 0.0025) == 0.5
    # 1 / (1 + exp(6.25))
    assert kl_anneal(0, 2500, 0.0025) == pytest.approx(0.0019267, abs=1e-7)
    # at t0 + 10/k the gap to 1 is exp(-10) / (1 + exp(-10))
    assert 1 - kl_anneal(2500 + 10 / 0.0025, 2500, 0.0025) == pytest.approx(4.5398e-5, rel=1e-4)
    assert 1 - kl_anneal(2500 + 14 / 0.0025, 2500, 0.0025) < 1e-6
    assert kl_anneal(10**9, 2500, 0.0025) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.floats(0, 10**5), st.floats(1e-5, 1.0))
def test_kl_anneal_monotone_bounded(a, b, t0, k):
    lo, hi = sorted((a, b))
    x, y = kl_anneal(lo, t0, k), kl_anneal(hi, t0, k)
    assert 0.0 <= x <= y <= 1.0


def _cfg(**kw):
    return TrainConfig(**kw)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), _cfg())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array(0.5)}
    adam_step(p, {"w": np.array(1.0)}, AdamState.zeros_like(p), _cfg(lr=0.001))
    assert float(p["w"]) == pytest.approx(0.5 - 0.001, abs=1e-10)


def test_adam_lr_zero_bit_identical():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    before = {k: v.copy() for k, v in p.items()}
    cfg = TrainConfig()
    cfg.lr = 0.0
    st_ = AdamState.zeros_like(p)
    for _ in range(3):
        adam_step(p, {k: rng.normal(size=v.shape) for k, v in p.items()}, st_, cfg)
    for k in p:
        assert p[k].tobytes() == before[k].tobytes()


def test_adam_clipping_equals_prescaled_gradient():
    g = {"w": np.array([6.0, 8.0])}  # norm 10
    p1, p2 = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    _, _, norm = adam_step(p1, g, AdamState.zeros_like(p1), _cfg(clip_norm=1.0))
    adam_step(p2, {"w": g["w"] * 0.1}, AdamState.zeros_like(p2), _cfg(clip_norm=100.0))
    assert norm == pytest.approx(10.0)
    np.testing.assert_array_equal(p1["w"], p2["w"])


def test_adam_non_finite_names_tensor():
    p = {"good": np.zeros(2), "bad": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step(p, {"good": np.zeros(2), "bad": np.array([np.nan, 0])},
                  AdamState.zeros_like(p), _cfg())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0).validate()


def small_world():
    mono, cs = synth_toy_corpus(ToyConfig(vocab_size=20, n_parallel=12, n_cs=12, length_mean=5,
                                          length_std=1, max_len=8), 0)
    return mono, cs, build_vocab([mono, cs])


def test_train_is_deterministic_and_phase_two_continues(tmp_path):
    mono, cs, vocab = small_world()
    init = Vacs.init(TINY, vocab, seed=0)
    cfg = TrainConfig(batch_size=4, epochs_parallel=1, epochs_cs=1, seed=3)
    a = train(init, mono, cs, cfg, out_dir=tmp_path / "a")
    b = train(init, mono, cs, cfg, out_dir=tmp_path / "b")
    assert [os.path.basename(p) for p in a.checkpoints] == ["vacs-parallel-e0.ckpt", "vacs-cs-e0.ckpt"]
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    phase1 = Vacs.load(a.checkpoints[0])
    phase2 = Vacs.load(a.checkpoints[1])
    assert phase1.digest() != init.digest()
    assert phase2.digest() != phase1.digest()
    # the global step counter carries across the phase boundary
    steps = [r["step"] for r in a.log]
    assert steps == list(range(len(steps)))
    assert {r["phase"] for r in a.log} == {"parallel", "cs"}


def test_train_log_records(tmp_path):
    mono, cs, vocab = small_world()
    cfg = TrainConfig(batch_size=6, epochs_parallel=1, epochs_cs=1)
    res = train(Vacs.init(TINY, vocab, seed=0), mono, cs, cfg, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == res.steps
    for key in ("step", "epoch", "phase", "beta", "recon", "kl_l", "kl_c", "total"):
        assert key in lines[0]


def test_train_divergence_reports_last_checkpoint(tmp_path):
    mono, cs, vocab = small_world()
    m = Vacs.init(TINY, vocab, seed=0)
    m.params["fpw_b"][0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(m, mono, cs, TrainConfig(batch_size=4), out_dir=tmp_path)
    assert err.value.last_checkpoint is None


def test_train_rejects_empty_corpus():
    mono, cs, vocab = small_world()
    with pytest.raises(ValueError):
        train(Vacs.init(TINY, vocab, seed=0), mono, Corpus([]), TrainConfig())


def test_smoothed_elbo_improves_on_toy_corpus():
    mono, cs = synth_toy_corpus(ToyConfig(), 7)
    vocab = build_vocab([mono, cs])
    cfg = TrainConfig(epochs_parallel=2, epochs_cs=1, max_steps=260, seed=1)
    res = train(Vacs.init(VacsConfig(), vocab, seed=1), mono, cs, cfg)
    curve = smoothed([r["total"] for r in res.log], 50)
    assert curve[200] > curve[0]


def test_smoothed_window():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])


def test_full_elbo_gradient_on_two_word_batch():
    vocab = Vocabulary(["ek"], ["one"])
    cfg = VacsConfig(word_dim=3, label_dim=2, hidden=4, ctx_dim=2, switch_dim=2)
    rng = np.random.default_rng(6)
    point = {k: rng.uniform(-0.5, 0.5, s) for k, s in param_shapes(cfg, vocab).items()}
    b = batch_of((["ek", "one"], ["s", "t"]), vocab=vocab)
    nc, nl = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    err = grad_check(lambda g, P: elbo_graph(Net(g, P, cfg, vocab), b, 1.0, nc, nl)["total"], point, 1e-5)
    assert err < 1e-4
