"""ELBO with KL annealing, Adam, and the two-phase training loop."""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from vacs.autodiff import Graph, backward
from vacs.data import make_batches
from vacs.model import _reparam_node
from vacs.ops import kl_diag_gaussian_node, kl_standard_normal_node

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 16
    epochs_parallel: int = 2
    epochs_cs: int = 2
    anneal_t0: float = 2500.0
    anneal_k: float = 0.0025
    seed: int = 0
    max_steps: int | None = None   # optional cap across both phases

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ElboBreakdown:
    recon: float
    recon_labels: float
    recon_words: float
    kl_l: float
    kl_c: float
    beta: float
    total: float

    def record(self, **extra):
        return {**extra, **asdict(self)}


def kl_anneal(step, t0, k):
    """Logistic KL weight 1 / (1 + exp(-k (step - t0)))."""
    if step < 0:
        raise ValueError("step must be >= 0")
    x = -k * (step - t0)
    if x > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(x))


def elbo_graph(net, batch, beta, noise_c, noise_l):
    """Build the batch-mean ELBO on ``net``'s graph.

    Single-sample estimator: z_c and z_l are reparameterised draws from
    the encoder; both KL terms are closed-form diagonal-Gaussian KLs.
    Returns a dict of nodes (``total`` is the scalar objective).
    """
    g = net.g
    mu_c, lv_c = net.encode_context(batch.words, batch.mask)
    z_c = _reparam_node(g, mu_c, lv_c, noise_c)
    mu_l, lv_l = net.encode_switching(z_c, batch.labels, batch.mask)
    z_l = _reparam_node(g, mu_l, lv_l, noise_l)
    ll_y, h_last, _ = net.decode_labels(z_l, batch.labels, batch.mask)
    mu_pc, lv_pc = net.decode_context_params(z_l, h_last)
    ll_w, _ = net.decode_words(z_c, batch.words, batch.labels, batch.mask)
    kl_l = kl_standard_normal_node(g, mu_l, lv_l)
    kl_c = kl_diag_gaussian_node(g, mu_c, lv_c, mu_pc, lv_pc)
    per_row = g.sub(g.add(ll_y, ll_w), g.scale(g.add(kl_l, kl_c), beta))
    return {"total": g.mean(per_row), "per_row": per_row, "ll_y": ll_y, "ll_w": ll_w,
            "kl_l": kl_l, "kl_c": kl_c, "z_c": z_c, "z_l": z_l}


def draw_noise(model, batch, seed):
    rng = np.random.default_rng(seed)
    B = len(batch)
    return rng.standard_normal((B, model.cfg.ctx_dim)), rng.standard_normal((B, model.cfg.switch_dim))


def breakdown(nodes, beta):
    mean = lambda n: float(np.mean(n.value))  # noqa: E731
    ly, lw = mean(nodes["ll_y"]), mean(nodes["ll_w"])
    return ElboBreakdown(ly + lw, ly, lw, mean(nodes["kl_l"]), mean(nodes["kl_c"]), beta,
                         float(nodes["total"].value))


def elbo(model, batch, beta, seed, with_grad=False):
    """Batch-mean ELBO; with ``with_grad`` also returns gradients of the total."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    g = Graph()
    net = model.bind(g)
    nc, nl = draw_noise(model, batch, seed)
    nodes = elbo_graph(net, batch, beta, nc, nl)
    out = breakdown(nodes, beta)
    if with_grad:
        return out, backward(g, nodes["total"])
    return out


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params, grads, state, cfg):
    """One in-place Adam update (bias-corrected) after global-norm clipping.

    Ascent or descent is the caller's business: ``grads`` are gradients of
    the loss to minimise.
    """
    for k in sorted(grads):
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradientError(f"non-finite gradient in {k!r}")
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(grads):
        g = grads[k]
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state, norm


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: object
    log: list
    checkpoints: list
    steps: int


def train(model, parallel, real_cs, cfg, out_dir=None, log_path=None, callback=None):
    """Phase 1 on the parallel corpus, phase 2 on code-switched text.

    The annealing step counter runs across both phases. Writes a checkpoint
    per epoch when ``out_dir`` is given. Returns a :class:`TrainResult`;
    on a non-finite loss raises :class:`DivergenceError` carrying the
    path of the last good checkpoint.
    """
    cfg.validate()
    if len(parallel) == 0 or len(real_cs) == 0:
        raise ValueError("both training corpora must be non-empty")
    model = model.copy()
    state = AdamState.zeros_like(model.params)
    records, ckpts = [], []
    last_good = None
    step = 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        phases = [("parallel", parallel, cfg.epochs_parallel), ("cs", real_cs, cfg.epochs_cs)]
        for phase_no, (phase, corpus, epochs) in enumerate(phases, 1):
            for epoch in range(epochs):
                batches = make_batches(corpus, cfg.batch_size,
                                       _seed(cfg.seed, phase_no, epoch), model.vocab)
                for batch in batches:
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                    beta = kl_anneal(step, cfg.anneal_t0, cfg.anneal_k)
                    br, grads = elbo(model, batch, beta, _seed(cfg.seed, phase_no, epoch, step),
                                     with_grad=True)
                    if not math.isfinite(br.total):
                        raise DivergenceError(f"non-finite ELBO at step {step}", last_good)
                    neg = {k: -g for k, g in grads.items()}
                    try:
                        adam_step(model.params, neg, state, cfg)
                    except NonFiniteGradientError as e:
                        raise DivergenceError(f"step {step}: {e}", last_good) from None
                    rec = br.record(step=step, epoch=epoch, phase=phase)
                    records.append(rec)
                    if logf:
                        logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    if callback:
                        callback(rec)
                    step += 1
                if out_dir is not None:
                    path = os.path.join(out_dir, f"vacs-{phase}-e{epoch}.ckpt")
                    model.save(path, extra={"step": step, "phase": phase, "epoch": epoch})
                    ckpts.append(path)
                    last_good = path
                log.info("phase %s epoch %d step %d elbo %.3f", phase, epoch, step,
                         records[-1]["total"] if records else float("nan"))
    finally:
        if logf:
            logf.close()
    return TrainResult(model, records, ckpts, step)


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0]


def smoothed(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        window = max(1, v.size)
    return np.convolve(v, np.ones(window) / window, mode="valid")
