"""Compare the compiled and pure-Python LSTM kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Kernel timings use both implementations in one process. The ELBO step
timing runs each backend in a subprocess, selected by VACS_PURE_PYTHON.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vacs import kernels

STEP = """
from vacs.data import ToyConfig, build_vocab, make_batches, synth_toy_corpus
from vacs.model import Vacs, VacsConfig
from vacs.training import elbo
mono, cs = synth_toy_corpus(ToyConfig(n_parallel=64, n_cs=16), 0)
vocab = build_vocab([mono, cs])
model = Vacs.init(VacsConfig(), vocab, 0)
batch = make_batches(mono, 16, 0, vocab)[0]
"""


def bench_kernel(B, H, repeat):
    rng = np.random.default_rng(0)
    pre, c = rng.normal(size=(B, 4 * H)), rng.normal(size=(B, H))
    dh, dc = rng.normal(size=(B, H)), rng.normal(size=(B, H))
    rows = []
    for name, fwd, bwd in (("python", kernels.lstm_forward_py, kernels.lstm_backward_py),
                           ("compiled", kernels.lstm_forward, kernels.lstm_backward)):
        gates, _, tc, _ = fwd(pre, c)
        tf = min(timeit.repeat(lambda: fwd(pre, c), number=50, repeat=repeat)) / 50
        tb = min(timeit.repeat(lambda: bwd(gates, c, tc, dh, dc), number=50, repeat=repeat)) / 50
        rows.append((name, tf, tb))
    return rows


def bench_step(pure, repeat):
    env = dict(os.environ)
    env.pop("VACS_PURE_PYTHON", None)
    if pure:
        env["VACS_PURE_PYTHON"] = "1"
    code = (STEP + "import timeit\nfrom vacs import kernels\n"
            "t = min(timeit.repeat(lambda: elbo(model, batch, 0.5, 0, with_grad=True), number=3, repeat=%d)) / 3\n"
            "print(kernels.BACKEND, t)" % repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    backend, t = out.stdout.split()
    return backend, float(t)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels not built; run `pip install -e .` with Cython available")
    print(f"{'B':>4} {'H':>4} {'backend':>9} {'fwd us':>9} {'bwd us':>9}")
    for B, H in ((1, 128), (16, 128), (64, 256)):
        for name, tf, tb in bench_kernel(B, H, args.repeat):
            print(f"{B:>4} {H:>4} {name:>9} {tf * 1e6:>9.1f} {tb * 1e6:>9.1f}")
    print("\nfull ELBO forward + backward, batch 16, default model")
    for pure in (True, False):
        backend, t = bench_step(pure, args.repeat)
        print(f"  {backend:>8}: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
