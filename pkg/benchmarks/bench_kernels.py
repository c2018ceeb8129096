"""Benchmark the compiled kernels against the pure-numpy fallbacks.

Two views:
  * per-kernel micro-benchmarks: each compiled function from
    dialtask._ckernels is timed against its ``*_numpy`` twin in-process. The
    "bound" column shows which implementation dialtask.kernels actually uses
    (the fused softmax/layernorm kernels win compiled; element-wise GELU stays
    on numpy because numpy's vectorized tanh beats the scalar loop),
  * an end-to-end encoder step (forward + backward over a tokenized batch) on
    the active backend; the all-numpy number comes from re-running this script
    in a subprocess with DIALTASK_PURE=1, since bindings are fixed at import.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--skip-encoder]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from dialtask import kernels as K
from dialtask.encoder import EncoderConfig, ReferenceEncoder
from dialtask.synth import make_corpus
from dialtask.trainer import vocab_from_corpus

SHAPES = [(256, 128), (1024, 512)]


def _time(fn, repeats: int) -> float:
    """Median wall time per call in microseconds, after a warmup call."""
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e6)
    return float(np.median(samples))


def kernel_cases(ck, shape: tuple[int, int]):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    p = K.softmax_rows_numpy(x)
    dp = rng.normal(size=shape)
    gain = rng.normal(size=shape[1])
    bias = rng.normal(size=shape[1])
    _, xhat, rstd = K.layernorm_rows_numpy(x, gain, bias)
    dy = rng.normal(size=shape)
    return [
        ("gelu", ck.gelu, K.gelu_numpy, K.gelu, (x,)),
        ("gelu_grad", ck.gelu_grad, K.gelu_grad_numpy, K.gelu_grad, (x,)),
        ("softmax_rows", ck.softmax_rows, K.softmax_rows_numpy, K.softmax_rows, (x,)),
        ("softmax_rows_grad", ck.softmax_rows_grad, K.softmax_rows_grad_numpy,
         K.softmax_rows_grad, (p, dp)),
        ("layernorm_rows", ck.layernorm_rows, K.layernorm_rows_numpy, K.layernorm_rows,
         (x, gain, bias)),
        ("layernorm_rows_grad", ck.layernorm_rows_grad, K.layernorm_rows_grad_numpy,
         K.layernorm_rows_grad, (dy, xhat, rstd, gain)),
    ]


def bench_kernels(ck, repeats: int) -> None:
    for shape in SHAPES:
        print(f"\nshape {shape[0]}x{shape[1]}  ({repeats} repeats, median us/call)")
        print(f"  {'kernel':<20} {'compiled':>10} {'numpy':>10} {'speedup':>8}  bound")
        for name, compiled, fallback, bound, args in kernel_cases(ck, shape):
            t_c = _time(lambda: compiled(*args), repeats)
            t_n = _time(lambda: fallback(*args), repeats)
            which = "compiled" if bound is compiled else "numpy"
            print(f"  {name:<20} {t_c:>10.1f} {t_n:>10.1f} {t_n / t_c:>7.2f}x  {which}")


def bench_encoder(repeats: int) -> float:
    """Median ms per encoder forward+backward step on the active backend."""
    corpus = make_corpus(16, seed=3)
    vocab = vocab_from_corpus(corpus)
    enc = ReferenceEncoder(EncoderConfig(d_model=64, n_layers=2, n_heads=4, max_len=128),
                           vocab, seed=0)
    seqs = [enc.tokenize_dialogue(d) for d in corpus.dialogues]
    out = enc.encode_batch(seqs, with_cache=True)
    d_tokens = np.random.default_rng(1).normal(size=out.token_vectors.shape)

    def step():
        o = enc.encode_batch(seqs, with_cache=True)
        enc.backward(o, d_tokens)

    step()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--skip-encoder", action="store_true",
                    help="only run the per-kernel micro-benchmarks")
    ap.add_argument("--encoder-json", action="store_true",
                    help="internal: print encoder ms/step as JSON and exit")
    args = ap.parse_args(argv)

    if args.encoder_json:
        print(json.dumps({"backend": K.backend(),
                          "ms_per_step": bench_encoder(args.repeats)}))
        return 0

    print(f"active backend: {K.backend()}")
    try:
        from dialtask import _ckernels
    except ImportError:
        _ckernels = None
    if _ckernels is None:
        print("compiled extension not importable; skipping kernel comparison")
    else:
        bench_kernels(_ckernels, args.repeats)

    if not args.skip_encoder:
        ms_active = bench_encoder(args.repeats)
        print(f"\nencoder forward+backward (16 dialogues, d=64, 2 layers)")
        print(f"  {K.backend():<10} {ms_active:>8.1f} ms/step")
        if K.backend() == "compiled":
            env = dict(os.environ, DIALTASK_PURE="1")
            proc = subprocess.run(
                [sys.executable, __file__, "--encoder-json", "--repeats", str(args.repeats)],
                capture_output=True, text=True, env=env, check=True)
            pure = json.loads(proc.stdout)
            print(f"  {pure['backend']:<10} {pure['ms_per_step']:>8.1f} ms/step "
                  f"(speedup {pure['ms_per_step'] / ms_active:.2f}x)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
