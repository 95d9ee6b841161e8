"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--rows 18] [--d 64] [--heads 4] [--repeat 2000]

Kernel timings call both families directly. The end-to-end line runs one
forward+backward of the default model in a subprocess per backend, since
the backend is fixed at import time by ``SEMTOK_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from semtok import kernels
from semtok._jit import HAVE_NUMBA

E2E = """
import time, numpy as np
from semtok import tensor as T
from semtok.budget import total_loss
from semtok.kernels import BACKEND
from semtok.transformer import Model, ModelConfig
m = Model(ModelConfig())
x = np.random.default_rng(0).uniform(0, 1, (1, 32, 32))
def step():
    logits, state, _ = m.forward(x, 0.5)
    total_loss(logits, 1, state.cost_tensor, 0.5, 1.0)[0].backward()
for _ in range(5):
    step()
t0 = time.perf_counter()
for _ in range({n}):
    step()
print(BACKEND, (time.perf_counter() - t0) / {n})
"""


def cases(rows, d, heads):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, d))
    g = rng.standard_normal((rows, d))
    gain, bias = rng.standard_normal(d), rng.standard_normal(d)
    mask = np.ones((rows, rows), dtype=bool)
    scores = rng.standard_normal((rows, rows))
    keymask = np.ones(rows, dtype=bool)
    keymask[-3:] = False
    q, k, v = (rng.standard_normal((rows, d)) for _ in range(3))
    _, xhat, rstd = kernels.np_layernorm_fwd(x, gain, bias, 1e-6)
    y = kernels.np_softmax_fwd(scores, mask)
    _, p = kernels.np_attention_fwd(q, k, v, heads, keymask)
    return {
        "layernorm_fwd": ("layernorm_fwd", (x, gain, bias, 1e-6)),
        "layernorm_bwd": ("layernorm_bwd", (g, xhat, rstd, gain)),
        "softmax_fwd": ("softmax_fwd", (scores, mask)),
        "softmax_bwd": ("softmax_bwd", (scores, y)),
        "gelu_fwd": ("gelu_fwd", (x,)),
        "gelu_bwd": ("gelu_bwd", (g, x)),
        "attention_fwd": ("attention_fwd", (q, k, v, heads, keymask)),
        "attention_bwd": ("attention_bwd", (g, q, k, v, p, heads)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=18)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--e2e-steps", type=int, default=50)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba not installed; nothing to compare", file=sys.stderr)
        return 1
    print(f"rows={args.rows} d={args.d} heads={args.heads}, mean of {args.repeat} calls")
    print(f"{'kernel':<16}{'numpy us':>10}{'numba us':>10}{'speedup':>9}")
    for label, (name, call_args) in cases(args.rows, args.d, args.heads).items():
        np_fn, nb_fn = getattr(kernels, "np_" + name), getattr(kernels, "nb_" + name)
        nb_fn(*call_args)  # compile
        t_np = timeit.timeit(lambda: np_fn(*call_args), number=args.repeat) / args.repeat * 1e6
        t_nb = timeit.timeit(lambda: nb_fn(*call_args), number=args.repeat) / args.repeat * 1e6
        print(f"{label:<16}{t_np:>10.1f}{t_nb:>10.1f}{t_np / t_nb:>8.2f}x")

    print("\nforward+backward, default model:")
    for flag in ("0", "1"):
        env = dict(os.environ, SEMTOK_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E.format(n=args.e2e_steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]) * 1e3:.2f} ms/sample")
    return 0


if __name__ == "__main__":
    sys.exit(main())
