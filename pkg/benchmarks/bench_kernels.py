"""Numba vs numpy kernels: per-kernel timings plus one VGG-small training step.

    python benchmarks/bench_kernels.py [--batch 32] [--repeat 5]

The end-to-end step runs in a subprocess per backend because the backend is
fixed at import time by ``DRSL_DISABLE_NUMBA``.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from drsl import _kernels as K

STEP = r"""
import json, sys, time
import numpy as np
from drsl import _kernels
from drsl.losses import LossSpec, compute_loss
from drsl.models import CIFAR_VGG_SMALL, forward, init_model
from drsl.tensor import Tape, Tensor
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
model = init_model(CIFAR_VGG_SMALL, 0)
rng = np.random.default_rng(0)
x = rng.uniform(size=(batch, 3, 32, 32))
y = rng.integers(0, 10, size=batch)
spec = LossSpec("drsl", tau=0.5)
def step():
    model.zero_grad()
    with Tape() as tape:
        loss = compute_loss(spec, forward(model, Tensor(x)), y)
    tape.backward(loss)
step()  # warm-up (JIT compile or cache load)
times = []
for _ in range(repeat):
    t0 = time.perf_counter()
    step()
    times.append(time.perf_counter() - t0)
print(json.dumps({"backend": _kernels.BACKEND, "best": min(times)}))
"""


def best_of(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(batch, repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 32, 32, 32))
    cols = K.im2col_np(x, 3, 3, 1)
    pooled, idx = K.maxpool2_np(x)
    g = rng.normal(size=pooled.shape)
    cases = [
        ("im2col 3x3 pad1", lambda: K.im2col_np(x, 3, 3, 1), lambda: K.im2col_nb(x, 3, 3, 1)),
        ("col2im 3x3 pad1", lambda: K.col2im_np(cols, x.shape, 3, 3, 1), lambda: K.col2im_nb(cols, x.shape, 3, 3, 1)),
        ("maxpool2", lambda: K.maxpool2_np(x), lambda: K.maxpool2_nb(x)),
        ("maxpool2 backward", lambda: K.maxpool2_backward_np(g, idx, x.shape),
         lambda: K.maxpool2_backward_nb(g, idx, x.shape)),
    ]
    rows = []
    for name, f_np, f_nb in cases:
        a, b = f_np(), f_nb()
        same = all(np.array_equal(u, v) for u, v in zip(a if isinstance(a, tuple) else (a,),
                                                         b if isinstance(b, tuple) else (b,)))
        rows.append((name, best_of(f_np, repeat), best_of(f_nb, repeat), same))
    return rows


def train_step(batch, repeat):
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "DRSL_DISABLE_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", STEP, str(batch), str(repeat)], env=env,
                             capture_output=True, text=True, check=True)
        r = json.loads(res.stdout.strip().splitlines()[-1])
        out[r["backend"]] = r["best"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed")
    print(f"kernels on ({args.batch}, 32, 32, 32) float64, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, t_np, t_nb, same in kernel_table(args.batch, args.repeat):
        print(f"{name:<20}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.2f}x  {same}")
    step = train_step(args.batch, args.repeat)
    print(f"\nVGG-small loss+grad step, batch {args.batch}: numpy {step['numpy'] * 1e3:.1f} ms, "
          f"numba {step['numba'] * 1e3:.1f} ms ({step['numpy'] / step['numba']:.2f}x)")


if __name__ == "__main__":
    main()
