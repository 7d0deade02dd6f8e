"""Time the hot kernels and the attack objective under both backends.

Each backend runs in its own interpreter because the backend is fixed at
import time. Usage::

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

WORKER = r"""
import json, sys, timeit
import numpy as np
from dropleak import _kernels as K
from dropleak.attack import attack_objective, capture_gradients
from dropleak.nn import build_lenet

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
x = rng.standard_normal((1, 12, 16, 16))
cols = K.im2col(x, 5, 2, 2)
s = rng.standard_normal((100, 3072))
y = s + 0.1 * rng.standard_normal((100, 3072))
rho = 1.0 / np.einsum("ij,ij->i", s, y)
order = np.arange(100)
g = rng.standard_normal(3072)

model = build_lenet(10, 0.0, seed=0)
truth = rng.random(model.input_shape)
cap = capture_gradients(model, truth, 3)
dummy = rng.random(model.input_shape)

cases = {
    "im2col_12x16x16_k5s2": lambda: K.im2col(x, 5, 2, 2),
    "col2im_12x16x16_k5s2": lambda: K.col2im(cols, x.shape, 5, 2, 2),
    "two_loop_m100_n3072": lambda: K.two_loop(g, s, y, rho, order),
    "attack_objective_32x32": lambda: attack_objective(model, dummy, 3, cap, None),
}
out = {"backend": K.BACKEND}
for name, fn in cases.items():
    fn()  # warm-up, includes numba compilation
    number = 20 if "objective" in name else 200
    best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
    out[name] = best * 1e6
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ)
    env["DROPLEAK_PURE_NUMPY"] = "1" if backend == "numpy" else "0"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                          text=True, check=True)
    return json.loads(proc.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    results = [run(b, args.repeat) for b in ("numba", "numpy")]
    names = [k for k in results[0] if k != "backend"]
    print(f"{'kernel':28s} " + " ".join(f"{r['backend'] + ' us':>12s}" for r in results) + f" {'speedup':>8s}")
    for name in names:
        a, b = results[0][name], results[1][name]
        print(f"{name:28s} {a:12.1f} {b:12.1f} {b / a:8.2f}x")


if __name__ == "__main__":
    main()
