"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Part one times each kernel directly on the batch sizes the training loop
uses.  Part two times a short end-to-end GPL run in two subprocesses, one
with ``WORKBENCH_DISABLE_NUMBA=1``, since the flag is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from workbench import _kernels as K

E2E = """
import time
from workbench import _kernels
from workbench.data import NoiseSpec, gen_two_moons, inject_noise
from workbench.engine import RunConfig, instantiate, train_seminll
train = inject_noise(gen_two_moons(1000, 0.1, seed=[0, 0]), NoiseSpec("symmetric", 0.4))
test = gen_two_moons(500, 0.1, seed=[0, 1])
cfg = instantiate("gpl", RunConfig(epochs=10, warmup_epochs=2, hidden=64))
train_seminll(instantiate("gpl", RunConfig(epochs=1, warmup_epochs=0, hidden=8)), train, test)  # JIT warm-up
t = time.perf_counter()
_, rep = train_seminll(cfg, train, test)
print(_kernels.BACKEND, time.perf_counter() - t, rep.final_acc)
"""


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'size':>8}{'numpy us':>12}{'numba us':>12}{'speed-up':>10}")
    for n, c in ((64, 2), (64, 10), (2048, 10)):
        z = rng.normal(size=(n, c))
        t = np.eye(c)[rng.integers(0, c, n)]
        K.softmax_xent_numba(z, t)  # compile outside the timing
        a = best_of(lambda: K.softmax_xent_numpy(z, t), repeat, 200)
        b = best_of(lambda: K.softmax_xent_numba(z, t), repeat, 200)
        print(f"{'softmax_xent C=' + str(c):<28}{n:>8}{a * 1e6:>12.1f}{b * 1e6:>12.1f}{a / b:>10.1f}")
    for n in (64, 512, 4096):
        x = np.concatenate([rng.normal(0.2, 0.05, n // 2), rng.normal(0.8, 0.1, n - n // 2)]).clip(0, 1)
        args = (x, np.percentile(x, [10, 90]), np.full(2, x.var()), np.full(2, 0.5), 1e-6, 100, 1e-6)
        K.em_gmm2_numba(*args)
        a = best_of(lambda: K.em_gmm2_numpy(*args), repeat, 20)
        b = best_of(lambda: K.em_gmm2_numba(*args), repeat, 20)
        print(f"{'em_gmm2':<28}{n:>8}{a * 1e6:>12.1f}{b * 1e6:>12.1f}{a / b:>10.1f}")


def end_to_end():
    print("\nend-to-end GPL, two-moons n=1000, 2+10 epochs")
    for flag in ("0", "1"):
        env = dict(os.environ, WORKBENCH_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        backend, secs, acc = out.stdout.split()
        print(f"  {backend:<6} {float(secs):7.2f} s   final acc {float(acc):.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if K.softmax_xent_numba is None:
        sys.exit("numba is not importable; nothing to compare")
    kernel_table(args.repeat)
    if not args.skip_e2e:
        end_to_end()


if __name__ == "__main__":
    main()
