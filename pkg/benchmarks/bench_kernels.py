"""Compare the numba and pure-numpy implementations of the batched 4x4 kernels.

    python3 benchmarks/bench_kernels.py [--batches 64 1024] [--repeat 200] [--epoch]

``--epoch`` also times one training epoch under each backend; the backend is
chosen per process through NMICONF_DISABLE_NUMBA, so that part runs in
subprocesses.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from nmiconf import _kernels as K

EPOCH_SNIPPET = """
import time
from nmiconf import model as vae, synthdata as sd, trainer as tr, _kernels as K
data = sd.stack(sd.generate_dataset(sd.DataConfig(n_samples=1000)))
tr.train(data.subset(range(200)), vae.ModelConfig(), tr.TrainConfig(epochs=1))  # warm-up / JIT
t = time.perf_counter()
tr.train(data, vae.ModelConfig(), tr.TrainConfig(epochs=1))
print(f"{'numba' if K.USE_NUMBA else 'numpy'} {time.perf_counter() - t:.3f}")
"""


def spd_batch(rng, n):
    a = rng.normal(size=(n, 4, 4))
    return a @ np.swapaxes(a, -1, -2) + 4 * np.eye(4)


def time_kernels(batches, repeat):
    impls = {"numpy": K.numpy_impl}
    if K.numba_impl is not None:
        impls["numba"] = K.numba_impl
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'batch':>7}" + "".join(f"{name + ' us':>14}" for name in impls))
    for n in batches:
        a = spd_batch(rng, n)
        chol = np.linalg.cholesky(a)
        bar = rng.normal(size=a.shape)
        cases = {
            "cholesky": lambda impl: impl.cholesky(a),
            "cholesky_backward": lambda impl: impl.cholesky_backward(chol, bar),
            "spd_inverse": lambda impl: impl.spd_inverse(a),
        }
        for label, call in cases.items():
            cells = []
            for impl in impls.values():
                call(impl)  # warm-up (triggers JIT compilation)
                t = min(timeit.repeat(lambda: call(impl), number=repeat, repeat=3)) / repeat
                cells.append(f"{t * 1e6:>14.1f}")
            print(f"{label:<20}{n:>7}" + "".join(cells))


def time_epoch():
    for disable in ("0", "1"):
        env = {**os.environ, "NMICONF_DISABLE_NUMBA": disable}
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"one epoch (800 train samples) with {name}: {float(secs):.3f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batches", type=int, nargs="+", default=[64, 1024])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--epoch", action="store_true")
    args = ap.parse_args()
    if K.numba_impl is None:
        print("numba is not installed; only the numpy path is timed")
    time_kernels(args.batches, args.repeat)
    if args.epoch:
        time_epoch()


if __name__ == "__main__":
    main()
