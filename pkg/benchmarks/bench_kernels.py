"""Compare the numba and numpy kernel backends.

Times every kernel pair in-process, then one short training run per backend
in a subprocess with ``CAFLOW_NUMBA`` set accordingly. Usage::

    python benchmarks/bench_kernels.py [--repeat 50] [--skip-train]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from caflow import _accel, kernels

TRAIN_SNIPPET = """
import time
from caflow.data import SyntheticSpec, generate_synthetic
from caflow.trainer import TrainConfig, train
split = generate_synthetic(SyntheticSpec(n_train=64, n_test=64))
train(TrainConfig(epochs=1), split)          # warm-up, includes JIT compilation
start = time.perf_counter()
train(TrainConfig(epochs=3), split)
print(time.perf_counter() - start)
"""


def cases(rng):
    rows = rng.normal(size=(32 * 4 * 16, 16))
    y = kernels.softmax_rows_np(rows)
    g = rng.normal(size=rows.shape)
    ties = rng.integers(0, 50, size=2000).astype(np.float64)
    cards = (4, 4, 4, 4, 4)

    def table(*shape):
        t = rng.random(shape)
        return t / t.sum(axis=-1, keepdims=True)

    scm = (table(cards[0]), table(cards[0], cards[1]), table(cards[1], cards[2]),
           table(cards[2], cards[0], cards[3]), table(cards[3], cards[4]))
    return {
        "softmax_rows": ((rows,), kernels.softmax_rows_np, kernels.softmax_rows_nb),
        "softmax_rows_grad": ((y, g), kernels.softmax_rows_grad_np, kernels.softmax_rows_grad_nb),
        "average_ranks": ((ties,), kernels.average_ranks_np, kernels.average_ranks_nb),
        "scm_joint": (scm, kernels.scm_joint_np, kernels.scm_joint_nb),
        "scm_do": ((scm[0], scm[2], scm[3], scm[4]), kernels.scm_do_np, kernels.scm_do_nb),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (args, f_np, f_nb) in cases(rng).items():
        np.testing.assert_allclose(f_np(*args), f_nb(*args), rtol=1e-12, atol=1e-14)
        t_np = min(timeit.repeat(lambda: f_np(*args), number=repeat, repeat=3)) / repeat
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=repeat, repeat=3)) / repeat
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.2f}")


def bench_training():
    print("\nshort training run (3 epochs, 64 videos)")
    for flag in ("0", "1"):
        env = dict(os.environ, CAFLOW_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"  {label:<6}{float(out.stdout.strip()):8.2f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    if not args.skip_train:
        bench_training()


if __name__ == "__main__":
    main()
