"""Time the convolution/pooling kernels and a full region operator with and
without numba.

The flag is read at import time, so each backend runs in its own
interpreter:

    python3 benchmarks/bench_kernels.py            # both, side by side
    python3 benchmarks/bench_kernels.py --child    # current LRATTACK_NUMBA only
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def best_of(fn, repeat=5, number=20):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - t0) / number)
    return min(times)


def child():
    from lrattack import _kernels as K
    from lrattack.net import BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, classify
    from lrattack.region import Decision, build_region

    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 8, 28, 28))
    w = rng.standard_normal((16, 8, 3, 3))
    y = K.conv2d(x, w, 1, 1)
    idx = K.maxpool_argmax(x, 2, 2)[0].ravel()
    g = rng.standard_normal((16, idx.size))
    xs, ws = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    timings = {
        "conv2d 1x2x6x6": best_of(lambda: K.conv2d(xs, ws, 1, 1)),
        "conv2d 16x8x28x28": best_of(lambda: K.conv2d(x, w, 1, 1)),
        "conv2d_transpose": best_of(lambda: K.conv2d_transpose(y, w, 1, 1, 28, 28)),
        "avgpool 2x2": best_of(lambda: K.avgpool(x, 2, 2)),
        "maxpool_argmax 2x2": best_of(lambda: K.maxpool_argmax(x, 2, 2)),
        "scatter_add": best_of(lambda: K.scatter_add(g, idx, 8 * 28 * 28)),
    }

    net = Network([
        Conv2d(rng.standard_normal((8, 1, 3, 3)) * 0.3, np.zeros(8), padding=1),
        BatchNorm(np.zeros(8), np.ones(8), np.ones(8), np.zeros(8)),
        ReLU(),
        MaxPool2d(2),
        Conv2d(rng.standard_normal((8, 8, 3, 3)) * 0.1, np.zeros(8), padding=1),
        ReLU(),
        Flatten(),
        Dense(rng.standard_normal((10, 8 * 14 * 14)) * 0.05, np.zeros(10)),
    ], (1, 28, 28), np.float32)
    xi = rng.uniform(size=(1, 28, 28)).astype(np.float32)
    c = classify(net, xi)
    sys_ = build_region(net, xi, Decision(c, other=(c + 1) % 10))
    z, mu = rng.standard_normal(sys_.d), rng.standard_normal(sys_.m)
    timings[f"region apply_A (m={sys_.m})"] = best_of(lambda: sys_.apply_A(z))
    timings["region apply_AT"] = best_of(lambda: sys_.apply_AT(mu))
    json.dump({"numba": K.USE_NUMBA, "timings": timings}, sys.stdout)


def run(flag):
    env = dict(os.environ, LRATTACK_NUMBA=flag)
    out = subprocess.run([sys.executable, __file__, "--child"], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    if ap.parse_args().child:
        child()
        return
    fast, slow = run("1"), run("0")
    if not fast["numba"]:
        print("numba is not importable; both columns use numpy")
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for name, t_nb in fast["timings"].items():
        t_np = slow["timings"][name]
        print(f"{name:32s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
