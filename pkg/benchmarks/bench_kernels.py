"""Compare the numba and numpy convolution kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Part one times ``im2col``/``col2im`` from both backends side by side in this
process and checks that they agree. Part two runs one conv2d forward+backward
per step in two child processes, one with ``PAAM_DISABLE_NUMBA=1``, so the
env-flag selection is exercised end to end.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

SHAPES = [  # (N, C, H, W, k, stride, padding)
    (32, 3, 32, 32, 3, 1, 1),
    (32, 16, 32, 32, 3, 1, 1),
    (32, 32, 16, 16, 3, 2, 1),
    (32, 64, 8, 8, 3, 1, 1),
]

_CHILD = """
import json, sys, timeit
import numpy as np
from paam import _kernels, ops
from paam.tensor import Tensor
n, c, h, w, k, s, p, f, rep = map(int, sys.argv[1:])
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(n, c, h, w)), requires_grad=True)
W = Tensor(rng.normal(size=(f, c, k, k)), requires_grad=True)
def step():
    x.zero_grad(); W.zero_grad()
    ops.conv2d(x, W, s, p).sum().backward()
step()
print(json.dumps({"backend": _kernels.BACKEND, "sec": min(timeit.repeat(step, number=1, repeat=rep))}))
"""


def _best(fn, repeat: int) -> float:
    fn()  # warm-up (includes JIT compile for numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int, batch: int) -> list[dict]:
    from paam import _kernels as K

    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; kernel comparison skipped")
        return []
    rows = []
    rng = np.random.default_rng(0)
    for n, c, h, w, k, s, p in SHAPES:
        n = batch
        x = rng.normal(size=(n, c, h, w))
        cols = K.im2col_numpy(x, k, s, p)
        assert np.array_equal(cols, K.im2col_numba(x, k, s, p))
        back_np = K.col2im_numpy(cols, x.shape, k, s, p)
        assert np.allclose(back_np, K.col2im_numba(cols, x.shape, k, s, p), rtol=1e-12, atol=1e-12)
        r = {"shape": [n, c, h, w], "k": k, "stride": s, "pad": p}
        r["im2col_numpy"] = _best(lambda: K.im2col_numpy(x, k, s, p), repeat)
        r["im2col_numba"] = _best(lambda: K.im2col_numba(x, k, s, p), repeat)
        r["col2im_numpy"] = _best(lambda: K.col2im_numpy(cols, x.shape, k, s, p), repeat)
        r["col2im_numba"] = _best(lambda: K.col2im_numba(cols, x.shape, k, s, p), repeat)
        rows.append(r)
    return rows


def bench_end_to_end(repeat: int, batch: int) -> list[dict]:
    out = []
    n, c, h, w, k, s, p = batch, 16, 32, 32, 3, 1, 1
    for disable in ("0", "1"):
        env = {**os.environ, "PAAM_DISABLE_NUMBA": disable}
        args = [sys.executable, "-c", _CHILD, *map(str, (n, c, h, w, k, s, p, 16, repeat))]
        res = subprocess.run(args, env=env, capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--json", action="store_true", help="print raw results as JSON")
    a = ap.parse_args(argv)
    rows = bench_kernels(a.repeat, a.batch)
    e2e = bench_end_to_end(max(3, a.repeat // 4), a.batch)
    if a.json:
        print(json.dumps({"kernels": rows, "conv2d_step": e2e}, indent=2))
        return 0
    if rows:
        print(f"{'shape':<22}{'k/s/p':<8}{'im2col np':>11}{'im2col nb':>11}{'col2im np':>11}{'col2im nb':>11}")
        for r in rows:
            print(f"{str(tuple(r['shape'])):<22}{r['k']}/{r['stride']}/{r['pad']:<4}"
                  f"{r['im2col_numpy'] * 1e3:>9.2f}ms{r['im2col_numba'] * 1e3:>9.2f}ms"
                  f"{r['col2im_numpy'] * 1e3:>9.2f}ms{r['col2im_numba'] * 1e3:>9.2f}ms")
    print("\nconv2d forward+backward, 16->16 channels, 32x32:")
    for r in e2e:
        print(f"  backend={r['backend']:<6} {r['sec'] * 1e3:8.2f} ms/step")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
