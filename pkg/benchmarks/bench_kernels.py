"""Compare the numba kernels with their pure-numpy fallbacks.

Kernel timings call both implementations in-process.  The end-to-end
timing runs ``estimate`` in a subprocess per backend, since the backend is
chosen from DRCIV_DISABLE_NUMBA at import.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 2000]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from drciv import kernels


def best_of(func, repeat):
    func()  # warm-up (compilation for the jitted path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_fnb(n, p, repeat, rng):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) + rng.standard_t(3, size=n)
    y = np.ascontiguousarray(y / np.abs(y).max())
    out = {}
    for name, f in (("numba", kernels._fnb_numba), ("numpy", kernels._fnb_numpy)):
        out[name] = best_of(lambda f=f: f(X, y, 0.3, 1e-8, 200), repeat)
    a = kernels._fnb_numba(X, y, 0.3, 1e-8, 200)[0]
    b = kernels._fnb_numpy(X, y, 0.3, 1e-8, 200)[0]
    return out, float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def bench_trim(n, p, repeat, rng):
    D = np.ascontiguousarray(np.column_stack([np.zeros((n, p // 2)), np.ones(n), rng.normal(size=(n, p // 2 - 1))]))
    dq = rng.normal(0.1, 0.2, size=n)
    resid = rng.normal(size=n)
    out = {}
    for name, f in (("numba", kernels._trim_grad_numba), ("numpy", kernels._trim_grad_numpy)):
        out[name] = best_of(lambda f=f: f(dq, resid, D, 0.02, 0.05, 0), repeat)
    diff = np.max(np.abs(kernels._trim_grad_numba(dq, resid, D, 0.02, 0.05, 0)
                         - kernels._trim_grad_numpy(dq, resid, D, 0.02, 0.05, 0)))
    return out, float(diff)


_E2E = """
import time
from drciv import estimate
from drciv._accel import backend
from drciv.simulate import generate, preset
d = generate(preset("dgp_x"), {n}, seed=1)
estimate(d, "pi_dr")
t0 = time.perf_counter()
r = estimate(d, "pi_dr")
print(backend(), time.perf_counter() - t0, r.point)
"""


def bench_end_to_end(n):
    out = {}
    for name, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DRCIV_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _E2E.format(n=n)], env=env, capture_output=True, text=True,
                             check=True)
        used, secs, point = res.stdout.split()
        assert used == name, f"expected the {name} backend, got {used}"
        out[name] = (float(secs), float(point))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=2000)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'kernel':<28}{'numba s':>12}{'numpy s':>12}{'speedup':>10}{'max diff':>12}")
    for n, p in ((args.n // 2, 2), (args.n // 2, 4), (args.n, 8)):
        t, diff = bench_fnb(n, p, args.repeat, rng)
        print(f"{f'fnb n={n} p={p}':<28}{t['numba']:>12.5f}{t['numpy']:>12.5f}{t['numpy'] / t['numba']:>10.1f}"
              f"{diff:>12.2e}")
    for n, p in ((args.n, 2), (args.n, 4)):
        t, diff = bench_trim(n, p, args.repeat, rng)
        print(f"{f'trim_grad n={n} p={p}':<28}{t['numba']:>12.5f}{t['numpy']:>12.5f}"
              f"{t['numpy'] / t['numba']:>10.1f}{diff:>12.2e}")
    e2e = bench_end_to_end(args.n)
    print(f"{f'estimate pi_dr dgp_x n={args.n}':<28}{e2e['numba'][0]:>12.5f}{e2e['numpy'][0]:>12.5f}"
          f"{e2e['numpy'][0] / e2e['numba'][0]:>10.1f}{abs(e2e['numba'][1] - e2e['numpy'][1]):>12.2e}")


if __name__ == "__main__":
    main()
