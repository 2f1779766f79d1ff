"""Compare the numba and pure-numpy kernel backends.

Times the LSTM recurrence (forward and backward) and the batched ESTOI
correlation with gradient at training-sized shapes, checks both backends
agree, and prints one row per kernel and backend.

    python benchmarks/bench_kernels.py [--repeats 3] [--quick]

The backend used by the library is picked at import from ESTOI_SEP_NUMBA
(``0`` selects numpy); this script switches between them explicitly.
"""

import argparse
import time

import numpy as np

from estoi_sep import kernels


def _best_of(fn, repeats):
    fn()  # warm-up (and JIT compilation for numba)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def lstm_cases(rng, shapes):
    for T, B, H in shapes:
        xproj = rng.standard_normal((T, B, 4 * H))
        U = rng.standard_normal((H, 4 * H)) / np.sqrt(H)
        dh = rng.standard_normal((T, B, H))
        yield f"lstm T={T} B={B} H={H}", xproj, U, dh


def estoi_cases(rng, shapes):
    for B, J, T, N in shapes:
        x = rng.uniform(0.0, 1.0, (B, J, T))
        y = rng.uniform(0.0, 1.0, (B, J, T))
        yield f"estoi B={B} J={J} T={T} N={N}", x, y, N


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small shapes only")
    args = ap.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    lstm_shapes = [(256, 8, 64)] if args.quick else [(256, 32, 64), (256, 8, 512)]
    estoi_shapes = [(8, 14, 256, 96)] if args.quick else [(8, 14, 256, 96), (32, 14, 256, 96)]
    rows = []
    original = kernels.backend()

    for name, xproj, U, dh in lstm_cases(rng, lstm_shapes):
        outs = {}
        for be in ("numba", "numpy"):
            kernels.set_backend(be)
            fwd = _best_of(lambda: kernels.lstm_forward(xproj, U), args.repeats)
            gates, cells, hidden = kernels.lstm_forward(xproj, U)
            bwd = _best_of(lambda: kernels.lstm_backward(gates, cells, U, dh), args.repeats)
            outs[be] = (hidden, kernels.lstm_backward(gates, cells, U, dh))
            rows.append((name + " fwd", be, fwd))
            rows.append((name + " bwd", be, bwd))
        diff = max(np.abs(a - b).max() for a, b in zip(outs["numba"], outs["numpy"]))
        rows.append((name, "max |numba - numpy|", diff))

    for name, x, y, N in estoi_cases(rng, estoi_shapes):
        outs = {}
        for be in ("numba", "numpy"):
            kernels.set_backend(be)
            t = _best_of(lambda: kernels.estoi_correlation(x, y, N), args.repeats)
            outs[be] = kernels.estoi_correlation(x, y, N)
            rows.append((name + " +grad", be, t))
        diff = max(np.abs(a - b).max() for a, b in zip(outs["numba"], outs["numpy"]))
        rows.append((name, "max |numba - numpy|", diff))

    kernels.set_backend(original)
    width = max(len(r[0]) for r in rows)
    for name, be, value in rows:
        unit = "" if be.startswith("max") else " s"
        print(f"{name:<{width}}  {be:<20s} {value:.3e}{unit}")


if __name__ == "__main__":
    main()
