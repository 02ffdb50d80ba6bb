"""Compare the compiled and pure-Python kernels on the two hot loops.

Usage: python3 benchmarks/bench_kernels.py [--repeats 3] [--quick]

Times collapsed Gibbs sampling (train_lda) and LSTM forward + backward
through time, once per available backend, and prints best-of-N wall time and
the speedup. Outputs of the two backends are compared as a sanity check.
"""

import argparse
import time

import numpy as np

from scenedialog import _kernels
from scenedialog import numerics as nx
from scenedialog import topics as tp


def best_of(fn, repeats):
    times, result = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return min(times), result


def gibbs_case(num_docs, doc_len, vocab_size, K, iterations):
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(vocab_size)]
    docs = [[words[i] for i in rng.integers(0, vocab_size, size=doc_len)] for _ in range(num_docs)]

    def run(kernels):
        return lambda: tp.train_lda(docs, K, iterations=iterations, rng_seed=1, kernels=kernels).phi
    label = f"gibbs  D={num_docs} N={doc_len} V={vocab_size} K={K} iters={iterations}"
    return label, run, lambda a, b: float(np.max(np.abs(a - b)))


def lstm_case(T, D, H, sequences):
    rng = np.random.default_rng(0)
    p = nx.LstmParams.init(D, H, rng)
    xs = [rng.normal(size=(T, D)) for _ in range(sequences)]
    douts = [rng.normal(size=(T, H)) for _ in range(sequences)]

    def run(kernels):
        def go():
            total = np.zeros_like(p.Wx)
            for x, d in zip(xs, douts):
                _, tape = nx.lstm_forward(p, x, kernels=kernels)
                grads, *_ = nx.lstm_backward(tape, d)
                total += grads.Wx
            return total
        return go
    label = f"lstm   T={T} D={D} H={H} x{sequences} fwd+bwd"
    return label, run, lambda a, b: float(np.max(np.abs(a - b)))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = parser.parse_args()
    scale = 4 if args.quick else 1
    cases = [gibbs_case(200 // scale, 40, 500, 10, 50 // scale),
             lstm_case(20, 32, 48, 100 // scale),
             lstm_case(10, 8, 8, 400 // scale)]
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active: {_kernels.BACKEND})")
    if "cython" not in backends:
        print("compiled kernels not built; only the pure-Python timings are shown")
    print(f"{'case':<48} " + " ".join(f"{b:>10}" for b in backends) + f" {'speedup':>8} {'max diff':>9}")
    for label, run, diff in cases:
        timings, results = {}, {}
        for b in backends:
            timings[b], results[b] = best_of(run(_kernels.get_backend(b)), args.repeats)
        cells = " ".join(f"{timings[b]:>9.3f}s" for b in backends)
        if len(backends) == 2:
            speed = f"{timings['python'] / timings['cython']:>7.1f}x"
            delta = f"{diff(results['cython'], results['python']):>9.1e}"
        else:
            speed, delta = f"{'-':>8}", f"{'-':>9}"
        print(f"{label:<48} {cells} {speed} {delta}")


if __name__ == "__main__":
    main()
