"""Benchmark the fused numba kernels against their numpy fallbacks.

Covers the three hot paths: attention softmax (forward + backward), GELU
(forward + backward), and the dense-correspondence cosine scan. Run with
numba enabled (the default) to see both columns; with AFFKIT_NUMBA=0 the
package itself would never import the jitted versions, so this script
always calls the fallback functions explicitly instead.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from affkit import correspondence, kernels


def best_time(fn, repeats):
    """Best of N wall-clock timings, in seconds."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def report(name, numpy_fn, fast_fn, repeats):
    t_np = best_time(numpy_fn, repeats)
    if fast_fn is None:
        print(f"{name:<28} numpy {t_np * 1e3:8.3f} ms   numba: unavailable")
        return
    fast_fn()  # warm-up so JIT compilation is not timed
    t_nb = best_time(fast_fn, repeats)
    print(f"{name:<28} numpy {t_np * 1e3:8.3f} ms   "
          f"numba {t_nb * 1e3:8.3f} ms   speedup {t_np / t_nb:5.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    have_numba = kernels.USE_NUMBA and correspondence.USE_NUMBA
    print(f"numba available: {have_numba}\n")

    # Shapes match a training batch: 16 queries, 4 heads, 145 tokens
    # (12x12 patches + CLS), plus the MLP activations at d_ff=256.
    logits = rng.normal(size=(16, 4, 145, 145))
    probs = kernels.softmax_rows_numpy(logits)
    grad = rng.normal(size=probs.shape)
    acts = rng.normal(size=(16, 145, 256))
    acts_grad = rng.normal(size=acts.shape)

    # 48x48x4 feature maps for the correspondence scan.
    query = rng.normal(size=(48, 48, 4))
    ref_feature = rng.normal(size=4)
    flat = np.ascontiguousarray(query.reshape(-1, 4))
    ref_norm = float(np.linalg.norm(ref_feature))

    report("softmax forward",
           lambda: kernels.softmax_rows_numpy(logits),
           (lambda: kernels.softmax_rows(logits)) if kernels.USE_NUMBA
           else None, args.repeats)
    report("softmax backward",
           lambda: kernels.softmax_rows_grad_numpy(grad, probs),
           (lambda: kernels.softmax_rows_grad(grad, probs))
           if kernels.USE_NUMBA else None, args.repeats)
    report("gelu forward",
           lambda: kernels.gelu_numpy(acts),
           (lambda: kernels.gelu_forward(acts)) if kernels.USE_NUMBA
           else None, args.repeats)
    report("gelu backward",
           lambda: kernels.gelu_grad_numpy(acts_grad, acts),
           (lambda: kernels.gelu_grad(acts_grad, acts)) if kernels.USE_NUMBA
           else None, args.repeats)
    report("correspondence scan",
           lambda: correspondence._best_match_numpy(flat, ref_feature,
                                                    ref_norm),
           (lambda: correspondence._best_match_jit(flat, ref_feature,
                                                   ref_norm))
           if correspondence.USE_NUMBA else None, args.repeats)

    if have_numba:
        match_np = correspondence._best_match_numpy(flat, ref_feature,
                                                    ref_norm)
        match_nb = int(correspondence._best_match_jit(flat, ref_feature,
                                                      ref_norm))
        assert match_np == match_nb, "numba/numpy correspondence disagree"
        np.testing.assert_allclose(kernels.softmax_rows(logits), probs,
                                   atol=1e-12)
        print("\nequivalence checks passed")


if __name__ == "__main__":
    main()
