"""Static contact transfer by dense per-pixel cosine correspondence.

The pixel scan is the hot non-BLAS loop of the pipeline, so it has a
numba-jitted kernel with a pure-numpy fallback. Set AFFKIT_NUMBA=0 to
force the numpy path (see benchmarks/bench_kernels.py).
"""

import os

import numpy as np

from .errors import ContractError, NoCorrespondenceError

USE_NUMBA = os.environ.get("AFFKIT_NUMBA", "1") != "0"

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        USE_NUMBA = False

if USE_NUMBA:

    @njit(cache=True)
    def _best_match_jit(flat, ref, ref_norm):
        best = -np.inf
        best_i = -1
        for i in range(flat.shape[0]):
            dot = 0.0
            sq = 0.0
            for c in range(flat.shape[1]):
                v = flat[i, c]
                dot += v * ref[c]
                sq += v * v
            if sq <= 0.0:
                continue
            s = dot / (np.sqrt(sq) * ref_norm)
            if s > best:
                best = s
                best_i = i
        return best_i


def _best_match_numpy(flat, ref, ref_norm):
    norms = np.sqrt((flat * flat).sum(axis=1))
    sims = np.full(flat.shape[0], -np.inf)
    ok = norms > 0
    sims[ok] = flat[ok] @ ref / (norms[ok] * ref_norm)
    if not np.isfinite(sims).any():
        return -1
    return int(np.argmax(sims))  # first max == smallest row-major index


def best_match_index(features, ref_feature):
    """Row-major index of the pixel with maximal cosine similarity, or -1."""
    flat = np.ascontiguousarray(features, dtype=np.float64).reshape(
        -1, features.shape[-1])
    ref = np.ascontiguousarray(ref_feature, dtype=np.float64)
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise NoCorrespondenceError("reference contact feature has zero norm")
    if USE_NUMBA:
        return int(_best_match_jit(flat, ref, ref_norm))
    return _best_match_numpy(flat, ref, ref_norm)


def reference_contact_feature(ref_map, contact):
    """Border-clipped 3x3 mean feature around the contact pixel (x, y)."""
    h, w = ref_map.shape[:2]
    x, y = int(round(contact[0])), int(round(contact[1]))
    if not (0 <= x < w and 0 <= y < h):
        raise ContractError(f"contact ({x}, {y}) outside {w}x{h} map")
    window = ref_map[max(y - 1, 0):min(y + 2, h), max(x - 1, 0):min(x + 2, w)]
    return window.reshape(-1, ref_map.shape[2]).mean(axis=0)


def transfer_contact(ref_map, ref_contact, query_map):
    """Contact pixel (x, y) in the query with maximal feature cosine.

    Zero-norm query pixels never match; ties break on smallest row-major
    index, so the result is independent of any scan parallelization.
    """
    if ref_map.shape[-1] != query_map.shape[-1]:
        raise ContractError(
            f"channel mismatch: {ref_map.shape[-1]} vs {query_map.shape[-1]}")
    if query_map.size == 0 or ref_map.size == 0:
        raise ContractError("empty feature map")
    ref_feature = reference_contact_feature(ref_map, ref_contact)
    idx = best_match_index(query_map, ref_feature)
    if idx < 0:
        raise NoCorrespondenceError("every query pixel has zero-norm features")
    w = query_map.shape[1]
    return (idx % w, idx // w)
