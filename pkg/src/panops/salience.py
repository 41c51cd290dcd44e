"""Per-pixel salience from the spread of local feature similarities.

A pixel whose feature vector disagrees with its neighborhood (an object
boundary, a distorted region) produces a peaked similarity distribution and
therefore a large standard deviation; flat regions produce a uniform
distribution and a score of exactly zero.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

# Vectors with norm below this count as zero features and get similarity 0.
ZERO_NORM_EPS = 1e-12


def _check_kernel(kernel: int) -> int:
    if not isinstance(kernel, int) or kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"window size must be an odd integer >= 3, got {kernel}")
    return kernel


def salience_upper_bound(kernel: int) -> float:
    """Largest reachable score for a k*k window: sqrt(K-1)/K with K = k*k.

    This is the population standard deviation of a one-hot probability
    vector of length K, the most peaked distribution possible.
    """
    K = _check_kernel(kernel) ** 2
    return math.sqrt(K - 1) / K


def patch_cosine_similarity(features: Tensor, kernel: int = 3) -> Tensor:
    """Cosine similarity of each pixel's channel vector against its k*k window.

    Returns a (n, k*k, h, w) Tensor; channel j holds the similarity with the
    j-th window position in row-major order (j = k*k // 2 is the pixel
    itself). Windows are clamped to the image edge. If either vector has
    near-zero norm the similarity is 0.
    """
    k = _check_kernel(kernel)
    r = k // 2
    n, c, h, w = features.shape

    data = features.data.astype(np.float64)
    norms = np.sqrt(np.einsum("nchw,nchw->nhw", data, data))
    padded = np.pad(data, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    padded_norms = np.pad(norms, ((0, 0), (r, r), (r, r)), mode="edge")

    out = np.zeros((n, k * k, h, w), dtype=np.float64)
    for j in range(k * k):
        di, dj = divmod(j, k)
        neigh = padded[:, :, di:di + h, dj:dj + w]
        neigh_norms = padded_norms[:, di:di + h, dj:dj + w]
        dot = np.einsum("nchw,nchw->nhw", data, neigh)
        denom = norms * neigh_norms
        ok = (norms >= ZERO_NORM_EPS) & (neigh_norms >= ZERO_NORM_EPS)
        np.divide(dot, denom, out=out[:, j], where=ok)
    return Tensor(out.astype(np.float32))


def salient_map(features: Tensor, kernel: int = 3) -> Tensor:
    """Salient scalar per pixel: population std of softmax-normalized similarities.

    The k*k similarity vector at each pixel is pushed through a softmax and
    the score is the standard deviation of the resulting probability vector,
    dividing by K = k*k. Scores land in [0, sqrt(K-1)/K]; a window whose
    similarities are all equal (constant regions, all-zero features) scores
    exactly 0. Output shape is (n, 1, h, w).
    """
    sims = patch_cosine_similarity(features, kernel).data.astype(np.float64)

    peak = sims.max(axis=1, keepdims=True)
    e = np.exp(sims - peak)
    probs = e / e.sum(axis=1, keepdims=True)

    mean = probs.mean(axis=1, keepdims=True)
    score = np.sqrt(np.mean((probs - mean) ** 2, axis=1))

    flat = sims.max(axis=1) == sims.min(axis=1)
    score[flat] = 0.0
    return Tensor(score[:, None].astype(np.float32))
