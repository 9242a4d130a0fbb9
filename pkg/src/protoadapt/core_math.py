"""Numerically stable vector primitives shared by every other module.

All functions are pure, operate on plain numpy arrays, and are safe to call
concurrently. Probability vectors and embeddings are ordinary float arrays;
validation happens at the function boundary rather than through wrapper types.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

# p*log(p) is treated as 0 below this mass (continuous extension at p=0)
PLOGP_FLOOR = 1e-12

# tolerance on sum(p) == 1 when validating probability vectors
PROB_SUM_TOL = 1e-6


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, shifted by the max logit before exponentiation.

    Accepts a 1-D vector or a 2-D batch of logit rows. The shift makes the
    computation overflow-safe for logit magnitudes far beyond 1e4 without
    changing the result.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("softmax: empty logits")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax: non-finite logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_prob_rows(P: np.ndarray) -> None:
    if P.shape[-1] < 2:
        raise InvalidInputError("probability vectors need at least 2 classes")
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("probability vector has non-finite entries")
    if np.any(P < -PROB_SUM_TOL) or np.any(P > 1.0 + PROB_SUM_TOL):
        raise InvalidInputError("probability entries must lie in [0, 1]")
    sums = np.sum(P, axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_SUM_TOL):
        raise InvalidInputError("probability vector does not sum to 1")


def normalized_entropy(p) -> float:
    """Shannon entropy of a probability vector scaled into [0, 1] by log(n).

    Uses natural logs in numerator and normalizer; the normalized value is
    base-independent. The 0*log(0) = 0 convention applies.
    """
    q = np.asarray(p, dtype=np.float64)
    if q.ndim != 1:
        raise InvalidInputError("normalized_entropy expects a 1-D probability vector")
    _check_prob_rows(q)
    return float(batch_normalized_entropy(q[None, :])[0])


def batch_normalized_entropy(P) -> np.ndarray:
    """Row-wise normalized entropy of a (batch, n_classes) probability matrix."""
    Q = np.asarray(P, dtype=np.float64)
    if Q.ndim != 2:
        raise InvalidInputError("batch_normalized_entropy expects a 2-D matrix")
    _check_prob_rows(Q)
    terms = np.where(Q > PLOGP_FLOOR, Q * np.log(np.where(Q > PLOGP_FLOOR, Q, 1.0)), 0.0)
    h = -np.sum(terms, axis=-1) / np.log(Q.shape[-1])
    # float round-off can leave tiny negatives at one-hot rows
    return np.clip(h, 0.0, 1.0)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clipped into [-1, 1]."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or vb.ndim != 1 or va.shape != vb.shape:
        raise InvalidInputError("cosine_similarity expects two 1-D vectors of equal dimension")
    if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
        raise InvalidInputError("cosine_similarity: non-finite input")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity: zero-norm vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    """1 - cosine_similarity(a, b); a value in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)
