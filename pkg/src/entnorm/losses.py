"""Cosine distance and the soft-label contrastive loss, with derivatives."""
from __future__ import annotations

import numpy as np


class DegenerateEmbeddingError(ValueError):
    """A zero vector reached cosine distance, which is undefined there."""


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("cosine distance of a zero vector")
    d = 1.0 - float(np.dot(u, v)) / (nu * nv)
    return min(2.0, max(0.0, d))


def contrastive_loss(delta, y, margin: float = 1.0):
    """``y*d^2/2 + (1-y)*max(0, m-d)^2/2``; works elementwise on arrays."""
    hinge = np.maximum(0.0, margin - delta)
    return 0.5 * y * delta * delta + 0.5 * (1.0 - y) * hinge * hinge


def contrastive_loss_grad(delta, y, margin: float = 1.0):
    """Derivative of :func:`contrastive_loss` with respect to ``delta``."""
    return y * delta - (1.0 - y) * np.maximum(0.0, margin - delta)


def optimal_distance(y: float) -> float:
    """Distance minimizing the loss for label ``y`` when the margin is 1."""
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"label must lie in [0, 1], got {y}")
    return 1.0 - y


def pairwise_cosine(ua: np.ndarray, ub: np.ndarray):
    """Row-wise cosine distance plus its gradients w.r.t. both inputs.

    Returns ``(delta, d_delta/d_ua, d_delta/d_ub)`` for ``(P, D)`` inputs.
    Distances are not clipped so the gradients stay exact.
    """
    na = np.linalg.norm(ua, axis=1)
    nb = np.linalg.norm(ub, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateEmbeddingError("cosine distance of a zero vector")
    dot = np.einsum("ij,ij->i", ua, ub)
    inv = 1.0 / (na * nb)
    cos = dot * inv
    delta = 1.0 - cos
    ga = -(ub * inv[:, None] - ua * (cos / (na * na))[:, None])
    gb = -(ua * inv[:, None] - ub * (cos / (nb * nb))[:, None])
    return delta, ga, gb
