"""Quadruple ranking objective: agreement, hinge surrogate, and gradients.

A training quadruple carries four response values (h1, h2, h3, h4):
h1/h2 score two points in one image, h3/h4 score their correspondents
in the transformed image. The ranking agrees when (h1 - h2) and
(h3 - h4) share a sign.

All functions accept scalars or equally-shaped arrays and compute in
64-bit regardless of input dtype.
"""

from __future__ import annotations

import numpy as np


def agreement(h1, h2, h3, h4):
    """Ranking agreement R = (h1 - h2) * (h3 - h4); positive iff order kept."""
    h1, h2, h3, h4 = (np.asarray(h, dtype=np.float64) for h in (h1, h2, h3, h4))
    return (h1 - h2) * (h3 - h4)


def hinge(r):
    """Hinge surrogate max(0, 1 - R); differentiable upper bound on misranking."""
    return np.maximum(0.0, 1.0 - np.asarray(r, dtype=np.float64))


def misrank_count(r):
    """0/1 misranking indicator (R <= 0). Monitoring only; not differentiated."""
    return (np.asarray(r, dtype=np.float64) <= 0.0).astype(np.float64)


def hinge_grad(h1, h2, h3, h4):
    """Hinge loss and its partials w.r.t. the four responses.

    Gradients are zero where the hinge is inactive (R > 1); at R = 1 the
    active-branch gradient is used.
    """
    h1, h2, h3, h4 = (np.asarray(h, dtype=np.float64) for h in (h1, h2, h3, h4))
    left = h1 - h2
    right = h3 - h4
    r = left * right
    loss = np.maximum(0.0, 1.0 - r)
    active = (r <= 1.0).astype(np.float64)
    g1 = -right * active
    g3 = -left * active
    return loss, (g1, -g1, g3, -g3)


def batch_loss(h1, h2, h3, h4):
    """Mean hinge loss and mean misrank fraction over a batch of quadruples."""
    r = agreement(h1, h2, h3, h4)
    if r.size == 0:
        raise ValueError("batch_loss requires a non-empty batch")
    return float(np.mean(hinge(r))), float(np.mean(misrank_count(r)))
