"""Finite-difference verification of every trained loss term.

Each check differentiates the loss with respect to its natural inputs
(embedding batches for the classification losses, attention-map pairs for
the joint-entropy loss) and compares against central differences. The
soft-binning kernel is piecewise linear, so joint-entropy check points are
nudged off its kink locations; finite differences are only meaningful where
the function is differentiable.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, grad_check
from .entropy import BinningConfig, je_loss
from .margin import ClassifierHead, MarginParams, domain_loss

_EMBED_DIM = 12
_CLASSES = 5
_BATCH = 3
_MAP_SIDE = 5
_JE_BINS = 8


def _nudged_map(rng: np.random.Generator, bins: int, h: float) -> np.ndarray:
    """Uniform attention-like values kept away from the triangular kernel's
    kinks at (j + 0.5) / bins."""
    v = rng.uniform(0.02, 0.98, (_MAP_SIDE, _MAP_SIDE))
    margin = 200.0 * h
    frac = v * bins - np.floor(v * bins)  # kinks sit at frac = 0.5
    near = np.abs(frac - 0.5) < margin * bins
    v[near] += 3.0 * margin
    return v


def _fresh_head(rng: np.random.Generator) -> ClassifierHead:
    head = ClassifierHead(_EMBED_DIM, _CLASSES, rng=np.random.default_rng(rng.integers(2**31)))
    return head


def gradcheck_suite(seed: int = 0, points: int = 20, h: float = 1e-6) -> dict[str, float]:
    """Max relative gradient error for each loss term over random points."""
    rng = np.random.default_rng(seed)
    params = MarginParams()
    je_cfg = BinningConfig(bins=_JE_BINS, normalization="fixed-unit", assignment="soft")
    errors = {"l_2d": 0.0, "l_3d": 0.0, "l_je": 0.0, "total": 0.0}

    for _ in range(points):
        head2 = _fresh_head(rng)
        head3 = _fresh_head(rng)
        labels = rng.integers(0, _CLASSES, _BATCH)
        emb2 = rng.normal(0.0, 1.0, (_BATCH, _EMBED_DIM)) * rng.uniform(0.5, 3.0)
        emb3 = rng.normal(0.0, 1.0, (_BATCH, _EMBED_DIM)) * rng.uniform(0.5, 3.0)
        a2 = _nudged_map(rng, _JE_BINS, h)
        a3 = _nudged_map(rng, _JE_BINS, h)

        errors["l_2d"] = max(
            errors["l_2d"],
            grad_check(lambda v: domain_loss(head2, v, labels, params), Tensor(emb2), h),
        )
        errors["l_3d"] = max(
            errors["l_3d"],
            grad_check(lambda v: domain_loss(head3, v, labels, params), Tensor(emb3), h),
        )
        errors["l_je"] = max(
            errors["l_je"],
            grad_check(lambda v: je_loss(v, Tensor(a3), je_cfg), Tensor(a2), h),
            grad_check(lambda v: je_loss(Tensor(a2), v, je_cfg), Tensor(a3), h),
        )

        def total_from(emb2_t=None, emb3_t=None, a2_t=None, a3_t=None):
            t = domain_loss(head2, emb2_t or Tensor(emb2), labels, params)
            t = t + domain_loss(head3, emb3_t or Tensor(emb3), labels, params)
            return t + je_loss(a2_t or Tensor(a2), a3_t or Tensor(a3), je_cfg)

        errors["total"] = max(
            errors["total"],
            grad_check(lambda v: total_from(emb2_t=v), Tensor(emb2), h),
            grad_check(lambda v: total_from(emb3_t=v), Tensor(emb3), h),
            grad_check(lambda v: total_from(a2_t=v), Tensor(a2), h),
            grad_check(lambda v: total_from(a3_t=v), Tensor(a3), h),
        )
    return errors
