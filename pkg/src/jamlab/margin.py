"""Per-domain classifier heads with an adaptive angular/additive margin.

The target-class logit is s * (cos(theta + m*(1-h*k)) - m*(1+h*k)); all other
logits are s * cos(theta). k is a batch-normalized feature-norm proxy for
sample hardness, clipped to [-1, 1] and excluded from gradient flow; with the
default h = 0 it is inert and the head reduces to a combined angular plus
additive cosine margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SIN_FLOOR = 1e-30  # keeps sqrt(1 - cos^2) finite-gradient at |cos| = 1
_SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class MarginParams:
    m: float = 0.5
    h: float = 0.0
    t_a: float = 0.01
    s: float = 64.0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("scale s must be positive")
        if self.m < 0:
            raise ValueError("margin m must be nonnegative")


class ClassifierHead:
    """Class-weight matrix plus running embedding-norm statistics."""

    def __init__(
        self,
        embed_dim: int,
        num_classes: int,
        rng: np.random.Generator | None = None,
        mu_init: float = 20.0,
        sigma_init: float = 100.0,
    ):
        rng = rng or np.random.default_rng(0)
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        # rows are classes; L2-normalized before every use
        self.weights = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(embed_dim), (num_classes, embed_dim)),
            requires_grad=True,
        )
        self.mu_z = mu_init
        self.sigma_z = sigma_init


def norm_stats_update(head: ClassifierHead, norms: np.ndarray, t_a: float) -> None:
    """EMA update of the head's embedding-norm mean and standard deviation."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ValueError("norm_stats_update: empty batch")
    head.mu_z = (1.0 - t_a) * head.mu_z + t_a * float(norms.mean())
    head.sigma_z = (1.0 - t_a) * head.sigma_z + t_a * float(norms.std())


def hardness(head: ClassifierHead, norms: np.ndarray, params: MarginParams) -> np.ndarray:
    """Per-sample hardness k in [-1, 1]; identically 0 when h = 0."""
    norms = np.asarray(norms, dtype=np.float64)
    if params.h == 0.0:
        return np.zeros_like(norms)
    sigma = max(head.sigma_z, _SIGMA_FLOOR)
    k = (norms - head.mu_z) / (sigma / params.h)
    return np.clip(k, -1.0, 1.0)


def _margin_logits(
    head: ClassifierHead, embeddings: Tensor, labels: np.ndarray, params: MarginParams
) -> Tensor:
    if embeddings.values.ndim != 2 or embeddings.shape[1] != head.embed_dim:
        raise ValueError(
            f"embeddings {embeddings.shape} incompatible with head dim {head.embed_dim}"
        )
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= head.num_classes:
        raise ValueError(
            f"label out of range: {labels.min()}..{labels.max()} "
            f"for {head.num_classes} classes"
        )
    batch = embeddings.shape[0]
    if np.any(np.linalg.norm(embeddings.values, axis=1) == 0):
        raise ValueError("zero-norm embedding")

    cosine = ad.matmul(
        ad.l2_normalize_rows(embeddings),
        ad.transpose(ad.l2_normalize_rows(head.weights)),
    )

    onehot = np.zeros((batch, head.num_classes))
    onehot[np.arange(batch), labels] = 1.0
    onehot_t = Tensor(onehot)

    # hardness from detached norms; statistics never carry gradient
    norms = np.linalg.norm(embeddings.values, axis=1)
    k = hardness(head, norms, params)
    m_ang = (params.m * (1.0 - params.h * k)).reshape(batch, 1)
    m_add = (params.m * (1.0 + params.h * k)).reshape(batch, 1)

    # cos(theta + m_ang) expanded as cos*cos - sin*sin: exact at theta = 0,
    # where recovering theta through a clamped arccos would cost ~1e-4
    target_cos = ad.rowsum(ad.mul(cosine, onehot_t))
    one_minus_sq = ad.add_const(ad.scale(ad.mul(target_cos, target_cos), -1.0), 1.0)
    sin_theta = ad.sqrt(ad.clip(one_minus_sq, _SIN_FLOOR, np.inf))
    shifted = ad.add(
        ad.mul(target_cos, Tensor(np.cos(m_ang))),
        ad.scale(ad.mul(sin_theta, Tensor(np.sin(m_ang))), -1.0),
    )
    target_logit = ad.add(shifted, Tensor(-m_add))

    keep = ad.mul(cosine, Tensor(1.0 - onehot))
    placed = ad.mul_colvec(onehot_t, target_logit)
    return ad.scale(ad.add(keep, placed), params.s)


def adaface_probability(
    head: ClassifierHead, embeddings: Tensor, labels, params: MarginParams
) -> Tensor:
    """Class-probability rows under the margin-adjusted logits."""
    return ad.softmax_rows(_margin_logits(head, embeddings, labels, params))


def domain_loss(
    head: ClassifierHead, embeddings: Tensor, labels, params: MarginParams
) -> Tensor:
    """Mean negative log true-class probability over the batch."""
    labels = np.asarray(labels, dtype=int)
    batch = embeddings.shape[0]
    probs = adaface_probability(head, embeddings, labels, params)
    onehot = np.zeros((batch, head.num_classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = ad.mul(ad.log(probs), Tensor(onehot))
    return ad.scale(ad.tsum(picked), -1.0 / batch)


def total_loss(
    l_2d: Tensor, l_3d: Tensor | None = None, l_je: Tensor | None = None
) -> Tensor:
    """Equal-weight sum of the enabled loss terms."""
    for term in (l_2d, l_3d, l_je):
        if term is not None and not np.isfinite(term.values):
            raise FloatingPointError("total_loss: non-finite loss term")
    out = l_2d
    if l_3d is not None:
        out = ad.add(out, l_3d)
    if l_je is not None:
        out = ad.add(out, l_je)
    return out
