"""Joint-entropy regularization over discretized attention maps.

Attention values are normalized, assigned to B bins (hard one-hot, or soft
triangular weights over the two nearest bin centers), combined into a B x B
joint distribution, and reduced to -sum(P * log P). The soft path is built on
the tape so the loss is differentiable; hard binning is the evaluation
oracle and refuses to participate in gradients.

Two joint constructions are provided. ``aligned`` pairs element i of one map
with element i of the other, so the joint actually measures correspondence.
``pairwise-literal`` pairs every i with every j, which factorizes into the
outer product of the marginals and is therefore blind to correspondence; it
is kept as a selectable mode for comparison runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

JOINT_MODES = ("aligned", "pairwise-literal")

# how often the constant-map fallback fired (observability hook for tests)
constant_map_count = 0

# rescues exactly-zero cells inside log; anything above ~1e-284 is unaffected
_LOG_EPS = 1e-300


@dataclass(frozen=True)
class BinningConfig:
    bins: int = 32
    normalization: str = "per-map-min-max"  # or "fixed-unit"
    assignment: str = "soft"  # or "hard"
    kernel_width: float = 1.0  # in units of bin width, soft mode only
    # floor on the min-max dynamic range: near-flat maps would otherwise be
    # stretched to [0, 1], amplifying gradients by 1 / (max - min)
    min_range: float = 0.0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.kernel_width <= 0:
            raise ValueError("kernel width must be positive")
        if self.min_range < 0:
            raise ValueError("min_range must be nonnegative")
        if self.normalization not in ("per-map-min-max", "fixed-unit"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.assignment not in ("hard", "soft"):
            raise ValueError(f"unknown assignment mode {self.assignment!r}")


def bin_centers(bins: int) -> np.ndarray:
    """Centers of B equal cells over [0, 1]."""
    return (np.arange(bins) + 0.5) / bins


def _normalize_values(values: np.ndarray, cfg: BinningConfig) -> np.ndarray | None:
    """Map raw values into [0, 1]; None signals the constant-map fallback."""
    if cfg.normalization == "fixed-unit":
        return np.clip(values, 0.0, 1.0)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        global constant_map_count
        constant_map_count += 1
        log.debug("constant map under min-max normalization; all mass in bin 0")
        return None
    return (values - lo) / max(hi - lo, cfg.min_range)


def discretize(attn: Tensor, cfg: BinningConfig) -> Tensor:
    """Assignment matrix (N, B) for the flattened attention values.

    Hard mode: one-hot rows at the containing bin. Soft mode: nonnegative
    rows summing to 1 with triangular weights around the nearest centers.
    The min-max range is treated as constant for gradients, matching the
    usual soft-histogram construction.
    """
    if not np.all(np.isfinite(attn.values)):
        raise FloatingPointError("discretize: non-finite attention values")
    n = attn.size
    b = cfg.bins
    normed = _normalize_values(attn.values.reshape(-1), cfg)
    if normed is None:
        out = np.zeros((n, b))
        out[:, 0] = 1.0
        return Tensor(out)

    if cfg.assignment == "hard":
        idx = np.minimum((normed * b).astype(int), b - 1)
        out = np.zeros((n, b))
        out[np.arange(n), idx] = 1.0
        return Tensor(out)

    # soft path, on the tape: triangular kernel around each bin center
    flat = ad.reshape(attn, (n, 1))
    if cfg.normalization == "per-map-min-max":
        lo = float(attn.values.min())
        hi = float(attn.values.max())
        flat = ad.scale(ad.add_const(flat, -lo), 1.0 / max(hi - lo, cfg.min_range))
    centers = Tensor(np.tile(bin_centers(b), (n, 1)))
    width = cfg.kernel_width / b
    spread = ad.matmul(flat, Tensor(np.ones((1, b))))
    dist = ad.add(spread, ad.scale(centers, -1.0))
    # |d| via relu(d) + relu(-d); triangle = relu(1 - |d|/width)
    absd = ad.add(ad.relu(dist), ad.relu(ad.scale(dist, -1.0)))
    raw = ad.relu(ad.add_const(ad.scale(absd, -1.0 / width), 1.0))
    empty = raw.values.sum(axis=1) <= 0
    if np.any(empty):
        # kernel support missed every center (possible only for width <= 0.5
        # bins): those rows fall back to the hard one-hot, detaching the batch
        if _on_live_tape(attn):
            raise ValueError(
                "discretize: kernel width too narrow for a differentiable "
                "assignment; widen the kernel or use hard mode"
            )
        hard = discretize(Tensor(attn.values), _hard(cfg))
        soft = raw.values / np.maximum(raw.values.sum(axis=1, keepdims=True), 1e-300)
        soft[empty] = hard.values[empty]
        return Tensor(soft)
    return ad.normalize_rows_sum(raw)


def _hard(cfg: BinningConfig) -> BinningConfig:
    return BinningConfig(cfg.bins, cfg.normalization, "hard", cfg.kernel_width)


def joint_distribution(a2: Tensor, a3: Tensor, mode: str = "aligned") -> Tensor:
    """B x B joint distribution from two (N, B) assignment matrices."""
    if mode not in JOINT_MODES:
        raise ValueError(f"unknown joint mode {mode!r}")
    if a2.shape != a3.shape:
        raise ValueError(
            f"joint_distribution: element-count mismatch {a2.shape} vs {a3.shape}"
        )
    n = a2.shape[0]
    if mode == "aligned":
        return ad.scale(ad.matmul(ad.transpose(a2), a3), 1.0 / n)
    # pairwise over all (i, j): algebraically the outer product of marginals
    ones = Tensor(np.ones((1, n)))
    m2 = ad.scale(ad.matmul(ones, a2), 1.0 / n)  # (1, B)
    m3 = ad.scale(ad.matmul(ones, a3), 1.0 / n)
    return ad.matmul(ad.transpose(m2), m3)


def joint_entropy(p: Tensor) -> Tensor:
    """-sum(P * log P) with the 0*log(0) = 0 convention, natural log."""
    plogp = ad.mul(p, ad.log(ad.add_const(p, _LOG_EPS)))
    return ad.scale(ad.tsum(plogp), -1.0)


def entropy_of(p: np.ndarray) -> float:
    """Exact entropy of a plain distribution array (evaluation oracle)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def je_loss(
    a_2d: Tensor,
    a_3d: Tensor,
    cfg: BinningConfig,
    mode: str = "aligned",
) -> Tensor:
    """Joint entropy of the two discretized attention maps, as a scalar Tensor.

    Differentiable in soft assignment mode; in hard mode the inputs must not
    be attached to a live tape.
    """
    if a_2d.size != a_3d.size:
        raise ValueError(
            f"je_loss: element-count mismatch {a_2d.shape} vs {a_3d.shape}"
        )
    if cfg.assignment == "hard" and _on_live_tape(a_2d, a_3d):
        raise ValueError("je_loss: hard binning has no gradient; use soft mode")
    w2 = discretize(a_2d, cfg)
    w3 = discretize(a_3d, cfg)
    return joint_entropy(joint_distribution(w2, w3, mode))


def _on_live_tape(*tensors: Tensor) -> bool:
    tape = ad._active_tape()
    if tape is None:
        return False
    return any(ad._participates(t, tape) for t in tensors)


def marginals(p: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row and column marginals of a joint distribution."""
    pv = p.values if isinstance(p, Tensor) else np.asarray(p)
    return pv.sum(axis=1), pv.sum(axis=0)
