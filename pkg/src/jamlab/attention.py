"""Joint 2D-3D attention mapping with query/key weights shared across domains.

Both domains run the same non-local style block: flatten the feature map to
P = H*W positions, score positions against each other through shared 1x1
query/key maps, softmax row-wise, apply a per-domain value map, and add the
residual scaled by a learnable gamma. Sharing a single Q/K storage is the
point: a gradient arriving from either domain moves the attention computed
for both.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DOMAINS = ("2d", "3d")


class JamParams:
    """Shared query/key maps, per-domain value maps, learnable gamma.

    ``q_weight``/``k_weight`` are single Tensor objects read by both domains.
    ``tied_gamma`` keeps one gamma for both domains (the default); otherwise
    each domain gets its own scalar.
    """

    def __init__(
        self,
        channels: int,
        attn_channels: int | None = None,
        tied_gamma: bool = True,
        gamma_init: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.attn_channels = attn_channels or max(1, channels // 2)
        std = 1.0 / np.sqrt(channels)
        self.q_weight = Tensor(
            rng.normal(0.0, std, (channels, self.attn_channels)), requires_grad=True
        )
        self.k_weight = Tensor(
            rng.normal(0.0, std, (channels, self.attn_channels)), requires_grad=True
        )
        self.value_weights = {
            d: Tensor(rng.normal(0.0, std, (channels, channels)), requires_grad=True)
            for d in DOMAINS
        }
        self.tied_gamma = tied_gamma
        if tied_gamma:
            g = Tensor(np.asarray(gamma_init), requires_grad=True)
            self.gammas = {d: g for d in DOMAINS}
        else:
            self.gammas = {
                d: Tensor(np.asarray(gamma_init), requires_grad=True) for d in DOMAINS
            }

    def query_weight(self, domain: str) -> Tensor:
        _check_domain(domain)
        return self.q_weight

    def key_weight(self, domain: str) -> Tensor:
        _check_domain(domain)
        return self.k_weight

    def value_weight(self, domain: str) -> Tensor:
        _check_domain(domain)
        return self.value_weights[domain]

    def gamma(self, domain: str) -> Tensor:
        _check_domain(domain)
        return self.gammas[domain]

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "jam.q": self.q_weight,
            "jam.k": self.k_weight,
            "jam.v_2d": self.value_weights["2d"],
            "jam.v_3d": self.value_weights["3d"],
        }
        if self.tied_gamma:
            params["jam.gamma"] = self.gammas["2d"]
        else:
            params["jam.gamma_2d"] = self.gammas["2d"]
            params["jam.gamma_3d"] = self.gammas["3d"]
        return params


def _check_domain(domain: str) -> None:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}, expected one of {DOMAINS}")


def jam_forward(z: Tensor, params: JamParams, domain: str) -> tuple[Tensor, Tensor]:
    """Apply the joint attention block to an (H, W, C) feature map.

    Returns the modified feature map (same shape) and the P x P row-stochastic
    attention map. With gamma = 0 the output is exactly the input.
    """
    _check_domain(domain)
    if z.values.ndim != 3 or z.shape[2] != params.channels:
        raise ValueError(
            f"jam_forward: feature map {z.shape} incompatible with "
            f"{params.channels} channels"
        )
    h, w, c = z.shape
    flat = ad.reshape(z, (h * w, c))
    q = ad.conv1x1(flat, params.query_weight(domain))
    k = ad.conv1x1(flat, params.key_weight(domain))
    scores = ad.matmul(q, ad.transpose(k))
    attn = ad.softmax_rows(scores)
    v = ad.conv1x1(flat, params.value_weight(domain))
    out = ad.add(ad.smul(params.gamma(domain), ad.matmul(attn, v)), flat)
    return ad.reshape(out, (h, w, c)), attn


def shared_parameter_audit(params: JamParams) -> bool:
    """True iff both domains resolve to the same query and key storage."""
    return (
        params.query_weight("2d") is params.query_weight("3d")
        and params.key_weight("2d") is params.key_weight("3d")
    )
