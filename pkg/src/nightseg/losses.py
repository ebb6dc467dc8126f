"""Training objectives: segmentation cross-entropy, reconstruction L1,
least-squares adversarial terms, perceptual consistency, probability/label
fusion and the weighted total.

All functions take raw tensors shaped [..., C, H, W] (an optional leading
batch dimension) and return scalar tensors that stay attached to the
autograd graph, so they compose into training steps and gradient checks
alike.

Least-squares convention: real label 1, fake label 0, generator pulls fakes
toward 1. A formulation that swaps the two labels is equivalent under the
score relabelling s -> 1 - s, so discriminator probes stay conventional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .core import ClassTaxonomy, LabelMap, OneHotMask, ProbMap, onehot

LOG_EPS = 1e-8

# canonical term names, in report order
WARMUP_TERMS = (
    "seg_d",
    "seg_d2n",
    "inner_d",
    "outer_d",
    "inner_n",
    "outer_n",
    "inner_ud",
    "adv_d2n",
    "adv_n2d",
    "percep_d",
    "percep_n",
)
SELFTRAIN_TERMS = WARMUP_TERMS + ("seg_ud_pseudo", "seg_n_coteach")

# term -> weight-category mapping for the weighted total
_CATEGORY = {
    "seg_d": "seg",
    "seg_d2n": "seg",
    "seg_ud_pseudo": "seg",
    "seg_n_coteach": "seg",
    "inner_d": "inner",
    "inner_n": "inner",
    "inner_ud": "inner",
    "outer_d": "outer",
    "outer_n": "outer",
    "adv_d2n": "adv",
    "adv_n2d": "adv",
    "percep_d": "percep",
    "percep_n": "percep",
}


@dataclass(frozen=True)
class LossWeights:
    """Per-category weights of the total objective plus the two perceptual
    sub-weights (latent consistency and structural distance)."""

    lambda_seg: float = 1.25
    lambda_inner: float = 1.0
    lambda_outer: float = 1.0
    lambda_adv: float = 0.1
    lambda_percep: float = 1.0
    lambda_z: float = 0.1
    lambda_l: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    def category(self, name: str) -> float:
        return getattr(self, "lambda_" + name)


@dataclass(frozen=True)
class LossReport:
    """Named scalar map of one training step's loss terms, including 'total'."""

    terms: Mapping[str, float]

    def __post_init__(self):
        for k, v in self.terms.items():
            if not math.isfinite(float(v)):
                raise ValueError(f"loss term {k!r} is not finite: {v}")
        if "total" not in self.terms:
            raise ValueError("report must include a 'total' entry")

    @property
    def total(self) -> float:
        return self.terms["total"]

    def __getitem__(self, k: str) -> float:
        return self.terms[k]

    def keys(self):
        return self.terms.keys()


def _t(x) -> torch.Tensor:
    """Accept either a typed wrapper from core or a raw tensor."""
    return x.data if isinstance(x, (ProbMap, OneHotMask, LabelMap)) else x


def seg_ce(p, target) -> torch.Tensor:
    """Cross entropy of probabilities against a (possibly additive) one-hot
    target, averaged over supervised pixels; 0 if no pixel is supervised.

    A pixel whose target channels sum above 1 (co-teaching) contributes every
    set channel's log term but still counts once in the normalizer.
    """
    p, target = _t(p), _t(target)
    loss_sum = -(target * torch.log(p.clamp(min=LOG_EPS))).sum()
    supervised = (target.sum(dim=-3) > 0).sum()
    return loss_sum / supervised.clamp(min=1)


def recon_l1(x_hat, x) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    x_hat = x_hat.data if hasattr(x_hat, "domain_tag") else x_hat
    x = x.data if hasattr(x, "domain_tag") else x
    return (x_hat - x).abs().mean()


def lsgan_disc(score_real_list: Sequence[torch.Tensor], score_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator side: every real score map pulled to 1, the fake to 0."""
    if len(score_real_list) == 0:
        raise ValueError("need at least one real score map")
    loss = ((score_fake - 0.0) ** 2).mean()
    for s in score_real_list:
        loss = loss + ((s - 1.0) ** 2).mean()
    return loss


def lsgan_gen(score_fake: torch.Tensor) -> torch.Tensor:
    """Generator side: fake scores pulled toward the real label."""
    return ((score_fake - 1.0) ** 2).mean()


def _grad_magnitude(x: torch.Tensor) -> torch.Tensor:
    gx = x[..., :, 1:] - x[..., :, :-1]
    gy = x[..., 1:, :] - x[..., :-1, :]
    gx = F.pad(gx, (0, 1, 0, 0))
    gy = F.pad(gy, (0, 0, 0, 1))
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def struct_dist(x_a: torch.Tensor, x_b: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Structural distance: mean L1 between spatial-gradient-magnitude maps at
    `scales` dyadic resolutions. Symmetric, nonnegative, zero for identical
    inputs (and for inputs differing only by a constant offset)."""
    total = x_a.new_zeros(())
    a, b = x_a, x_b
    for s in range(scales):
        if s > 0:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        total = total + (_grad_magnitude(a) - _grad_magnitude(b)).abs().mean()
    return total / scales


def perceptual(x_trans, x_orig, z_trans, z_orig, w: LossWeights,
               struct_fn=None) -> torch.Tensor:
    """Latent L1 consistency plus structural distance between an image and its
    cross-domain translation. `struct_fn` may swap in a different structural
    metric (e.g. a learned one); the default is :func:`struct_dist`."""
    x_trans = x_trans.data if hasattr(x_trans, "domain_tag") else x_trans
    x_orig = x_orig.data if hasattr(x_orig, "domain_tag") else x_orig
    z_trans, z_orig = _t(z_trans), _t(z_orig)
    sd = (struct_fn or struct_dist)(x_trans, x_orig)
    return w.lambda_z * (z_trans - z_orig).abs().mean() + w.lambda_l * sd


def fuse_probs(p: ProbMap, y: LabelMap, alpha: float, taxonomy: ClassTaxonomy) -> ProbMap:
    """Blend a prediction toward the ground-truth one-hot at labelled pixels:
    alpha * onehot(y) + (1 - alpha) * p; ignore pixels pass through unchanged.

    The result is typically detached before being rendered in the day
    decoder; callers own that decision.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    oh = onehot(y, taxonomy).data.to(p.data.dtype)
    labeled = (y.data != taxonomy.ignore_id).to(p.data.dtype).unsqueeze(0)
    fused = labeled * (alpha * oh + (1 - alpha) * p.data) + (1 - labeled) * p.data
    return ProbMap(fused)


def total_loss(report_terms: Mapping[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """Weighted sum of named terms using the category table; rejects unknown
    names and non-finite values (naming the offender)."""
    total = None
    for name, value in report_terms.items():
        if name not in _CATEGORY:
            raise ValueError(f"unknown loss term {name!r}")
        v = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
        if not torch.isfinite(v):
            raise ValueError(f"loss term {name!r} is not finite")
        contrib = w.category(_CATEGORY[name]) * v
        total = contrib if total is None else total + contrib
    if total is None:
        return torch.zeros(())
    return total
