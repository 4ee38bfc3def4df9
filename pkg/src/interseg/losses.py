"""Segmentation loss family: BCE, Dice, their sum, per-level MSE terms,
reconstruction BCE, and the weighted composites built from them.

All loss functions return a scalar Tensor wired into the gradient graph.
The composite entry points additionally return a :class:`LossBreakdown`
of plain floats for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, clip

_CLAMP_EPS = 1e-7  # keeps log finite when float32 sigmoid rounds to 0 or 1


@dataclass
class LossWeights:
    """Scalars of the composite losses.

    ``alpha``/``gamma`` weight the image/mask segmentation terms,
    ``lam``/``omega`` the per-level MSE terms, ``beta`` the reconstruction
    term. ``bce_weight``/``dice_weight`` set the mix inside each
    BCE+Dice term.
    """

    alpha: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0
    omega: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    beta: float = 1.0
    bce_weight: float = 1.0
    dice_weight: float = 1.0

    def validate(self):
        if len(self.omega) != 5:
            raise ValueError(f"omega needs 5 entries, got {len(self.omega)}")
        vals = [self.alpha, self.gamma, self.lam, self.beta,
                self.bce_weight, self.dice_weight, *self.omega]
        for v in vals:
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and >= 0, got {v}")
        return self


@dataclass
class LossBreakdown:
    """Per-term scalar record of one loss evaluation (floats, no graph)."""

    l_image: float = 0.0
    l_mask: float = 0.0
    l_j: list = field(default_factory=lambda: [0.0] * 5)
    l_t: float = 0.0
    l_h1: float = 0.0
    l_h: float = 0.0


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped inside (0, 1)."""
    _check_same_shape(pred, target, "bce_loss")
    p = clip(pred, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    ll = target * p.log() + (1.0 - target) * (1.0 - p).log()
    return -ll.mean()


def dice_loss(pred: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """1 - Dice coefficient, per sample then averaged over the batch.

    A rank-1 input counts as a single sample; for higher ranks axis 0 is
    the batch axis.
    """
    _check_same_shape(pred, target, "dice_loss")
    if pred.ndim <= 1:
        inter = (pred * target).sum()
        denom = pred.sum() + target.sum() + eps
        return 1.0 - (2.0 * inter + eps) / denom
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axes)
    denom = pred.sum(axes) + target.sum(axes) + eps
    return (1.0 - (2.0 * inter + eps) / denom).mean()


def l_bd(pred: Tensor, target: Tensor,
         bce_weight: float = 1.0, dice_weight: float = 1.0) -> Tensor:
    """Weighted BCE + Dice segmentation loss."""
    return bce_weight * bce_loss(pred, target) + dice_weight * dice_loss(pred, target)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mse_loss")
    d = a - b
    return (d * d).mean()


def _require_head(value, head: str, hint: str):
    if value is None:
        raise ValueError(f"loss requires head {head!r} but the forward pass "
                         f"produced none ({hint})")
    return value


def _hybrid_terms(outputs, m, w, detach_mask_branch):
    y = _require_head(outputs.y, "y", "final image-branch output")
    y_prime = _require_head(outputs.y_prime, "y_prime",
                            "plain U-Net has no mask branch")
    y_j = _require_head(outputs.y_j, "y_j", "intermediate image-branch outputs")
    y_prime_j = _require_head(outputs.y_prime_j, "y_prime_j",
                              "intermediate mask-branch outputs")
    if len(y_j) != len(y_prime_j):
        raise ShapeError(
            f"intermediate head counts differ: {len(y_j)} vs {len(y_prime_j)}"
        )
    if len(w.omega) < len(y_j):
        raise ValueError(
            f"{len(y_j)} intermediate levels but only {len(w.omega)} omega weights"
        )
    l_image = l_bd(y, m, w.bce_weight, w.dice_weight)
    l_mask = l_bd(y_prime, m, w.bce_weight, w.dice_weight)
    l_js = []
    for yj, ypj in zip(y_j, y_prime_j):
        target = ypj.detach() if detach_mask_branch else ypj
        l_js.append(mse_loss(yj, target))
    return l_image, l_mask, l_js


def hybrid_h1(outputs, m: Tensor, w: LossWeights,
              detach_mask_branch: bool = False):
    """alpha*L_image + gamma*L_mask + lam * sum_j omega_j * L_j."""
    l_image, l_mask, l_js = _hybrid_terms(outputs, m, w, detach_mask_branch)
    inter_sum = 0.0
    for wj, lj in zip(w.omega, l_js):
        inter_sum = inter_sum + wj * lj
    scalar = w.alpha * l_image + w.gamma * l_mask + w.lam * inter_sum
    br = LossBreakdown(
        l_image=l_image.item(),
        l_mask=l_mask.item(),
        l_j=[lj.item() for lj in l_js],
    )
    br.l_h1 = (w.alpha * br.l_image + w.gamma * br.l_mask
               + w.lam * sum(wj * lj for wj, lj in zip(w.omega, br.l_j)))
    br.l_h = br.l_h1
    return scalar, br


def normalize_image(x: Tensor) -> Tensor:
    """Per-image min-max rescale to [0,1]; constant images map to zeros.

    Returns a graph-free tensor: the reconstruction target is data.
    """
    data = x.data
    axes = tuple(range(1, data.ndim)) if data.ndim > 1 else (0,)
    lo = data.min(axis=axes, keepdims=True)
    hi = data.max(axis=axes, keepdims=True)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    return Tensor(((data - lo) / span).astype(data.dtype))


def total_h(outputs, x: Tensor, m: Tensor, w: LossWeights,
            detach_mask_branch: bool = False):
    """hybrid_h1 plus beta * BCE(x_tilde, x) with x rescaled to [0,1]."""
    x_tilde = _require_head(outputs.x_tilde, "x_tilde",
                            "only tied-decoder variants reconstruct the input")
    scalar1, br = hybrid_h1(outputs, m, w, detach_mask_branch)
    l_t = bce_loss(x_tilde, normalize_image(x))
    scalar = scalar1 + w.beta * l_t
    br.l_t = l_t.item()
    br.l_h = br.l_h1 + w.beta * br.l_t
    return scalar, br


def variant_loss(variant: str, outputs, x: Tensor, m: Tensor, w: LossWeights,
                 detach_mask_branch: bool = False):
    """The training loss each architecture minimizes."""
    if variant == "unet":
        l_image = l_bd(outputs.y, m, w.bce_weight, w.dice_weight)
        scalar = w.alpha * l_image
        br = LossBreakdown(l_image=l_image.item())
        br.l_h1 = w.alpha * br.l_image
        br.l_h = br.l_h1
        return scalar, br
    if variant in ("inter", "ae", "sae"):
        return hybrid_h1(outputs, m, w, detach_mask_branch)
    if variant in ("twi", "twae"):
        return total_h(outputs, x, m, w, detach_mask_branch)
    raise ValueError(f"unknown variant {variant!r}")
