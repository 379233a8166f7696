"""Reconstruction, adversarial, SSIM and mask losses and their weighted sum.

Images are signed-range tensors (N x C x H x W or C x H x W).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch

from . import metrics

EPS = 1e-7
TERMS = ("rec", "adv", "ssim", "mask")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_adv: float = 0.25
    lambda_ssim: float = 60.0
    lambda_mask: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise LossError(f"{f.name} must be >= 0")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(x_rec: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    _same_shape(x_rec, x_gt)
    return (x_gt - x_rec).abs().mean()


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def adv_loss_d(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator loss -[log D(real) + log(1 - D(fake))], batch-averaged."""
    p_real, p_fake = torch.as_tensor(p_real), torch.as_tensor(p_fake)
    return -(torch.log(_clamp(p_real)).mean() + torch.log(1.0 - _clamp(p_fake)).mean())


def adv_loss_g(p_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -log D(fake)."""
    return -torch.log(_clamp(torch.as_tensor(p_fake))).mean()


def ssim_loss(x_rec: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """1 - SSIM, with both images mapped from signed to unit range."""
    _same_shape(x_rec, x_gt)
    value, _ = metrics.ssim((x_rec + 1) / 2, (x_gt + 1) / 2)
    return 1.0 - value


def mask_loss(x_rec: torch.Tensor, x_gt: torch.Tensor, i_mask: torch.Tensor) -> torch.Tensor:
    """L1 between the masked images, normalized by the total element count.

    ``i_mask`` is 1 x H x W (or N x 1 x H x W) and broadcast over channels.
    """
    _same_shape(x_rec, x_gt)
    if i_mask.dim() != x_rec.dim() or i_mask.shape[-2:] != x_rec.shape[-2:] or i_mask.shape[-3] != 1:
        raise LossError(f"mask {tuple(i_mask.shape)} does not match image {tuple(x_rec.shape)}")
    if not torch.all((i_mask == 0) | (i_mask == 1)):
        raise LossError("mask must be binary")
    m = i_mask.to(x_rec.dtype)
    return (m * x_gt - m * x_rec).abs().mean()


@dataclass
class LossBreakdown:
    rec: float | None = None
    adv_g: float | None = None
    adv_d: float | None = None
    ssim: float | None = None
    mask: float | None = None
    total: float = 0.0
    active_set: frozenset = field(default_factory=frozenset)

    CSV_COLUMNS = ("step", "stage", "rec", "adv_g", "adv_d", "ssim", "mask", "total")

    def csv_row(self, step: int, stage: str) -> list[str]:
        vals = [self.rec, self.adv_g, self.adv_d, self.ssim, self.mask, self.total]
        return [str(step), stage] + ["" if v is None else repr(float(v)) for v in vals]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("rec", "adv_g", "adv_d", "ssim", "mask", "total")}
        d["active_set"] = sorted(self.active_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        d = dict(d)
        d["active_set"] = frozenset(d.get("active_set", ()))
        return cls(**d)


def weighted_total(parts: dict, w: LossWeights, active_set) -> torch.Tensor | float:
    """Sum of lambda_term * value over the active generator terms.

    ``parts`` maps rec/adv/ssim/mask to tensors or floats; ``adv`` is the
    generator-side adversarial term.
    """
    active = set(active_set)
    unknown = active - set(TERMS)
    if unknown:
        raise LossError(f"unknown loss terms {sorted(unknown)}")
    total = 0.0
    for term in TERMS:
        if term not in active:
            continue
        if parts.get(term) is None:
            raise LossError(f"active term {term!r} has no computed value")
        total = total + w.weight(term) * parts[term]
    return total


def total_loss(parts: dict, w: LossWeights, active_set, adv_d: float | None = None) -> LossBreakdown:
    """LossBreakdown of the active terms; inactive terms are recorded as absent."""
    active = frozenset(active_set)
    total = weighted_total(parts, w, active)
    get = lambda k: float(parts[k]) if k in active else None  # noqa: E731
    return LossBreakdown(
        rec=get("rec"),
        adv_g=get("adv"),
        adv_d=adv_d if "adv" in active else None,
        ssim=get("ssim"),
        mask=get("mask"),
        total=float(total),
        active_set=active,
    )
