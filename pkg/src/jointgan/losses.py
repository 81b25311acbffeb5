"""Adversarial loss arithmetic.

Per-stage generator loss combines the unconditional and conditional fake
scores; the total generator loss sums the stages and adds the weighted
image-text matching term. Each discriminator's loss scores matched real
images up and fakes down on both heads. All expectations are batch means and
all logs are natural.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .discriminators import DiscriminatorOutput

DEFAULT_LAMBDA = 5.0


def _check_probs(name: str, t: torch.Tensor) -> None:
    if t.numel() == 0:
        raise ValueError(f"{name}: empty score tensor")
    lo, hi = float(t.detach().min()), float(t.detach().max())
    if lo <= 0.0 or hi >= 1.0:
        raise ValueError(f"{name}: probabilities must lie strictly in (0, 1), got [{lo}, {hi}]")


def generator_stage_loss(fake_out: DiscriminatorOutput) -> torch.Tensor:
    """-1/2 E[log D(fake)] - 1/2 E[log D(fake, C)]."""
    _check_probs("fake uncond", fake_out.uncond_score)
    _check_probs("fake cond", fake_out.cond_score)
    return -0.5 * torch.log(fake_out.uncond_score).mean() - 0.5 * torch.log(
        fake_out.cond_score
    ).mean()


def total_generator_loss(
    stage_losses, damsm_term, lam: float, stage_count: int | None = None
):
    """Sum of stage losses plus lam * matching term."""
    stage_losses = list(stage_losses)
    if stage_count is not None and len(stage_losses) != stage_count:
        raise ValueError(
            f"got {len(stage_losses)} stage losses for {stage_count} configured stages"
        )
    return sum(stage_losses) + lam * damsm_term


def discriminator_loss(
    real_out: DiscriminatorOutput,
    fake_out: DiscriminatorOutput,
    wrong_out: DiscriminatorOutput | None = None,
) -> torch.Tensor:
    """-1/2 E[log D(x)] - 1/2 E[log(1-D(x_hat))] - 1/2 E[log D(x,C)] - 1/2 E[log(1-D(x_hat,C))].

    wrong_out, when given, scores the real image against a mismatched
    caption and adds -1/2 E[log(1 - D(x, C_wrong))] on the conditional head
    only. Off by default.
    """
    for name, t in (
        ("real uncond", real_out.uncond_score),
        ("real cond", real_out.cond_score),
        ("fake uncond", fake_out.uncond_score),
        ("fake cond", fake_out.cond_score),
    ):
        _check_probs(name, t)
    loss = (
        -0.5 * torch.log(real_out.uncond_score).mean()
        - 0.5 * torch.log(1.0 - fake_out.uncond_score).mean()
        - 0.5 * torch.log(real_out.cond_score).mean()
        - 0.5 * torch.log(1.0 - fake_out.cond_score).mean()
    )
    if wrong_out is not None:
        _check_probs("wrong cond", wrong_out.cond_score)
        loss = loss - 0.5 * torch.log(1.0 - wrong_out.cond_score).mean()
    return loss


@dataclass
class LossReport:
    stage_losses: list[float]
    stage_total: float
    damsm: float
    lam: float
    total: float
    d_losses: list[float] = field(default_factory=list)
    text_grad_norm: float = 0.0

    @classmethod
    def from_terms(cls, stage_losses, damsm, lam, d_losses, text_grad_norm=0.0):
        def scalar(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        stage_losses = [scalar(v) for v in stage_losses]
        damsm = scalar(damsm)
        stage_total = sum(stage_losses)
        return cls(
            stage_losses=stage_losses,
            stage_total=stage_total,
            damsm=damsm,
            lam=float(lam),
            total=stage_total + float(lam) * damsm,
            d_losses=[scalar(v) for v in d_losses],
            text_grad_norm=float(text_grad_norm),
        )

    def as_dict(self, step: int | None = None) -> dict:
        record = {} if step is None else {"step": step}
        record.update(
            {
                "L_G": self.total,
                "L_stage": self.stage_losses,
                "L_stage_total": self.stage_total,
                "L_DAMSM": self.damsm,
                "lambda": self.lam,
                "L_D": self.d_losses,
                "text_grad_norm": self.text_grad_norm,
            }
        )
        return record
