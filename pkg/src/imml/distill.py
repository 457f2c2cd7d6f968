"""Student-imitates-teacher losses, the composite student objective and EMA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import torch

from .core import check_finite

PROB_FLOOR = 1e-12


@dataclass
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.999

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def kl_imitation(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                 temperature: float = 2.0, scale: bool = True) -> torch.Tensor:
    """``T^2 * KL(softmax(s/T) || softmax(t/T))``, averaged over leading batch dims.

    The teacher side is detached: no gradient reaches the teacher. With
    ``scale=False`` the bare divergence is returned (no ``T^2`` factor).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} "
                         f"vs {tuple(teacher_logits.shape)}")
    if student_logits.shape[-1] < 2:
        raise ValueError("need at least two classes")
    t = float(temperature)
    p_s = torch.softmax(student_logits / t, dim=-1)
    p_t = torch.softmax(teacher_logits.detach() / t, dim=-1)
    kl = (p_s * (torch.log(torch.clamp(p_s, min=PROB_FLOOR))
                 - torch.log(torch.clamp(p_t, min=PROB_FLOOR)))).sum(-1)
    factor = t * t if scale else 1.0
    return check_finite(factor * kl.mean(), "kl_imitation")


def regression_imitation(student_pred: torch.Tensor, teacher_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared gap between student and (detached) teacher predictions."""
    diff = student_pred.reshape(-1) - teacher_pred.detach().reshape(-1)
    return check_finite((diff ** 2).mean(), "regression_imitation")


def total_u_loss(l_mse, l_gan_g, l_im, cfg: DistillConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split the student objective into ``(backbone_loss, generator_loss)``.

    The adversarial term only ever enters the generator's objective; the
    backbone and fusion head see the supervised and imitation terms alone.
    """
    if cfg.alpha < 0 or cfg.beta < 0:
        raise ValueError("loss weights must be non-negative")
    backbone = l_mse + cfg.beta * l_im
    return backbone, backbone + cfg.alpha * l_gan_g


@torch.no_grad()
def ema_update(theta_m: Iterable[torch.Tensor], theta_u: Iterable[torch.Tensor],
               gamma: float) -> None:
    """In place: ``theta_m <- gamma * theta_m + (1 - gamma) * theta_u``."""
    theta_m, theta_u = list(theta_m), list(theta_u)
    if len(theta_m) != len(theta_u):
        raise ValueError("parameter sets differ in length")
    for pm, pu in zip(theta_m, theta_u):
        if pm.shape != pu.shape:
            raise ValueError(f"shape mismatch {tuple(pm.shape)} vs {tuple(pu.shape)}")
    if gamma == 1.0:
        return
    for pm, pu in zip(theta_m, theta_u):
        if gamma == 0.0:
            pm.copy_(pu)
        else:
            pm.mul_(gamma).add_(pu, alpha=1.0 - gamma)
