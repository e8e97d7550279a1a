"""Background-aware cross-entropy and distillation, plus invariance terms.

Logit maps are ``(B, C, H, W)`` with channel 0 the background; old classes
occupy the channels right after it and each step appends its new classes,
so a teacher with ``C_old`` outputs lines up with the first ``C_old``
student channels. All grouped probabilities are computed in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

from .dihedral import Transform, apply_per_sample, apply_transform


@dataclass
class LossWeights:
    lambda_kd: float = 1.0
    eta_inv_seg: float = 0.1
    rho_inv_kd: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossBundle:
    ce: torch.Tensor
    kd: torch.Tensor
    inv_seg: torch.Tensor
    inv_kd: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _check_target(target: torch.Tensor, num_classes: int, ignore_index: int | None) -> None:
    valid = target if ignore_index is None else target[target != ignore_index]
    if valid.numel() and (int(valid.min()) < 0 or int(valid.max()) >= num_classes):
        raise ValueError(
            f"target values must lie in [0, {num_classes}); got range [{int(valid.min())}, {int(valid.max())}]"
        )


def unbiased_cross_entropy(
    logits: torch.Tensor,
    target: torch.Tensor,
    old_classes: Sequence[int] = (),
    ignore_index: int | None = None,
) -> torch.Tensor:
    """Cross-entropy where a background label also accepts any old class.

    For background pixels the probability is the softmax mass summed over
    the background and ``old_classes`` (channel indices); other pixels use
    the plain softmax. With no old classes this is standard cross-entropy.
    """
    _check_target(target, logits.shape[1], ignore_index)
    log_den = torch.logsumexp(logits, dim=1, keepdim=True)
    group = [0] + [int(c) for c in old_classes if int(c) != 0]
    log_bg = torch.logsumexp(logits[:, group], dim=1, keepdim=True) - log_den
    log_p = torch.cat([log_bg, logits[:, 1:] - log_den], dim=1)
    return F.nll_loss(log_p, target.long(), ignore_index=-100 if ignore_index is None else ignore_index)


def standard_cross_entropy(
    logits: torch.Tensor, target: torch.Tensor, ignore_index: int | None = None
) -> torch.Tensor:
    _check_target(target, logits.shape[1], ignore_index)
    return F.cross_entropy(logits, target.long(), ignore_index=-100 if ignore_index is None else ignore_index)


def grouped_log_probs(student_logits: torch.Tensor, num_old: int) -> torch.Tensor:
    """Student log-probabilities over the teacher's classes.

    Channel 0 becomes the mass of the background plus every class from
    ``num_old`` onwards (the new ones); channels ``1..num_old-1`` are the
    student's own softmax values.
    """
    log_den = torch.logsumexp(student_logits, dim=1, keepdim=True)
    bg_group = torch.cat([student_logits[:, :1], student_logits[:, num_old:]], dim=1)
    log_bg = torch.logsumexp(bg_group, dim=1, keepdim=True) - log_den
    return torch.cat([log_bg, student_logits[:, 1:num_old] - log_den], dim=1)


def unbiased_kd(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross-entropy of the grouped student against the teacher."""
    if teacher_logits.requires_grad:
        raise ValueError("teacher logits must not require gradients")
    num_old = teacher_logits.shape[1]
    if (
        student_logits.ndim != teacher_logits.ndim
        or student_logits.shape[0] != teacher_logits.shape[0]
        or student_logits.shape[2:] != teacher_logits.shape[2:]
        or student_logits.shape[1] < num_old
    ):
        raise ValueError(
            f"student {tuple(student_logits.shape)} and teacher {tuple(teacher_logits.shape)} logits do not align"
        )
    log_q = grouped_log_probs(student_logits, num_old)
    p_teacher = torch.softmax(teacher_logits, dim=1)
    return -(p_teacher * log_q).sum(dim=1).mean()


def _transformed(t: Transform | Sequence[Transform], feats: torch.Tensor) -> torch.Tensor:
    if isinstance(t, (Transform, str)):
        return apply_transform(t, feats)
    return apply_per_sample(t, feats)


def invariance_seg_loss(
    feat_aug: torch.Tensor, feat_plain: torch.Tensor, t: Transform | Sequence[Transform]
) -> torch.Tensor:
    """MSE between features of the transformed input and transformed features.

    ``t`` is one transform for the whole tensor or one per batch element.
    Gradients reach both arguments.
    """
    target = _transformed(t, feat_plain)
    if target.shape != feat_aug.shape:
        raise ValueError(f"shapes differ after transform: {tuple(feat_aug.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(feat_aug, target)


def invariance_kd_loss(
    feat_aug_student: torch.Tensor, feat_plain_teacher: torch.Tensor, t: Transform | Sequence[Transform]
) -> torch.Tensor:
    """Same as :func:`invariance_seg_loss` with a frozen teacher on the plain input."""
    if feat_plain_teacher.requires_grad:
        raise ValueError("teacher features must not require gradients")
    return invariance_seg_loss(feat_aug_student, feat_plain_teacher, t)


def total_loss(
    ce: torch.Tensor,
    weights: LossWeights,
    step: int,
    kd: torch.Tensor | None = None,
    inv_seg: torch.Tensor | None = None,
    inv_kd: torch.Tensor | None = None,
) -> LossBundle:
    if step == 0 and (kd is not None or inv_kd is not None):
        raise ValueError("teacher terms (kd, inv_kd) cannot be supplied at step 0")
    zero = torch.zeros((), dtype=ce.dtype, device=ce.device)
    kd = zero if kd is None else kd
    inv_seg = zero if inv_seg is None else inv_seg
    inv_kd = zero if inv_kd is None else inv_kd
    lam = 0.0 if step == 0 else weights.lambda_kd
    rho = 0.0 if step == 0 else weights.rho_inv_kd
    total = ce + lam * kd + weights.eta_inv_seg * inv_seg + rho * inv_kd
    return LossBundle(ce, kd, inv_seg, inv_kd, total)
