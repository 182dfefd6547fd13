"""Distillation losses and the staged training schedule.

The student is trained against three extra targets next to its own
rate-distortion objective: the teacher's reconstruction, the teacher's
intermediate stage features, and the highest-entropy subset of the
teacher's quantized latent channels. All three use MSE so the weighted
terms stay on comparable scales regardless of the main distortion metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .entropy import ChannelEntropyRanking, mean_channel_entropy, rank_channels_topk
from .metrics import ms_ssim_torch

LAMBDA_PRESETS = (0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06)

STAGE_TEACHER = "teacher"
STAGE_DISTILL = "distill"
STAGE_FINETUNE = "finetune"


@dataclass
class FEDSWeights:
    """Rate-distortion trade-off and distillation term weights."""

    lam: float = 0.015
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    distortion: str = "MSE"  # or "MS-SSIM"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha/beta/gamma must be nonnegative")
        if self.distortion not in ("MSE", "MS-SSIM"):
            raise ValueError(f"unknown distortion {self.distortion!r}")

    @classmethod
    def from_lambda_index(cls, index: int, **kwargs) -> "FEDSWeights":
        if not 0 <= index < len(LAMBDA_PRESETS):
            raise ValueError(f"lambda index {index} out of range")
        return cls(lam=LAMBDA_PRESETS[index], **kwargs)


def distortion_term(x: torch.Tensor, x_hat: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "MSE":
        return F.mse_loss(x_hat, x)
    if kind == "MS-SSIM":
        return 1.0 - ms_ssim_torch(x, x_hat)
    raise ValueError(f"unknown distortion {kind!r}")


def teacher_loss(x: torch.Tensor, x_hat: torch.Tensor, r_y: torch.Tensor,
                 r_z: torch.Tensor, w: FEDSWeights) -> torch.Tensor:
    """D(x, x_hat) + lambda * (R_y + R_z) with rates in bits per pixel."""
    if float(r_y) < 0 or float(r_z) < 0:
        raise ValueError("rates must be nonnegative")
    return distortion_term(x, x_hat, w.distortion) + w.lam * (r_y + r_z)


def output_loss(x_hat_teacher: torch.Tensor, x_hat_student: torch.Tensor) -> torch.Tensor:
    """MSE between teacher and student reconstructions."""
    if x_hat_teacher.shape != x_hat_student.shape:
        raise ValueError("reconstruction shapes differ")
    return F.mse_loss(x_hat_student, x_hat_teacher)


def feature_loss(taps_teacher: list[torch.Tensor],
                 taps_student: list[torch.Tensor]) -> torch.Tensor:
    """Mean over tap pairs of per-pair feature MSE."""
    if len(taps_teacher) != len(taps_student):
        raise ValueError("tap counts differ")
    if not taps_teacher:
        raise ValueError("no feature taps provided")
    total = None
    for ft, fs in zip(taps_teacher, taps_student):
        if ft.shape != fs.shape:
            raise ValueError(f"tap shapes differ: {tuple(ft.shape)} vs {tuple(fs.shape)}")
        term = F.mse_loss(fs, ft)
        total = term if total is None else total + term
    return total / len(taps_teacher)


def select_teacher_channels(y_hat_teacher: torch.Tensor,
                            ranking: ChannelEntropyRanking,
                            c_s: int) -> torch.Tensor:
    """Gather the top-``c_s`` entropy-ranked teacher channels, in ranking order."""
    channel_dim = 0 if y_hat_teacher.dim() == 3 else 1
    c_t = y_hat_teacher.shape[channel_dim]
    if c_s > c_t:
        raise ValueError(f"C_s={c_s} exceeds teacher channel count {c_t}")
    idx = torch.as_tensor(np.ascontiguousarray(ranking.order[:c_s]),
                          device=y_hat_teacher.device)
    return y_hat_teacher.index_select(channel_dim, idx)


def latent_loss(y_hat_teacher_selected: torch.Tensor,
                y_hat_student: torch.Tensor) -> torch.Tensor:
    """MSE between the selected teacher channels and the student latent.

    Student channel k is matched with the k-th ranked teacher channel.
    """
    if y_hat_teacher_selected.shape != y_hat_student.shape:
        raise ValueError(f"latent shapes differ: {tuple(y_hat_teacher_selected.shape)} "
                         f"vs {tuple(y_hat_student.shape)}")
    return F.mse_loss(y_hat_student, y_hat_teacher_selected)


@dataclass
class DistillationBatchOutputs:
    """Everything the student loss needs from one forward of both codecs."""

    teacher_x_hat: torch.Tensor
    teacher_y_hat: torch.Tensor
    teacher_taps: list
    teacher_ranking: ChannelEntropyRanking
    student_x_hat: torch.Tensor
    student_y_hat: torch.Tensor
    student_taps: list
    student_r_y: torch.Tensor
    student_r_z: torch.Tensor


def ranking_from_likelihoods(p_y: torch.Tensor) -> ChannelEntropyRanking:
    """Per-batch channel ranking from the teacher's latent likelihoods."""
    mean_entropy = mean_channel_entropy(p_y)
    order = rank_channels_topk(mean_entropy, mean_entropy.shape[0])
    return ChannelEntropyRanking(mean_entropy=mean_entropy, order=order)


def student_total_loss(batch: DistillationBatchOutputs, x: torch.Tensor,
                       w: FEDSWeights) -> tuple[torch.Tensor, dict]:
    """Student objective D + lambda*R + alpha*L_out + beta*L_feat + gamma*L_lat."""
    d = distortion_term(x, batch.student_x_hat, w.distortion)
    rate = w.lam * (batch.student_r_y + batch.student_r_z)
    l_out = output_loss(batch.teacher_x_hat, batch.student_x_hat)
    l_feat = feature_loss(batch.teacher_taps, batch.student_taps)
    c_s = batch.student_y_hat.shape[1]
    selected = select_teacher_channels(batch.teacher_y_hat, batch.teacher_ranking, c_s)
    l_lat = latent_loss(selected, batch.student_y_hat)
    total = d + rate + w.alpha * l_out + w.beta * l_feat + w.gamma * l_lat
    breakdown = {
        "D": float(d.detach()),
        "R_y": float(batch.student_r_y.detach()),
        "R_z": float(batch.student_r_z.detach()),
        "L_out": float(l_out.detach()),
        "L_feat": float(l_feat.detach()),
        "L_lat": float(l_lat.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Stage schedules

@dataclass
class StagePlan:
    stage: str
    total_iterations: int
    lr_schedule: list[tuple[int, float]]  # (start iteration, learning rate)
    loss_terms: frozenset = field(default_factory=frozenset)

    def lr_at(self, iteration: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if iteration >= start:
                lr = value
        return lr

    def scaled(self, factor: float) -> "StagePlan":
        """Shrink iteration counts and drop points uniformly for toy runs."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        total = max(1, round(self.total_iterations * factor))
        schedule = []
        for start, lr in self.lr_schedule:
            schedule.append((round(start * factor), lr))
        return StagePlan(stage=self.stage, total_iterations=total,
                         lr_schedule=schedule, loss_terms=self.loss_terms)


def stage_plan(stage: str) -> StagePlan:
    """Full-scale schedule for one training stage."""
    base_lr = 1e-4
    if stage == STAGE_TEACHER:
        return StagePlan(stage=stage, total_iterations=180_000,
                         lr_schedule=[(0, base_lr), (130_000, base_lr / 10),
                                      (160_000, base_lr / 100)],
                         loss_terms=frozenset({"distortion", "rate"}))
    if stage == STAGE_DISTILL:
        return StagePlan(stage=stage, total_iterations=180_000,
                         lr_schedule=[(0, base_lr), (130_000, base_lr / 10),
                                      (160_000, base_lr / 100)],
                         loss_terms=frozenset({"distortion", "rate", "kd"}))
    if stage == STAGE_FINETUNE:
        # picks up at the final distillation-stage rate, then tenfold drops
        start_lr = base_lr / 100
        return StagePlan(stage=stage, total_iterations=150_000,
                         lr_schedule=[(0, start_lr), (50_000, start_lr / 10),
                                      (100_000, start_lr / 100)],
                         loss_terms=frozenset({"distortion", "rate"}))
    raise ValueError(f"unknown stage {stage!r}")
