"""Attribute branches, auxiliary prosody heads, pooling and scoring."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import FeedForward, masked_mean

BRANCHES = ("global", "speed", "energy", "pitch")


@dataclass
class BranchOutputs:
    global_seq: torch.Tensor
    speed_seq: torch.Tensor
    energy_seq: torch.Tensor
    pitch_seq: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.global_seq, self.speed_seq, self.energy_seq, self.pitch_seq])


@dataclass
class AuxPredictions:
    v_hat_t: torch.Tensor
    e_hat_t: torch.Tensor
    p_hat_t: torch.Tensor
    v_hat: torch.Tensor
    e_hat: torch.Tensor
    p_hat: torch.Tensor


class VariancePredictor(nn.Module):
    """Two conv blocks (kernel 3) with layer norm and dropout, then a
    per-frame linear projection to a scalar."""

    def __init__(self, h: int, kernel_size: int = 3, dropout: float = 0.1):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(h, h, kernel_size, padding=kernel_size // 2) for _ in range(2)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(h) for _ in range(2))
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(h, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        keep = mask.unsqueeze(-1).to(x.dtype)
        for conv, norm in zip(self.convs, self.norms):
            x = x * keep
            x = F.gelu(conv(x.transpose(1, 2)).transpose(1, 2))
            x = self.dropout(norm(x))
        return self.proj(x).squeeze(-1)


class MLPHead(nn.Module):
    def __init__(self, h: int):
        super().__init__()
        self.net = FeedForward(h, h, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.net(x).squeeze(-1)


class FusionModule(nn.Module):
    def __init__(self, h: int, dropout: float = 0.1):
        super().__init__()
        self.branches = nn.ModuleDict({name: FeedForward(h, h, h) for name in BRANCHES})
        self.speed_head = VariancePredictor(h, dropout=dropout)
        self.energy_head = MLPHead(h)
        self.pitch_head = MLPHead(h)

    def run_branches(self, a_hat: torch.Tensor) -> BranchOutputs:
        return BranchOutputs(
            global_seq=self.branches["global"](a_hat),
            speed_seq=self.branches["speed"](a_hat),
            energy_seq=self.branches["energy"](a_hat),
            pitch_seq=self.branches["pitch"](a_hat),
        )

    def predict_aux(self, branches: BranchOutputs, mask: torch.Tensor) -> AuxPredictions:
        v_t = self.speed_head(branches.speed_seq, mask)
        e_t = self.energy_head(branches.energy_seq)
        p_t = self.pitch_head(branches.pitch_seq)
        return AuxPredictions(
            v_hat_t=v_t,
            e_hat_t=e_t,
            p_hat_t=p_t,
            v_hat=masked_mean(v_t, mask),
            e_hat=masked_mean(e_t, mask),
            p_hat=masked_mean(p_t, mask),
        )

    @staticmethod
    def pool(branches: BranchOutputs, mask: torch.Tensor) -> torch.Tensor:
        """Sum the four branches per frame, average over frames, L2-normalize."""
        summed = branches.global_seq + branches.speed_seq + branches.energy_seq + branches.pitch_seq
        return F.normalize(masked_mean(summed, mask), dim=-1)


def similarity(a: torch.Tensor, b: torch.Tensor, atol: float = 1e-5) -> torch.Tensor:
    """Cosine score between unit speech and prompt embeddings (last axis)."""
    for name, v in (("speech", a), ("prompt", b)):
        norms = torch.linalg.vector_norm(v.double(), dim=-1)
        if torch.any((norms - 1.0).abs() > atol):
            raise ValueError(f"{name} embedding is not unit-normalized")
    return (a * b).sum(-1).clamp(-1.0, 1.0)
