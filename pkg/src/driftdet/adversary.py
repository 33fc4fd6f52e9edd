"""Domain discriminator on student encoder features, with gradient reversal.

The discriminator only ever sees the student's encoder output; teacher forward
passes never touch this module. The min-max objective is realized by negating
the gradient between encoder and discriminator, so a single minimization step
descends the discriminator and ascends the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError
from .model import _he_init

PROB_EPS = 1e-7


@dataclass(frozen=True)
class GrlSpec:
    reversal_coefficient: float = 1.0

    def __post_init__(self):
        if self.reversal_coefficient < 0:
            raise ConfigError("reversal_coefficient must be >= 0")


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coefficient * grad_output, None


def grl(features: torch.Tensor, coefficient: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the upstream gradient by -coefficient."""
    return _ReverseGradient.apply(features, coefficient)


class Discriminator(nn.Module):
    """Two convs + global average pool + linear head -> one domain logit."""

    def __init__(self, in_channels: int = 64, hidden: int = 32, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.head = nn.Linear(hidden, 1)
        _he_init(self, torch.Generator().manual_seed(seed))
        self.to(dtype)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B,C,H,W) -> (B,) domain logits."""
        h = nn.functional.gelu(self.conv1(features))
        h = nn.functional.gelu(self.conv2(h))
        return self.head(h.mean(dim=(2, 3)))[:, 0]

    def discriminate(self, features: torch.Tensor) -> torch.Tensor:
        """Probability of the target domain per image, in (0, 1)."""
        return torch.sigmoid(self.forward(features))


def discriminator_loss(p: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """-d*log(p) - (1-d)*log(1-p), clamped away from 0 and 1, per image."""
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(d * torch.log(p) + (1.0 - d) * torch.log(1.0 - p))


def adversarial_contribution(discriminator: Discriminator,
                             source_features: torch.Tensor,
                             target_features: torch.Tensor,
                             grl_spec: GrlSpec = GrlSpec()) -> torch.Tensor:
    """Mean domain-classification loss over the joint batch, behind the GRL.

    Backpropagating the returned scalar descends the discriminator and (via
    gradient reversal) ascends the feature encoder.
    """
    if source_features.shape[0] == 0 or target_features.shape[0] == 0:
        raise ConfigError("adversarial loss needs both domains in the batch")
    features = torch.cat([source_features, target_features], dim=0)
    d = torch.cat([torch.zeros(source_features.shape[0], dtype=features.dtype),
                   torch.ones(target_features.shape[0], dtype=features.dtype)])
    p = discriminator.discriminate(grl(features, grl_spec.reversal_coefficient))
    return discriminator_loss(p, d).mean()
