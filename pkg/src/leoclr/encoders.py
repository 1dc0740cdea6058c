"""Query/momentum encoder pair with EMA update and stop-gradient key path.

The key encoder is never touched by the optimizer: its parameters carry
requires_grad=False and change only inside momentum_update. BatchNorm running
statistics are *not* part of the EMA — each encoder accumulates its own from
the batches it sees, matching the reference momentum-contrast recipe on a
single device (no shuffling-BN).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class ModeError(RuntimeError):
    """Operation invalid for the pair's training mode."""


class ArchError(ValueError):
    """Unknown or inconsistent architecture spec."""


@dataclass(frozen=True)
class ArchSpec:
    """Backbone + projection-head shape description.

    name: resnet18 | resnet50 | cnn4 | mlp
    width: base channel width (cnn4) or hidden width (mlp); ignored by resnets
    proj_dim: projection-head output dimension D
    input_size: spatial side expected by the mlp backbone (others are size-agnostic)
    small_input: resnets only — 3x3 stride-1 stem without max-pool, for 32/64 px inputs
    """

    name: str = "resnet18"
    width: int = 16
    proj_dim: int = 128
    input_size: int = 32
    small_input: bool = False


def build_backbone(spec: ArchSpec) -> tuple[nn.Module, int]:
    """Return (backbone module, feature dimension). Backbone maps B×3×H×W -> B×feat."""
    if spec.name in ("resnet18", "resnet50"):
        import torchvision.models as models

        ctor = models.resnet18 if spec.name == "resnet18" else models.resnet50
        net = ctor(weights=None)
        feat = net.fc.in_features
        net.fc = nn.Identity()
        if spec.small_input:
            net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
            net.maxpool = nn.Identity()
        return net, feat
    if spec.name == "cnn4":
        w = spec.width
        layers = []
        in_ch = 3
        for out_ch in (w, 2 * w, 4 * w, 8 * w):
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
                       nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            in_ch = out_ch
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        return nn.Sequential(*layers), 8 * w
    if spec.name == "mlp":
        # tanh keeps the map smooth, which finite-difference gradient checks need
        in_dim = 3 * spec.input_size * spec.input_size
        net = nn.Sequential(nn.Flatten(), nn.Linear(in_dim, spec.width), nn.Tanh(),
                            nn.Linear(spec.width, spec.width), nn.Tanh())
        return net, spec.width
    raise ArchError(f"unknown backbone {spec.name!r}")


class Encoder(nn.Module):
    """Backbone plus 2-layer projection head (hidden width = feature dim)."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.backbone, self.feature_dim = build_backbone(spec)
        self.head = nn.Sequential(nn.Linear(self.feature_dim, self.feature_dim),
                                  nn.ReLU(inplace=True),
                                  nn.Linear(self.feature_dim, spec.proj_dim))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.head(self.backbone(x))
        return F.normalize(z, dim=1)


@dataclass
class EmbeddingBatch:
    """B × D embeddings; ``normalized`` asserts unit row norms (checked)."""

    vectors: torch.Tensor
    normalized: bool = True

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError(f"embeddings must be B x D, got {tuple(self.vectors.shape)}")
        if self.normalized:
            norms = self.vectors.detach().norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
                raise ShapeError("embedding rows marked normalized are not unit-norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _check_batch(batch: torch.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W image batch, got {tuple(batch.shape)}")


class EncoderPair(nn.Module):
    """f_q / f_k pair; mode 'momentum_contrast' or 'end_to_end'."""

    MODES = ("momentum_contrast", "end_to_end")

    def __init__(self, spec: ArchSpec, m: float = 0.999, mode: str = "momentum_contrast"):
        super().__init__()
        if not 0.0 <= m < 1.0:
            raise ArchError(f"momentum coefficient must be in [0, 1), got {m}")
        if mode not in self.MODES:
            raise ArchError(f"unknown mode {mode!r}")
        self.spec = spec
        self.m = m
        self.mode = mode
        self.query = Encoder(spec)
        self.key = Encoder(spec)
        for pq, pk in zip(self.query.parameters(), self.key.parameters()):
            pk.data.copy_(pq.data)
            pk.requires_grad = False

    def encode_query(self, batch: torch.Tensor) -> EmbeddingBatch:
        _check_batch(batch)
        return EmbeddingBatch(self.query(batch))

    @torch.no_grad()
    def encode_key(self, batch: torch.Tensor) -> EmbeddingBatch:
        """Key-path embeddings, detached: realizes the stop-gradient sg(.)."""
        _check_batch(batch)
        return EmbeddingBatch(self.key(batch))

    @torch.no_grad()
    def momentum_update(self) -> None:
        """theta_k <- m * theta_k + (1 - m) * theta_q, parameters only."""
        if self.mode != "momentum_contrast":
            raise ModeError("momentum_update is only defined in momentum_contrast mode")
        for pq, pk in zip(self.query.parameters(), self.key.parameters()):
            pk.mul_(self.m).add_(pq, alpha=1.0 - self.m)


def init_pair(spec: ArchSpec, m: float = 0.999, mode: str = "momentum_contrast") -> EncoderPair:
    return EncoderPair(spec, m=m, mode=mode)
