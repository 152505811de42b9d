"""The four network architectures, at desk scale.

Weight initialization is He-uniform for every conv/linear layer with zeroed
biases; final output layers are zero-initialized so untrained sigmoid heads
emit exactly 0.5.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dataio import ValidationError
from .anchors import AnchorGrid

CLASSIFIER_INPUT = 224
SEGMENTOR_INPUT = 128


def _init_he(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _zero_layer(layer: nn.Module) -> None:
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def _check_input(x: torch.Tensor, size: int, name: str) -> torch.Tensor:
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[-2:] != (size, size) or x.shape[1] != 1:
        raise ValidationError(f"{name} expects single-channel {size}x{size} input, got {tuple(x.shape)}")
    return x


class ClassifierNet(nn.Module):
    """Slice classifier: 4 downsampling conv stages, GAP, one FC, sigmoid."""

    def __init__(self, channels: tuple[int, ...] = (8, 16, 32, 64)):
        super().__init__()
        self.channels = tuple(channels)
        layers = []
        c_in = 1
        for c in self.channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 1)
        self.apply(_init_he)
        _zero_layer(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _check_input(x, CLASSIFIER_INPUT, "classifier")
        f = self.features(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(f)).squeeze(-1)


class DetectorNet(nn.Module):
    """Single-scale anchor head on a stride-8 conv trunk."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64),
                 anchor_grid: AnchorGrid | None = None,
                 nms_iou_threshold: float = 0.5,
                 score_threshold: float = 0.5):
        super().__init__()
        self.anchor_grid = anchor_grid or AnchorGrid()
        self.channels = tuple(channels)
        self.nms_iou_threshold = float(nms_iou_threshold)
        self.score_threshold = float(score_threshold)
        c1, c2, c3 = self.channels
        self.trunk = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(inplace=True),
        )
        a = self.anchor_grid.per_cell
        self.obj_head = nn.Conv2d(c3, a, 3, padding=1)
        self.box_head = nn.Conv2d(c3, 4 * a, 3, padding=1)
        self.apply(_init_he)
        _zero_layer(self.obj_head)
        _zero_layer(self.box_head)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns per-anchor objectness probabilities (B, N) and deltas (B, N, 4)."""
        x = _check_input(x, self.anchor_grid.image_size, "detector")
        f = self.trunk(x)
        b, _, gh, gw = f.shape
        a = self.anchor_grid.per_cell
        obj = self.obj_head(f).permute(0, 2, 3, 1).reshape(b, gh * gw * a)
        box = self.box_head(f).permute(0, 2, 3, 1).reshape(b, gh * gw * a, 4)
        return torch.sigmoid(obj), box


def _double_conv(dim: int, c_in: int, c_out: int) -> nn.Sequential:
    conv = nn.Conv2d if dim == 2 else nn.Conv3d
    return nn.Sequential(
        conv(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True),
        conv(c_out, c_out, 3, padding=1), nn.ReLU(inplace=True),
    )


class SegmentorNet(nn.Module):
    """3-level 2D U-Net with skip connections, 1x1 conv + sigmoid output."""

    def __init__(self, channels: tuple[int, int, int] = (8, 16, 32)):
        super().__init__()
        self.channels = tuple(channels)
        c1, c2, c3 = self.channels
        self.enc1 = _double_conv(2, 1, c1)
        self.enc2 = _double_conv(2, c1, c2)
        self.bottleneck = _double_conv(2, c2, c3)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = _double_conv(2, 2 * c2, c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec1 = _double_conv(2, 2 * c1, c1)
        self.out = nn.Conv2d(c1, 1, 1)
        self.apply(_init_he)
        _zero_layer(self.out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _check_input(x, SEGMENTOR_INPUT, "segmentor")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.out(d1)).squeeze(1)


class Baseline3DNet(nn.Module):
    """End-to-end 3-level 3D U-Net over downsampled whole volumes."""

    def __init__(self, grid: tuple[int, int, int] = (64, 96, 96),
                 channels: tuple[int, int, int] = (8, 16, 32)):
        super().__init__()
        self.grid = tuple(int(g) for g in grid)
        if any(g % 4 != 0 for g in self.grid):
            raise ValidationError(f"baseline grid dims must be multiples of 4, got {self.grid}")
        self.channels = tuple(channels)
        c1, c2, c3 = self.channels
        self.enc1 = _double_conv(3, 1, c1)
        self.enc2 = _double_conv(3, c1, c2)
        self.bottleneck = _double_conv(3, c2, c3)
        self.up2 = nn.ConvTranspose3d(c3, c2, 2, stride=2)
        self.dec2 = _double_conv(3, 2 * c2, c2)
        self.up1 = nn.ConvTranspose3d(c2, c1, 2, stride=2)
        self.dec1 = _double_conv(3, 2 * c1, c1)
        self.out = nn.Conv3d(c1, 1, 1)
        self.apply(_init_he)
        _zero_layer(self.out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        if x.dim() != 5 or tuple(x.shape[-3:]) != self.grid:
            raise ValidationError(f"baseline expects {self.grid} volumes, got {tuple(x.shape)}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        b = self.bottleneck(F.max_pool3d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.out(d1)).squeeze(1)
