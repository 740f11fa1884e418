"""Multi-scale 3D segmentation network and its soft-Dice loss.

The contracting side applies four parallel convolutions of kernel size
2k+1 and stride k (k = 1, 2, 4, 8) directly to the input, so even the
coarsest features see a wide window of the image.  Features from every
finer scale are average-pooled and concatenated into each coarser scale
(dense forwarding).  The expanding side mirrors the scales with transpose
convolutions and skip concatenations.  All activations are leaky ReLU; the
head is a 1x1x1 convolution and a two-class softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

SCALES = (1, 2, 4, 8)


@dataclass(frozen=True)
class NetSpec:
    base_channels: int = 8
    leaky_slope: float = 0.1
    seed: int = 0
    input_dims: tuple[int, int, int] | None = None  # None: any multiple-of-8 grid

    def __post_init__(self) -> None:
        if self.base_channels <= 0:
            raise ValueError("base_channels must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.input_dims is not None:
            check_dims(self.input_dims)
            object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))


def check_dims(dims) -> None:
    if any(int(d) % SCALES[-1] != 0 for d in dims):
        raise ValueError(f"input dims {tuple(dims)} must be multiples of {SCALES[-1]}")


def _conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


class ProbMapNet(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        # parallel strided input branches: kernel 2k+1, stride k, output D/k
        self.branches = nn.ModuleList(
            [nn.Conv3d(1, c, 2 * k + 1, stride=k, padding=k // 2 + 1) for k in SCALES]
        )
        # contracting blocks with dense forwarding of all finer scales
        self.block1 = _conv(c, c)
        self.block2 = _conv(2 * c, 2 * c)
        self.block4 = _conv(c + 2 * c + c, 2 * c)
        self.block8 = _conv(c + 2 * c + 2 * c + c, 2 * c)
        # expanding path
        self.up4 = nn.ConvTranspose3d(2 * c, 2 * c, 2, stride=2)
        self.dec4 = _conv(4 * c, 2 * c)
        self.up2 = nn.ConvTranspose3d(2 * c, 2 * c, 2, stride=2)
        self.dec2 = _conv(4 * c, 2 * c)
        self.up1 = nn.ConvTranspose3d(2 * c, c, 2, stride=2)
        self.dec1 = _conv(2 * c, c)
        self.head = nn.Conv3d(c, 2, 1)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(x, self.spec.leaky_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 1, D, H, W) -> per-voxel foreground probability (N, D, H, W)."""
        return self.class_probs(x)[:, 1]

    def class_probs(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 1, D, H, W) -> two-class softmax volume (N, 2, D, H, W)."""
        check_dims(x.shape[2:])
        f1, f2, f4, f8 = (self._act(branch(x)) for branch in self.branches)

        c1 = self._act(self.block1(f1))
        c2 = self._act(self.block2(torch.cat([f2, F.avg_pool3d(c1, 2)], dim=1)))
        c4 = self._act(
            self.block4(torch.cat([f4, F.avg_pool3d(c2, 2), F.avg_pool3d(c1, 4)], dim=1))
        )
        c8 = self._act(
            self.block8(
                torch.cat(
                    [f8, F.avg_pool3d(c4, 2), F.avg_pool3d(c2, 4), F.avg_pool3d(c1, 8)], dim=1
                )
            )
        )

        d4 = self._act(self.dec4(torch.cat([self._act(self.up4(c8)), c4], dim=1)))
        d2 = self._act(self.dec2(torch.cat([self._act(self.up2(d4)), c2], dim=1)))
        d1 = self._act(self.dec1(torch.cat([self._act(self.up1(d2)), c1], dim=1)))
        return torch.softmax(self.head(d1), dim=1)


def init_weights(model: nn.Module, spec: NetSpec) -> None:
    """Variance-scaling (He) initialization, deterministic for a fixed seed."""
    gen = torch.Generator().manual_seed(spec.seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            fan_in = module.in_channels
            for k in module.kernel_size:
                fan_in *= k
            gain = torch.nn.init.calculate_gain("leaky_relu", spec.leaky_slope)
            std = gain / fan_in**0.5
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen) * std
                )
                if module.bias is not None:
                    module.bias.zero_()


def build_net(spec: NetSpec) -> ProbMapNet:
    model = ProbMapNet(spec)
    init_weights(model, spec)
    return model


def dice_loss(pred: torch.Tensor, truth: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - soft Dice with additive smoothing.

    ``pred`` holds foreground probabilities, ``truth`` the binary target;
    shapes must match exactly.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    inter = (pred * truth).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + truth.sum() + eps)
