"""Torch reference CNNs whose structure maps 1:1 onto the engine layer set.

Conv2dSame reproduces the engine's "same" padding (the extra row or
column goes on the bottom/right when the total is odd) so exported
kernels are numerically interchangeable. FilterResponseNorm2d carries a
learned per-channel threshold tau (the TLU) alongside gamma and beta;
FRN models use no separate ReLU since the TLU is the activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

NORM_KINDS = ("bn", "gn", "frn")


def same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)  # ceil
    total = max((out - 1) * s + k - size, 0)
    lo = total // 2
    return lo, total - lo


class Conv2dSame(nn.Conv2d):
    """Conv2d with ceil(size/stride) output and bottom/right-heavy padding."""

    def __init__(self, cin, cout, kernel_size, stride=1, bias=True):
        super().__init__(cin, cout, kernel_size, stride=stride, padding=0, bias=bias)

    def forward(self, x):
        pt, pb = same_pads(x.shape[-2], self.kernel_size[0], self.stride[0])
        pl, pr = same_pads(x.shape[-1], self.kernel_size[1], self.stride[1])
        return self._conv_forward(F.pad(x, (pl, pr, pt, pb)), self.weight, self.bias)


class FilterResponseNorm2d(nn.Module):
    """Filter response normalization with a thresholded linear unit.

    nu2 is the mean square over the spatial extent of each (sample,
    channel); the output is max(gamma * x / sqrt(nu2 + eps) + beta, tau).
    """

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = float(eps)
        self.gamma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.tau = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x):
        nu2 = x.pow(2).mean(dim=(2, 3), keepdim=True)
        y = x * torch.rsqrt(nu2 + self.eps)
        return torch.maximum(self.gamma * y + self.beta, self.tau)


class GlobalAvgPool(nn.Module):
    """Mean over the spatial extent; (B,C,H,W) -> (B,C)."""

    def forward(self, x):
        return x.mean(dim=(2, 3))


def make_norm(kind: str, channels: int, groups: int) -> nn.Module:
    if kind == "bn":
        return nn.BatchNorm2d(channels)
    if kind == "gn":
        if groups < 1 or channels % groups != 0:
            raise ValueError(f"{groups} groups do not divide {channels} channels")
        return nn.GroupNorm(groups, channels)
    if kind == "frn":
        return FilterResponseNorm2d(channels)
    raise ValueError(f"unknown norm '{kind}' (expected one of {NORM_KINDS})")


@dataclass(frozen=True)
class CnnSpec:
    """Reference architecture: stem conv + two residual blocks + linear head."""

    width: int = 8
    norm: str = "bn"
    classes: int = 10
    groups: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm '{self.norm}' (expected one of {NORM_KINDS})")
        if self.width < 1 or self.classes < 2:
            raise ValueError("width must be >= 1 and classes >= 2")


class BasicBlock(nn.Module):
    """conv-norm-(relu)-conv-norm plus a projected or identity shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, spec: CnnSpec):
        super().__init__()
        self.uses_relu = spec.norm != "frn"
        self.conv1 = Conv2dSame(cin, cout, 3, stride, bias=False)
        self.n1 = make_norm(spec.norm, cout, spec.groups)
        self.conv2 = Conv2dSame(cout, cout, 3, 1, bias=False)
        self.n2 = make_norm(spec.norm, cout, spec.groups)
        if stride != 1 or cin != cout:
            self.down = Conv2dSame(cin, cout, 1, stride, bias=False)
            self.down_norm = make_norm(spec.norm, cout, spec.groups)
        else:
            self.down = None
            self.down_norm = None

    def forward(self, x):
        y = self.n1(self.conv1(x))
        if self.uses_relu:
            y = F.relu(y)
        y = self.n2(self.conv2(y))
        shortcut = x if self.down is None else self.down_norm(self.down(x))
        y = y + shortcut
        return F.relu(y) if self.uses_relu else y


class SmallResNet(nn.Module):
    """Desk-scale residual CNN: stem, a stride-1 and a stride-2 block, head."""

    def __init__(self, spec: CnnSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stem = Conv2dSame(spec.in_channels, w, 3, 1, bias=False)
        self.n0 = make_norm(spec.norm, w, spec.groups)
        self.block1 = BasicBlock(w, w, 1, spec)
        self.block2 = BasicBlock(w, 2 * w, 2, spec)
        self.pool = GlobalAvgPool()
        self.head = nn.Linear(2 * w, spec.classes)

    def forward(self, x):
        y = self.n0(self.stem(x))
        if self.spec.norm != "frn":
            y = F.relu(y)
        y = self.block2(self.block1(y))
        return self.head(self.pool(y))
