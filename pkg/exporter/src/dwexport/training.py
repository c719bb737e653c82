"""Seeded SGD training loop for the reference CNNs (CPU, desk scale).

Inputs are u8 pixel arrays; they are scaled to [0,1] exactly the way
the engine scales IDX pixels (float32 division by 255), so a model
trained here sees the same numbers the engine will feed it later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0, lr > 0, batch_size >= 1 required")


def _to_tensor(images_u8: np.ndarray) -> torch.Tensor:
    # (N,H,W) u8 -> (N,1,H,W) f32 in [0,1], matching the engine's IDX scaling
    x = torch.from_numpy(np.ascontiguousarray(images_u8)).float().div_(255.0)
    return x.unsqueeze(1)


def accuracy(net: torch.nn.Module, images_u8, labels, batch_size: int = 256) -> float:
    net.eval()
    x = _to_tensor(np.asarray(images_u8))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    hits = 0
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            logits = net(x[lo : lo + batch_size])
            hits += int((logits.argmax(dim=1) == y[lo : lo + batch_size]).sum())
    return hits / len(x)


def train_cnn(net: torch.nn.Module, images_u8, labels, settings: TrainSettings) -> dict:
    """Train in place; returns {"train_accuracy": float, "epochs": int}."""
    torch.manual_seed(settings.seed)
    x = _to_tensor(np.asarray(images_u8))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = torch.optim.SGD(net.parameters(), lr=settings.lr, momentum=settings.momentum)
    gen = torch.Generator().manual_seed(settings.seed)
    net.train()
    for _ in range(settings.epochs):
        order = torch.randperm(len(x), generator=gen)
        for lo in range(0, len(x), settings.batch_size):
            idx = order[lo : lo + settings.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
    net.eval()
    return {
        "train_accuracy": accuracy(net, images_u8, labels),
        "epochs": settings.epochs,
    }
