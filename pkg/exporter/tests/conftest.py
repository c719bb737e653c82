"""Shared exporter artifacts: one trained, exported reference CNN per session."""

import numpy as np
import pytest

from dwexport import (
    CnnSpec,
    SmallResNet,
    TrainSettings,
    accuracy,
    export_model,
    shape_set,
    train_cnn,
    write_idx_pair,
)


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("export-bundle")
    train_x, train_y = shape_set(1200, seed=0)
    test_x, test_y = shape_set(1000, seed=1)
    write_idx_pair(root, "train", train_x, train_y)
    write_idx_pair(root, "t10k", test_x, test_y)
    net = SmallResNet(CnnSpec(width=8, norm="bn"))
    settings = TrainSettings(epochs=4, lr=0.05, seed=0)
    metrics = train_cnn(net, train_x, train_y, settings)
    clean = accuracy(net, test_x, test_y)
    probe = (test_x.astype(np.float32) / np.float32(255.0))[..., None]
    model_path = root / "cnn.dwm"
    manifest = export_model(
        net,
        (16, 16, 1),
        model_path,
        probe=probe,
        dataset="idx:export-bundle",
        training={"epochs": settings.epochs, "lr": settings.lr, "seed": settings.seed},
        clean_accuracy=clean,
    )
    return {
        "root": root,
        "net": net,
        "probe": probe,
        "model_path": model_path,
        "manifest": manifest,
        "clean": clean,
        "metrics": metrics,
        "test": (test_x, test_y),
    }
