import numpy as np
import pytest
import torch
from torch import nn

from partialseg import ClassSpace, Dataset, PartialLabelMap, SENTINEL, generate_phantoms


class TinyPixelNet(nn.Module):
    """Per-pixel 1x1-conv micro-network (16 parameters for m=2, one cond
    class) used for exact-arithmetic training-loop and gradient tests."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.conv = nn.Conv2d(config.in_channels, config.out_channels, kernel_size=1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        return torch.sigmoid(self.conv(x))


def micro_arrays(n_train=4, n_test=2, size=8, seed=0):
    """Images with one bright square per sample; m=2 (background, blob).

    Train labels annotate only the blob class, test labels are full.
    """
    rng = np.random.default_rng(seed)
    images, label_maps, splits = [], [], []
    for i in range(n_train + n_test):
        img = rng.normal(0.0, 0.05, size=(size, size))
        top = int(rng.integers(1, size - 4))
        left = int(rng.integers(1, size - 4))
        blob = np.zeros((size, size), dtype=bool)
        blob[top : top + 3, left : left + 3] = True
        img[blob] += 1.0
        if i < n_train:
            labels = np.where(blob, 1, SENTINEL).astype(np.uint8)
            label_maps.append(PartialLabelMap(labels, frozenset({1}), 2))
            splits.append("train")
        else:
            label_maps.append(PartialLabelMap(blob.astype(np.uint8), frozenset({0, 1}), 2))
            splits.append("test")
        images.append(img)
    space = ClassSpace(("background", "blob"))
    return Dataset.from_arrays(images, label_maps, splits, space)


@pytest.fixture()
def micro_dataset():
    return micro_arrays()


@pytest.fixture(scope="session")
def phantom_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    return generate_phantoms(out, {"train": 6, "val": 1, "test": 2}, seed=0)


def fd_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn at x, coordinatewise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(fn(x))
        flat[i] = keep - step
        lo = float(fn(x))
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max())
