"""Shared fixtures: synthetic textured images and a small paired dataset."""

import numpy as np
import pytest
import torch

from treesr import data as data_mod
from treesr.imaging import bicubic_resize, save_png

torch.set_num_threads(2)


def textured_image(rng: np.random.Generator, h: int = 64, w: int = 64) -> np.ndarray:
    """Multi-scale texture with gratings and blocks; behaves like a natural crop."""
    base = bicubic_resize(rng.random((max(h // 8, 1), max(w // 8, 1), 3)), h, w)
    detail = bicubic_resize(rng.random((max(h // 2, 1), max(w // 2, 1), 3)), h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    img = 0.55 * base + 0.25 * detail
    for _ in range(3):
        fx, fy = rng.uniform(0.05, 0.45, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.12)
        grating = amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += grating[:, :, None] * rng.uniform(0.3, 1.0, size=3)
    for _ in range(2):
        top, left = rng.integers(0, h // 2), rng.integers(0, w // 2)
        bh, bw = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
        img[top:top + bh, left:left + bw] += rng.uniform(-0.25, 0.25, size=3)
    return np.clip(img, 0.0, 1.0)


def build_toy_dataset(root, n_train=8, n_test=2, scale=2, size=64, seed=2024):
    """Write textured HR PNGs and bicubic-degraded train/test manifests."""
    rng = np.random.default_rng(seed)
    hr_dir = root / "hr"
    hr_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_train + n_test):
        save_png(textured_image(rng, size, size), hr_dir / f"t{i:02d}.png")
    sources = sorted(hr_dir.glob("*.png"))
    train = data_mod.generate_bicubic_pairs(
        hr_dir, scale, root / "train", split="train", sources=sources[:n_train])
    test = data_mod.generate_bicubic_pairs(
        hr_dir, scale, root / "test", split="test", sources=sources[n_train:])
    return train, test


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_data")
    train, test = build_toy_dataset(root)
    return {"root": root, "train": train, "test": test}
