"""Y-channel quality metrics, divergence diagnostics, and heatmap export.

PSNR uses peak 1.0 on the continuous [0, 1] domain. SSIM follows the
canonical protocol: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
C2 = 0.03^2, local statistics over fully interior windows only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from .imaging import extract_y, save_png
from .model import PredictionSet, WeightMaps

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _crop_border(plane: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return plane
    return plane[border:-border, border:-border]


def psnr_y(sr: np.ndarray, hr: np.ndarray, border: int = 0) -> float:
    """Y-channel PSNR in dB; returns inf for identical inputs."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    if border < 0 or 2 * border >= min(sr.shape[0], sr.shape[1]):
        raise ValueError(f"border {border} too large for image {sr.shape[:2]}")
    diff = _crop_border(extract_y(sr) - extract_y(hr), border)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_y(sr: np.ndarray, hr: np.ndarray) -> float:
    """Mean local SSIM between the Y planes of two images."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    x, y = extract_y(sr), extract_y(hr)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than SSIM window {SSIM_WINDOW}")
    w = gaussian_window()
    mu_x = correlate2d(x, w, mode="valid")
    mu_y = correlate2d(y, w, mode="valid")
    xx = correlate2d(x * x, w, mode="valid") - mu_x * mu_x
    yy = correlate2d(y * y, w, mode="valid") - mu_y * mu_y
    xy = correlate2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (xx + yy + SSIM_C2)
    return float(np.mean(num / den))


def pairwise_divergence(preds: PredictionSet | list[np.ndarray]) -> np.ndarray:
    """(P, P) matrix of mean squared Y-plane differences between branches."""
    images = preds.predictions if isinstance(preds, PredictionSet) else list(preds)
    planes = [extract_y(img) for img in images]
    p = len(planes)
    mat = np.zeros((p, p))
    for i in range(p):
        for j in range(i + 1, p):
            d = float(np.mean((planes[i] - planes[j]) ** 2))
            mat[i, j] = mat[j, i] = d
    return mat


def mean_pairwise_divergence(preds: PredictionSet | list[np.ndarray]) -> float:
    """Mean of the off-diagonal entries of :func:`pairwise_divergence`."""
    mat = pairwise_divergence(preds)
    p = mat.shape[0]
    if p < 2:
        return 0.0
    return float(mat.sum() / (p * (p - 1)))


def checkerboard_energy(img: np.ndarray) -> float:
    """Energy of the Nyquist (alternating-sign) component of the luma.

    The luma is mapped to [-1, 1] before filtering so that a full-contrast
    black/white checkerboard scores exactly 1.0 and a constant image 0.
    """
    y = extract_y(img)
    if y.shape[0] < 2 or y.shape[1] < 2:
        raise ValueError(f"image {y.shape} smaller than 2x2")
    s = 2.0 * y - 1.0
    resp = (s[:-1, :-1] - s[:-1, 1:] - s[1:, :-1] + s[1:, 1:]) / 4.0
    return float(np.mean(resp * resp))


@dataclass
class EvalRecord:
    identifier: str
    psnr_y: float
    ssim_y: float


@dataclass
class EvalReport:
    """Per-image Y-channel metrics plus their arithmetic means."""

    records: list[EvalRecord] = field(default_factory=list)
    border: int = 0
    scale: int = 0

    def add(self, identifier: str, psnr: float, ssim: float) -> None:
        self.records.append(EvalRecord(identifier, psnr, ssim))

    @property
    def mean_psnr_y(self) -> float:
        return float(np.mean([r.psnr_y for r in self.records])) if self.records else math.nan

    @property
    def mean_ssim_y(self) -> float:
        return float(np.mean([r.ssim_y for r in self.records])) if self.records else math.nan

    def write_csv(self, path: str | Path) -> None:
        lines = ["identifier,psnr_y,ssim_y"]
        lines += [f"{r.identifier},{r.psnr_y!r},{r.ssim_y!r}" for r in self.records]
        lines.append(f"mean,{self.mean_psnr_y!r},{self.mean_ssim_y!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def heatmap_image(plane: np.ndarray) -> np.ndarray:
    """Min-max normalize a plane and render a red-high / blue-low ramp.

    The ramp is RGB = (v, 0, 1 - v); a constant plane renders as pure blue.
    """
    lo, hi = float(plane.min()), float(plane.max())
    v = np.zeros_like(plane, dtype=np.float64) if hi == lo else (plane - lo) / (hi - lo)
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def export_weight_heatmaps(weights: WeightMaps, out_dir: str | Path) -> list[Path]:
    """Write one heatmap PNG per weight plane, named by leaf path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    leaf_paths = weights.leaf_paths or tuple((i,) for i in range(len(weights.planes)))
    for plane, leaf in zip(weights.planes, leaf_paths):
        name = "".join(str(c) for c in leaf)
        target = out_dir / f"weight_{name}.png"
        save_png(heatmap_image(plane), target)
        paths.append(target)
    return paths
