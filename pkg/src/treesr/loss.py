"""Divergence and convergence training losses.

The divergence loss combines a per-branch reconstruction term with a
residual-domain triplet term that pushes the branch predictions apart:

    total = sum_i MSE(pred_i, hr) + alpha * T

    T = (1 / (P (P - 1))) * sum_{i != j} beta_ij
        * max(d(res_i, 0) - d(res_i, res_j) + margin, 0)

where res_i = |G(pred_i) - G(hr)| is the normalized-luma residual of branch
i, d is the mean squared difference over pixels, and beta_ij = theta^(l-1)
attenuates pressure between branches whose deepest common ancestor sits at
tree level l. All functions operate on torch tensors in channels-first
layout — predictions (P, 3, H, W) or batched (N, P, 3, H, W), targets
(3, H, W) or (N, 3, H, W) — and are differentiable end to end. Per-image
losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)

LeafPath = tuple[int, ...]


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the divergence loss."""

    alpha: float = 0.1
    margin: float = 0.1
    theta: float = 0.5
    distance: str = "mean-squared"
    use_abs: bool = True
    sigma_epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.margin < 0:
            raise ValueError("alpha and margin must be nonnegative")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.distance != "mean-squared":
            raise ValueError(f"unsupported distance metric {self.distance!r}")
        if self.sigma_epsilon <= 0:
            raise ValueError("sigma_epsilon must be positive")


def _luma(img: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a (..., 3, H, W) tensor, shape (..., H, W)."""
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(img.shape)}")
    r, g, b = img.unbind(dim=-3)
    kr, kg, kb = _LUMA_WEIGHTS
    return kr * r + kg * g + kb * b


def luma_normalize(img: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-image standardized luma: (Y - mean(Y)) / (std(Y) + eps).

    Mean and population standard deviation are taken over the spatial
    dimensions of each image independently, so the result is invariant to
    per-image affine changes of brightness and contrast (up to eps).
    """
    y = _luma(img)
    mu = y.mean(dim=(-2, -1), keepdim=True)
    centered = y - mu
    sigma = centered.pow(2).mean(dim=(-2, -1), keepdim=True).sqrt()
    return centered / (sigma + eps)


def _mean_sq(a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared difference over the two trailing (spatial) dims."""
    diff = a if b is None else a - b
    return diff.pow(2).mean(dim=(-2, -1))


def residual_map(pred: torch.Tensor, hr: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Normalized-luma residual of a prediction against its target.

    Returns |G(pred) - G(hr)| by default; with cfg.use_abs disabled the
    signed difference is kept (the anti-checkerboard ablation switch).
    """
    if pred.shape != hr.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs hr {tuple(hr.shape)}")
    diff = luma_normalize(pred, cfg.sigma_epsilon) - luma_normalize(hr, cfg.sigma_epsilon)
    return diff.abs() if cfg.use_abs else diff


def triplet_term(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative: torch.Tensor,
    margin: float,
    distance: str = "mean-squared",
) -> torch.Tensor:
    """Hinge triplet on residual maps: max(d(a,p) - d(a,n) + margin, 0)."""
    if distance != "mean-squared":
        raise ValueError(f"unsupported distance metric {distance!r}")
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("triplet inputs must share one shape")
    return (_mean_sq(anchor, positive) - _mean_sq(anchor, negative) + margin).clamp(min=0.0)


def common_ancestry_level(path_i: Sequence[int], path_j: Sequence[int]) -> int:
    """Tree level of the deepest common ancestor of two distinct leaves.

    Level 1 is the root's children; siblings in a depth-L tree share level
    L. Defined as 1 + the length of the longest common path prefix.
    """
    if len(path_i) != len(path_j):
        raise ValueError(f"path length mismatch: {path_i} vs {path_j}")
    if tuple(path_i) == tuple(path_j):
        raise ValueError(f"paths must be distinct, both are {tuple(path_i)}")
    prefix = 0
    for a, b in zip(path_i, path_j):
        if a != b:
            break
        prefix += 1
    return 1 + prefix


def attenuation(level: int, theta: float) -> float:
    """Divergence-pressure attenuation theta^(l-1) for ancestry level l."""
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    return theta ** (level - 1)


def attenuation_matrix(leaf_paths: Sequence[LeafPath], theta: float) -> torch.Tensor:
    """Symmetric (P, P) matrix of pairwise attenuation factors, zero diagonal."""
    p = len(leaf_paths)
    mat = torch.zeros(p, p, dtype=torch.float64)
    for i in range(p):
        for j in range(p):
            if i != j:
                mat[i, j] = attenuation(common_ancestry_level(leaf_paths[i], leaf_paths[j]), theta)
    return mat


def _as_batched(preds: torch.Tensor, hr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Promote (P, 3, H, W)/(3, H, W) inputs to batched form and validate shapes."""
    if preds.dim() == 4:
        preds = preds.unsqueeze(0)
    if hr.dim() == 3:
        hr = hr.unsqueeze(0)
    if preds.dim() != 5 or hr.dim() != 4:
        raise ValueError(
            f"expected predictions (N, P, 3, H, W) and target (N, 3, H, W), "
            f"got {tuple(preds.shape)} and {tuple(hr.shape)}"
        )
    if preds.shape[0] != hr.shape[0] or preds.shape[2:] != hr.shape[1:]:
        raise ValueError(f"shape mismatch: preds {tuple(preds.shape)} vs hr {tuple(hr.shape)}")
    return preds, hr


def divergence_l2(preds: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Reconstruction part: sum over branches of per-image MSE against HR."""
    preds, hr = _as_batched(preds, hr)
    per_branch = (preds - hr.unsqueeze(1)).pow(2).mean(dim=(2, 3, 4))  # (N, P)
    return per_branch.sum(dim=1).mean()


def divergence_triplet_loss(
    preds: torch.Tensor,
    hr: torch.Tensor,
    cfg: LossConfig,
    leaf_paths: Sequence[LeafPath],
) -> torch.Tensor:
    """Attenuated all-pairs triplet over residual maps, zero map as positive.

    The pairwise distance d(res_i, res_j) is expanded through a Gram matrix
    so memory stays O(P^2) instead of O(P^2 * pixels).
    """
    preds, hr = _as_batched(preds, hr)
    n, p = preds.shape[:2]
    if len(leaf_paths) != p:
        raise ValueError(f"{p} predictions but {len(leaf_paths)} leaf paths")
    if p == 1:
        return preds.new_zeros(())

    res = residual_map(preds, hr.unsqueeze(1).expand_as(preds), cfg)  # (N, P, H, W)
    flat = res.reshape(n, p, -1)
    npix = flat.shape[-1]
    sq = flat.pow(2).mean(dim=-1)  # (N, P): d(res_i, zero)
    gram = flat @ flat.transpose(1, 2) / npix  # (N, P, P)
    # d(res_i, res_j) >= 0; the clamp only absorbs cancellation noise.
    d_pair = (sq.unsqueeze(2) + sq.unsqueeze(1) - 2.0 * gram).clamp(min=0.0)

    hinge = (sq.unsqueeze(2) - d_pair + cfg.margin).clamp(min=0.0)
    beta = attenuation_matrix(leaf_paths, cfg.theta).to(dtype=hinge.dtype, device=hinge.device)
    per_image = (hinge * beta).sum(dim=(1, 2)) / (p * (p - 1))
    return per_image.mean()


def divergence_loss(
    preds: torch.Tensor,
    hr: torch.Tensor,
    cfg: LossConfig,
    leaf_paths: Sequence[LeafPath],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total divergence-stage loss and its parts: (total, l2, triplet)."""
    l2 = divergence_l2(preds, hr)
    trip = divergence_triplet_loss(preds, hr, cfg, leaf_paths)
    return l2 + cfg.alpha * trip, l2, trip


def convergence_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Fusion-stage loss: per-image MSE of the fused output, batch-averaged."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: sr {tuple(sr.shape)} vs hr {tuple(hr.shape)}")
    if sr.dim() == 3:
        sr, hr = sr.unsqueeze(0), hr.unsqueeze(0)
    return (sr - hr).pow(2).mean(dim=(1, 2, 3)).mean()
