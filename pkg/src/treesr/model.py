"""Tree-structured divergence network and convergence fusion network.

The divergence network extracts shallow features with one 3x3 convolution,
pushes them through a tree of non-weight-shared branch modules (depth L,
branching C), and reconstructs one upscaled prediction per leaf, giving
P = C^L divergent outputs. The convergence network scores each prediction
with a per-pixel softmax weight map and fuses them into the final image.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np
import torch
from torch import nn

from .imaging import validate_image

LeafPath = tuple[int, ...]

MIN_INPUT_SIZE = 8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both networks."""

    tree_depth: int = 2
    branching: int = 2
    residual_groups: int = 2
    blocks_per_group: int = 4
    channels: int = 64
    scale: int = 4
    reduction: int = 16
    deep_residual: bool = True

    def __post_init__(self) -> None:
        for name in ("tree_depth", "branching", "residual_groups", "blocks_per_group", "channels", "reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.scale not in (2, 3, 4, 8):
            raise ValueError(f"scale must be one of 2, 3, 4, 8, got {self.scale}")
        if self.channels % self.reduction != 0:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by reduction ({self.reduction})"
            )

    @property
    def num_predictions(self) -> int:
        return self.branching ** self.tree_depth

    @property
    def leaf_paths(self) -> tuple[LeafPath, ...]:
        """All leaves as child-index paths, in lexicographic order."""
        return tuple(product(range(self.branching), repeat=self.tree_depth))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        """Stable digest used to pair checkpoints with compatible models."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class PredictionSet:
    """Ordered divergent predictions for one input, as (H, W, 3) images."""

    predictions: list[np.ndarray]
    leaf_paths: tuple[LeafPath, ...]

    def __post_init__(self) -> None:
        if len(self.predictions) != len(self.leaf_paths):
            raise ValueError(
                f"{len(self.predictions)} predictions but {len(self.leaf_paths)} leaf paths"
            )
        shapes = {p.shape for p in self.predictions}
        if len(shapes) > 1:
            raise ValueError(f"predictions disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.predictions)


@dataclass
class WeightMaps:
    """Per-pixel fusion weights, one (H, W) plane per prediction.

    At every pixel the planes are nonnegative and sum to 1.
    """

    planes: list[np.ndarray]
    leaf_paths: tuple[LeafPath, ...] = field(default_factory=tuple)


class ChannelAttention(nn.Module):
    """Global-pool squeeze-and-excite gate over feature channels."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, channels // reduction, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.body(x)


class RCAB(nn.Module):
    """Residual channel-attention block: conv-relu-conv gated by attention."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            ChannelAttention(channels, reduction),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGroup(nn.Module):
    """A stack of RCABs plus a tail convolution, wrapped in a skip."""

    def __init__(self, channels: int, blocks: int, reduction: int):
        super().__init__()
        layers = [RCAB(channels, reduction) for _ in range(blocks)]
        layers.append(nn.Conv2d(channels, channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class BranchModule(nn.Module):
    """One tree node: G residual groups, with an optional node-level skip."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.deep_residual = cfg.deep_residual
        self.body = nn.Sequential(
            *[ResidualGroup(cfg.channels, cfg.blocks_per_group, cfg.reduction)
              for _ in range(cfg.residual_groups)]
        )

    def forward(self, x):
        out = self.body(x)
        return out + x if self.deep_residual else out


class Upscaler(nn.Sequential):
    """Sub-pixel upscaling: conv expands channels by r^2, then rearranges.

    Scales 2 and 3 use one stage; 4 and 8 chain x2 stages.
    """

    def __init__(self, channels: int, scale: int):
        stages = []
        factors = {2: [2], 3: [3], 4: [2, 2], 8: [2, 2, 2]}[scale]
        for r in factors:
            stages.append(nn.Conv2d(channels, channels * r * r, 3, padding=1))
            stages.append(nn.PixelShuffle(r))
        super().__init__(*stages)


class DivergenceModel(nn.Module):
    """Shallow extractor, branch-module tree, and per-leaf reconstruction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.leaf_paths = cfg.leaf_paths
        self.shallow = nn.Conv2d(3, cfg.channels, 3, padding=1)
        # levels[l] holds the C^(l+1) nodes at depth l+1, ordered so that
        # node k's parent is node k // C of the previous level.
        self.levels = nn.ModuleList(
            nn.ModuleList(BranchModule(cfg) for _ in range(cfg.branching ** (lvl + 1)))
            for lvl in range(cfg.tree_depth)
        )
        p = cfg.num_predictions
        self.leaf_convs = nn.ModuleList(
            nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1) for _ in range(p)
        )
        self.upscalers = nn.ModuleList(Upscaler(cfg.channels, cfg.scale) for _ in range(p))
        self.out_convs = nn.ModuleList(nn.Conv2d(cfg.channels, 3, 3, padding=1) for _ in range(p))

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        """Map an LR batch (N, 3, h, w) to predictions (N, P, 3, s*h, s*w)."""
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise ValueError(f"expected input (N, 3, h, w), got {tuple(lr.shape)}")
        if lr.shape[2] < MIN_INPUT_SIZE or lr.shape[3] < MIN_INPUT_SIZE:
            raise ValueError(
                f"input {lr.shape[2]}x{lr.shape[3]} below minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
            )
        shallow = self.shallow(lr)
        feats = [shallow]
        for level in self.levels:
            feats = [node(feats[k // self.cfg.branching]) for k, node in enumerate(level)]
        outputs = []
        for i, leaf_feat in enumerate(feats):
            x = leaf_feat + shallow if self.cfg.deep_residual else leaf_feat
            x = self.leaf_convs[i](x)
            x = self.upscalers[i](x)
            outputs.append(self.out_convs[i](x))
        return torch.stack(outputs, dim=1)


def fuse_predictions(preds: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted per-pixel sum of predictions: sum_i pred_i * w_i.

    preds is (N, P, 3, H, W); weights (N, P, H, W) broadcast over RGB.
    """
    if preds.shape[:2] != weights.shape[:2] or preds.shape[3:] != weights.shape[2:]:
        raise ValueError(
            f"predictions {tuple(preds.shape)} and weights {tuple(weights.shape)} disagree"
        )
    return (preds * weights.unsqueeze(2)).sum(dim=1)


class ConvergenceModel(nn.Module):
    """Per-pixel weighting head over the concatenated predictions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.num_predictions
        c = cfg.channels
        self.head = nn.Sequential(
            nn.Conv2d(3 * p, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, p, 1),
        )

    def forward(self, preds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Fuse predictions (N, P, 3, H, W) into (weights, sr).

        Weights (N, P, H, W) are a per-pixel softmax over the P planes, so
        the fused output is a convex combination of the predictions.
        """
        if preds.dim() != 5:
            raise ValueError(f"expected predictions (N, P, 3, H, W), got {tuple(preds.shape)}")
        n, p = preds.shape[:2]
        if p != self.cfg.num_predictions:
            raise ValueError(f"model fuses {self.cfg.num_predictions} predictions, got {p}")
        logits = self.head(preds.reshape(n, 3 * p, *preds.shape[3:]))
        weights = torch.softmax(logits, dim=1)
        return weights, fuse_predictions(preds, weights)


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled uniform init for weights, zeros for biases."""
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        if name.endswith("bias"):
            with torch.no_grad():
                param.zero_()
        else:
            fan_in = param[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                param.uniform_(-bound, bound, generator=gen)


def build_divergence_network(cfg: ModelConfig, seed: int) -> DivergenceModel:
    model = DivergenceModel(cfg)
    _init_parameters(model, seed)
    return model


def build_convergence_network(cfg: ModelConfig, seed: int) -> ConvergenceModel:
    model = ConvergenceModel(cfg)
    _init_parameters(model, seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameters_hash(model: nn.Module) -> str:
    """Digest of all parameter tensors, for freeze and identity contracts."""
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) numpy image -> (3, H, W) torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(t: torch.Tensor, clamp: bool = True) -> np.ndarray:
    """(3, H, W) torch tensor -> (H, W, 3) float64 numpy image."""
    arr = t.detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0) if clamp else arr


def divergence_forward(model: DivergenceModel, lr: np.ndarray) -> PredictionSet:
    """Run the divergence network on one image, returning clamped predictions."""
    lr = validate_image(lr, name="lr")
    with torch.no_grad():
        preds = model(image_to_tensor(lr).unsqueeze(0))[0]
    return PredictionSet(
        predictions=[tensor_to_image(p) for p in preds],
        leaf_paths=model.leaf_paths,
    )


def convergence_forward(
    model: ConvergenceModel, preds: PredictionSet
) -> tuple[WeightMaps, np.ndarray]:
    """Fuse a prediction set into (weight maps, SR image)."""
    if len(preds) != model.cfg.num_predictions:
        raise ValueError(
            f"model fuses {model.cfg.num_predictions} predictions, got {len(preds)}"
        )
    stack = torch.stack([image_to_tensor(p) for p in preds.predictions]).unsqueeze(0)
    with torch.no_grad():
        weights, sr = model(stack)
    maps = WeightMaps(
        planes=[w.numpy().astype(np.float64) for w in weights[0]],
        leaf_paths=preds.leaf_paths,
    )
    return maps, tensor_to_image(sr[0])
