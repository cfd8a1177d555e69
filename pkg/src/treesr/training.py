"""Two-stage training: divergence network first, then the frozen-backbone
convergence stage, with deterministic checkpointing and metrics streams.

An epoch is one pass over the manifest entries with one random patch batch
per entry, so the pair index and epoch are pure functions of the step
counter. Together with the serialized data-RNG and optimizer state this
makes checkpoint/resume bit-identical to an uninterrupted run.

Checkpoint container (self-describing, version-checked):

    magic "TSRCKPT1" | u64 header length | header JSON | raw tensor payload

The header carries the format version, the model config and its hash, a
meta block (stage, counters, RNG states, training config), and the name,
dtype, shape and offset of every tensor in the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import DatasetManifest, ImagePair, load_pairs, sample_patch_pair
from .loss import LossConfig, convergence_loss, divergence_loss
from .model import (
    ConvergenceModel,
    DivergenceModel,
    ModelConfig,
    parameters_hash,
)

_MAGIC = b"TSRCKPT1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted (empty dataset, non-finite loss, ...)."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or incompatible with the model."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "divergence"
    batch_size: int = 4
    lr_patch: int = 24
    initial_lr: float = 1e-4
    halve_every: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 1
    max_steps: int | None = None
    grad_clip: float | None = None
    checkpoint_every: int | None = None  # epochs; None -> halve_every // 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.stage not in ("divergence", "convergence"):
            raise ValueError(f"stage must be divergence or convergence, got {self.stage!r}")
        for name in ("batch_size", "lr_patch", "halve_every", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: initial_lr halved every halve_every epochs."""
    return cfg.initial_lr * 0.5 ** (epoch // cfg.halve_every)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict

    def restore_model(self, model: nn.Module) -> None:
        state = {}
        for name, ref in model.state_dict().items():
            key = f"model/{name}"
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            state[name] = torch.from_numpy(self.tensors[key].copy()).to(ref.dtype)
        model.load_state_dict(state)

    def restore_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        state: dict[int, dict] = {}
        for key, arr in self.tensors.items():
            if not key.startswith("optim/"):
                continue
            _, idx, slot = key.split("/")
            state.setdefault(int(idx), {})[slot] = torch.from_numpy(arr.copy())
        optimizer.load_state_dict(
            {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}
        )

    def data_rng(self) -> np.random.Generator:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = self.meta["numpy_rng"]
        return rng


def _tensor_payload(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(
    path: str | Path,
    *,
    config: ModelConfig,
    tensors: dict[str, np.ndarray],
    meta: dict,
) -> Path:
    """Write the versioned container; identical inputs give identical bytes."""
    index, payload = _tensor_payload(tensors)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "model_config": config.to_dict(),
            "config_hash": config.hash(),
            "meta": meta,
            "tensors": index,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if start + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[start:start + header_len])
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header['format_version']} != {FORMAT_VERSION}"
        )
    config = ModelConfig.from_dict(header["model_config"])
    if header["config_hash"] != config.hash():
        raise CheckpointError(f"{path}: config hash does not match stored config")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise CheckpointError(
            f"{path}: config hash mismatch, checkpoint {config.hash()} "
            f"vs expected {expected_config.hash()}"
        )
    payload_start = start + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        lo = payload_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=config, tensors=tensors, meta=header["meta"])


def _collect_tensors(model: nn.Module, optimizer: torch.optim.Optimizer | None) -> dict[str, np.ndarray]:
    tensors = {
        f"model/{name}": t.detach().cpu().numpy()
        for name, t in model.state_dict().items()
    }
    if optimizer is not None:
        for idx, slots in optimizer.state_dict()["state"].items():
            for slot, value in slots.items():
                tensors[f"optim/{idx}/{slot}"] = (
                    value.detach().cpu().numpy() if torch.is_tensor(value)
                    else np.asarray(value)
                )
    return tensors


def _train_meta(stage: str, cfg: TrainConfig, step: int, rng: np.random.Generator) -> dict:
    return {
        "stage": stage,
        "seed": cfg.seed,
        "step": step,
        "epoch": None,  # filled by caller with steps_per_epoch context
        "numpy_rng": rng.bit_generator.state,
        "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        "train_config": cfg.to_dict(),
    }


# ---------------------------------------------------------------------------
# Metrics stream
# ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV stream; float cells use repr for exact round trips."""

    def __init__(self, path: str | Path, columns: list[str], append: bool = False):
        self.path = Path(path)
        self.columns = columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if append and self.path.exists():
            self._fh = open(self.path, "a")
        else:
            self._fh = open(self.path, "w")
            self._fh.write(",".join(columns) + "\n")

    def write(self, *values) -> None:
        cells = [repr(v) if isinstance(v, float) else str(v) for v in values]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _materialize(manifest: DatasetManifest | list[ImagePair]) -> list[ImagePair]:
    if isinstance(manifest, DatasetManifest):
        pairs, _ = load_pairs(manifest)
    else:
        pairs = list(manifest)
    if not pairs:
        raise TrainingError("training dataset is empty")
    return pairs


def _sample_batch(
    pair: ImagePair, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        lr, hr = sample_patch_pair(pair, cfg.lr_patch, rng)
        lrs.append(lr.transpose(2, 0, 1))
        hrs.append(hr.transpose(2, 0, 1))
    to_t = lambda arrs: torch.from_numpy(np.ascontiguousarray(np.stack(arrs))).float()
    return to_t(lrs), to_t(hrs)


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params,
        lr=cfg.initial_lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_epsilon,
    )


def _total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    total = cfg.max_epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    return total


def _checkpoint_epochs(cfg: TrainConfig) -> int:
    return cfg.checkpoint_every if cfg.checkpoint_every is not None else max(cfg.halve_every // 4, 1)


def _run_stage(
    *,
    stage: str,
    trainable: nn.Module,
    step_loss,  # (lr_batch, hr_batch) -> tuple of loss tensors, first is total
    columns: list[str],
    manifest: DatasetManifest | list[ImagePair],
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None,
    extra_meta: dict | None = None,
) -> Path:
    pairs = _materialize(manifest)
    steps_per_epoch = len(pairs)
    total_steps = _total_steps(cfg, steps_per_epoch)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "ckpt"

    optimizer = _make_optimizer([p for p in trainable.parameters() if p.requires_grad], cfg)
    rng = np.random.default_rng(cfg.seed)
    # The loop itself never draws from torch's global RNG, but its state is
    # checkpointed; pin it so identical runs produce identical bytes.
    torch.manual_seed(cfg.seed)
    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_config=getattr(trainable, "cfg", None))
        if ckpt.meta["stage"] != stage:
            raise CheckpointError(
                f"{resume}: stage {ckpt.meta['stage']!r} cannot resume a {stage!r} run"
            )
        ckpt.restore_model(trainable)
        ckpt.restore_optimizer(optimizer)
        rng = ckpt.data_rng()
        torch.set_rng_state(torch.frombuffer(
            bytearray.fromhex(ckpt.meta["torch_rng"]), dtype=torch.uint8).clone())
        start_step = ckpt.meta["step"]

    metrics = MetricsWriter(out_dir / "metrics.csv", columns, append=resume is not None)

    def checkpoint_meta(step: int) -> dict:
        meta = _train_meta(stage, cfg, step, rng)
        meta["epoch"] = step // steps_per_epoch
        meta.update(extra_meta or {})
        return meta

    def write_checkpoint(path: Path, step: int) -> Path:
        return save_checkpoint(
            path,
            config=trainable.cfg,
            tensors=_collect_tensors(trainable, optimizer),
            meta=checkpoint_meta(step),
        )

    ckpt_every = _checkpoint_epochs(cfg)
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        lr_value = learning_rate(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr_value

        lr_batch, hr_batch = _sample_batch(pairs[step % steps_per_epoch], cfg, rng)
        losses = step_loss(lr_batch, hr_batch)
        total = losses[0]
        if not torch.isfinite(total):
            diag = write_checkpoint(ckpt_dir / "diagnostic.ckpt", step)
            metrics.close()
            raise TrainingError(
                f"non-finite loss at step {step}; diagnostic checkpoint at {diag}"
            )
        optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip is not None:
            nn.utils.clip_grad_norm_(trainable.parameters(), cfg.grad_clip)
        optimizer.step()

        metrics.write(step, epoch, lr_value, *[float(v.item()) for v in losses])
        done = step + 1
        if done % steps_per_epoch == 0 and (done // steps_per_epoch) % ckpt_every == 0 \
                and done < total_steps:
            write_checkpoint(ckpt_dir / f"epoch_{done // steps_per_epoch:06d}.ckpt", done)

    metrics.close()
    return write_checkpoint(ckpt_dir / "final.ckpt", total_steps)


def train_divergence(
    model: DivergenceModel,
    manifest: DatasetManifest | list[ImagePair],
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Stage 1: optimize the divergence loss; returns the final checkpoint."""
    if cfg.stage != "divergence":
        raise ValueError(f"cfg.stage must be 'divergence', got {cfg.stage!r}")

    def step_loss(lr_batch, hr_batch):
        preds = model(lr_batch)
        total, l2, trip = divergence_loss(preds, hr_batch, cfg.loss, model.leaf_paths)
        return total, l2, trip

    return _run_stage(
        stage="divergence",
        trainable=model,
        step_loss=step_loss,
        columns=["step", "epoch", "lr", "loss_total", "loss_l2", "loss_triplet"],
        manifest=manifest,
        cfg=cfg,
        out_dir=out_dir,
        resume=resume,
    )


def load_divergence_model(ckpt_path: str | Path) -> tuple[DivergenceModel, Checkpoint]:
    """Rebuild a divergence network from a stage-1 checkpoint."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.meta.get("stage") != "divergence":
        raise CheckpointError(f"{ckpt_path}: not a divergence checkpoint")
    model = DivergenceModel(ckpt.config)
    ckpt.restore_model(model)
    return model, ckpt


def load_convergence_model(ckpt_path: str | Path) -> tuple[ConvergenceModel, Checkpoint]:
    """Rebuild a convergence network from a stage-2 checkpoint."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.meta.get("stage") != "convergence":
        raise CheckpointError(f"{ckpt_path}: not a convergence checkpoint")
    model = ConvergenceModel(ckpt.config)
    ckpt.restore_model(model)
    return model, ckpt


def train_convergence(
    div_ckpt: str | Path,
    conv_model: ConvergenceModel,
    manifest: DatasetManifest | list[ImagePair],
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Stage 2: freeze the divergence network, train the fusion head.

    The divergence parameters are loaded, marked non-trainable, and hashed
    before and after training; a hash change aborts the run.
    """
    if cfg.stage != "convergence":
        raise ValueError(f"cfg.stage must be 'convergence', got {cfg.stage!r}")
    div_model, div_ckpt_data = load_divergence_model(div_ckpt)
    if div_ckpt_data.config.hash() != conv_model.cfg.hash():
        raise CheckpointError(
            f"config hash mismatch: divergence checkpoint {div_ckpt_data.config.hash()} "
            f"vs convergence model {conv_model.cfg.hash()}"
        )
    div_model.requires_grad_(False)
    div_model.eval()
    hash_before = parameters_hash(div_model)

    def step_loss(lr_batch, hr_batch):
        with torch.no_grad():
            preds = div_model(lr_batch)
        _, sr = conv_model(preds)
        return (convergence_loss(sr, hr_batch),)

    final = _run_stage(
        stage="convergence",
        trainable=conv_model,
        step_loss=step_loss,
        columns=["step", "epoch", "lr", "loss_convergence"],
        manifest=manifest,
        cfg=cfg,
        out_dir=out_dir,
        resume=resume,
        extra_meta={"divergence_params_hash": hash_before},
    )
    hash_after = parameters_hash(div_model)
    if hash_after != hash_before:
        raise TrainingError(
            f"divergence parameters changed during stage 2: {hash_before} -> {hash_after}"
        )
    return final
