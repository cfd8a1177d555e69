"""Paired LR/HR dataset construction, manifests, and patch sampling.

Pairs are synthesized by center-cropping each HR image to dimensions
divisible by the scale and bicubic-downsampling it. The HR crop is
quantized to the PNG code grid *before* the LR is computed, so re-degrading
the stored HR file reproduces the stored LR file bit-exactly.

Manifest format (line-oriented text, tab-separated, paths relative to the
manifest's directory):

    scale=<int>\tsplit=<train|test>
    # skipped <identifier>: <reason>        (zero or more warning lines)
    <identifier>\t<lr_relpath>\t<hr_relpath>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import bicubic_resize, load_png, quantize, save_png


class ManifestError(ValueError):
    """A dataset manifest is missing, malformed, or references bad files."""


@dataclass
class ImagePair:
    """An aligned LR/HR pair; HR dimensions are exactly scale * LR."""

    lr: np.ndarray
    hr: np.ndarray
    scale: int
    identifier: str

    def __post_init__(self) -> None:
        lh, lw = self.lr.shape[:2]
        hh, hw = self.hr.shape[:2]
        if (hh, hw) != (self.scale * lh, self.scale * lw):
            raise ValueError(
                f"{self.identifier}: HR {hh}x{hw} is not exactly "
                f"{self.scale}x the LR {lh}x{lw}"
            )


@dataclass
class DatasetManifest:
    root: Path
    records: list[tuple[str, str, str]]  # (identifier, lr_relpath, hr_relpath)
    scale: int
    split: str
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def identifiers(self) -> list[str]:
        return [rec[0] for rec in self.records]


def generate_bicubic_pairs(
    hr_dir: str | Path,
    scale: int,
    out_dir: str | Path,
    split: str = "train",
    sources: list[Path] | None = None,
) -> DatasetManifest:
    """Degrade every PNG under hr_dir into an aligned LR/HR pair on disk.

    An explicit `sources` list restricts processing to those files (used to
    carve train/test splits). Images smaller than 8 * scale on either side
    are skipped with a warning recorded in the manifest. Output and manifest
    are deterministic, so a rerun reproduces identical bytes.
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if scale not in (2, 3, 4, 8):
        raise ValueError(f"scale must be one of 2, 3, 4, 8, got {scale}")
    if sources is None:
        sources = sorted(hr_dir.glob("*.png"))
    if not sources:
        raise ManifestError(f"no HR images found in {hr_dir}")

    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)

    records: list[tuple[str, str, str]] = []
    skipped: list[tuple[str, str]] = []
    for src in sources:
        identifier = src.stem
        hr = load_png(src)
        h, w = hr.shape[:2]
        if h < 8 * scale or w < 8 * scale:
            skipped.append((identifier, f"image {h}x{w} smaller than {8 * scale} per side"))
            continue
        ch, cw = (h // scale) * scale, (w // scale) * scale
        top, left = (h - ch) // 2, (w - cw) // 2
        hr_crop = quantize(hr[top:top + ch, left:left + cw])
        lr = bicubic_resize(hr_crop, ch // scale, cw // scale)
        save_png(hr_crop, out_dir / "hr" / f"{identifier}.png")
        save_png(lr, out_dir / "lr" / f"{identifier}.png")
        records.append((identifier, f"lr/{identifier}.png", f"hr/{identifier}.png"))

    manifest = DatasetManifest(root=out_dir, records=records, scale=scale,
                               split=split, skipped=skipped)
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"scale={manifest.scale}\tsplit={manifest.split}"]
    lines += [f"# skipped {ident}: {reason}" for ident, reason in manifest.skipped]
    lines += ["\t".join(rec) for rec in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest and verify every referenced file exists."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: no such manifest")
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = dict(item.split("=", 1) for item in lines[0].split("\t") if "=" in item)
    if "scale" not in header or "split" not in header:
        raise ManifestError(f"{path}: bad header line {lines[0]!r}")
    if header["split"] not in ("train", "test"):
        raise ManifestError(f"{path}: split must be train or test, got {header['split']!r}")

    root = path.parent
    records: list[tuple[str, str, str]] = []
    skipped: list[tuple[str, str]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line.lstrip("# ")
            if body.startswith("skipped ") and ":" in body:
                ident, reason = body[len("skipped "):].split(":", 1)
                skipped.append((ident.strip(), reason.strip()))
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields")
        records.append((parts[0], parts[1], parts[2]))

    missing = [rel for _, lr_rel, hr_rel in records for rel in (lr_rel, hr_rel)
               if not (root / rel).is_file()]
    if missing:
        raise ManifestError(f"{path}: referenced files missing: {missing}")
    return DatasetManifest(root=root, records=records, scale=int(header["scale"]),
                           split=header["split"], skipped=skipped)


def iterate_pairs(manifest: DatasetManifest, rejections: list[tuple[str, str]] | None = None):
    """Yield ImagePairs in manifest order, rejecting bad items individually.

    Items whose files fail to load or whose dimensions violate the exact
    scale relation are skipped; the reason is appended to `rejections`.
    """
    for identifier, lr_rel, hr_rel in manifest.records:
        try:
            pair = ImagePair(
                lr=load_png(manifest.root / lr_rel),
                hr=load_png(manifest.root / hr_rel),
                scale=manifest.scale,
                identifier=identifier,
            )
        except (ValueError, OSError) as exc:
            if rejections is not None:
                rejections.append((identifier, str(exc)))
            continue
        yield pair


def load_pairs(manifest: DatasetManifest) -> tuple[list[ImagePair], list[tuple[str, str]]]:
    """Materialize all valid pairs plus the list of per-item rejections."""
    rejections: list[tuple[str, str]] = []
    pairs = list(iterate_pairs(manifest, rejections))
    return pairs, rejections


def sample_patch_pair(
    pair: ImagePair, lr_patch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Cut one aligned random patch pair: LR p x p, HR (s*p) x (s*p).

    The HR window sits at exactly scale-multiplied coordinates, so alignment
    is exact by construction. The top-left corner is uniform over all valid
    positions and consumes the supplied RNG deterministically.
    """
    h, w = pair.lr.shape[:2]
    if lr_patch > h or lr_patch > w:
        raise ValueError(
            f"{pair.identifier}: patch {lr_patch} exceeds LR size {h}x{w}"
        )
    top = int(rng.integers(0, h - lr_patch + 1))
    left = int(rng.integers(0, w - lr_patch + 1))
    s = pair.scale
    lr = pair.lr[top:top + lr_patch, left:left + lr_patch]
    hr = pair.hr[s * top:s * (top + lr_patch), s * left:s * (left + lr_patch)]
    return lr, hr
