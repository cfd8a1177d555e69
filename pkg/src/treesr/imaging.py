"""Color-space and resampling primitives shared by data, loss and evaluation.

Images are numpy arrays of shape (H, W, 3), float64, with values in [0, 1].
Luma planes are (H, W) float64. Quantization happens only at PNG I/O; all
in-memory processing stays in the continuous domain.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

# Full-range BT.601 luma coefficients (the SR-evaluation convention).
_KR, _KG, _KB = 0.299, 0.587, 0.114

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """A PNG file could not be read or has an unsupported layout."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (H, W, 3) in-[0,1] contract and return the array as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected (H, W, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: empty spatial dimensions {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: pixel values outside [0, 1]")
    return arr


def rgb_to_ycbcr(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an RGB image into full-range BT.601 Y, Cb, Cr planes.

    Y is in [0, 1]; Cb/Cr are centered on 0.5 so that mid-gray maps to
    (g, 0.5, 0.5). The decomposition is exactly invertible by
    :func:`ycbcr_to_rgb`.
    """
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / (2.0 * (1.0 - _KB)) + 0.5
    cr = (r - y) / (2.0 * (1.0 - _KR)) + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr` (no clamping)."""
    r = y + 2.0 * (1.0 - _KR) * (cr - 0.5)
    b = y + 2.0 * (1.0 - _KB) * (cb - 0.5)
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def extract_y(img: np.ndarray) -> np.ndarray:
    """Luma plane of an RGB image (first plane of :func:`rgb_to_ycbcr`)."""
    return _KR * img[..., 0] + _KG * img[..., 1] + _KB * img[..., 2]


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel with parameter a."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    outer = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map out-of-range sample indices into [0, n) by half-sample reflection.

    Edge samples are included in the reflection (… b a | a b c | c b …),
    matching the dominant resize convention in the SR literature.
    """
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def _resize_weights(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-row sample indices and normalized bicubic weights.

    When shrinking, the kernel is stretched by the scale ratio so it acts as
    an anti-aliasing low-pass filter. Weights are normalized to sum to 1 for
    every output position, which preserves constants exactly.
    """
    ratio = out_size / in_size
    # Center-aligned source coordinate of each output sample.
    x = (np.arange(out_size, dtype=np.float64) + 0.5) / ratio - 0.5
    kernel_scale = min(ratio, 1.0)
    half_support = 2.0 / kernel_scale
    left = np.floor(x - half_support).astype(np.int64) + 1
    n_taps = int(np.ceil(2.0 * half_support)) + 1
    taps = left[:, None] + np.arange(n_taps)[None, :]
    weights = _cubic_kernel((x[:, None] - taps) * kernel_scale)
    weights /= weights.sum(axis=1, keepdims=True)
    return _reflect_index(taps, in_size), weights


def _resample_axis0(arr: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Contract the leading axis of arr against per-output taps and weights.

    The sum is anchored on the dominant tap so that a constant input yields
    that constant bit-exactly (the normalized weights sum to 1).
    """
    taps = arr[idx]  # (out, n_taps, ...)
    ref = np.argmax(w, axis=1)
    ref_vals = taps[np.arange(len(ref)), ref]  # (out, ...)
    w_exp = w.reshape(w.shape + (1,) * (arr.ndim - 1))
    return ref_vals + (w_exp * (taps - ref_vals[:, None])).sum(axis=1)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resampling (a = -0.5) with reflected borders.

    Accepts (H, W) or (H, W, C) input; the output is clamped to [0, 1].
    Downscaling is anti-aliased by widening the kernel with the scale ratio.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    in_h, in_w = arr.shape[:2]

    if in_h != out_h:
        idx, w = _resize_weights(in_h, out_h)
        arr = _resample_axis0(arr, idx, w)
    if in_w != out_w:
        idx, w = _resize_weights(in_w, out_w)
        arr = _resample_axis0(arr.transpose(1, 0, 2), idx, w).transpose(1, 0, 2)

    arr = np.clip(arr, 0.0, 1.0)
    return arr[:, :, 0] if squeeze else arr


def _read_png_header(path: Path) -> tuple[int, int, int, int]:
    """Return (width, height, bit_depth, color_type) from a PNG IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE:
        raise ImageFormatError(f"{path}: not a PNG file (bad signature)")
    if head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: malformed PNG (missing IHDR)")
    width, height = struct.unpack(">II", head[16:24])
    bit_depth, color_type = head[24], head[25]
    return width, height, bit_depth, color_type


def load_png(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit RGB PNG as a float64 image in [0, 1].

    Integer codes map to [0, 1] by division by the maximum code
    (255 or 65535). Non-RGB color types are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    width, height, bit_depth, color_type = _read_png_header(path)
    if color_type != 2:
        raise ImageFormatError(
            f"{path}: unsupported PNG color type {color_type} (need truecolor RGB)"
        )
    if bit_depth not in (8, 16):
        raise ImageFormatError(f"{path}: unsupported PNG bit depth {bit_depth}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 3 or raw.shape[2] != 3:
        raise ImageFormatError(f"{path}: malformed PNG (decode failed)")
    if (raw.shape[0], raw.shape[1]) != (height, width):
        raise ImageFormatError(f"{path}: malformed PNG (size mismatch with header)")
    max_code = 255.0 if raw.dtype == np.uint8 else 65535.0
    return raw[:, :, ::-1].astype(np.float64) / max_code


def save_png(img: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Write an image as an RGB PNG, quantizing by round-half-up.

    Saving and reloading an already-quantized image is lossless, so
    save -> load -> save is idempotent at the byte level.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    arr = validate_image(img, name=str(path))
    max_code = 255 if bit_depth == 8 else 65535
    codes = np.floor(arr * max_code + 0.5)
    codes = np.clip(codes, 0, max_code)
    codes = codes.astype(np.uint8 if bit_depth == 8 else np.uint16)
    path = Path(path)
    if not cv2.imwrite(str(path), codes[:, :, ::-1]):
        raise OSError(f"{path}: PNG write failed")


def quantize(img: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Round an image to the PNG code grid and return it as floats in [0, 1].

    This is exactly the value a save/load round trip would produce.
    """
    max_code = 255 if bit_depth == 8 else 65535
    codes = np.clip(np.floor(np.asarray(img, dtype=np.float64) * max_code + 0.5), 0, max_code)
    return codes / max_code
