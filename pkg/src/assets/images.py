"""
PNG codecs for color images, masks and normal maps.

Color images and masks are 8- or 16-bit PNGs mapped to [0, 1]. Normal maps
are 16-bit RGB PNGs holding camera-space unit vectors as (n + 1) / 2 * 65535
per channel (x right, y down, z forward; visible front normals have
negative z). Invalid pixels are written as mid-gray; on reading, pixels whose
decoded vector is shorter than one half are invalid and become zero vectors.
"""

from pathlib import Path

import cv2
import numpy as np
import torch
from torch import Tensor

from assets.io import atomic_write_bytes
from core.logger import logger

UINT16_MAX = 65535
NORMAL_VALID_LENGTH = 0.5


def _read(path: str | Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return image


def _to_unit(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float64) / UINT16_MAX
    return image.astype(np.float64)


def image_size(path: str | Path) -> tuple[int, int]:
    """(height, width) of an image file."""
    image = _read(path)
    return image.shape[0], image.shape[1]


def read_rgb(path: str | Path) -> Tensor:
    """(H, W, 3) float64 in [0, 1]; alpha channels are dropped."""
    image = _read(path)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    image = cv2.cvtColor(image[..., :3], cv2.COLOR_BGR2RGB)
    return torch.from_numpy(_to_unit(image))


def read_mask(path: str | Path) -> Tensor:
    """(H, W, 1) float64 in [0, 1]; color masks use their first channel."""
    image = _read(path)
    if image.ndim == 3:
        image = image[..., 0]
    return torch.from_numpy(_to_unit(image))[..., None]


def read_normal_map(path: str | Path) -> tuple[Tensor, int]:
    """
    (H, W, 3) unit normals and the number of valid pixels that had to be
    renormalized because their decoded length was not 1.
    """
    image = _read(path)
    if image.ndim != 3 or image.shape[2] < 3:
        raise ValueError(f"normal map {path} must have three channels")
    encoded = cv2.cvtColor(image[..., :3], cv2.COLOR_BGR2RGB)
    normals = 2.0 * _to_unit(encoded) - 1.0
    length = np.linalg.norm(normals, axis=-1, keepdims=True)
    valid = length > NORMAL_VALID_LENGTH
    quantum = 2.0 / UINT16_MAX if encoded.dtype == np.uint16 else 2.0 / 255.0
    renormalized = int((valid[..., 0] & (np.abs(length[..., 0] - 1.0) > quantum)).sum())
    normals = np.where(valid, normals / np.where(valid, length, 1.0), 0.0)
    return torch.from_numpy(normals), renormalized


def _encode_png(image: np.ndarray) -> bytes:
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise ValueError("PNG encoding failed")
    return buffer.tobytes()


def _as_numpy(image: Tensor | np.ndarray) -> np.ndarray:
    if isinstance(image, Tensor):
        image = image.detach().cpu().to(torch.float64).numpy()
    return np.asarray(image, dtype=np.float64)


def write_rgb(path: str | Path, image: Tensor | np.ndarray, bits: int = 8) -> Path:
    array = np.clip(_as_numpy(image), 0.0, 1.0)
    if array.ndim == 3 and array.shape[2] == 1:
        array = np.repeat(array, 3, axis=2)
    scale, dtype = (255.0, np.uint8) if bits == 8 else (float(UINT16_MAX), np.uint16)
    quantized = np.rint(array * scale).astype(dtype)
    return atomic_write_bytes(path, _encode_png(cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR)))


def write_mask(path: str | Path, mask: Tensor | np.ndarray) -> Path:
    array = np.clip(_as_numpy(mask), 0.0, 1.0)
    if array.ndim == 3:
        array = array[..., 0]
    return atomic_write_bytes(path, _encode_png(np.rint(array * 255.0).astype(np.uint8)))


def write_depth(path: str | Path, depth: Tensor | np.ndarray, max_depth: float | None = None) -> Path:
    """16-bit grayscale PNG scaled so ``max_depth`` (default: the largest value) maps to white."""
    array = _as_numpy(depth)
    if array.ndim == 3:
        array = array[..., 0]
    top = max_depth or float(array.max()) or 1.0
    return atomic_write_bytes(path, _encode_png(np.rint(np.clip(array / top, 0, 1) * UINT16_MAX).astype(np.uint16)))


def write_normal_map(path: str | Path, normals: Tensor | np.ndarray) -> Path:
    array = _as_numpy(normals)
    length = np.linalg.norm(array, axis=-1, keepdims=True)
    # invalid pixels decode to (near) zero vectors
    encoded = np.where(length > 0, (array + 1.0) / 2.0, 0.5)
    quantized = np.rint(np.clip(encoded, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)
    return atomic_write_bytes(path, _encode_png(cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR)))


def log_renormalized(path: str | Path, count: int) -> None:
    if count:
        logger.warning(f"Renormalized {count} non-unit normal(s) in {path}")
