"""Turn a raw EEM into the 160x160x3 uint8 model input, and map pixels back to wavelengths."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .eemio import EEMGrid

logger = logging.getLogger(__name__)

IMAGE_SIZE = 160
NORMALIZATION_COUNTS = 1000.0
QUANTIZATION_RULE = "q = floor(v * 255 + 0.5) (half away from zero), v in [0, 1]"


class RayleighMode(str, Enum):
    KEEP = "keep"
    ZERO = "zero"
    INTERPOLATE = "interpolate"


@dataclass(frozen=True, eq=False)
class PreprocessedImage:
    pixels: np.ndarray
    sample_ref: tuple[str, int] | None = None
    rayleigh_mode: RayleighMode = RayleighMode.KEEP

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {p.shape}")
        if p.dtype != np.uint8:
            raise ValueError(f"image must be uint8, got {p.dtype}")
        if not (np.array_equal(p[..., 0], p[..., 1]) and np.array_equal(p[..., 0], p[..., 2])):
            raise ValueError("image channels must be identical")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "rayleigh_mode", RayleighMode(self.rayleigh_mode))


@dataclass(frozen=True)
class AxisMapping:
    axis: str
    lambda_min: float
    lambda_max: float
    n_pixels: int = IMAGE_SIZE

    def __post_init__(self):
        if self.axis not in ("excitation", "emission"):
            raise ValueError(f"axis must be 'excitation' or 'emission', got {self.axis!r}")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be < lambda_max")
        if self.n_pixels < 1:
            raise ValueError("n_pixels must be positive")

    @property
    def pixel_width(self) -> float:
        return (self.lambda_max - self.lambda_min) / self.n_pixels

    @classmethod
    def for_grid(cls, grid: EEMGrid, axis: str) -> "AxisMapping":
        values = grid.excitation_nm if axis == "excitation" else grid.emission_nm
        return cls(axis, float(values[0]), float(values[-1]))


EXCITATION_MAPPING = AxisMapping("excitation", 300.0, 640.0)
EMISSION_MAPPING = AxisMapping("emission", 300.0, 800.0)


def pixel_to_band(mapping: AxisMapping, pixel: int) -> tuple[float, float]:
    """Half-open wavelength band ``[lo, hi)`` covered by one pixel of the resized image."""
    if not 0 <= pixel < mapping.n_pixels:
        raise IndexError(f"pixel {pixel} outside 0..{mapping.n_pixels - 1}")
    w = mapping.pixel_width
    lo = mapping.lambda_min + pixel * w
    hi = mapping.lambda_max if pixel == mapping.n_pixels - 1 else mapping.lambda_min + (pixel + 1) * w
    return lo, hi


def wavelength_to_pixel(mapping: AxisMapping, wavelength: float) -> int:
    """Inverse of :func:`pixel_to_band`; the upper endpoint maps to the last pixel."""
    if not mapping.lambda_min <= wavelength <= mapping.lambda_max:
        raise ValueError(f"{wavelength} nm outside {mapping.lambda_min}-{mapping.lambda_max} nm")
    p = int((wavelength - mapping.lambda_min) // mapping.pixel_width)
    return min(p, mapping.n_pixels - 1)


def normalize(grid: EEMGrid) -> np.ndarray:
    out = grid.intensity / NORMALIZATION_COUNTS
    n_sat = int(np.count_nonzero(out > 1.0))
    if n_sat:
        logger.warning("%d saturated cells above %g counts clamped to 1.0", n_sat, NORMALIZATION_COUNTS)
        out = np.minimum(out, 1.0)
    return out


def rayleigh_band(grid: EEMGrid, half_width: float = 10.0) -> np.ndarray:
    """Boolean mask of cells with ``|em - ex| <= half_width``."""
    return np.abs(grid.emission_nm[None, :] - grid.excitation_nm[:, None]) <= half_width


def mask_rayleigh(grid: EEMGrid, mode: RayleighMode | str = RayleighMode.KEEP, half_width: float = 10.0) -> EEMGrid:
    mode = RayleighMode(mode)
    if mode is RayleighMode.KEEP:
        return grid
    band = rayleigh_band(grid, half_width)
    z = grid.intensity.copy()
    if mode is RayleighMode.ZERO:
        z[band] = 0.0
        return grid.with_intensity(z)

    em = grid.emission_nm
    for i in range(z.shape[0]):
        idx = np.flatnonzero(band[i])
        if not len(idx):
            continue
        left, right = idx[0] - 1, idx[-1] + 1
        has_left, has_right = left >= 0, right < z.shape[1]
        if has_left and has_right:
            t = (em[idx] - em[left]) / (em[right] - em[left])
            z[i, idx] = z[i, left] + t * (z[i, right] - z[i, left])
        elif has_left or has_right:
            # band touches the end of the row: hold the single available edge value
            z[i, idx] = z[i, left] if has_left else z[i, right]
        else:
            logger.warning("Rayleigh band covers the whole emission row at ex=%g nm; zeroing", grid.excitation_nm[i])
            z[i, idx] = 0.0
    return grid.with_intensity(z)


def _source_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners: first and last output pixels sit on the first and last samples
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_src - 2)
    frac = pos - i0
    return i0, i0 + 1, frac


def resize_to_square(matrix: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of a 35x251 matrix to ``size x size``."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (35, 251):
        raise ValueError(f"expected a 35x251 matrix, got {m.shape}")
    r0, r1, fr = _source_coords(m.shape[0], size)
    c0, c1, fc = _source_coords(m.shape[1], size)
    top = m[r0][:, c0] * (1 - fc) + m[r0][:, c1] * fc
    bottom = m[r1][:, c0] * (1 - fc) + m[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def quantize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("values must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def to_image(matrix: np.ndarray, sample_ref=None, rayleigh_mode: RayleighMode | str = RayleighMode.KEEP) -> PreprocessedImage:
    q = quantize(matrix)
    return PreprocessedImage(np.repeat(q[:, :, None], 3, axis=2), sample_ref, RayleighMode(rayleigh_mode))


def preprocess(grid: EEMGrid, sample_ref=None, rayleigh_mode: RayleighMode | str = RayleighMode.KEEP,
               rayleigh_half_width: float = 10.0) -> PreprocessedImage:
    masked = mask_rayleigh(grid, rayleigh_mode, rayleigh_half_width)
    return to_image(resize_to_square(normalize(masked)), sample_ref, rayleigh_mode)


def preprocess_dataset(dataset, rayleigh_mode: RayleighMode | str = RayleighMode.KEEP,
                       rayleigh_half_width: float = 10.0) -> dict[str, PreprocessedImage]:
    return {
        s.sample_id: preprocess(s.eem, s.ref, rayleigh_mode, rayleigh_half_width) for s in dataset
    }


def stack_pixels(images) -> np.ndarray:
    return np.stack([im.pixels for im in images]) if images else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.uint8)


def dump_debug_image(image: PreprocessedImage, path: str | Path) -> tuple[Path, Path]:
    """Write channel 0 as a binary PGM plus a ``.manifest.txt`` sidecar."""
    path = Path(path)
    gray = np.ascontiguousarray(image.pixels[..., 0])
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())
    sidecar = path.with_suffix(".manifest.txt")
    ref = "" if image.sample_ref is None else f"{image.sample_ref[0]}/stage{image.sample_ref[1]}"
    sidecar.write_text(
        f"sample_ref: {ref}\nrayleigh_mode: {image.rayleigh_mode.value}\n"
        f"quantization: {QUANTIZATION_RULE}\nrows: excitation\ncolumns: emission\n",
        encoding="utf-8",
    )
    return path, sidecar
