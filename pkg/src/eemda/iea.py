"""Information Elimination Algorithm: tile occlusion sweep and its aggregations.

Each 5x5 tile of the model input is set to a fill value, one tile at a time, and the
change in absolute error against the true value is recorded. Rows of the map run
along excitation, columns along emission.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .eemio import EEMGrid
from .preprocess import EMISSION_MAPPING, EXCITATION_MAPPING, IMAGE_SIZE, AxisMapping, PreprocessedImage, pixel_to_band

TILE = 5
SWEEP_CHUNK = 256
CONTOUR_QUANTILES = (0.50, 0.75, 0.90)


@dataclass(frozen=True, eq=False)
class OcclusionMap:
    tile_dae: np.ndarray
    baseline_prediction: float
    baseline_ae: float
    true_value: float
    target: str = ""
    sample_ref: Union[tuple[str, int], str, None] = None
    tile_size: int = TILE
    stride: int = TILE
    fill: Union[int, str] = 0
    excitation_mapping: AxisMapping = EXCITATION_MAPPING
    emission_mapping: AxisMapping = EMISSION_MAPPING
    n_averaged: int = 1

    def __post_init__(self):
        dae = np.array(self.tile_dae, dtype=np.float64)
        n = grid_size(self.tile_size, self.stride)
        if dae.shape != (n, n):
            raise ValueError(f"tile_dae must be {n}x{n} for tile {self.tile_size}, stride {self.stride}")
        if not np.all(np.isfinite(dae)):
            raise ValueError("tile_dae contains non-finite values")
        dae.setflags(write=False)
        object.__setattr__(self, "tile_dae", dae)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tile_dae.shape

    def geometry(self) -> tuple:
        return (self.tile_size, self.stride, self.excitation_mapping, self.emission_mapping)

    def tile_pixels(self, r: int, c: int) -> tuple[slice, slice]:
        return (slice(r * self.stride, r * self.stride + self.tile_size),
                slice(c * self.stride, c * self.stride + self.tile_size))


@dataclass(frozen=True)
class Bar:
    pixel_lo: int
    pixel_hi: int
    band_lo_nm: float
    band_hi_nm: float
    importance: float


@dataclass(frozen=True)
class BandImportance:
    axis: str
    bars: tuple[Bar, ...] = field(default=())

    @property
    def importances(self) -> np.ndarray:
        return np.array([b.importance for b in self.bars])


def grid_size(tile_size: int = TILE, stride: int = TILE, image_size: int = IMAGE_SIZE) -> int:
    if tile_size < 1 or stride < 1 or tile_size > image_size:
        raise ValueError("invalid tile geometry")
    if stride == tile_size:
        if image_size % tile_size:
            raise ValueError(f"tile size {tile_size} does not divide {image_size}")
        return image_size // tile_size
    return (image_size - tile_size) // stride + 1


def _fill_value(image: np.ndarray, fill: Union[int, str]) -> int:
    if fill == "mean":
        return int(np.floor(image[..., 0].mean() + 0.5))
    value = int(fill)
    if not 0 <= value <= 255:
        raise ValueError("fill must be an unsigned 8-bit value or 'mean'")
    return value


def _predict(model, batch: np.ndarray) -> np.ndarray:
    preds = np.asarray(model.predict_pixels(batch), dtype=np.float64)
    if preds.shape != (len(batch),):
        raise ValueError(f"model returned shape {preds.shape} for {len(batch)} inputs")
    return preds


def occlusion_sweep(model, image: PreprocessedImage, true_value: float, fill: Union[int, str] = 0,
                    target: str = "", tile_size: int = TILE, stride: int = TILE,
                    order: Optional[Sequence[int]] = None, chunk: int = SWEEP_CHUNK) -> OcclusionMap:
    """Score every occluded copy of ``image`` and return the signed change in AE per tile.

    Tiles are visited row-major unless ``order`` (a permutation of flat tile indices)
    is given; the map is assembled by index so the order never matters. ``model`` is
    anything with ``predict_pixels(uint8 array) -> predictions``.
    """
    if not isinstance(image, PreprocessedImage):
        raise TypeError("image must be a PreprocessedImage")
    pixels = image.pixels
    n = grid_size(tile_size, stride)
    n_tiles = n * n
    order = np.arange(n_tiles) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(n_tiles)):
        raise ValueError("order must be a permutation of all tile indices")
    value = _fill_value(pixels, fill)

    baseline_prediction = float(_predict(model, pixels[None])[0])
    baseline_ae = abs(baseline_prediction - true_value)
    ae = np.empty(n_tiles, dtype=np.float64)
    for start in range(0, n_tiles, chunk):
        flat = order[start:start + chunk]
        batch = np.repeat(pixels[None], len(flat), axis=0)
        for k, t in enumerate(flat):
            r, c = divmod(int(t), n)
            batch[k, r * stride:r * stride + tile_size, c * stride:c * stride + tile_size, :] = value
        ae[flat] = np.abs(_predict(model, batch) - true_value)
    return OcclusionMap(
        tile_dae=(ae - baseline_ae).reshape(n, n),
        baseline_prediction=baseline_prediction,
        baseline_ae=baseline_ae,
        true_value=float(true_value),
        target=target,
        sample_ref=image.sample_ref,
        tile_size=tile_size,
        stride=stride,
        fill=fill,
    )


def expand_map(occ: OcclusionMap) -> np.ndarray:
    """Paint each tile value over its pixel footprint (non-overlapping geometry only)."""
    if occ.stride != occ.tile_size:
        raise ValueError("expansion needs stride == tile_size")
    return np.kron(occ.tile_dae, np.ones((occ.tile_size, occ.tile_size)))


def smooth_dense(matrix: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Normalised Gaussian blur, kernel truncated at 4 sigma, reflective borders."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return gaussian_filter(np.asarray(matrix, dtype=np.float64), sigma=sigma, mode="reflect", truncate=4.0)


def smooth_map(occ: OcclusionMap, sigma: float = 3.0) -> np.ndarray:
    """160x160 rendering of the signed map; for display only."""
    return smooth_dense(expand_map(occ), sigma)


def contour_levels(smoothed: np.ndarray, quantiles: Sequence[float] = CONTOUR_QUANTILES) -> list[float]:
    return [float(np.quantile(smoothed, q)) for q in quantiles]


def _exact_sum(values) -> float:
    return math.fsum(float(v) for v in values)


def band_importance(occ: OcclusionMap) -> tuple[BandImportance, BandImportance]:
    """Per-column (emission, top) and per-row (excitation, side) sums of positive ΔAE.

    Each bar is the correctly rounded sum of its tiles.
    """
    if occ.stride != occ.tile_size:
        raise ValueError("band importance needs non-overlapping tiles")
    pos = np.maximum(occ.tile_dae, 0.0)
    s = occ.tile_size

    def bars(mapping: AxisMapping, sums: list[float]) -> tuple[Bar, ...]:
        out = []
        for k, value in enumerate(sums):
            lo_px, hi_px = k * s, (k + 1) * s
            lo_nm = pixel_to_band(mapping, lo_px)[0]
            hi_nm = pixel_to_band(mapping, hi_px - 1)[1]
            out.append(Bar(lo_px, hi_px, lo_nm, hi_nm, value))
        return tuple(out)

    top = [_exact_sum(pos[:, c]) for c in range(pos.shape[1])]
    side = [_exact_sum(pos[r, :]) for r in range(pos.shape[0])]
    return (BandImportance("emission", bars(occ.emission_mapping, top)),
            BandImportance("excitation", bars(occ.excitation_mapping, side)))


def positive_mass(occ: OcclusionMap) -> float:
    return _exact_sum(np.maximum(occ.tile_dae, 0.0).ravel())


def mass_fraction_in(occ: OcclusionMap, rows: range, cols: range) -> float:
    """Share of positive ΔAE mass inside a tile box (0 when there is no positive mass)."""
    total = positive_mass(occ)
    if total == 0:
        return 0.0
    pos = np.maximum(occ.tile_dae, 0.0)
    r = [i for i in rows if 0 <= i < pos.shape[0]]
    c = [j for j in cols if 0 <= j < pos.shape[1]]
    return _exact_sum(pos[np.ix_(r, c)].ravel()) / total if r and c else 0.0


def average_maps(maps: Sequence[OcclusionMap], label: str = "") -> OcclusionMap:
    if not maps:
        raise ValueError("no maps to average")
    first = maps[0]
    for m in maps[1:]:
        if m.target != first.target:
            raise ValueError(f"cannot average maps of targets {first.target!r} and {m.target!r}")
        if m.geometry() != first.geometry():
            raise ValueError("cannot average maps with different tile geometry or axis mappings")
    stack = np.stack([m.tile_dae for m in maps])
    return replace(
        first,
        tile_dae=stack.mean(axis=0),
        baseline_prediction=float(np.mean([m.baseline_prediction for m in maps])),
        baseline_ae=float(np.mean([m.baseline_ae for m in maps])),
        true_value=float(np.mean([m.true_value for m in maps])),
        sample_ref=label or f"mean of {len(maps)} maps",
        n_averaged=sum(m.n_averaged for m in maps),
    )


def spectral_cut(grid: EEMGrid, excitation_nm: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Emission spectrum at the sampled excitation nearest ``excitation_nm`` (ties go low).

    Returns ``(selected_excitation_nm, emission_nm, intensity)``.
    """
    ex = grid.excitation_nm
    if not ex[0] <= excitation_nm <= ex[-1]:
        raise ValueError(f"{excitation_nm} nm outside the excitation axis {ex[0]:g}-{ex[-1]:g} nm")
    dist = np.abs(ex - excitation_nm)
    i = int(np.flatnonzero(dist == dist.min())[0])
    return float(ex[i]), grid.emission_nm.copy(), grid.intensity[i].copy()


# --- files ---------------------------------------------------------------------


def _ref_text(ref) -> str:
    if ref is None:
        return ""
    if isinstance(ref, tuple):
        return f"{ref[0]}/stage{ref[1]}"
    return str(ref)


def map_manifest(occ: OcclusionMap, extra: Optional[dict] = None) -> dict:
    m = {
        "target": occ.target,
        "sample_ref": _ref_text(occ.sample_ref),
        "n_averaged": occ.n_averaged,
        "baseline_prediction": repr(occ.baseline_prediction),
        "baseline_ae": repr(occ.baseline_ae),
        "true_value": repr(occ.true_value),
        "fill": occ.fill,
        "tile_size": occ.tile_size,
        "stride": occ.stride,
        "rows": f"excitation {occ.excitation_mapping.lambda_min:g}-{occ.excitation_mapping.lambda_max:g} nm "
                f"over {occ.excitation_mapping.n_pixels} px",
        "columns": f"emission {occ.emission_mapping.lambda_min:g}-{occ.emission_mapping.lambda_max:g} nm "
                   f"over {occ.emission_mapping.n_pixels} px",
    }
    m.update(extra or {})
    return m


def write_matrix_csv(matrix: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])
    return path


def write_manifest(manifest: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k}: {v}\n" for k, v in manifest.items()), encoding="utf-8")
    return path


def write_occlusion_map(occ: OcclusionMap, path: str | Path, extra: Optional[dict] = None) -> tuple[Path, Path]:
    path = Path(path)
    write_matrix_csv(occ.tile_dae, path)
    sidecar = path.with_name(path.stem + ".manifest.txt")
    write_manifest(map_manifest(occ, extra), sidecar)
    return path, sidecar


def read_occlusion_map(path: str | Path) -> OcclusionMap:
    path = Path(path)
    with open(path, newline="") as fh:
        dae = np.array([[float(v) for v in row] for row in csv.reader(fh) if row])
    meta = {}
    sidecar = path.with_name(path.stem + ".manifest.txt")
    for line in sidecar.read_text(encoding="utf-8").splitlines():
        k, _, v = line.partition(": ")
        meta[k] = v
    ref = meta.get("sample_ref") or None
    if ref and "/stage" in ref:
        oil, _, stage = ref.rpartition("/stage")
        ref = (oil, int(stage))
    fill = meta.get("fill", "0")
    return OcclusionMap(
        tile_dae=dae,
        baseline_prediction=float(meta["baseline_prediction"]),
        baseline_ae=float(meta["baseline_ae"]),
        true_value=float(meta["true_value"]),
        target=meta.get("target", ""),
        sample_ref=ref,
        tile_size=int(meta.get("tile_size", TILE)),
        stride=int(meta.get("stride", TILE)),
        fill=fill if fill == "mean" else int(fill),
        n_averaged=int(meta.get("n_averaged", 1)),
    )


def write_band_importance(top: BandImportance, side: BandImportance, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "pixel_lo", "pixel_hi", "band_lo_nm", "band_hi_nm", "importance"])
        for bi in (top, side):
            for b in bi.bars:
                w.writerow([bi.axis, b.pixel_lo, b.pixel_hi, repr(b.band_lo_nm), repr(b.band_hi_nm),
                            repr(b.importance)])
    return path
