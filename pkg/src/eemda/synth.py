"""Synthetic EEM datasets with known ground truth, and an exact tile-localised oracle predictor."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .eemio import EMISSION_NM, EXCITATION_NM, Dataset, EEMGrid, OilSample, QualityIndicators, write_dataset
from .preprocess import EMISSION_MAPPING, EXCITATION_MAPPING, IMAGE_SIZE, AxisMapping, wavelength_to_pixel

MAX_COUNTS = 1000.0


@dataclass(frozen=True)
class FluorophoreSpec:
    name: str
    center_ex: float
    center_em: float
    sigma_ex: float
    sigma_em: float
    amplitude_by_stage: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "amplitude_by_stage", tuple(float(a) for a in self.amplitude_by_stage))
        if not EXCITATION_NM[0] <= self.center_ex <= EXCITATION_NM[-1]:
            raise ValueError(f"{self.name}: center_ex outside the excitation axis")
        if not EMISSION_NM[0] <= self.center_em <= EMISSION_NM[-1]:
            raise ValueError(f"{self.name}: center_em outside the emission axis")
        if self.sigma_ex <= 0 or self.sigma_em <= 0:
            raise ValueError(f"{self.name}: sigmas must be positive")
        if any(a < 0 for a in self.amplitude_by_stage):
            raise ValueError(f"{self.name}: amplitudes must be >= 0")


@dataclass(frozen=True)
class TargetRule:
    """``target = intercept + slope * amplitude`` of one fluorophore (pre-noise, jitter included)."""

    fluorophore: str
    intercept: float
    slope: float

    def __post_init__(self):
        if not (np.isfinite(self.intercept) and np.isfinite(self.slope)) or self.slope == 0:
            raise ValueError("target rule needs finite coefficients and a non-zero slope")


@dataclass(frozen=True)
class SynthSpec:
    n_oils: int
    n_stages: int
    fluorophores: tuple[FluorophoreSpec, ...]
    target_rules: dict = field(default_factory=dict)
    amplitude_jitter: float = 0.0
    sample_jitter: float = 0.0
    rayleigh_amplitude: float = 0.0
    rayleigh_width_nm: float = 10.0
    rayleigh_jitter: float = 0.0
    noise_sd: float = 0.0
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fluorophores", tuple(self.fluorophores))
        if self.n_oils < 1 or self.n_stages < 1:
            raise ValueError("n_oils and n_stages must be positive")
        names = [f.name for f in self.fluorophores]
        if len(set(names)) != len(names):
            raise ValueError("fluorophore names must be unique")
        for f in self.fluorophores:
            if len(f.amplitude_by_stage) != self.n_stages:
                raise ValueError(f"{f.name}: need {self.n_stages} stage amplitudes")
        for key in ("k232", "k268"):
            if key not in self.target_rules:
                raise ValueError(f"missing target rule for {key}")
        for key, rule in self.target_rules.items():
            if key not in ("k232", "k264", "k268", "k272"):
                raise ValueError(f"unknown indicator {key}")
            if rule.fluorophore not in names:
                raise ValueError(f"rule {key} refers to unknown fluorophore {rule.fluorophore}")
        for name in ("amplitude_jitter", "sample_jitter", "rayleigh_jitter"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.noise_sd < 0 or self.rayleigh_amplitude < 0 or self.rayleigh_width_nm <= 0:
            raise ValueError("noise_sd and rayleigh_amplitude must be >= 0, rayleigh width > 0")

    def fluorophore(self, name: str) -> FluorophoreSpec:
        return next(f for f in self.fluorophores if f.name == name)


def oil_labels(n: int) -> list[str]:
    if n <= 26:
        return list(string.ascii_uppercase[:n])
    return [f"O{k:03d}" for k in range(n)]


def gaussian_2d(ex: np.ndarray, em: np.ndarray, f: FluorophoreSpec) -> np.ndarray:
    gx = np.exp(-0.5 * ((ex - f.center_ex) / f.sigma_ex) ** 2)
    gm = np.exp(-0.5 * ((em - f.center_em) / f.sigma_em) ** 2)
    return gx[:, None] * gm[None, :]


def oil_jitter(spec: SynthSpec) -> np.ndarray:
    """Per-(oil, fluorophore) amplitude factors, uniform in ``1 +/- amplitude_jitter``."""
    rng = np.random.default_rng([spec.seed, 0])
    return 1.0 + spec.amplitude_jitter * rng.uniform(-1.0, 1.0, size=(spec.n_oils, len(spec.fluorophores)))


def generate_dataset(spec: SynthSpec) -> Dataset:
    ex = np.array(EXCITATION_NM)
    em = np.array(EMISSION_NM)
    shapes = [gaussian_2d(ex, em, f) for f in spec.fluorophores]
    rayleigh = spec.rayleigh_amplitude * np.exp(-0.5 * ((em[None, :] - ex[:, None]) / spec.rayleigh_width_nm) ** 2)
    names = [f.name for f in spec.fluorophores]
    jitter = oil_jitter(spec)
    samples = []
    for o, oil in enumerate(oil_labels(spec.n_oils)):
        for stage in range(spec.n_stages):
            rng = np.random.default_rng([spec.seed, 1, o, stage])
            own = 1.0 + spec.sample_jitter * rng.uniform(-1.0, 1.0, size=len(spec.fluorophores))
            amps = [f.amplitude_by_stage[stage] * jitter[o, k] * own[k] for k, f in enumerate(spec.fluorophores)]
            scatter = 1.0 + spec.rayleigh_jitter * rng.uniform(-1.0, 1.0)
            z = np.full((len(ex), len(em)), float(spec.background)) + scatter * rayleigh
            for a, shape in zip(amps, shapes):
                z = z + a * shape
            if spec.noise_sd > 0:
                z = z + rng.normal(0.0, spec.noise_sd, size=z.shape)
            z = np.clip(z, 0.0, MAX_COUNTS)
            values = {
                key: rule.intercept + rule.slope * amps[names.index(rule.fluorophore)]
                for key, rule in spec.target_rules.items()
            }
            day = stage * 53.0 / max(spec.n_stages - 1, 1)
            samples.append(OilSample(oil, stage, day, EEMGrid(ex, em, z), QualityIndicators(**values)))
    return Dataset(tuple(samples))


def write_synthetic(spec: SynthSpec, root: str | Path) -> tuple[Path, Path]:
    """Write ``root/eems/*.csv`` and ``root/targets.csv``; returns both paths."""
    root = Path(root)
    eem_dir, targets = root / "eems", root / "targets.csv"
    write_dataset(generate_dataset(spec), eem_dir, targets)
    return eem_dir, targets


# --- presets -----------------------------------------------------------------


def standard_spec(seed: int = 0, n_oils: int = 24, n_stages: int = 10, noise_sd: float = 5.0) -> SynthSpec:
    """Chlorophyll-like band (stage-independent) plus a growing oxidation-product band.

    Both indicators are affine in the oxidation-product amplitude, so the informative
    region is ex 300-400 nm / em 400-500 nm.
    """
    ramp = np.linspace(40.0, 400.0, n_stages)
    chlorophyll = FluorophoreSpec("chlorophyll", 420.0, 680.0, 90.0, 18.0, (450.0,) * n_stages)
    oxidation = FluorophoreSpec("oxidation_product", 340.0, 450.0, 25.0, 30.0, tuple(ramp))
    return SynthSpec(
        n_oils=n_oils,
        n_stages=n_stages,
        fluorophores=(chlorophyll, oxidation),
        target_rules={
            "k232": TargetRule("oxidation_product", 1.5, 0.004),
            "k268": TargetRule("oxidation_product", 0.1, 0.0005),
        },
        amplitude_jitter=0.25,
        sample_jitter=0.2,
        rayleigh_amplitude=300.0,
        rayleigh_width_nm=10.0,
        rayleigh_jitter=0.5,
        noise_sd=noise_sd,
        seed=seed,
    )


def tiny_spec(seed: int = 0) -> SynthSpec:
    return standard_spec(seed=seed, n_oils=3, n_stages=3)


PRESETS = {"paper-like": standard_spec, "tiny": tiny_spec}


def informative_tiles(f: FluorophoreSpec, n_sigma: float = 1.0, tile: int = 5,
                      excitation: AxisMapping = EXCITATION_MAPPING,
                      emission: AxisMapping = EMISSION_MAPPING) -> tuple[range, range]:
    """Tile rows/columns covering ``center +/- n_sigma * sigma`` of a fluorophore."""
    def span(mapping: AxisMapping, center: float, sigma: float) -> range:
        lo = max(mapping.lambda_min, center - n_sigma * sigma)
        hi = min(mapping.lambda_max, center + n_sigma * sigma)
        return range(wavelength_to_pixel(mapping, lo) // tile, wavelength_to_pixel(mapping, hi) // tile + 1)

    return span(excitation, f.center_ex, f.sigma_ex), span(emission, f.center_em, f.sigma_em)


# --- oracle predictor ----------------------------------------------------------


class TilePredictor:
    """Mean of channel 0 inside one tile, scaled to [0, 1]; depends on nothing else."""

    def __init__(self, tile: tuple[int, int], tile_size: int = 5):
        n = IMAGE_SIZE // tile_size
        r, c = tile
        if not (0 <= r < n and 0 <= c < n):
            raise IndexError(f"tile {tile} outside the {n}x{n} grid")
        self.tile = (r, c)
        self.tile_size = tile_size

    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        x = np.asarray(pixels)
        if x.ndim != 4 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3) input, got {x.shape}")
        r, c = self.tile
        s = self.tile_size
        block = x[:, r * s:(r + 1) * s, c * s:(c + 1) * s, 0].astype(np.float64)
        return block.mean(axis=(1, 2)) / 255.0


def oracle_tile_predictor(tile: tuple[int, int], tile_size: int = 5) -> TilePredictor:
    return TilePredictor(tile, tile_size)
