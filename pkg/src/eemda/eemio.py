"""Reading and writing EEM files, dataset assembly and leave-one-oil-out folds."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Optional

import numpy as np

EXCITATION_NM = tuple(float(v) for v in range(300, 641, 10))
EMISSION_NM = tuple(float(v) for v in range(300, 801, 2))

TARGET_COLUMNS = ("oil_id", "stage_index", "day", "k232", "k264", "k268", "k272")
EEM_FILE_RE = re.compile(r"^(?P<oil>.+)_stage(?P<stage>\d+)\.csv$")


class EEMParseError(ValueError):
    """Raised for malformed EEM files; carries the offending line/column (1-based)."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DatasetError(ValueError):
    """Raised when EEM files and target rows cannot be joined into a Dataset."""


def _check_axis(values: np.ndarray, first: float, last: float, step: float, name: str) -> None:
    if values.ndim != 1 or len(values) < 2:
        raise ValueError(f"{name} axis must be 1-D with at least 2 points")
    if not np.all(np.diff(values) > 0):
        raise ValueError(f"{name} axis is not strictly ascending")
    if values[0] != first or values[-1] != last:
        raise ValueError(f"{name} axis must span {first:g}-{last:g} nm, got {values[0]:g}-{values[-1]:g}")
    if not np.allclose(np.diff(values), step, rtol=0, atol=1e-9):
        raise ValueError(f"{name} axis must have a uniform {step:g} nm step")


@dataclass(frozen=True, eq=False)
class EEMGrid:
    """Excitation-emission matrix: rows are excitation, columns are emission wavelengths."""

    excitation_nm: np.ndarray
    emission_nm: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        ex = np.array(self.excitation_nm, dtype=float)
        em = np.array(self.emission_nm, dtype=float)
        z = np.array(self.intensity, dtype=float)
        _check_axis(ex, EXCITATION_NM[0], EXCITATION_NM[-1], 10.0, "excitation")
        _check_axis(em, EMISSION_NM[0], EMISSION_NM[-1], 2.0, "emission")
        if z.shape != (len(ex), len(em)):
            raise ValueError(f"intensity shape {z.shape} does not match axes ({len(ex)}, {len(em)})")
        if not np.all(np.isfinite(z)):
            raise ValueError("intensity contains non-finite values")
        if np.any(z < 0):
            raise ValueError("intensity contains negative values")
        for arr in (ex, em, z):
            arr.setflags(write=False)
        object.__setattr__(self, "excitation_nm", ex)
        object.__setattr__(self, "emission_nm", em)
        object.__setattr__(self, "intensity", z)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    def value_at(self, excitation_nm: float, emission_nm: float) -> float:
        i = np.flatnonzero(self.excitation_nm == excitation_nm)
        j = np.flatnonzero(self.emission_nm == emission_nm)
        if not len(i) or not len(j):
            raise KeyError(f"no sample at ex={excitation_nm} nm, em={emission_nm} nm")
        return float(self.intensity[i[0], j[0]])

    def with_intensity(self, intensity: np.ndarray) -> "EEMGrid":
        return EEMGrid(self.excitation_nm, self.emission_nm, intensity)

    def equals(self, other: "EEMGrid") -> bool:
        return (
            np.array_equal(self.excitation_nm, other.excitation_nm)
            and np.array_equal(self.emission_nm, other.emission_nm)
            and np.array_equal(self.intensity, other.intensity)
        )


@dataclass(frozen=True)
class QualityIndicators:
    k232: float
    k268: float
    k264: Optional[float] = None
    k272: Optional[float] = None

    def __post_init__(self):
        for name in ("k232", "k268", "k264", "k272"):
            v = getattr(self, name)
            if v is None:
                continue
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def get(self, target: str) -> float:
        value = getattr(self, target)
        if value is None:
            raise KeyError(f"indicator {target} not available")
        return value


@dataclass(frozen=True, eq=False)
class OilSample:
    oil_id: str
    stage_index: int
    day: Optional[float]
    eem: EEMGrid
    targets: QualityIndicators

    @property
    def sample_id(self) -> str:
        return f"{self.oil_id}_stage{self.stage_index}"

    @property
    def ref(self) -> tuple[str, int]:
        return (self.oil_id, self.stage_index)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of samples ordered by (oil_id, stage_index)."""

    samples: tuple[OilSample, ...]
    oil_ids: tuple[str, ...] = field(default=())
    n_stages: int = 0

    def __post_init__(self):
        samples = tuple(sorted(self.samples, key=lambda s: (s.oil_id, s.stage_index)))
        if not samples:
            raise DatasetError("dataset is empty")
        seen = set()
        for s in samples:
            if s.ref in seen:
                raise DatasetError(f"duplicate sample (oil={s.oil_id}, stage={s.stage_index})")
            seen.add(s.ref)
        oil_ids = tuple(sorted({s.oil_id for s in samples}))
        per_oil = {oil: sorted(s.stage_index for s in samples if s.oil_id == oil) for oil in oil_ids}
        n_stages = len(per_oil[oil_ids[0]])
        for oil, stages in per_oil.items():
            if stages != list(range(n_stages)):
                raise DatasetError(
                    f"oil {oil} has stages {stages}; every oil needs stages 0..{n_stages - 1}"
                )
        if self.oil_ids and tuple(self.oil_ids) != oil_ids:
            raise DatasetError("oil_ids do not match the samples")
        if self.n_stages and self.n_stages != n_stages:
            raise DatasetError(f"n_stages={self.n_stages} but samples have {n_stages} stages")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "oil_ids", oil_ids)
        object.__setattr__(self, "n_stages", n_stages)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def by_id(self, sample_id: str) -> OilSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def sample(self, oil_id: str, stage_index: int) -> OilSample:
        for s in self.samples:
            if s.oil_id == oil_id and s.stage_index == stage_index:
                return s
        raise KeyError((oil_id, stage_index))

    def targets(self, target: str) -> np.ndarray:
        return np.array([s.targets.get(target) for s in self.samples], dtype=float)


@dataclass(frozen=True)
class LOOFold:
    held_out_oil: str
    train_sample_ids: tuple[str, ...]
    val_sample_ids: tuple[str, ...]


# --- canonical EEM CSV ------------------------------------------------------


def _number(text: str, line: int, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise EEMParseError(f"non-numeric cell {text!r}", line, column) from None
    if not math.isfinite(value):
        raise EEMParseError(f"non-finite cell {text!r}", line, column)
    return value


def parse_eem_csv(source: IO[str]) -> EEMGrid:
    """Parse a canonical EEM CSV (header ``em_nm,ex_300,...,ex_640``, one row per emission)."""
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or not any(cell.strip() for cell in header):
        raise EEMParseError("no header", 1)
    if header[0].strip() != "em_nm":
        raise EEMParseError(f"malformed header: first cell must be 'em_nm', got {header[0]!r}", 1, 1)
    excitation = []
    for col, cell in enumerate(header[1:], start=2):
        cell = cell.strip()
        if not cell.startswith("ex_"):
            raise EEMParseError(f"malformed header cell {cell!r}", 1, col)
        excitation.append(_number(cell[3:], 1, col))
    if len(excitation) != len(EXCITATION_NM):
        raise EEMParseError(
            f"expected {len(EXCITATION_NM)} excitation columns, got {len(excitation)}", 1
        )
    for col in range(1, len(excitation)):
        if excitation[col] <= excitation[col - 1]:
            raise EEMParseError("excitation axis is not strictly ascending", 1, col + 2)

    emission, rows = [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(excitation) + 1:
            raise EEMParseError(f"expected {len(excitation) + 1} cells, got {len(row)}", line_no)
        em = _number(row[0], line_no, 1)
        if emission and em <= emission[-1]:
            raise EEMParseError("emission axis is not strictly ascending", line_no, 1)
        emission.append(em)
        rows.append([_number(c, line_no, col) for col, c in enumerate(row[1:], start=2)])
    if len(emission) != len(EMISSION_NM):
        raise EEMParseError(f"expected {len(EMISSION_NM)} emission rows, got {len(emission)}")

    intensity = np.array(rows, dtype=float).T
    try:
        return EEMGrid(np.array(excitation), np.array(emission), intensity)
    except ValueError as exc:
        raise EEMParseError(str(exc)) from exc


def read_eem_csv(path: str | Path) -> EEMGrid:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return parse_eem_csv(fh)
        except EEMParseError as exc:
            raise EEMParseError(f"{path.name}: {exc}") from exc


def _fmt(value: float) -> str:
    # repr round-trips float64 exactly
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def format_eem_csv(grid: EEMGrid) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["em_nm"] + [f"ex_{_fmt(ex)}" for ex in grid.excitation_nm])
    for j, em in enumerate(grid.emission_nm):
        writer.writerow([_fmt(em)] + [_fmt(v) for v in grid.intensity[:, j]])
    return out.getvalue()


def write_eem_csv(grid: EEMGrid, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(format_eem_csv(grid), encoding="utf-8")
    return path


def eem_filename(oil_id: str, stage_index: int) -> str:
    return f"{oil_id}_stage{stage_index}.csv"


def adapt_agilent_export(source: IO[str]) -> str:
    """Rewrite a Cary Eclipse style export into canonical CSV text.

    The vendor layout puts column pairs ``(Wavelength (nm), Intensity (a.u.))`` per
    excitation wavelength, with the excitation labels (``<name>_EX_<nm>``) on a title row above.
    Trailing metadata after the first blank row is dropped.
    """
    rows = list(csv.reader(source))
    if len(rows) < 3:
        raise EEMParseError("vendor export too short")
    titles = rows[0]
    excitation = []
    for col in range(0, len(titles), 2):
        label = titles[col].strip()
        if not label:
            continue
        m = re.search(r"(\d+(?:\.\d+)?)\s*$", label)
        if not m:
            raise EEMParseError(f"cannot read excitation wavelength from {label!r}", 1, col + 1)
        excitation.append((col, float(m.group(1))))
    if not excitation:
        raise EEMParseError("no excitation columns in vendor export", 1)
    emission, values = [], []
    for line_no, row in enumerate(rows[2:], start=3):
        if not row or not row[0].strip():
            break
        emission.append(_number(row[0], line_no, 1))
        values.append([_number(row[col + 1], line_no, col + 2) for col, _ in excitation])
    order = np.argsort([ex for _, ex in excitation], kind="stable")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["em_nm"] + [f"ex_{_fmt(excitation[k][1])}" for k in order])
    for em, vals in zip(emission, values):
        writer.writerow([_fmt(em)] + [_fmt(vals[k]) for k in order])
    return out.getvalue()


# --- targets table -----------------------------------------------------------


def _optional(text: str, line: int, column: int) -> Optional[float]:
    text = text.strip()
    return None if text == "" else _number(text, line, column)


def read_targets_csv(path: str | Path) -> dict[tuple[str, int], tuple[Optional[float], QualityIndicators]]:
    """Read the targets table into ``{(oil_id, stage_index): (day, indicators)}``."""
    path = Path(path)
    table: dict[tuple[str, int], tuple[Optional[float], QualityIndicators]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path.name}: no header")
        header = [h.strip() for h in header]
        if tuple(header) != TARGET_COLUMNS:
            raise DatasetError(f"{path.name}: header must be {','.join(TARGET_COLUMNS)}, got {','.join(header)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TARGET_COLUMNS):
                raise DatasetError(f"{path.name}: line {line_no}: expected {len(TARGET_COLUMNS)} cells")
            oil = row[0].strip()
            try:
                stage = int(row[1])
            except ValueError:
                raise DatasetError(f"{path.name}: line {line_no}: bad stage_index {row[1]!r}") from None
            key = (oil, stage)
            if key in table:
                raise DatasetError(f"{path.name}: duplicate target row for oil={oil} stage={stage}")
            day = _optional(row[2], line_no, 3)
            k232 = _number(row[3], line_no, 4)
            k264 = _optional(row[4], line_no, 5)
            k268 = _number(row[5], line_no, 6)
            k272 = _optional(row[6], line_no, 7)
            table[key] = (day, QualityIndicators(k232=k232, k268=k268, k264=k264, k272=k272))
    return table


def write_targets_csv(samples: Iterable[OilSample], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TARGET_COLUMNS)
        for s in samples:
            t = s.targets
            writer.writerow([
                s.oil_id,
                s.stage_index,
                "" if s.day is None else _fmt(s.day),
                _fmt(t.k232),
                "" if t.k264 is None else _fmt(t.k264),
                _fmt(t.k268),
                "" if t.k272 is None else _fmt(t.k272),
            ])
    return path


def write_dataset(dataset: Dataset, eem_directory: str | Path, targets_table: str | Path) -> None:
    eem_directory = Path(eem_directory)
    eem_directory.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        write_eem_csv(s.eem, eem_directory / eem_filename(s.oil_id, s.stage_index))
    write_targets_csv(dataset.samples, targets_table)


def load_dataset(eem_directory: str | Path, targets_table: str | Path) -> Dataset:
    """Join ``<oil>_stage<k>.csv`` files with their target rows.

    Any EEM without a target row, or target row without an EEM, is an error.
    """
    eem_directory = Path(eem_directory)
    if not eem_directory.is_dir():
        raise DatasetError(f"{eem_directory} is not a directory")
    files: dict[tuple[str, int], Path] = {}
    for path in sorted(eem_directory.glob("*.csv")):
        m = EEM_FILE_RE.match(path.name)
        if not m:
            continue
        key = (m.group("oil"), int(m.group("stage")))
        if key in files:
            raise DatasetError(f"duplicate EEM for oil={key[0]} stage={key[1]}: {files[key].name}, {path.name}")
        files[key] = path
    if not files:
        raise DatasetError(f"no EEM files matching <oil_id>_stage<k>.csv in {eem_directory}")
    table = read_targets_csv(targets_table)

    orphan_files = sorted(set(files) - set(table))
    orphan_rows = sorted(set(table) - set(files))
    if orphan_files or orphan_rows:
        parts = []
        if orphan_files:
            parts.append("EEM files without target row: " + ", ".join(files[k].name for k in orphan_files))
        if orphan_rows:
            parts.append("target rows without EEM file: " + ", ".join(f"{o}/stage{s}" for o, s in orphan_rows))
        raise DatasetError("; ".join(parts))

    samples = []
    for key in sorted(files):
        day, indicators = table[key]
        samples.append(OilSample(key[0], key[1], day, read_eem_csv(files[key]), indicators))
    return Dataset(tuple(samples))


def make_loo_folds(dataset: Dataset) -> list[LOOFold]:
    """One fold per oil: the held-out oil's stages validate, all other samples train."""
    if len(dataset.oil_ids) < 2:
        raise DatasetError("leave-one-out needs at least 2 oils")
    folds = []
    for oil in dataset.oil_ids:
        val = tuple(s.sample_id for s in dataset if s.oil_id == oil)
        train = tuple(s.sample_id for s in dataset if s.oil_id != oil)
        folds.append(LOOFold(oil, train, val))
    return folds
