"""AE/MAE statistics and figure-ready data files for the results surfaces."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import iea

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictionRow:
    oil_id: str
    stage_index: int
    target: str
    true_value: float
    prediction: float
    ae: float = field(default=float("nan"))
    fold_oil: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "ae", abs(float(self.prediction) - float(self.true_value)))


@dataclass
class EvalReport:
    target: str
    rows: list[PredictionRow]
    per_oil_mae: dict[str, float]
    global_mae: float
    metadata: dict = field(default_factory=dict)
    failed_folds: dict[str, str] = field(default_factory=dict)
    incomplete: bool = False

    @classmethod
    def empty(cls, target: str, metadata: Optional[dict] = None) -> "EvalReport":
        return cls(target, [], {}, float("nan"), dict(metadata or {}))

    def leakage_violations(self) -> list[PredictionRow]:
        """Rows predicted by a model whose held-out oil is not the sample's oil."""
        return [r for r in self.rows if r.fold_oil != r.oil_id]

    def rows_for(self, oil_id: str) -> list[PredictionRow]:
        return [r for r in self.rows if r.oil_id == oil_id]


def compute_metrics(rows: Sequence[PredictionRow], metadata: Optional[dict] = None,
                    target: Optional[str] = None) -> EvalReport:
    if not rows:
        raise ValueError("no prediction rows")
    targets = {r.target for r in rows}
    if len(targets) != 1:
        raise ValueError(f"mixed targets in one report: {sorted(targets)}")
    (row_target,) = targets
    if target is not None and target != row_target:
        raise ValueError(f"rows are for {row_target}, not {target}")
    rows = sorted(rows, key=lambda r: (r.oil_id, r.stage_index))
    per_oil: dict[str, list[float]] = {}
    for r in rows:
        per_oil.setdefault(r.oil_id, []).append(r.ae)
    per_oil_mae = {oil: float(np.mean(v)) for oil, v in per_oil.items()}
    global_mae = float(np.mean([r.ae for r in rows]))
    return EvalReport(row_target, list(rows), per_oil_mae, global_mae, dict(metadata or {}))


def write_report_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["oil_id", "stage_index", "target", "true_value", "prediction", "ae", "fold_oil"])
        for r in report.rows:
            w.writerow([r.oil_id, r.stage_index, r.target, repr(r.true_value), repr(r.prediction),
                        repr(r.ae), r.fold_oil or ""])
    return path


def read_report_csv(path: str | Path, metadata: Optional[dict] = None) -> EvalReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(PredictionRow(rec["oil_id"], int(rec["stage_index"]), rec["target"],
                                      float(rec["true_value"]), float(rec["prediction"]),
                                      fold_oil=rec["fold_oil"] or None))
    return compute_metrics(rows, metadata=metadata)


# --- figures -------------------------------------------------------------------

# Default excitation cuts for the overlay figures, per target (nm).
DEFAULT_CUTS = {"k232": (416.0,), "k268": (344.0, 392.0)}
OVERLAY_FIGURE = {"k232": 5, "k268": 6}
VIOLIN_BANDWIDTH = "scott"


@dataclass(frozen=True)
class FigureOptions:
    """Display-only parameters; none of them changes a metric."""

    regulatory_limit: Optional[float] = None
    sigma3_line: Optional[float] = None
    smoothing_sigma: float = 3.0
    cuts_nm: Optional[tuple[float, ...]] = None
    render: bool = False

    def cuts_for(self, target: str) -> tuple[float, ...]:
        if self.cuts_nm is not None:
            return tuple(self.cuts_nm)
        return DEFAULT_CUTS.get(target, (416.0,))


@dataclass
class FigureSet:
    files: list[Path] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _write_manifest(path: Path, items: dict) -> Path:
    path.write_text("".join(f"{k}: {_fmt(v)}\n" for k, v in items.items()), encoding="utf-8")
    return path


def _base_manifest(report: EvalReport, figure: str) -> dict:
    m = {"figure": figure, "target": report.target}
    for k in sorted(report.metadata):
        m[f"run.{k}"] = report.metadata[k]
    m["incomplete"] = report.incomplete
    return m


def _emit(out: Path, stem: str, header, rows, manifest: dict, fs: FigureSet) -> None:
    fs.files.append(_write_rows(out / f"{stem}.csv", header, rows))
    fs.files.append(_write_manifest(out / f"{stem}.manifest.txt", manifest))


def emit_figures(report: EvalReport, out_root: str | Path, maps=None, eems: Optional[dict] = None,
                 options: Optional[FigureOptions] = None) -> FigureSet:
    """Write figure data under ``out_root/figures/<target>/``.

    ``maps`` is a sequence of OcclusionMaps for the report's target (averaged for the
    heatmap figure); ``eems`` maps sample ids or ``(oil, stage)`` refs to EEMGrids and
    enables the overlay figure. Missing inputs skip the dependent figures.
    """
    if not report.rows:
        raise ValueError("report has no rows")
    opts = options or FigureOptions()
    out = Path(out_root) / "figures" / report.target
    out.mkdir(parents=True, exist_ok=True)
    fs = FigureSet()

    # fig2: per-oil true/predicted curves with the AE band
    m = _base_manifest(report, "per-oil true vs predicted curves")
    for oil in sorted(report.per_oil_mae):
        m[f"mae.{oil}"] = report.per_oil_mae[oil]
    m["global_mae"] = report.global_mae
    _emit(out, "fig2_per_oil_curves", ["oil_id", "stage_index", "true_value", "prediction", "ae"],
          [(r.oil_id, r.stage_index, r.true_value, r.prediction, r.ae) for r in report.rows], m, fs)

    # fig3a: predicted vs actual scatter
    m = _base_manifest(report, "predicted vs actual scatter")
    m["n_points"] = len(report.rows)
    m["regulatory_limit"] = opts.regulatory_limit
    _emit(out, "fig3a_scatter", ["oil_id", "stage_index", "true_value", "prediction"],
          [(r.oil_id, r.stage_index, r.true_value, r.prediction) for r in report.rows], m, fs)

    # fig3b: raw AE samples per oil for violins
    m = _base_manifest(report, "per-oil AE distributions")
    m["sigma3_line"] = opts.sigma3_line
    m["violin_bandwidth"] = VIOLIN_BANDWIDTH
    _emit(out, "fig3b_violin_ae", ["oil_id", "stage_index", "ae"],
          [(r.oil_id, r.stage_index, r.ae) for r in report.rows], m, fs)

    maps = [mp for mp in (maps or []) if mp.target in ("", report.target)]
    base = _base_manifest(report, "")
    averaged = None
    if not maps:
        fs.skipped["fig4"] = "no occlusion maps given"
        logger.info("fig4 skipped: no occlusion maps given")
    else:
        averaged = emit_heatmap(report.target, maps, out, opts, base, fs)
    if not maps or not eems:
        reason = "no occlusion maps given" if not maps else "no EEMs given"
        fs.skipped["overlay"] = reason
        logger.info("overlay figure skipped: %s", reason)
    else:
        emit_overlays(report.target, maps, eems, out, opts, base, fs)

    if opts.render:
        fs.files.extend(_render(report, out, averaged, opts))
    return fs


def emit_heatmap(target: str, maps, out: Path, opts: FigureOptions, base: Optional[dict] = None,
                 fs: Optional[FigureSet] = None):
    """Averaged map (smoothed heatmap, raw tiles, band bars); returns the averaged map."""
    fs = fs if fs is not None else FigureSet()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    averaged = iea.average_maps(list(maps), label=f"{target} average of {len(maps)}")
    smoothed = iea.smooth_map(averaged, opts.smoothing_sigma)
    top, side = iea.band_importance(averaged)
    m = dict(base or {"target": target})
    m["figure"] = "averaged importance heatmap"
    m.update({k: v for k, v in iea.map_manifest(averaged).items() if k != "target"})
    m["averaged_refs"] = ",".join(iea._ref_text(mp.sample_ref) for mp in maps)
    m["smoothing_sigma"] = opts.smoothing_sigma
    m["contour_quantiles"] = ",".join(repr(q) for q in iea.CONTOUR_QUANTILES)
    m["contour_levels"] = ",".join(repr(v) for v in iea.contour_levels(smoothed))
    fs.files.append(iea.write_matrix_csv(smoothed, out / "fig4_heatmap.csv"))
    fs.files.append(iea.write_matrix_csv(averaged.tile_dae, out / "fig4_tiles.csv"))
    fs.files.append(iea.write_band_importance(top, side, out / "fig4_bars.csv"))
    fs.files.append(_write_manifest(out / "fig4_heatmap.manifest.txt", m))
    return averaged


def emit_overlays(target: str, maps, eems: dict, out: Path, opts: FigureOptions, base: Optional[dict] = None,
                  fs: Optional[FigureSet] = None) -> FigureSet:
    """Per-sample heatmap for drawing over its EEM, plus emission spectra at the configured cuts."""
    fs = fs if fs is not None else FigureSet()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = OVERLAY_FIGURE.get(target, 5)
    drawn = 0
    for mp in maps:
        grid = _lookup_eem(eems, mp.sample_ref)
        if grid is None:
            continue
        name = iea._ref_text(mp.sample_ref).replace("/", "_")
        smoothed = iea.smooth_map(mp, opts.smoothing_sigma)
        stem = f"fig{n}_overlay_{name}"
        fs.files.append(iea.write_matrix_csv(smoothed, out / f"{stem}_heatmap.csv"))
        m = dict(base or {"target": target})
        m["figure"] = "importance heatmap over EEM with spectral cuts"
        m.update({k: v for k, v in iea.map_manifest(mp).items() if k != "target"})
        m["smoothing_sigma"] = opts.smoothing_sigma
        m["contour_quantiles"] = ",".join(repr(q) for q in iea.CONTOUR_QUANTILES)
        m["contour_levels"] = ",".join(repr(v) for v in iea.contour_levels(smoothed))
        cut_rows = []
        for want in opts.cuts_for(target):
            got, em, values = iea.spectral_cut(grid, want)
            m[f"cut.{want:g}"] = f"{got:g}"
            cut_rows.extend((want, got, float(e), float(v)) for e, v in zip(em, values))
        _emit(out, f"{stem}_cuts", ["requested_ex_nm", "excitation_nm", "emission_nm", "intensity"],
              cut_rows, m, fs)
        drawn += 1
    if not drawn:
        fs.skipped["overlay"] = "no EEM matches a map's sample"
        logger.info("overlay figure skipped: no EEM matches a map's sample")
    return fs


def _lookup_eem(eems: dict, ref):
    if ref in eems:
        return eems[ref]
    if isinstance(ref, tuple):
        return eems.get(f"{ref[0]}_stage{ref[1]}")
    return None


def _render(report: EvalReport, out: Path, averaged, opts: FigureOptions) -> list[Path]:
    """Optional PNGs; data files stay the reference output."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib unavailable, PNG rendering skipped")
        return []
    written = []
    oils = sorted(report.per_oil_mae)

    fig, ax = plt.subplots(figsize=(6, 4))
    for oil in oils:
        rows = report.rows_for(oil)
        st = [r.stage_index for r in rows]
        ax.plot(st, [r.true_value for r in rows], color="0.5", lw=0.8)
        ax.plot(st, [r.prediction for r in rows], lw=0.8)
    ax.set_xlabel("oxidation stage")
    ax.set_ylabel(report.target)
    written.append(out / "fig2_per_oil_curves.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    t = [r.true_value for r in report.rows]
    p = [r.prediction for r in report.rows]
    if opts.regulatory_limit is not None:
        ax.axvspan(opts.regulatory_limit, max(t + p), color="0.9")
    ax.scatter(t, p, s=6)
    lo, hi = min(t + p), max(t + p)
    ax.plot([lo, hi], [lo, hi], color="k", lw=0.5)
    ax.set_xlabel("actual")
    ax.set_ylabel("predicted")
    written.append(out / "fig3a_scatter.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3))
    data = [[r.ae for r in report.rows_for(oil)] for oil in oils]
    ax.violinplot(data, showmedians=True, bw_method=VIOLIN_BANDWIDTH)
    if opts.sigma3_line is not None:
        ax.axhline(opts.sigma3_line, color="r", lw=0.8)
    ax.set_xticks(range(1, len(oils) + 1), oils)
    ax.set_ylabel("AE")
    written.append(out / "fig3b_violin_ae.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    if averaged is not None:
        smoothed = iea.smooth_map(averaged, opts.smoothing_sigma)
        fig, ax = plt.subplots(figsize=(5, 5))
        ex, em = averaged.excitation_mapping, averaged.emission_mapping
        ax.imshow(smoothed, origin="lower", cmap="magma",
                  extent=(em.lambda_min, em.lambda_max, ex.lambda_min, ex.lambda_max), aspect="auto")
        ax.contour(smoothed, levels=sorted(set(iea.contour_levels(smoothed))), colors="w", linewidths=0.5,
                   extent=(em.lambda_min, em.lambda_max, ex.lambda_min, ex.lambda_max))
        ax.set_xlabel("emission (nm)")
        ax.set_ylabel("excitation (nm)")
        written.append(out / "fig4_heatmap.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written
