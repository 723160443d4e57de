"""Command-line entry point: ingest, synth, train, predict, iea, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

from . import config as cfgmod  # noqa: E402

logger = logging.getLogger("eemda")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_NAME = "config.yaml"


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _resolve_config(args) -> dict:
    file_values = cfgmod.load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = dict(cfgmod.parse_override(s) for s in (getattr(args, "set", None) or []))
    for flag, key in (("seed", "seed"), ("output", "output"), ("backbone", "backbone"), ("target", "target"),
                      ("eems", "data.eem_dir"), ("targets", "data.targets"),
                      ("rayleigh_mode", "preprocess.rayleigh_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfgmod.resolve(file_values, overrides)


def _load_dataset(cfg: dict):
    from .eemio import load_dataset

    if not cfg["data.eem_dir"] or not cfg["data.targets"]:
        raise UsageError("data paths missing: pass --eems and --targets or set data.eem_dir / data.targets")
    return load_dataset(cfg["data.eem_dir"], cfg["data.targets"])


def _figure_options(cfg: dict):
    from .evalreport import FigureOptions

    return FigureOptions(regulatory_limit=cfg["figures.regulatory_limit"], sigma3_line=cfg["figures.sigma3_line"],
                         smoothing_sigma=cfg["iea.sigma"], render=cfg["figures.render"])


def _run_config_for(path: Path) -> Optional[dict]:
    """The echoed config of the run a checkpoint or target directory belongs to."""
    for parent in [path, *path.parents][:3]:
        candidate = parent / CONFIG_NAME
        if candidate.is_file():
            return cfgmod.resolve(cfgmod.load_config_file(candidate))
    return None


def _parse_ref(text: str):
    oil, sep, stage = text.rpartition("_stage")
    if not sep or not stage.isdigit():
        raise UsageError(f"sample {text!r} is not <oil>_stage<k>")
    return oil, int(stage)


# --- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    print(f"{len(ds.oil_ids)} oils x {ds.n_stages} stages ({len(ds)} samples)")
    print(f"oils: {' '.join(ds.oil_ids)}")
    lo = min(float(s.eem.intensity.min()) for s in ds)
    hi = max(float(s.eem.intensity.max()) for s in ds)
    print(f"intensity: {lo:g} .. {hi:g}")
    for t in ("k232", "k264", "k268", "k272"):
        values = [getattr(s.targets, t) for s in ds]
        if all(v is not None for v in values):
            print(f"{t}: {min(values):g} .. {max(values):g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import PRESETS, write_synthetic

    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out else Path(args.output or "runs") / "synthetic"
    spec = PRESETS[args.preset](seed=seed)
    eem_dir, targets = write_synthetic(spec, out)
    print(f"wrote {spec.n_oils} oils x {spec.n_stages} stages to {eem_dir} and {targets}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .evalreport import emit_figures, write_report_csv
    from .iea import write_manifest
    from .preprocess import preprocess_dataset
    from .trainer import run_loo

    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    oils = None if args.fold == "all" else [args.fold]
    if oils and oils[0] not in ds.oil_ids:
        raise UsageError(f"unknown oil {args.fold!r}; dataset has {' '.join(ds.oil_ids)}")
    digest = cfgmod.digest(cfg)
    run_dir = Path(cfg["output"]) / (args.run_id or cfgmod.run_id(cfg))
    cfgmod.write_resolved(cfg, run_dir / CONFIG_NAME)
    target_dir = run_dir / cfg["target"]
    images = preprocess_dataset(ds, cfg["preprocess.rayleigh_mode"], cfg["preprocess.rayleigh_half_width"])
    checkpoints, report = run_loo(
        ds, cfg["target"], cfgmod.plan_from(cfg), seed_base=cfg["seed"], backbone=cfgmod.backbone_spec(cfg),
        out_root=target_dir, images=images if args.jobs <= 1 else None, oils=oils, jobs=args.jobs,
        config_digest=digest, rayleigh_mode=cfg["preprocess.rayleigh_mode"],
        rayleigh_half_width=cfg["preprocess.rayleigh_half_width"], keep_models=False)
    if report.rows:
        write_report_csv(report, target_dir / "report.csv")
        meta = {"target": report.target, "config_digest": digest, "global_mae": repr(report.global_mae),
                "n_rows": len(report.rows), "incomplete": report.incomplete}
        meta.update({f"run.{k}": v for k, v in sorted(report.metadata.items())})
        meta.update({f"failed.{k}": v for k, v in sorted(report.failed_folds.items())})
        write_manifest(meta, target_dir / "report.manifest.txt")
        if oils is None:
            emit_figures(report, run_dir, options=_figure_options(cfg))
        print(f"{len(checkpoints)} checkpoint(s) under {target_dir}; MAE {report.global_mae:.6g}")
    for oil, err in sorted(report.failed_folds.items()):
        print(f"fold {oil} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if report.failed_folds or not report.rows else EXIT_OK


def _checkpoint_and_config(path: str, args):
    """Load a checkpoint; preprocessing follows its manifest, data paths may come from its run."""
    from .trainer import load_checkpoint

    ckpt_dir = Path(path)
    ckpt = load_checkpoint(ckpt_dir, getattr(args, "weights", None))
    cfg = _resolve_config(args)
    _inherit(cfg, _run_config_for(ckpt_dir.parent))
    cfg["preprocess.rayleigh_mode"] = ckpt.manifest.get("rayleigh_mode", cfg["preprocess.rayleigh_mode"])
    cfg["preprocess.rayleigh_half_width"] = float(ckpt.manifest.get("rayleigh_half_width",
                                                                    cfg["preprocess.rayleigh_half_width"]))
    return ckpt, cfg


def _inherit(cfg: dict, run_cfg: Optional[dict]) -> None:
    if run_cfg is None:
        return
    for key in ("preprocess.rayleigh_mode", "preprocess.rayleigh_half_width"):
        cfg[key] = run_cfg[key]
    for key in ("data.eem_dir", "data.targets"):
        if not cfg[key]:
            cfg[key] = run_cfg[key]


def _guard(ckpt, oil: str, allow: bool) -> None:
    if oil != ckpt.fold_oil and not allow:
        raise UsageError(f"checkpoint was trained with oil {oil} in its training set (held-out oil "
                         f"{ckpt.fold_oil}); pass --allow-train-oil to override")


def cmd_predict(args) -> int:
    from .preprocess import preprocess

    ckpt, cfg = _checkpoint_and_config(args.checkpoint, args)
    ds = _load_dataset(cfg)
    oil = args.oil or ckpt.fold_oil
    _guard(ckpt, oil, args.allow_train_oil)
    stages = [args.stage] if args.stage is not None else list(range(ds.n_stages))
    samples = [ds.sample(oil, k) for k in stages]
    import numpy as np

    x = np.stack([preprocess(s.eem, s.ref, cfg["preprocess.rayleigh_mode"],
                             cfg["preprocess.rayleigh_half_width"]).pixels for s in samples])
    preds = ckpt.model.predict_pixels(x)
    target = ckpt.manifest["target"]
    print(f"oil_id,stage_index,target,true_value,prediction")
    for s, p in zip(samples, preds):
        print(f"{s.oil_id},{s.stage_index},{target},{s.targets.get(target)!r},{float(p)!r}")
    return EXIT_OK


def _sweep(ckpt, ds, oil: str, stage: int, cfg: dict):
    from .iea import occlusion_sweep
    from .preprocess import preprocess

    s = ds.sample(oil, stage)
    target = ckpt.manifest["target"]
    image = preprocess(s.eem, s.ref, cfg["preprocess.rayleigh_mode"], cfg["preprocess.rayleigh_half_width"])
    return s, occlusion_sweep(ckpt.model, image, s.targets.get(target), fill=cfgmod.iea_fill(cfg), target=target,
                              tile_size=cfg["iea.tile_size"], stride=cfg["iea.stride"])


def cmd_iea(args) -> int:
    from .evalreport import emit_overlays
    from .iea import band_importance, write_band_importance, write_occlusion_map

    if args.average_last_stage:
        return _iea_average(args)
    if not args.checkpoint:
        raise UsageError("iea needs --checkpoint (or --average-last-stage --run DIR)")
    ckpt, cfg = _checkpoint_and_config(args.checkpoint, args)
    ds = _load_dataset(cfg)
    if args.sample:
        oil, stage = _parse_ref(args.sample)
    else:
        oil = args.oil or ckpt.fold_oil
        stage = args.stage if args.stage is not None else ds.n_stages - 1
    _guard(ckpt, oil, args.allow_train_oil)
    s, occ = _sweep(ckpt, ds, oil, stage, cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "iea"
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config_digest": ckpt.manifest.get("config_digest", ""), "checkpoint_digest": ckpt.weight_digest,
             "fold_oil": ckpt.fold_oil}
    write_occlusion_map(occ, out / f"{s.sample_id}_map.csv", extra)
    files = [out / f"{s.sample_id}_map.csv"]
    if occ.stride == occ.tile_size:
        top, side = band_importance(occ)
        files.append(write_band_importance(top, side, out / f"{s.sample_id}_bands.csv"))
        emit_overlays(occ.target, [occ], {s.ref: s.eem}, out, _figure_options(cfg), dict(extra, target=occ.target))
    print(f"baseline prediction {occ.baseline_prediction:.6g} (true {occ.true_value:.6g}); wrote {out}")
    return EXIT_OK


def _iea_average(args) -> int:
    from .evalreport import emit_heatmap
    from .iea import write_occlusion_map

    if not args.run:
        raise UsageError("--average-last-stage needs --run <run>/<target>")
    target_dir = Path(args.run)
    ckpt_dirs = sorted(p.parent for p in target_dir.glob("*/manifest.txt"))
    if not ckpt_dirs:
        raise UsageError(f"no checkpoints under {target_dir}")
    cfg = _resolve_config(args)
    _inherit(cfg, _run_config_for(target_dir))
    ds = _load_dataset(cfg)
    maps = []
    out = Path(args.out) if args.out else target_dir / "iea"
    out.mkdir(parents=True, exist_ok=True)
    for d in ckpt_dirs:
        ckpt, cfg = _checkpoint_and_config(str(d), args)
        s, occ = _sweep(ckpt, ds, ckpt.fold_oil, ds.n_stages - 1, cfg)
        write_occlusion_map(occ, out / f"{s.sample_id}_map.csv", {"config_digest": ckpt.manifest.get("config_digest", ""),
                                                                  "fold_oil": ckpt.fold_oil})
        maps.append(occ)
    opts = _figure_options(cfg)
    emit_heatmap(maps[0].target, maps, out, opts, {"target": maps[0].target, "config_digest": cfgmod.digest(cfg)})
    print(f"averaged {len(maps)} last-stage maps into {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evalreport import emit_figures, read_report_csv
    from .iea import read_occlusion_map

    target_dir = Path(args.run)
    report_csv = target_dir / "report.csv"
    if not report_csv.is_file():
        raise UsageError(f"{report_csv} not found; is {target_dir} a <run>/<target> directory?")
    run_cfg = _run_config_for(target_dir)
    cfg = _resolve_config(args)
    if run_cfg is not None:
        for key in ("data.eem_dir", "data.targets"):
            if not cfg[key]:
                cfg[key] = run_cfg[key]
    report = read_report_csv(report_csv, metadata={"config_digest": run_cfg and cfgmod.digest(run_cfg) or ""})
    maps_dir = target_dir / "iea"
    maps = [read_occlusion_map(p) for p in sorted(maps_dir.glob("*_map.csv"))] if maps_dir.is_dir() else []
    eems = None
    if maps and cfg["data.eem_dir"] and cfg["data.targets"]:
        ds = _load_dataset(cfg)
        eems = {s.ref: s.eem for s in ds}
    fs = emit_figures(report, target_dir.parent, maps=maps, eems=eems, options=_figure_options(cfg))
    for name, why in fs.skipped.items():
        print(f"{name} skipped: {why}")
    print(f"wrote {len(fs.files)} figure files under {target_dir.parent / 'figures' / report.target}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="flat dotted-key YAML config file")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--output", default=d, help="output root (default runs)")
    parser.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="parallel fold workers")
    parser.add_argument("--backbone", choices=("pretrained", "test"), default=d)
    parser.add_argument("--set", action="append", default=d, metavar="KEY=VALUE",
                        help="override a config key, repeatable")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eems", help="directory of <oil>_stage<k>.csv files")
    parser.add_argument("--targets", help="targets table CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eemda", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate a dataset and print its census")
    _data_flags(p)

    p = add("synth", cmd_synth, "synthetic datasets")
    synth_sub = p.add_subparsers(dest="synth_command", required=True)
    g = synth_sub.add_parser("generate", help="write a synthetic dataset")
    _global_flags(g, suppress=True)
    from .synth import PRESETS

    g.add_argument("--preset", choices=sorted(PRESETS), default="paper-like")
    g.add_argument("--out", help="output directory (default <output>/synthetic)")
    g.set_defaults(func=cmd_synth)

    p = add("train", cmd_train, "two-phase training for one fold or all LOO folds")
    _data_flags(p)
    p.add_argument("--target", required=True, choices=("k232", "k268"))
    p.add_argument("--fold", default="all", help="held-out oil id, or all")
    p.add_argument("--rayleigh-mode", dest="rayleigh_mode", choices=("keep", "zero", "interpolate"))
    p.add_argument("--run-id", help="run directory name (default: from the config digest)")

    for name, func, text in (("predict", cmd_predict, "predict samples with a checkpoint"),
                             ("iea", cmd_iea, "occlusion sweep and band importance")):
        p = add(name, func, text)
        _data_flags(p)
        p.add_argument("--checkpoint", required=name == "predict", help="fold checkpoint directory")
        p.add_argument("--oil", help="sample oil (default: the checkpoint's held-out oil)")
        p.add_argument("--stage", type=int, help="stage index (default: all for predict, last for iea)")
        p.add_argument("--allow-train-oil", action="store_true",
                       help="allow samples of oils the checkpoint was trained on")
        p.add_argument("--weights", help="pretrained backbone weights file")
        if name == "iea":
            p.add_argument("--sample", help="sample id <oil>_stage<k>")
            p.add_argument("--average-last-stage", action="store_true",
                           help="sweep every fold's held-out last stage and average")
            p.add_argument("--run", help="<run>/<target> directory for --average-last-stage")
            p.add_argument("--out", help="output directory")

    p = add("report", cmd_report, "figure data for a finished run")
    _data_flags(p)
    p.add_argument("--run", required=True, help="<run>/<target> directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .eemio import DatasetError, EEMParseError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        # one tf.function per training phase; the retracing notice is expected
        logging.getLogger("tensorflow").setLevel(logging.ERROR)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EEMParseError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
