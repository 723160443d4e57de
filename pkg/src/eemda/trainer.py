"""Two-phase domain adaptation (head-only transfer, then partial fine-tuning) per LOO fold."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .eemio import Dataset, LOOFold, make_loo_folds
from .evalreport import EvalReport, PredictionRow, compute_metrics
from .model import BackboneSpec, PredictorModel, TrainablePolicy, build_regressor, set_trainable
from .preprocess import PreprocessedImage, RayleighMode, preprocess_dataset

logger = logging.getLogger(__name__)

TARGETS = ("k232", "k268")
ADAM_DEFAULTS = {"beta_1": 0.9, "beta_2": 0.999, "epsilon": 1e-7}
WEIGHTS_NAME = "checkpoint.weights.h5"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainPhaseConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    loss: str = "mse"
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss != "mse" or self.optimizer != "adam":
            raise ValueError("only mse loss with the adam optimizer is supported")


@dataclass(frozen=True)
class DomainAdaptationPlan:
    target: str
    phase1: TrainPhaseConfig
    phase2: TrainPhaseConfig
    phase2_policy: TrainablePolicy

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.phase2_policy.mode != "partial_unfreeze":
            raise ValueError("phase 2 must use a partial_unfreeze policy")

    @classmethod
    def published(cls, target: str) -> "DomainAdaptationPlan":
        """The published schedule for the pretrained MobileNetV2 backbone."""
        phase1 = TrainPhaseConfig(1e-4, 230, 1000)
        if target == "k232":
            phase2 = TrainPhaseConfig(1e-6, 230, 500)
        elif target == "k268":
            phase2 = TrainPhaseConfig(1e-5, 32, 500)
        else:
            raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
        return cls(target, phase1, phase2, TrainablePolicy.partial_unfreeze(100))

    @classmethod
    def desk(cls, target: str, phase1_epochs: int = 50, phase2_epochs: int = 25) -> "DomainAdaptationPlan":
        """Reduced schedule for the compact test backbone.

        Batch sizes follow the published plan; learning rates are raised because the
        compact backbone starts from random weights and runs far fewer epochs.
        """
        pub = cls.published(target)
        phase1 = TrainPhaseConfig(1e-2, pub.phase1.batch_size, phase1_epochs)
        phase2 = TrainPhaseConfig(5e-3, pub.phase2.batch_size, phase2_epochs)
        return cls(target, phase1, phase2, TrainablePolicy.partial_unfreeze(BackboneSpec.compact().default_frozen_prefix))

    @classmethod
    def default_for(cls, target: str, backbone: BackboneSpec) -> "DomainAdaptationPlan":
        return cls.published(target) if backbone.kind.value == "pretrained_mobilenet_v2" else cls.desk(target)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_settings"] = dict(ADAM_DEFAULTS)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    seconds: float


@dataclass
class TrainHistory:
    phase: str
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]


@dataclass
class ModelCheckpoint:
    manifest: dict
    weight_digest: str
    directory: Optional[Path] = None
    model: Optional[PredictorModel] = None

    @property
    def fold_oil(self) -> str:
        return self.manifest["fold_oil"]


def environment_fingerprint() -> dict:
    import keras
    import tensorflow as tf

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "tensorflow": tf.__version__,
        "keras": keras.__version__,
        "machine": platform.machine(),
    }


def _setup_determinism() -> None:
    import tensorflow as tf

    try:
        tf.config.experimental.enable_op_determinism()
    except Exception:  # pragma: no cover - older TF
        os.environ["TF_DETERMINISTIC_OPS"] = "1"


def train_phase(model: PredictorModel, images: np.ndarray, targets: np.ndarray, config: TrainPhaseConfig,
                seed: int, val_images: Optional[np.ndarray] = None, val_targets: Optional[np.ndarray] = None,
                phase: str = "phase") -> tuple[PredictorModel, TrainHistory]:
    """Train the currently trainable weights with Adam on MSE.

    Mini-batches come from a seeded permutation each epoch with
    ``batch_size = min(config.batch_size, n)``. Frozen weights are checked
    bit-identical afterwards.
    """
    import keras
    import tensorflow as tf

    x = np.asarray(images)
    y = np.asarray(targets, dtype=np.float32)
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    if len(y) != n:
        raise ValueError("images and targets differ in length")
    _setup_determinism()

    net = model.keras_model
    variables = list(net.trainable_variables)
    optimizer = keras.optimizers.Adam(learning_rate=config.learning_rate, **ADAM_DEFAULTS)
    optimizer.build(variables)

    @tf.function(reduce_retracing=True)
    def step(xb, yb):
        with tf.GradientTape() as tape:
            pred = net(xb, training=True)[:, 0]
            loss = tf.reduce_mean(tf.square(pred - yb))
        grads = tape.gradient(loss, variables)
        optimizer.apply_gradients(zip(grads, variables))
        return loss

    frozen_before = model.frozen_digest()
    x_tf, y_tf = tf.constant(x), tf.constant(y)
    batch = min(config.batch_size, n)
    rng = np.random.default_rng(seed)
    history = TrainHistory(phase)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch)):
            idx = tf.constant(perm[start:start + batch])
            loss = float(step(tf.gather(x_tf, idx), tf.gather(y_tf, idx)).numpy())
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            total += loss * len(perm[start:start + batch])
        val_loss = None
        if val_images is not None and len(val_images):
            pred = model.predict_pixels(val_images)
            val_loss = float(np.mean((pred - np.asarray(val_targets, dtype=np.float64)) ** 2))
        history.records.append(EpochRecord(epoch, total / n, val_loss, time.perf_counter() - t0))

    if model.frozen_digest() != frozen_before:
        raise RuntimeError(f"{phase}: frozen weights changed during training")
    return model, history


# --- checkpoints ---------------------------------------------------------------


def format_manifest(manifest: dict) -> str:
    return "".join(f"{k}: {v}\n" for k, v in manifest.items())


def read_manifest(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = v
    return out


def _write_history(path: Path, histories: Sequence[TrainHistory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "epoch", "train_loss", "val_loss"])
        for h in histories:
            for r in h.records:
                w.writerow([h.phase, r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])


def _write_timing(path: Path, histories: Sequence[TrainHistory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "epoch", "seconds"])
        for h in histories:
            for r in h.records:
                w.writerow([h.phase, r.epoch, f"{r.seconds:.4f}"])


def write_checkpoint(directory: Path, model: PredictorModel, manifest: dict,
                     histories: Sequence[TrainHistory]) -> Path:
    """Write weights, manifest and history into ``directory`` atomically."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        model.save_weights(tmp / WEIGHTS_NAME)
        (tmp / "manifest.txt").write_text(format_manifest(manifest), encoding="utf-8")
        _write_history(tmp / "history.csv", histories)
        _write_timing(tmp / "timing.csv", histories)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_checkpoint(directory: str | Path, weights_path: Optional[str] = None) -> ModelCheckpoint:
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    spec = BackboneSpec.from_name(manifest["backbone"], weights_path)
    model = build_regressor(spec, seed=int(manifest["seed"]), load_pretrained=False)
    model.load_weights(directory / WEIGHTS_NAME)
    digest = model.weight_digest()
    if digest != manifest["weight_digest"]:
        raise ValueError(f"{directory}: weight digest {digest} does not match manifest")
    return ModelCheckpoint(manifest, digest, directory, model)


def _samples_to_arrays(dataset: Dataset, ids: Sequence[str], images: dict, target: str):
    x = np.stack([images[i].pixels for i in ids])
    y = np.array([dataset.by_id(i).targets.get(target) for i in ids], dtype=np.float64)
    return x, y


def run_domain_adaptation(fold: LOOFold, dataset: Dataset, plan: DomainAdaptationPlan, seed: int,
                          backbone: Optional[BackboneSpec] = None,
                          images: Optional[dict[str, PreprocessedImage]] = None,
                          out_dir: Optional[str | Path] = None,
                          config_digest: str = "", rayleigh_mode: RayleighMode | str = RayleighMode.KEEP,
                          rayleigh_half_width: float = 10.0) -> tuple[ModelCheckpoint, TrainHistory, TrainHistory]:
    """Phase I (head only) then Phase II (``plan.phase2_policy``) on one fold.

    ``images`` must have been preprocessed with the given Rayleigh settings; they
    are recorded in the manifest so the checkpoint can be applied to new EEMs.
    """
    backbone = backbone or BackboneSpec.compact()
    rayleigh_mode = RayleighMode(rayleigh_mode)
    if images is None:
        images = preprocess_dataset(dataset, rayleigh_mode, rayleigh_half_width)
    x_train, y_train = _samples_to_arrays(dataset, fold.train_sample_ids, images, plan.target)
    x_val, y_val = _samples_to_arrays(dataset, fold.val_sample_ids, images, plan.target)

    model = build_regressor(backbone, seed=seed)
    set_trainable(model, TrainablePolicy.head_only())
    census1 = model.census()
    _, h1 = train_phase(model, x_train, y_train, plan.phase1, seed=seed * 2 + 1,
                        val_images=x_val, val_targets=y_val, phase="phase1")

    set_trainable(model, plan.phase2_policy)
    census2 = model.census()
    if census2[0] <= census1[0]:
        logger.warning("phase 2 policy %s does not unfreeze any backbone weights", plan.phase2_policy)
    unfrozen = model.trainable_backbone_layers()
    _, h2 = train_phase(model, x_train, y_train, plan.phase2, seed=seed * 2 + 2,
                        val_images=x_val, val_targets=y_val, phase="phase2")

    digest = model.weight_digest()
    manifest = {
        "target": plan.target,
        "fold_oil": fold.held_out_oil,
        "phase": "phase2",
        "phase1_epochs": len(h1),
        "phase1_learning_rate": repr(plan.phase1.learning_rate),
        "phase1_batch_size": plan.phase1.batch_size,
        "phase2_epochs": len(h2),
        "phase2_learning_rate": repr(plan.phase2.learning_rate),
        "phase2_batch_size": plan.phase2.batch_size,
        "phase2_policy": f"{plan.phase2_policy.mode}({plan.phase2_policy.frozen_prefix_layers})",
        "optimizer": "adam " + json.dumps(ADAM_DEFAULTS, sort_keys=True),
        "loss": "mse",
        "seed": seed,
        "backbone": backbone.kind.value,
        "backbone_layers": len(model.backbone.layers),
        "config_digest": config_digest,
        "plan_digest": plan.digest(),
        "census_phase1_trainable": census1[0],
        "census_phase1_frozen": census1[1],
        "census_phase2_trainable": census2[0],
        "census_phase2_frozen": census2[1],
        "phase2_trainable_backbone_layers": ",".join(map(str, unfrozen)),
        "rayleigh_mode": rayleigh_mode.value,
        "rayleigh_half_width": repr(float(rayleigh_half_width)),
        "n_train": len(fold.train_sample_ids),
        "n_val": len(fold.val_sample_ids),
        "phase1_final_train_loss": repr(h1.records[-1].train_loss),
        "phase2_final_train_loss": repr(h2.records[-1].train_loss),
        "environment": json.dumps(environment_fingerprint(), sort_keys=True),
        "weight_digest": digest,
    }
    directory = None
    if out_dir is not None:
        directory = write_checkpoint(Path(out_dir), model, manifest, (h1, h2))
    return ModelCheckpoint(manifest, digest, directory, model), h1, h2


def _fold_worker(job: dict) -> dict:
    """Process-pool entry point: trains one fold and returns plain data."""
    dataset, fold, plan = job["dataset"], job["fold"], job["plan"]
    images = preprocess_dataset(dataset, job["rayleigh_mode"], job["rayleigh_half_width"])
    ckpt, _, _ = run_domain_adaptation(fold, dataset, plan, job["seed"], job["backbone"], images,
                                       job["out_dir"], job["config_digest"], job["rayleigh_mode"],
                                       job["rayleigh_half_width"])
    x_val = np.stack([images[i].pixels for i in fold.val_sample_ids])
    return {"manifest": ckpt.manifest, "predictions": ckpt.model.predict_pixels(x_val).tolist()}


def run_loo(dataset: Dataset, target: str, plan: Optional[DomainAdaptationPlan] = None, seed_base: int = 0,
            backbone: Optional[BackboneSpec] = None, out_root: Optional[str | Path] = None,
            images: Optional[dict[str, PreprocessedImage]] = None, oils: Optional[Sequence[str]] = None,
            jobs: int = 1, config_digest: str = "", rayleigh_mode: RayleighMode | str = RayleighMode.KEEP,
            rayleigh_half_width: float = 10.0, keep_models: bool = True) -> tuple[list[ModelCheckpoint], EvalReport]:
    """Train one model per held-out oil and predict that oil's stages with it only.

    The seed of fold ``i`` (position of the oil in the full fold list) is ``seed_base + i``.
    A failing fold is recorded in the report, the others still run.
    """
    backbone = backbone or BackboneSpec.compact()
    plan = plan or DomainAdaptationPlan.default_for(target, backbone)
    if plan.target != target:
        raise ValueError(f"plan is for {plan.target}, not {target}")
    folds = make_loo_folds(dataset)
    selected = [(i, f) for i, f in enumerate(folds) if oils is None or f.held_out_oil in oils]
    if oils is not None:
        missing = sorted(set(oils) - {f.held_out_oil for f in folds})
        if missing:
            raise KeyError(f"unknown oils: {', '.join(missing)}")
    out_root = Path(out_root) if out_root is not None else None

    results: dict[str, tuple[dict, list[float], Optional[ModelCheckpoint]]] = {}
    failed: dict[str, str] = {}
    if jobs > 1:
        if out_root is None:
            raise ValueError("parallel folds need an output directory")
        import multiprocessing

        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {}
            for i, fold in selected:
                job = dict(dataset=dataset, fold=fold, plan=plan, seed=seed_base + i, backbone=backbone,
                           out_dir=out_root / fold.held_out_oil, config_digest=config_digest,
                           rayleigh_mode=RayleighMode(rayleigh_mode), rayleigh_half_width=rayleigh_half_width)
                futures[fold.held_out_oil] = pool.submit(_fold_worker, job)
            for oil, fut in futures.items():
                try:
                    res = fut.result()
                    results[oil] = (res["manifest"], res["predictions"], None)
                except Exception as exc:
                    logger.error("fold %s failed: %s", oil, exc)
                    failed[oil] = repr(exc)
    else:
        if images is None:
            images = preprocess_dataset(dataset, rayleigh_mode, rayleigh_half_width)
        for i, fold in selected:
            try:
                out_dir = out_root / fold.held_out_oil if out_root is not None else None
                ckpt, _, _ = run_domain_adaptation(fold, dataset, plan, seed_base + i, backbone, images,
                                                   out_dir, config_digest, rayleigh_mode, rayleigh_half_width)
                x_val = np.stack([images[s].pixels for s in fold.val_sample_ids])
                preds = ckpt.model.predict_pixels(x_val).tolist()
                if not keep_models:
                    ckpt.model = None
                results[fold.held_out_oil] = (ckpt.manifest, preds, ckpt)
                logger.info("fold %s done: final phase-2 loss %s", fold.held_out_oil,
                            ckpt.manifest["phase2_final_train_loss"])
            except Exception as exc:
                logger.exception("fold %s failed", fold.held_out_oil)
                failed[fold.held_out_oil] = repr(exc)

    checkpoints: list[ModelCheckpoint] = []
    rows: list[PredictionRow] = []
    for _, fold in selected:
        oil = fold.held_out_oil
        if oil not in results:
            continue
        manifest, preds, ckpt = results[oil]
        if ckpt is None:
            directory = out_root / oil if out_root is not None else None
            ckpt = ModelCheckpoint(manifest, manifest["weight_digest"], directory, None)
        checkpoints.append(ckpt)
        for sid, pred in zip(fold.val_sample_ids, preds):
            s = dataset.by_id(sid)
            rows.append(PredictionRow(s.oil_id, s.stage_index, target, s.targets.get(target), pred,
                                      fold_oil=manifest["fold_oil"]))

    metadata = {
        "plan_digest": plan.digest(),
        "config_digest": config_digest,
        "seed_base": seed_base,
        "fold_seeds": ",".join(f"{f.held_out_oil}={seed_base + i}" for i, f in selected),
        "backbone": backbone.kind.value,
    }
    report = compute_metrics(rows, metadata=metadata, target=target) if rows else EvalReport.empty(target, metadata)
    report.failed_folds = failed
    report.incomplete = bool(failed)
    return checkpoints, report
