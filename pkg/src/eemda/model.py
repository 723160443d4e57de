"""Regression model: image backbone + fixed dense head, plus freeze/unfreeze policies.

Two backbones share one contract. ``pretrained_mobilenet_v2`` is the Keras MobileNetV2
(ImageNet weights, no top, 154 layers at 160x160). ``compact_test_cnn`` is a small
randomly initialised CNN that trains on a CPU in seconds; every test uses it.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np
import keras
import tensorflow as tf
from keras import layers

from .preprocess import IMAGE_SIZE, PreprocessedImage

MOBILENET_WEIGHTS_FILE = "mobilenet_v2_weights_tf_dim_ordering_tf_kernels_1.0_160_no_top.h5"
MOBILENET_WEIGHTS_URL = (
    "https://storage.googleapis.com/tensorflow/keras-applications/mobilenet_v2/" + MOBILENET_WEIGHTS_FILE
)
WEIGHTS_ENV = "EEMDA_MOBILENET_WEIGHTS"
PREDICT_CHUNK = 64

# (kind, arg) in application order; the final dense layer is linear
HEAD_SPEC: tuple[tuple[str, object], ...] = (
    ("global_average_pooling", None),
    ("dropout", 0.2),
    ("dense_relu", 32),
    ("dense_relu", 16),
    ("dense_relu", 8),
    ("dense_linear", 1),
)

COMPACT_FILTERS = (8, 8, 16, 16, 16)


class MissingWeightsError(FileNotFoundError):
    pass


class BackboneKind(str, Enum):
    PRETRAINED = "pretrained_mobilenet_v2"
    COMPACT = "compact_test_cnn"


@dataclass(frozen=True)
class BackboneSpec:
    kind: BackboneKind
    n_layers: int
    pretrained_source: str
    weights_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", BackboneKind(self.kind))
        if self.kind is BackboneKind.PRETRAINED and (self.n_layers != 154 or self.pretrained_source != "imagenet"):
            raise ValueError("pretrained_mobilenet_v2 has 154 layers with imagenet weights")

    @classmethod
    def pretrained(cls, weights_path: Optional[str] = None) -> "BackboneSpec":
        return cls(BackboneKind.PRETRAINED, 154, "imagenet", weights_path)

    @classmethod
    def compact(cls) -> "BackboneSpec":
        # input + avg-pool stem + 5 conv layers + 4 max-pools
        return cls(BackboneKind.COMPACT, 2 + 2 * len(COMPACT_FILTERS) - 1, "random")

    @classmethod
    def from_name(cls, name: str, weights_path: Optional[str] = None) -> "BackboneSpec":
        if name in ("pretrained", BackboneKind.PRETRAINED.value):
            return cls.pretrained(weights_path)
        if name in ("test", BackboneKind.COMPACT.value):
            return cls.compact()
        raise ValueError(f"unknown backbone {name!r}")

    @property
    def default_frozen_prefix(self) -> int:
        # compact: input, stem pool and conv1 stay frozen
        return 100 if self.kind is BackboneKind.PRETRAINED else 3


@dataclass(frozen=True)
class TrainablePolicy:
    mode: str
    frozen_prefix_layers: int = 0

    def __post_init__(self):
        if self.mode not in ("head_only", "partial_unfreeze"):
            raise ValueError(f"unknown policy mode {self.mode!r}")

    @classmethod
    def head_only(cls) -> "TrainablePolicy":
        return cls("head_only", 0)

    @classmethod
    def partial_unfreeze(cls, frozen_prefix_layers: int) -> "TrainablePolicy":
        return cls("partial_unfreeze", frozen_prefix_layers)


def head_parameter_count(feature_width: int) -> int:
    return feature_width * 32 + 32 + 32 * 16 + 16 + 16 * 8 + 8 + 8 * 1 + 1


def _digest(variables) -> str:
    h = hashlib.sha256()
    for v in variables:
        a = np.ascontiguousarray(keras.ops.convert_to_numpy(v))
        h.update(f"{a.dtype.str}{a.shape};".encode())
        h.update(a.tobytes())
    return h.hexdigest()


class PredictorModel:
    """Backbone + head with the current weights; inference never uses dropout."""

    def __init__(self, keras_model: keras.Model, backbone: keras.Model, backbone_spec: BackboneSpec, seed: int):
        self.keras_model = keras_model
        self.backbone = backbone
        self.backbone_spec = backbone_spec
        self.head_spec = HEAD_SPEC
        self.seed = seed
        self.trainable_policy = TrainablePolicy.head_only()
        self._infer = tf.function(
            lambda x: self.keras_model(x, training=False),
            input_signature=[tf.TensorSpec((PREDICT_CHUNK, IMAGE_SIZE, IMAGE_SIZE, 3), tf.uint8)],
        )

    @property
    def feature_width(self) -> int:
        return int(self.backbone.output.shape[-1])

    @property
    def head_layers(self) -> list:
        return [l for l in self.keras_model.layers if l.name.startswith("head_")]

    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Predict for an ``(N, 160, 160, 3)`` uint8 array.

        Inputs are evaluated in fixed-size zero-padded chunks so that a sample's
        prediction never depends on how many other samples share its batch.
        """
        x = np.asarray(pixels)
        if x.ndim != 4 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3) or x.dtype != np.uint8:
            raise ValueError(f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3) uint8, got {x.shape} {x.dtype}")
        out = np.empty(len(x), dtype=np.float64)
        for start in range(0, len(x), PREDICT_CHUNK):
            chunk = x[start:start + PREDICT_CHUNK]
            n = len(chunk)
            if n < PREDICT_CHUNK:
                chunk = np.concatenate([chunk, np.zeros((PREDICT_CHUNK - n,) + chunk.shape[1:], np.uint8)])
            y = self._infer(tf.constant(chunk)).numpy()[:n, 0]
            out[start:start + n] = y
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("model produced non-finite predictions")
        return out

    def census(self) -> tuple[int, int]:
        n_train = sum(int(np.prod(v.shape)) for v in self.keras_model.trainable_weights)
        n_frozen = sum(int(np.prod(v.shape)) for v in self.keras_model.non_trainable_weights)
        return n_train, n_frozen

    def trainable_backbone_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.backbone.layers) if l.trainable and l.weights and self.backbone.trainable]

    def weight_digest(self) -> str:
        return _digest(self.keras_model.weights)

    def backbone_digest(self) -> str:
        return _digest(self.backbone.weights)

    def frozen_digest(self) -> str:
        return _digest(self.keras_model.non_trainable_weights)

    def save_weights(self, path: str | Path) -> None:
        self.keras_model.save_weights(str(path))

    def load_weights(self, path: str | Path) -> None:
        self.keras_model.load_weights(str(path))


def _resolve_pretrained_weights(spec: BackboneSpec) -> Path:
    candidates = []
    if spec.weights_path:
        candidates.append(Path(spec.weights_path))
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]))
    keras_home = Path(os.environ.get("KERAS_HOME", Path.home() / ".keras"))
    candidates.append(keras_home / "models" / MOBILENET_WEIGHTS_FILE)
    for c in candidates:
        if c.is_file():
            return c
    raise MissingWeightsError(
        "MobileNetV2 ImageNet weights (alpha 1.0, 160px, no top) not found. Looked in: "
        + ", ".join(str(c) for c in candidates)
        + f". Download {MOBILENET_WEIGHTS_URL} and either place it in {keras_home / 'models'}, "
        f"set {WEIGHTS_ENV}=<file>, or pass --weights <file>."
    )


def _check_recorded_digest(backbone: keras.Model, weights_file: Path) -> None:
    record = weights_file.with_name(weights_file.name + ".digest")
    digest = _digest(backbone.weights)
    if record.exists():
        expected = record.read_text().strip()
        if expected != digest:
            raise ValueError(f"pretrained weight digest {digest} differs from recorded {expected} ({record})")
    else:
        try:
            record.write_text(digest + "\n")
        except OSError:
            pass


def _pretrained_backbone(spec: BackboneSpec, load_weights: bool) -> keras.Model:
    weights = None
    if load_weights:
        weights_file = _resolve_pretrained_weights(spec)
        weights = str(weights_file)
    backbone = keras.applications.MobileNetV2(
        input_shape=(IMAGE_SIZE, IMAGE_SIZE, 3), include_top=False, weights=weights
    )
    if len(backbone.layers) != spec.n_layers:
        raise RuntimeError(f"MobileNetV2 has {len(backbone.layers)} layers, expected {spec.n_layers}")
    if load_weights:
        _check_recorded_digest(backbone, weights_file)
    return backbone


def _compact_backbone(seed: int) -> keras.Model:
    inp = keras.Input((IMAGE_SIZE, IMAGE_SIZE, 3), name="backbone_input")
    x = layers.AveragePooling2D(2, name="stem_pool")(inp)
    for k, filters in enumerate(COMPACT_FILTERS):
        x = layers.Conv2D(
            filters, 3, padding="same", activation="relu", name=f"conv{k + 1}",
            kernel_initializer=keras.initializers.HeUniform(seed=seed + 101 + k),
        )(x)
        if k < len(COMPACT_FILTERS) - 1:
            x = layers.MaxPooling2D(2, name=f"pool{k + 1}")(x)
    return keras.Model(inp, x, name="backbone")


def build_regressor(backbone: BackboneSpec, seed: int = 0, load_pretrained: bool = True) -> PredictorModel:
    """Attach the regression head to a backbone; the initial policy is head-only.

    ``load_pretrained=False`` builds the pretrained architecture without ImageNet
    weights, for restoring a checkpoint.
    """
    keras.utils.set_random_seed(seed)
    if backbone.kind is BackboneKind.PRETRAINED:
        net = _pretrained_backbone(backbone, load_pretrained)
        scale, offset = 1.0 / 127.5, -1.0
    else:
        net = _compact_backbone(seed)
        scale, offset = 1.0 / 255.0, 0.0

    inp = keras.Input((IMAGE_SIZE, IMAGE_SIZE, 3), dtype="uint8", name="image")
    x = layers.Rescaling(scale, offset, name="input_scaling")(keras.ops.cast(inp, "float32"))
    x = net(x, training=False)
    for k, (kind, arg) in enumerate(HEAD_SPEC):
        name = f"head_{k}_{kind}"
        if kind == "global_average_pooling":
            x = layers.GlobalAveragePooling2D(name=name)(x)
        elif kind == "dropout":
            x = layers.Dropout(arg, seed=seed + 7, name=name)(x)
        else:
            x = layers.Dense(
                arg, activation="relu" if kind == "dense_relu" else None, name=name,
                kernel_initializer=keras.initializers.HeUniform(seed=seed + 11 + k),
                bias_initializer="zeros",
            )(x)
    model = PredictorModel(keras.Model(inp, x, name="regressor"), net, backbone, seed)
    set_trainable(model, TrainablePolicy.head_only())
    return model


def set_trainable(model: PredictorModel, policy: TrainablePolicy) -> PredictorModel:
    n_layers = len(model.backbone.layers)
    if policy.mode == "head_only":
        model.backbone.trainable = False
    else:
        if not 0 <= policy.frozen_prefix_layers <= n_layers:
            raise ValueError(f"frozen_prefix_layers={policy.frozen_prefix_layers} outside [0, {n_layers}]")
        model.backbone.trainable = True
        for i, layer in enumerate(model.backbone.layers):
            layer.trainable = i >= policy.frozen_prefix_layers
    model.trainable_policy = policy
    return model


def predict_batch(model, images: Sequence[PreprocessedImage]) -> list[float]:
    if not len(images):
        return []
    for im in images:
        if not isinstance(im, PreprocessedImage):
            raise TypeError(f"expected PreprocessedImage, got {type(im).__name__}")
    return [float(v) for v in model.predict_pixels(np.stack([im.pixels for im in images]))]
