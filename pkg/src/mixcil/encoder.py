"""Feature extractor, projection head, classifier, and the slow key copy.

The extractor is a fully connected rectifier network; the projection
head is one linear map followed by row normalization; the classifier is
a bias-free row-per-label matrix over the expanded label space (each
real class owns ``proxy_factor`` consecutive rows). A momentum copy of
extractor plus projection tracks the online weights through exponential
moving averages and never receives gradients.

Checkpoint format, all little-endian:

    bytes   5   magic b"FACL1"
    int64       input_dim
    int64       hidden layer count, then one int64 per hidden width
    int64       feature_dim
    int64       projection_dim
    int64       proxy factor (label slots per real class)
    int64       registered real class count
    float64     momentum coefficient of the key copy
    float64...  tensors row-major in declaration order: extractor
                weights and biases per layer, projection weights,
                classifier rows, momentum extractor weights and biases,
                momentum projection weights
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add_bias,
    ema_update,
    matmul,
    relu,
    row_normalize,
    transpose,
)

CHECKPOINT_MAGIC = b"FACL1"


class CheckpointError(ValueError):
    """Checkpoint bytes do not follow the declared format."""


@dataclass(frozen=True)
class EncoderSpec:
    """Layer widths of the extractor and projection head."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    feature_dim: int = 32
    projection_dim: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim, self.projection_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all encoder dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        chain = (self.input_dim, *self.hidden_dims, self.feature_dim)
        return list(zip(chain[:-1], chain[1:]))


@dataclass
class ModelParams:
    spec: EncoderSpec
    proxy_factor: int
    ema: float
    layers: list[tuple[Tensor, Tensor]]
    projection: Tensor
    classifier: Tensor
    ema_layers: list[tuple[Tensor, Tensor]]
    ema_projection: Tensor
    registered_classes: int = 0

    @property
    def classifier_width(self) -> int:
        return int(self.classifier.shape[0])

    def trainable(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out.extend((w, b))
        out.append(self.projection)
        out.append(self.classifier)
        return out

    def online_tracked(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out.extend((w, b))
        out.append(self.projection)
        return out

    def momentum_tracked(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.ema_layers:
            out.extend((w, b))
        out.append(self.ema_projection)
        return out


def init_params(spec: EncoderSpec, seed: int, proxy_factor: int = 2, ema: float = 0.999) -> ModelParams:
    """Seeded initialization; the momentum copy starts equal to the online copy."""
    if proxy_factor < 1:
        raise ValueError(f"proxy_factor must be >= 1, got {proxy_factor}")
    if not 0.0 <= ema <= 1.0:
        raise ValueError(f"ema must lie in [0, 1], got {ema}")
    rng = np.random.default_rng(seed)
    layers: list[tuple[Tensor, Tensor]] = []
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(dims):
        gain = 2.0 if i < len(dims) - 1 else 1.0  # rectifier layers get He scaling
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    projection = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(spec.feature_dim), size=(spec.feature_dim, spec.projection_dim))
    )
    classifier = Tensor(np.zeros((0, spec.feature_dim)))
    ema_layers = [(Tensor(w.values.copy()), Tensor(b.values.copy())) for w, b in layers]
    ema_projection = Tensor(projection.values.copy())
    return ModelParams(
        spec=spec,
        proxy_factor=proxy_factor,
        ema=float(ema),
        layers=layers,
        projection=projection,
        classifier=classifier,
        ema_layers=ema_layers,
        ema_projection=ema_projection,
    )


def register_classes(params: ModelParams, count: int) -> None:
    """Grow the classifier by ``count`` real classes (zero-initialized rows).

    Replaces the classifier tensor, so optimizers must be built after
    the registration they should cover.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    new_rows = np.zeros((count * params.proxy_factor, params.spec.feature_dim))
    params.classifier = Tensor(np.vstack([params.classifier.values, new_rows]))
    params.registered_classes += count


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_features(params: ModelParams, x, use_momentum: bool = False) -> Tensor:
    """Extractor output, one feature row per input row."""
    h = _as_tensor(x)
    if h.values.ndim != 2 or h.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected inputs of shape [n, {params.spec.input_dim}], got {h.shape}")
    layers = params.ema_layers if use_momentum else params.layers
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = add_bias(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return h


def forward_projection(params: ModelParams, embeddings: Tensor, use_momentum: bool = False) -> Tensor:
    """Project embeddings and normalize each row to unit length."""
    w = params.ema_projection if use_momentum else params.projection
    return row_normalize(matmul(embeddings, w))


def forward_classifier(params: ModelParams, features: Tensor) -> Tensor:
    """Logits over the expanded label space, one row per feature row."""
    if params.classifier_width == 0:
        raise ShapeError("no classes registered yet")
    return matmul(features, transpose(params.classifier))


def momentum_sync(params: ModelParams) -> None:
    """Move the key copy toward the online weights; classifier excluded."""
    ema_update(params.momentum_tracked(), params.online_tracked(), params.ema)


def params_digest(params: ModelParams, include_classifier: bool = True) -> str:
    """SHA-256 over shapes and values of the online weights."""
    h = hashlib.sha256()
    tensors = params.online_tracked()
    if include_classifier:
        tensors = tensors + [params.classifier]
    for t in tensors:
        h.update(repr(t.values.shape).encode())
        h.update(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return h.hexdigest()


def _pack_i64(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}q", *values)


def save_checkpoint(params: ModelParams, path) -> None:
    spec = params.spec
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += _pack_i64(spec.input_dim, len(spec.hidden_dims), *spec.hidden_dims)
    blob += _pack_i64(spec.feature_dim, spec.projection_dim, params.proxy_factor, params.registered_classes)
    blob += struct.pack("<d", params.ema)
    for t in _declared_tensors(params):
        blob += np.ascontiguousarray(t.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _declared_tensors(params: ModelParams) -> list[Tensor]:
    out: list[Tensor] = []
    for w, b in params.layers:
        out.extend((w, b))
    out.append(params.projection)
    out.append(params.classifier)
    for w, b in params.ema_layers:
        out.extend((w, b))
    out.append(params.ema_projection)
    return out


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.offset}")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def i64(self, what: str) -> int:
        return struct.unpack("<q", self.take(8, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a model checkpoint")
    input_dim = r.i64("input_dim")
    n_hidden = r.i64("hidden layer count")
    if n_hidden < 0 or n_hidden > 1024:
        raise CheckpointError(f"implausible hidden layer count {n_hidden}")
    hidden = tuple(r.i64(f"hidden width {i}") for i in range(n_hidden))
    feature_dim = r.i64("feature_dim")
    projection_dim = r.i64("projection_dim")
    proxy_factor = r.i64("proxy factor")
    registered = r.i64("registered class count")
    ema = r.f64("ema coefficient")
    try:
        spec = EncoderSpec(input_dim, hidden, feature_dim, projection_dim)
    except ValueError as e:
        raise CheckpointError(f"bad encoder spec in checkpoint: {e}") from e
    if proxy_factor < 1 or registered < 0:
        raise CheckpointError("bad proxy factor or class count in checkpoint")

    layers = [
        (Tensor(r.array((fi, fo), "layer weights")), Tensor(r.array((fo,), "layer bias")))
        for fi, fo in spec.layer_dims
    ]
    projection = Tensor(r.array((feature_dim, projection_dim), "projection weights"))
    classifier = Tensor(r.array((registered * proxy_factor, feature_dim), "classifier rows"))
    ema_layers = [
        (Tensor(r.array((fi, fo), "momentum layer weights")), Tensor(r.array((fo,), "momentum layer bias")))
        for fi, fo in spec.layer_dims
    ]
    ema_projection = Tensor(r.array((feature_dim, projection_dim), "momentum projection weights"))
    if r.offset != len(blob):
        raise CheckpointError(f"trailing bytes after checkpoint payload at offset {r.offset}")
    return ModelParams(
        spec=spec,
        proxy_factor=proxy_factor,
        ema=ema,
        layers=layers,
        projection=projection,
        classifier=classifier,
        ema_layers=ema_layers,
        ema_projection=ema_projection,
        registered_classes=registered,
    )
