"""Convolutional embedding encoder, reconstruction decoders, checkpoints.

The encoder is four identical blocks (3x3 conv, ReLU, 2x2 max pool); on
28x28 inputs the spatial path is 28 -> 14 -> 7 -> 3 -> 1, so with 64
filters the flattened embedding has 64 dimensions.  Decoders mirror the
encoder with transposed convolutions and come in two capacities,
``shallow`` (~75k parameters on the default architecture) and ``deep``
(~250k); exact layer geometry lives in ``_DECODER_TABLE``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    conv_transpose2d,
    flatten,
    max_pool2d,
    relu,
    reshape,
)

__all__ = [
    "ArchSpec",
    "ConvLayer",
    "DeconvLayer",
    "Encoder",
    "Decoder",
    "LinearHead",
    "embed_dim",
    "build_encoder",
    "build_decoder",
    "build_head",
    "encode",
    "decode",
    "head_logits",
    "param_count",
    "encoder_with_params",
    "head_with_params",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "DECODER_VARIANTS",
]

# encoder output spatial size per supported input size
_ENCODER_SPATIAL = {28: 1, 32: 2}

# decoder layers as (out_channels or None for image channels, kernel, stride, pad);
# in_channels chains from the previous layer, starting at the encoder width
_DECODER_TABLE = {
    (28, "shallow"): [(64, 3, 1, 0), (48, 3, 2, 0), (16, 4, 2, 1), (None, 4, 2, 1)],
    (28, "deep"): [(96, 3, 1, 0), (96, 3, 2, 0), (64, 4, 2, 1), (16, 4, 2, 1), (None, 3, 1, 1)],
    (32, "shallow"): [(64, 4, 2, 1), (48, 4, 2, 1), (16, 4, 2, 1), (None, 4, 2, 1)],
    (32, "deep"): [(96, 4, 2, 1), (96, 4, 2, 1), (64, 4, 2, 1), (16, 4, 2, 1), (None, 3, 1, 1)],
}

DECODER_VARIANTS = ("shallow", "deep")


@dataclass(frozen=True)
class ArchSpec:
    image_size: int = 28
    in_channels: int = 1
    channels: int = 64

    def __post_init__(self):
        if self.image_size not in _ENCODER_SPATIAL:
            raise ShapeError(
                f"unsupported image size {self.image_size}; "
                f"supported: {sorted(_ENCODER_SPATIAL)}"
            )
        if self.in_channels < 1 or self.channels < 1:
            raise ShapeError("channel counts must be positive")


def embed_dim(arch: ArchSpec) -> int:
    s = _ENCODER_SPATIAL[arch.image_size]
    return arch.channels * s * s


@dataclass
class ConvLayer:
    w: Tensor
    b: Tensor
    stride: int = 1
    pad: int = 0


@dataclass
class DeconvLayer:
    w: Tensor
    b: Tensor
    stride: int = 1
    pad: int = 0


@dataclass
class Encoder:
    arch: ArchSpec
    layers: list[ConvLayer] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out


@dataclass
class Decoder:
    arch: ArchSpec
    variant: str
    start_spatial: int
    layers: list[DeconvLayer] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out


@dataclass
class LinearHead:
    w: Tensor
    b: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_encoder(arch: ArchSpec, rng: np.random.Generator, dtype=np.float64) -> Encoder:
    """Four conv blocks; weights Kaiming-uniform, biases zero.

    Parameters are drawn from ``rng`` in a fixed order (layer by layer,
    weight then bias), so the same generator state yields bit-identical
    models.
    """
    layers = []
    cin = arch.in_channels
    for _ in range(4):
        w = Tensor(_uniform_init(rng, (arch.channels, cin, 3, 3), cin * 9, dtype), requires_grad=True)
        b = Tensor(np.zeros(arch.channels, dtype=dtype), requires_grad=True)
        layers.append(ConvLayer(w=w, b=b, stride=1, pad=1))
        cin = arch.channels
    return Encoder(arch=arch, layers=layers)


def build_decoder(
    arch: ArchSpec, variant: str, rng: np.random.Generator, dtype=np.float64
) -> Decoder:
    if variant not in DECODER_VARIANTS:
        raise ValueError(f"unknown decoder variant {variant!r}; choose from {DECODER_VARIANTS}")
    table = _DECODER_TABLE[(arch.image_size, variant)]
    layers = []
    cin = arch.channels
    for cout, k, stride, pad in table:
        cout = arch.in_channels if cout is None else cout
        w = Tensor(_uniform_init(rng, (cin, cout, k, k), cin * k * k, dtype), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        layers.append(DeconvLayer(w=w, b=b, stride=stride, pad=pad))
        cin = cout
    return Decoder(arch=arch, variant=variant, start_spatial=_ENCODER_SPATIAL[arch.image_size], layers=layers)


def build_head(arch: ArchSpec, way: int, rng: np.random.Generator, dtype=np.float64) -> LinearHead:
    """Linear classification head used by the gradient-adaptation trainer."""
    e = embed_dim(arch)
    w = Tensor(_uniform_init(rng, (e, way), e, dtype), requires_grad=True)
    b = Tensor(np.zeros(way, dtype=dtype), requires_grad=True)
    return LinearHead(w=w, b=b)


def encode(encoder: Encoder, x: Tensor) -> Tensor:
    """Images [B,C,H,W] -> embeddings [B,E]."""
    if x.ndim != 4:
        raise ShapeError(f"encode: expected [B,C,H,W], got {x.shape}")
    h = x
    for layer in encoder.layers:
        h = max_pool2d(relu(conv2d(h, layer.w, layer.b, stride=layer.stride, pad=layer.pad)), 2)
    return flatten(h)


def decode(decoder: Decoder, z: Tensor) -> Tensor:
    """Embeddings [B,E] -> reconstructed images [B,C,H,W]."""
    s = decoder.start_spatial
    h = reshape(z, (z.shape[0], decoder.arch.channels, s, s))
    last = len(decoder.layers) - 1
    for i, layer in enumerate(decoder.layers):
        h = conv_transpose2d(h, layer.w, layer.b, stride=layer.stride, pad=layer.pad)
        if i != last:
            h = relu(h)
    return h


def head_logits(head: LinearHead, emb: Tensor) -> Tensor:
    return emb @ head.w + head.b


def param_count(obj) -> int:
    params = obj.parameters() if hasattr(obj, "parameters") else obj
    return int(sum(p.size for p in params))


def encoder_with_params(template: Encoder, params: Sequence[Tensor]) -> Encoder:
    """An encoder with the same geometry but the given parameter tensors
    (ordered as ``Encoder.parameters()``: weight, bias per layer)."""
    if len(params) != 2 * len(template.layers):
        raise ValueError(f"expected {2 * len(template.layers)} tensors, got {len(params)}")
    layers = [
        ConvLayer(w=params[2 * i], b=params[2 * i + 1], stride=l.stride, pad=l.pad)
        for i, l in enumerate(template.layers)
    ]
    return Encoder(arch=template.arch, layers=layers)


def head_with_params(params: Sequence[Tensor]) -> LinearHead:
    if len(params) != 2:
        raise ValueError(f"expected 2 tensors (weight, bias), got {len(params)}")
    return LinearHead(w=params[0], b=params[1])


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    encoder: Encoder
    decoder: Decoder | None
    head: LinearHead | None
    meta: dict


def _named_arrays(prefix: str, layers) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}.{i}.w"] = layer.w.data
        out[f"{prefix}.{i}.b"] = layer.b.data
    return out


def save_checkpoint(
    path,
    encoder: Encoder,
    decoder: Decoder | None = None,
    head: LinearHead | None = None,
    meta: dict | None = None,
) -> None:
    """Write parameters plus a JSON metadata record to an ``.npz`` file.

    Arrays round-trip bit-exactly (no recompression or dtype changes).
    """
    meta = dict(meta or {})
    meta["arch"] = {
        "image_size": encoder.arch.image_size,
        "in_channels": encoder.arch.in_channels,
        "channels": encoder.arch.channels,
    }
    meta["decoder_variant"] = decoder.variant if decoder is not None else None
    meta["head_way"] = head.b.shape[0] if head is not None else None
    arrays = _named_arrays("enc", encoder.layers)
    if decoder is not None:
        arrays.update(_named_arrays("dec", decoder.layers))
    if head is not None:
        arrays["head.w"] = head.w.data
        arrays["head.b"] = head.b.data
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode("utf-8"))
    arch = ArchSpec(**meta["arch"])

    rng = np.random.default_rng(0)  # placeholder draws, immediately overwritten
    encoder = build_encoder(arch, rng)
    for i, layer in enumerate(encoder.layers):
        layer.w = Tensor(arrays[f"enc.{i}.w"], requires_grad=True)
        layer.b = Tensor(arrays[f"enc.{i}.b"], requires_grad=True)

    decoder = None
    if meta.get("decoder_variant"):
        decoder = build_decoder(arch, meta["decoder_variant"], rng)
        for i, layer in enumerate(decoder.layers):
            layer.w = Tensor(arrays[f"dec.{i}.w"], requires_grad=True)
            layer.b = Tensor(arrays[f"dec.{i}.b"], requires_grad=True)

    head = None
    if meta.get("head_way"):
        head = LinearHead(
            w=Tensor(arrays["head.w"], requires_grad=True),
            b=Tensor(arrays["head.b"], requires_grad=True),
        )
    return Checkpoint(encoder=encoder, decoder=decoder, head=head, meta=meta)
