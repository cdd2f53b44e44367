"""Float weight file format "SACW".

Layout (all little-endian):
  magic "SACW", u16 version=1, u16 layer count; then per layer a u8 kind tag
  (1 conv, 2 maxpool, 3 avgpool, 4 flatten, 5 dense), a shape header of six
  u16 fields (M, N, P, Q, S, pad), then float32 payload: conv kernel in
  [m][n][p][q] order followed by the bias, dense weights [out][in] followed by
  the bias. When the model spec flags batchnorm on a conv, its gamma, beta,
  mean, var arrays (length M each) and a single epsilon follow the conv bias.
The file carries parameters only; loading requires the ModelSpec that
describes the layer chain (the CLI stores it as a JSON sidecar).
"""
from __future__ import annotations

import struct

import numpy as np

from ._ioutil import atomic_write_bytes
from .errors import ConfigurationError
from .layers import BatchNormParams, ConvLayerParams, DenseParams
from .model import (
    ConvBlockParams,
    ConvSpec,
    FlattenSpec,
    ModelParams,
    ModelSpec,
    PoolLayerSpec,
)

MAGIC = b"SACW"
VERSION = 1

KIND_CONV = 1
KIND_MAXPOOL = 2
KIND_AVGPOOL = 3
KIND_FLATTEN = 4
KIND_DENSE = 5


def _f32(arr) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def save_weights(path, spec: ModelSpec, params: ModelParams) -> None:
    if len(params.entries) != len(spec.layers):
        raise ConfigurationError("params do not match spec layer count")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HH", VERSION, len(spec.layers))
    shape = spec.input_shape
    for layer, entry in zip(spec.layers, params.entries):
        if isinstance(layer, ConvSpec):
            m, n = layer.out_channels, shape[0]
            p, q = layer.kernel
            blob += struct.pack("<B6H", KIND_CONV, m, n, p, q, layer.stride, layer.padding)
            blob += _f32(entry.conv.kernel)
            blob += _f32(entry.conv.bias)
            if layer.batchnorm:
                if entry.bn is None:
                    raise ConfigurationError(f"layer {layer.name}: batchnorm flagged but no parameters")
                blob += _f32(entry.bn.gamma) + _f32(entry.bn.beta)
                blob += _f32(entry.bn.mean) + _f32(entry.bn.var)
                blob += struct.pack("<f", entry.bn.eps)
            oh = (shape[1] + 2 * layer.padding - p) // layer.stride + 1
            ow = (shape[2] + 2 * layer.padding - q) // layer.stride + 1
            shape = (m, oh, ow)
        elif isinstance(layer, PoolLayerSpec):
            kind = KIND_MAXPOOL if layer.mode == "max" else KIND_AVGPOOL
            p, q = layer.window
            blob += struct.pack("<B6H", kind, shape[0], shape[0], p, q, layer.stride, 0)
            oh = (shape[1] - p) // layer.stride + 1
            ow = (shape[2] - q) // layer.stride + 1
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenSpec):
            blob += struct.pack("<B6H", KIND_FLATTEN, 0, 0, 0, 0, 0, 0)
            shape = (int(np.prod(shape)),)
        else:
            out, inp = layer.out_features, shape[0]
            blob += struct.pack("<B6H", KIND_DENSE, out, inp, 1, 1, 1, 0)
            blob += _f32(entry.weights)
            blob += _f32(entry.bias)
            shape = (out,)
    atomic_write_bytes(path, bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ConfigurationError("weight file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def load_weights(path, spec: ModelSpec) -> ModelParams:
    """Read a SACW file and return parameters matching ``spec``."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise ConfigurationError(f"{path}: not a SACW file")
    version, count = struct.unpack("<HH", reader.take(4))
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported SACW version {version}")
    if count != len(spec.layers):
        raise ConfigurationError(
            f"{path}: file has {count} layers, spec has {len(spec.layers)}")
    entries = []
    for layer in spec.layers:
        kind, m, n, p, q, s, pad = struct.unpack("<B6H", reader.take(13))
        if isinstance(layer, ConvSpec):
            if kind != KIND_CONV:
                raise ConfigurationError(f"layer {layer.name}: expected conv record, found tag {kind}")
            if (p, q) != layer.kernel or s != layer.stride or pad != layer.padding or m != layer.out_channels:
                raise ConfigurationError(f"layer {layer.name}: shape header does not match spec")
            kernel = reader.f32(m * n * p * q).reshape(m, n, p, q)
            bias = reader.f32(m)
            bn = None
            if layer.batchnorm:
                gamma, beta = reader.f32(m), reader.f32(m)
                mean, var = reader.f32(m), reader.f32(m)
                (eps,) = struct.unpack("<f", reader.take(4))
                bn = BatchNormParams(gamma=gamma, beta=beta, mean=mean, var=var, eps=float(eps))
            entries.append(ConvBlockParams(
                conv=ConvLayerParams(kernel=kernel, bias=bias, stride=s, padding=pad), bn=bn))
        elif isinstance(layer, PoolLayerSpec):
            expect = KIND_MAXPOOL if layer.mode == "max" else KIND_AVGPOOL
            if kind != expect:
                raise ConfigurationError(f"layer {layer.name}: expected pool record, found tag {kind}")
            entries.append(None)
        elif isinstance(layer, FlattenSpec):
            if kind != KIND_FLATTEN:
                raise ConfigurationError(f"layer {layer.name}: expected flatten record, found tag {kind}")
            entries.append(None)
        else:
            if kind != KIND_DENSE:
                raise ConfigurationError(f"layer {layer.name}: expected dense record, found tag {kind}")
            if m != layer.out_features:
                raise ConfigurationError(f"layer {layer.name}: shape header does not match spec")
            weights = reader.f32(m * n).reshape(m, n)
            bias = reader.f32(m)
            entries.append(DenseParams(weights=weights, bias=bias))
    if reader.pos != len(reader.data):
        raise ConfigurationError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return ModelParams(entries=entries)
