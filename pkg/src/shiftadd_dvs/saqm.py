"""Quantized model file format "SAQM".

Layout (little-endian):
  magic "SAQM", u16 version=1, u8 N (terms per weight), u8 bits (code width),
  u8 F (fraction bits), u8 I (integer bits), u16 layer count. Every spec layer
  gets a record: u8 kind tag and the six-u16 shape header as in "SACW",
  followed for conv/dense layers by an i16 encoding bias and one packed record
  per parameter (kernel weights in index order, then biases): 2 sign bits
  (0 zero, 1 positive, 2 negative), 4 term-count bits, then that many codes of
  ``bits`` bits each. Bits fill bytes LSB-first; each layer's packed block is
  padded to a byte boundary.

The packed stream holds the encoded (possibly clamped) codes, so the loaded
model is the deployable view; the field widths cap term counts at 15.
"""
from __future__ import annotations

import struct

from ._ioutil import atomic_write_bytes
from .errors import ConfigurationError
from .model import ConvSpec, FlattenSpec, ModelSpec, PoolLayerSpec
from .quantize import LayerEncoding, QuantizedLayer, QuantizedModel, ShiftQuantParam, ZERO_PARAM
from .encoding import decode_layer
from . import sacw

MAGIC = b"SAQM"
VERSION = 1
MAX_PACKED_TERMS = 15  # 4-bit term-count field


class _BitWriter:
    def __init__(self):
        self.data = bytearray()
        self.bit = 0

    def write(self, value: int, nbits: int) -> None:
        for i in range(nbits):
            if self.bit == 0:
                self.data.append(0)
            if (value >> i) & 1:
                self.data[-1] |= 1 << self.bit
            self.bit = (self.bit + 1) % 8

    def align(self) -> None:
        self.bit = 0


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.bit = 0

    def read(self, nbits: int) -> int:
        value = 0
        for i in range(nbits):
            if self.pos >= len(self.data):
                raise ConfigurationError("quantized model file truncated")
            if (self.data[self.pos] >> self.bit) & 1:
                value |= 1 << i
            self.bit += 1
            if self.bit == 8:
                self.bit = 0
                self.pos += 1
        return value

    def align(self) -> None:
        if self.bit:
            self.bit = 0
            self.pos += 1


_SIGN_CODE = {0: 0, 1: 1, -1: 2}
_SIGN_DECODE = {0: 0, 1: 1, 2: -1}


def save_quantized(path, q: QuantizedModel) -> None:
    """Serialize an encoded quantized model."""
    if q.bits is None:
        raise ConfigurationError("encode the model before saving (encode_model)")
    header = bytearray()
    header += MAGIC
    header += struct.pack("<HBBBBH", VERSION, q.n_terms, q.bits, q.frac_bits,
                          q.int_bits, len(q.spec.layers))
    blob = bytearray(header)
    shape = q.spec.input_shape
    for layer, entry in zip(q.spec.layers, q.entries):
        if isinstance(layer, ConvSpec):
            p_, q_ = layer.kernel
            blob += struct.pack("<B6H", sacw.KIND_CONV, layer.out_channels, shape[0],
                                p_, q_, layer.stride, layer.padding)
            blob += _pack_layer(entry)
            oh = (shape[1] + 2 * layer.padding - p_) // layer.stride + 1
            ow = (shape[2] + 2 * layer.padding - q_) // layer.stride + 1
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, PoolLayerSpec):
            kind = sacw.KIND_MAXPOOL if layer.mode == "max" else sacw.KIND_AVGPOOL
            blob += struct.pack("<B6H", kind, shape[0], shape[0], layer.window[0],
                                layer.window[1], layer.stride, 0)
            oh = (shape[1] - layer.window[0]) // layer.stride + 1
            ow = (shape[2] - layer.window[1]) // layer.stride + 1
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenSpec):
            blob += struct.pack("<B6H", sacw.KIND_FLATTEN, 0, 0, 0, 0, 0, 0)
            shape = (shape[0] * shape[1] * shape[2],)
        else:
            blob += struct.pack("<B6H", sacw.KIND_DENSE, layer.out_features, shape[0],
                                1, 1, 1, 0)
            blob += _pack_layer(entry)
            shape = (layer.out_features,)
    atomic_write_bytes(path, bytes(blob))


def _pack_layer(entry: QuantizedLayer) -> bytes:
    enc = entry.encoding
    if enc is None:
        raise ConfigurationError(f"layer {entry.name} has no encoding")
    out = bytearray(struct.pack("<h", enc.bias))
    writer = _BitWriter()
    for param, codes in zip(entry.all_params(), enc.codes):
        if len(codes) > MAX_PACKED_TERMS:
            raise ConfigurationError(
                f"layer {entry.name}: {len(codes)} terms exceed the packed field "
                f"limit of {MAX_PACKED_TERMS}")
        writer.write(_SIGN_CODE[param.sign], 2)
        writer.write(len(codes), 4)
        for code in codes:
            if code >= (1 << enc.bits):
                raise ConfigurationError(f"layer {entry.name}: code {code} wider than {enc.bits} bits")
            writer.write(code, enc.bits)
    return bytes(out + writer.data)


def load_quantized(path, spec: ModelSpec, f_a: int = 8) -> QuantizedModel:
    """Read a SAQM file; parameters come back decoded (deployable view)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a SAQM file")
    version, n_terms, bits, frac_bits, int_bits, count = struct.unpack("<HBBBBH", data[4:12])
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported SAQM version {version}")
    if count != len(spec.layers):
        raise ConfigurationError(f"{path}: file has {count} layers, spec has {len(spec.layers)}")
    pos = 12
    entries: list = []
    shape = spec.input_shape
    for layer in spec.layers:
        kind, m, n, p_, q_, s, pad = struct.unpack("<B6H", data[pos:pos + 13])
        pos += 13
        if isinstance(layer, ConvSpec):
            if kind != sacw.KIND_CONV:
                raise ConfigurationError(f"layer {layer.name}: expected conv record, found tag {kind}")
            weight_count = m * n * p_ * q_
            entry, pos = _unpack_layer(data, pos, layer.name, "conv", (m, n, p_, q_),
                                       s, pad, layer.relu, weight_count, m, bits)
            entries.append(entry)
            oh = (shape[1] + 2 * pad - p_) // s + 1
            ow = (shape[2] + 2 * pad - q_) // s + 1
            shape = (m, oh, ow)
        elif isinstance(layer, PoolLayerSpec):
            expect = sacw.KIND_MAXPOOL if layer.mode == "max" else sacw.KIND_AVGPOOL
            if kind != expect:
                raise ConfigurationError(f"layer {layer.name}: expected pool record, found tag {kind}")
            entries.append(None)
            oh = (shape[1] - p_) // s + 1
            ow = (shape[2] - q_) // s + 1
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenSpec):
            if kind != sacw.KIND_FLATTEN:
                raise ConfigurationError(f"layer {layer.name}: expected flatten record, found tag {kind}")
            entries.append(None)
            shape = (shape[0] * shape[1] * shape[2],)
        else:
            if kind != sacw.KIND_DENSE:
                raise ConfigurationError(f"layer {layer.name}: expected dense record, found tag {kind}")
            entry, pos = _unpack_layer(data, pos, layer.name, "dense", (m, n), 1, 0,
                                       False, m * n, m, bits)
            entries.append(entry)
            shape = (m,)
    if pos != len(data):
        raise ConfigurationError(f"{path}: {len(data) - pos} trailing bytes")
    return QuantizedModel(spec=spec, entries=entries, n_terms=n_terms,
                          frac_bits=frac_bits, int_bits=int_bits, bits=bits, f_a=f_a)


def _unpack_layer(data, pos, name, kind, shape, stride, padding, relu,
                  weight_count, bias_count, bits):
    (bias,) = struct.unpack("<h", data[pos:pos + 2])
    pos += 2
    reader = _BitReader(data[pos:])
    params: list[ShiftQuantParam] = []
    codes: list[tuple[int, ...]] = []
    for _ in range(weight_count + bias_count):
        sign = _SIGN_DECODE.get(reader.read(2))
        if sign is None:
            raise ConfigurationError(f"layer {name}: invalid sign field")
        terms = reader.read(4)
        row = tuple(reader.read(bits) for _ in range(terms))
        codes.append(row)
        if sign == 0:
            if terms:
                raise ConfigurationError(f"layer {name}: zero weight with {terms} terms")
            params.append(ZERO_PARAM)
        else:
            params.append(ShiftQuantParam(sign=sign, shifts=tuple(decode_layer(bias, row))))
    reader.align()
    pos += reader.pos
    encoding = LayerEncoding(bias=bias, bits=bits, codes=tuple(codes), clamp_count=0)
    entry = QuantizedLayer(name=name, kind=kind, shape=shape, stride=stride,
                           padding=padding, relu=relu,
                           weights=params[:weight_count], biases=params[weight_count:],
                           encoding=encoding)
    return entry, pos
