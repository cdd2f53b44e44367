"""Per-layer offset binary encoding of shift magnitudes.

All magnitudes of one layer share a single bias equal to the smallest
magnitude present; each stored code is ``magnitude - bias`` clamped to the
``bits``-wide range. Clamping only ever shrinks a code, which distorts the
largest magnitudes, i.e. the smallest weight terms; the clamp count is
reported so losslessness is checkable (clamp_count == 0 iff decoding is the
exact inverse).
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .model import ConvSpec, DenseSpec, ModelSpec
from .quantize import LayerEncoding, QuantizedLayer, QuantizedModel, ShiftQuantParam, ZERO_PARAM


def encode_layer(magnitudes, bits: int) -> tuple[int, list[int], int]:
    """Encode one layer's magnitudes; returns (bias, codes, clamp_count)."""
    if not 1 <= bits <= 8:
        raise ConfigurationError(f"encoding width must be in [1, 8], got {bits}")
    values = [int(m) for m in magnitudes]
    if not values:
        raise ConfigurationError("cannot encode an empty layer")
    if any(m < 0 for m in values):
        raise ConfigurationError("shift magnitudes must be non-negative")
    bias = min(values)
    max_range = (1 << bits) - 1
    codes = []
    clamped = 0
    for m in values:
        code = m - bias
        if code > max_range:
            code = max_range
            clamped += 1
        codes.append(code)
    return bias, codes, clamped


def decode_layer(bias: int, codes) -> list[int]:
    """Inverse of encode_layer whenever nothing was clamped."""
    return [int(c) + int(bias) for c in codes]


def encode_model(q: QuantizedModel, bits: int) -> QuantizedModel:
    """Attach a per-layer encoding to every parameterized layer.

    Layers with no nonzero weight store bias 0 and no codes.
    """
    if not 1 <= bits <= 8:
        raise ConfigurationError(f"encoding width must be in [1, 8], got {bits}")
    entries = []
    for entry in q.entries:
        if entry is None:
            entries.append(None)
            continue
        magnitudes = [s for p in entry.all_params() for s in p.shifts]
        if magnitudes:
            bias, flat_codes, clamped = encode_layer(magnitudes, bits)
        else:
            bias, flat_codes, clamped = 0, [], 0
        codes = []
        cursor = 0
        for p in entry.all_params():
            take = len(p.shifts)
            codes.append(tuple(flat_codes[cursor:cursor + take]))
            cursor += take
        encoding = LayerEncoding(bias=bias, bits=bits, codes=tuple(codes), clamp_count=clamped)
        entries.append(QuantizedLayer(
            name=entry.name, kind=entry.kind, shape=entry.shape, stride=entry.stride,
            padding=entry.padding, relu=entry.relu, weights=list(entry.weights),
            biases=list(entry.biases), encoding=encoding))
    return QuantizedModel(spec=q.spec, entries=entries, n_terms=q.n_terms,
                          frac_bits=q.frac_bits, int_bits=q.int_bits, bits=bits, f_a=q.f_a)


def decode_entry(entry: QuantizedLayer) -> tuple[list[ShiftQuantParam], list[ShiftQuantParam]]:
    """Effective (possibly clamp-distorted) parameters of an encoded layer.

    Clamping can map two terms of one weight to the same magnitude; the
    repeated shift is kept so the dequantized value matches what the shift-add
    datapath would compute (the repeated power is added twice).
    """
    if entry.encoding is None:
        raise ConfigurationError(f"layer {entry.name} has no encoding")
    enc = entry.encoding
    decoded = []
    for param, codes in zip(entry.all_params(), enc.codes):
        if not codes:
            decoded.append(ZERO_PARAM)
        else:
            decoded.append(ShiftQuantParam(sign=param.sign,
                                           shifts=tuple(decode_layer(enc.bias, codes))))
    n_weights = len(entry.weights)
    return decoded[:n_weights], decoded[n_weights:]


def decoded_model(q: QuantizedModel) -> QuantizedModel:
    """Model whose parameters are the decode of their encoding (deployable view)."""
    entries = []
    for entry in q.entries:
        if entry is None:
            entries.append(None)
            continue
        weights, biases = decode_entry(entry)
        entries.append(QuantizedLayer(
            name=entry.name, kind=entry.kind, shape=entry.shape, stride=entry.stride,
            padding=entry.padding, relu=entry.relu, weights=weights, biases=biases,
            encoding=entry.encoding))
    return QuantizedModel(spec=q.spec, entries=entries, n_terms=q.n_terms,
                          frac_bits=q.frac_bits, int_bits=q.int_bits, bits=q.bits, f_a=q.f_a)


SIGN_FIELD_BITS = 2
TERM_COUNT_FIELD_BITS = 4
LAYER_BIAS_FIELD_BITS = 16
BASELINE_BITS = 32


def compression_report(spec: ModelSpec, n_terms: int, bits: int) -> dict:
    """Headline storage ratio N*bits/32 plus itemized sign/bias overhead."""
    if n_terms < 1 or not 1 <= bits <= 8:
        raise ConfigurationError(f"invalid report config N={n_terms}, bits={bits}")
    weight_count = 0
    layer_count = 0
    for layer in spec.layers:
        if isinstance(layer, (ConvSpec, DenseSpec)):
            layer_count += 1
    shape = spec.input_shape
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            weight_count += layer.out_channels * shape[0] * layer.kernel[0] * layer.kernel[1]
            weight_count += layer.out_channels
            shape = (layer.out_channels,
                     (shape[1] + 2 * layer.padding - layer.kernel[0]) // layer.stride + 1,
                     (shape[2] + 2 * layer.padding - layer.kernel[1]) // layer.stride + 1)
        elif isinstance(layer, DenseSpec):
            weight_count += layer.out_features * shape[0] + layer.out_features
            shape = (layer.out_features,)
        elif hasattr(layer, "window"):
            shape = (shape[0], (shape[1] - layer.window[0]) // layer.stride + 1,
                     (shape[2] - layer.window[1]) // layer.stride + 1)
        else:
            shape = (int(np.prod(shape)),)
    stored_bits = n_terms * bits
    ratio = stored_bits / BASELINE_BITS
    return {
        "stored_bits_per_weight": stored_bits,
        "baseline_bits": BASELINE_BITS,
        "ratio": ratio,
        "ratio_percent": ratio * 100.0,
        "compression_lost": ratio > 1.0,
        "overhead": {
            "sign_bits_per_weight": SIGN_FIELD_BITS,
            "term_count_bits_per_weight": TERM_COUNT_FIELD_BITS,
            "bias_bits_per_layer": LAYER_BIAS_FIELD_BITS,
            "weight_count": weight_count,
            "layer_count": layer_count,
        },
    }
