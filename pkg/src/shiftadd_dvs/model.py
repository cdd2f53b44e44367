"""Model description and the reference forward pass.

A ``ModelSpec`` is an ordered list of layer descriptions; ``ModelParams`` holds
the matching parameter arrays. The default spec is the fixed 4-layer student
(conv 8/16/32/64 with 3x3 kernels, alternating 2x2 pools, a 2048-wide flatten
and a 3-class head); ``wide_student_spec`` doubles every channel count to act
as a desk-scale teacher.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .layers import (
    BatchNormParams,
    ConvLayerParams,
    DenseParams,
    PoolSpec,
    as_feature_map,
    batchnorm_apply,
    conv2d_forward,
    conv_output_shape,
    dense_forward,
    fold_batchnorm,
    pool2d_forward,
    relu,
)

CLASS_NAMES = ("Hammer", "Air Pick", "Excavator")
INPUT_SHAPE = (1, 256, 11)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    relu: bool = True
    batchnorm: bool = True


@dataclass(frozen=True)
class PoolLayerSpec:
    name: str
    mode: str
    window: tuple[int, int] = (2, 2)
    stride: int = 2

    def pool_spec(self) -> PoolSpec:
        return PoolSpec(mode=self.mode, window=self.window, stride=self.stride)


@dataclass(frozen=True)
class FlattenSpec:
    name: str = "flatten"


@dataclass(frozen=True)
class DenseSpec:
    name: str
    out_features: int


LayerSpec = ConvSpec | PoolLayerSpec | FlattenSpec | DenseSpec


@dataclass(frozen=True)
class ModelSpec:
    """Layer chain plus the input geometry it expects."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    class_count: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique")
        self.layer_shapes()  # validates composition

    def layer_shapes(self) -> list[tuple]:
        """Output shape after each layer, starting from ``input_shape``."""
        shape = self.input_shape
        shapes = []
        flat = False
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                if flat:
                    raise ConfigurationError(f"layer {layer.name}: conv after flatten")
                c, h, w = shape
                oh, ow = conv_output_shape(h, w, layer.kernel, layer.stride, layer.padding)
                if oh < 1 or ow < 1:
                    raise ConfigurationError(f"layer {layer.name}: window does not fit input {h}x{w}")
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, PoolLayerSpec):
                if flat:
                    raise ConfigurationError(f"layer {layer.name}: pool after flatten")
                c, h, w = shape
                oh, ow = conv_output_shape(h, w, layer.window, layer.stride)
                if oh < 1 or ow < 1:
                    raise ConfigurationError(f"layer {layer.name}: window does not fit input {h}x{w}")
                shape = (c, oh, ow)
            elif isinstance(layer, FlattenSpec):
                if flat:
                    raise ConfigurationError(f"layer {layer.name}: repeated flatten")
                c, h, w = shape
                shape = (c * h * w,)
                flat = True
            elif isinstance(layer, DenseSpec):
                if not flat:
                    raise ConfigurationError(f"layer {layer.name}: dense before flatten")
                shape = (layer.out_features,)
            else:  # pragma: no cover - union is closed
                raise ConfigurationError(f"unknown layer kind {type(layer).__name__}")
            shapes.append(shape)
        if not shapes or shapes[-1] != (self.class_count,):
            raise ConfigurationError(
                f"final layer must produce {self.class_count} logits, got {shapes[-1] if shapes else None}")
        return shapes

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigurationError(f"no layer named {name!r}")

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                layers.append({"kind": "conv", "name": layer.name, "out_channels": layer.out_channels,
                               "kernel": list(layer.kernel), "stride": layer.stride,
                               "padding": layer.padding, "relu": layer.relu, "batchnorm": layer.batchnorm})
            elif isinstance(layer, PoolLayerSpec):
                layers.append({"kind": "pool", "name": layer.name, "mode": layer.mode,
                               "window": list(layer.window), "stride": layer.stride})
            elif isinstance(layer, FlattenSpec):
                layers.append({"kind": "flatten", "name": layer.name})
            else:
                layers.append({"kind": "dense", "name": layer.name, "out_features": layer.out_features})
        return {"input_shape": list(self.input_shape), "class_count": self.class_count, "layers": layers}

    @staticmethod
    def from_json(doc: dict) -> "ModelSpec":
        layers: list[LayerSpec] = []
        for entry in doc["layers"]:
            kind = entry["kind"]
            if kind == "conv":
                layers.append(ConvSpec(name=entry["name"], out_channels=entry["out_channels"],
                                       kernel=tuple(entry["kernel"]), stride=entry["stride"],
                                       padding=entry["padding"], relu=entry["relu"],
                                       batchnorm=entry["batchnorm"]))
            elif kind == "pool":
                layers.append(PoolLayerSpec(name=entry["name"], mode=entry["mode"],
                                            window=tuple(entry["window"]), stride=entry["stride"]))
            elif kind == "flatten":
                layers.append(FlattenSpec(name=entry["name"]))
            elif kind == "dense":
                layers.append(DenseSpec(name=entry["name"], out_features=entry["out_features"]))
            else:
                raise ConfigurationError(f"unknown layer kind {kind!r}")
        return ModelSpec(layers=tuple(layers), input_shape=tuple(doc["input_shape"]),
                         class_count=doc["class_count"])


def default_student_spec(batchnorm: bool = True, use_relu: bool = True) -> ModelSpec:
    """The fixed 4-layer student architecture."""
    return _student_spec(width=1, batchnorm=batchnorm, use_relu=use_relu)


def wide_student_spec(batchnorm: bool = True, use_relu: bool = True, factor: int = 2) -> ModelSpec:
    """Channel-multiplied variant of the student, used as an in-repo teacher."""
    return _student_spec(width=factor, batchnorm=batchnorm, use_relu=use_relu)


def _student_spec(width: int, batchnorm: bool, use_relu: bool) -> ModelSpec:
    conv = lambda name, ch: ConvSpec(name=name, out_channels=ch * width, relu=use_relu, batchnorm=batchnorm)
    return ModelSpec(layers=(
        conv("conv1", 8),
        PoolLayerSpec(name="maxpool1", mode="max"),
        conv("conv2", 16),
        PoolLayerSpec(name="maxpool2", mode="max"),
        conv("conv3", 32),
        PoolLayerSpec(name="avgpool1", mode="avg"),
        conv("conv4", 64),
        FlattenSpec(),
        DenseSpec(name="fc1", out_features=3),
    ))


@dataclass
class ConvBlockParams:
    conv: ConvLayerParams
    bn: BatchNormParams | None = None


@dataclass
class ModelParams:
    """Per-layer parameter entries aligned with a ``ModelSpec`` layer list."""

    entries: list = field(default_factory=list)

    def entry(self, spec: ModelSpec, name: str):
        for layer, entry in zip(spec.layers, self.entries):
            if layer.name == name:
                return entry
        raise ConfigurationError(f"no layer named {name!r}")


def init_params(spec: ModelSpec, rng: np.random.Generator, weight_scale: float = 1.0,
                dtype=np.float64) -> ModelParams:
    """He-style initialization; biases start at zero, batchnorm at identity."""
    entries = []
    shape = spec.input_shape
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            fan_in = shape[0] * layer.kernel[0] * layer.kernel[1]
            std = weight_scale * np.sqrt(2.0 / fan_in)
            kernel = rng.normal(0.0, std, size=(layer.out_channels, shape[0], *layer.kernel))
            conv = ConvLayerParams(kernel=kernel.astype(dtype),
                                   bias=np.zeros(layer.out_channels, dtype=dtype),
                                   stride=layer.stride, padding=layer.padding)
            bn = None
            if layer.batchnorm:
                c = layer.out_channels
                bn = BatchNormParams(gamma=np.ones(c, dtype=dtype),
                                     beta=np.zeros(c, dtype=dtype),
                                     mean=np.zeros(c, dtype=dtype),
                                     var=np.ones(c, dtype=dtype))
            entries.append(ConvBlockParams(conv=conv, bn=bn))
            oh, ow = conv_output_shape(shape[1], shape[2], layer.kernel, layer.stride, layer.padding)
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, PoolLayerSpec):
            entries.append(None)
            oh, ow = conv_output_shape(shape[1], shape[2], layer.window, layer.stride)
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenSpec):
            entries.append(None)
            shape = (int(np.prod(shape)),)
        else:
            fan_in = shape[0]
            std = weight_scale * np.sqrt(2.0 / fan_in)
            weights = rng.normal(0.0, std, size=(layer.out_features, fan_in))
            entries.append(DenseParams(weights=weights.astype(dtype),
                                       bias=np.zeros(layer.out_features, dtype=dtype)))
            shape = (layer.out_features,)
    return ModelParams(entries=entries)


def zero_params(spec: ModelSpec) -> ModelParams:
    params = init_params(spec, np.random.default_rng(0))
    for entry in params.entries:
        if isinstance(entry, ConvBlockParams):
            entry.conv.kernel[:] = 0.0
        elif isinstance(entry, DenseParams):
            entry.weights[:] = 0.0
    return params


def model_forward(spec: ModelSpec, params: ModelParams, x, capture: str | None = None):
    """Run the layer chain on one sample and return the raw logits.

    With ``capture`` set to a layer name, returns (logits, captured_output)
    where the captured value is that layer's post-activation output.
    """
    if len(params.entries) != len(spec.layers):
        raise ConfigurationError(
            f"params have {len(params.entries)} entries for {len(spec.layers)} layers")
    x = as_feature_map(x)
    if x.shape != spec.input_shape:
        raise ConfigurationError(f"input shape {x.shape} does not match spec {spec.input_shape}")
    captured = None
    out = x
    for layer, entry in zip(spec.layers, params.entries):
        try:
            if isinstance(layer, ConvSpec):
                out = conv2d_forward(out, entry.conv)
                if layer.batchnorm and entry.bn is not None:
                    out = batchnorm_apply(out, entry.bn)
                if layer.relu:
                    out = relu(out)
            elif isinstance(layer, PoolLayerSpec):
                out = pool2d_forward(out, layer.pool_spec())
            elif isinstance(layer, FlattenSpec):
                out = out.reshape(-1)
            else:
                out = dense_forward(out, entry)
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer {layer.name}: {exc}") from exc
        if capture is not None and layer.name == capture:
            captured = np.array(out, copy=True)
    if capture is not None:
        if captured is None:
            raise ConfigurationError(f"no layer named {capture!r}")
        return out, captured
    return out


def fold_model_batchnorm(spec: ModelSpec, params: ModelParams) -> tuple[ModelSpec, ModelParams]:
    """Fold every batchnorm into its convolution; flags are cleared in the returned spec."""
    layers = []
    entries = []
    for layer, entry in zip(spec.layers, params.entries):
        if isinstance(layer, ConvSpec) and layer.batchnorm:
            if entry.bn is None:
                raise ConfigurationError(f"layer {layer.name}: batchnorm flagged but no parameters")
            folded = fold_batchnorm(entry.conv, entry.bn)
            layers.append(replace(layer, batchnorm=False))
            entries.append(ConvBlockParams(conv=folded, bn=None))
        elif isinstance(layer, ConvSpec):
            layers.append(layer)
            entries.append(ConvBlockParams(conv=entry.conv, bn=None))
        else:
            layers.append(layer)
            entries.append(entry)
    return ModelSpec(layers=tuple(layers), input_shape=spec.input_shape,
                     class_count=spec.class_count), ModelParams(entries=entries)


FLOP_CONVENTION = "mac=1flop; conv/dense bias add counted; pooling, activation and batchnorm not counted"


def count_report(spec: ModelSpec) -> dict:
    """Parameter and FLOP totals under the documented counting convention."""
    params = 0
    flops = 0
    shape = spec.input_shape
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            n = shape[0]
            p, q = layer.kernel
            params += layer.out_channels * n * p * q + layer.out_channels
            if layer.batchnorm:
                params += 2 * layer.out_channels
            oh, ow = conv_output_shape(shape[1], shape[2], layer.kernel, layer.stride, layer.padding)
            out_elems = layer.out_channels * oh * ow
            flops += out_elems * n * p * q + out_elems
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, PoolLayerSpec):
            oh, ow = conv_output_shape(shape[1], shape[2], layer.window, layer.stride)
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenSpec):
            shape = (int(np.prod(shape)),)
        else:
            params += layer.out_features * shape[0] + layer.out_features
            flops += layer.out_features * shape[0] + layer.out_features
            shape = (layer.out_features,)
    return {"param_count": params, "flop_count": flops, "convention": FLOP_CONVENTION}


def param_arrays(spec: ModelSpec, params: ModelParams) -> dict[str, np.ndarray]:
    """Trainable arrays keyed "layer.field", in layer order."""
    arrays: dict[str, np.ndarray] = {}
    for layer, entry in zip(spec.layers, params.entries):
        if isinstance(layer, ConvSpec):
            arrays[f"{layer.name}.kernel"] = entry.conv.kernel
            arrays[f"{layer.name}.bias"] = entry.conv.bias
            if layer.batchnorm and entry.bn is not None:
                arrays[f"{layer.name}.gamma"] = entry.bn.gamma
                arrays[f"{layer.name}.beta"] = entry.bn.beta
        elif isinstance(layer, DenseSpec):
            arrays[f"{layer.name}.weights"] = entry.weights
            arrays[f"{layer.name}.bias"] = entry.bias
    return arrays


def set_param_arrays(spec: ModelSpec, params: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    """Write updated arrays back into ``params`` in place."""
    current = param_arrays(spec, params)
    for name, value in arrays.items():
        if name not in current:
            raise ConfigurationError(f"unknown parameter array {name!r}")
        current[name][...] = value
