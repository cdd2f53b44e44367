import numpy as np
import pytest

from shiftadd_dvs.model import (
    ConvSpec,
    DenseSpec,
    FlattenSpec,
    ModelSpec,
    PoolLayerSpec,
    init_params,
)


def make_small_spec(rng: np.random.Generator, batchnorm: bool = False,
                    max_channels: int = 3) -> ModelSpec:
    """Random tiny model: 1-2 conv blocks, optional pool, flatten, 3-way dense."""
    in_c = int(rng.integers(1, max_channels + 1))
    h = int(rng.integers(5, 10))
    w = int(rng.integers(5, 10))
    layers = []
    shape = (in_c, h, w)
    blocks = int(rng.integers(1, 3))
    for i in range(blocks):
        k = int(rng.integers(1, min(4, shape[1], shape[2]) + 1))
        pad = int(rng.integers(0, 2)) if k > 1 else 0
        out_c = int(rng.integers(1, 5))
        layers.append(ConvSpec(name=f"conv{i + 1}", out_channels=out_c, kernel=(k, k),
                               stride=1, padding=pad, relu=bool(rng.integers(0, 2)),
                               batchnorm=batchnorm))
        oh = shape[1] + 2 * pad - k + 1
        ow = shape[2] + 2 * pad - k + 1
        shape = (out_c, oh, ow)
        if shape[1] >= 2 and shape[2] >= 2 and rng.integers(0, 2):
            mode = "max" if rng.integers(0, 2) else "avg"
            layers.append(PoolLayerSpec(name=f"pool{i + 1}", mode=mode,
                                        window=(2, 2), stride=2))
            shape = (shape[0], (shape[1] - 2) // 2 + 1, (shape[2] - 2) // 2 + 1)
    layers.append(FlattenSpec())
    layers.append(DenseSpec(name="head", out_features=3))
    return ModelSpec(layers=tuple(layers), input_shape=(in_c, h, w), class_count=3)


def make_small_model(rng: np.random.Generator, batchnorm: bool = False,
                     weight_scale: float = 1.0):
    spec = make_small_spec(rng, batchnorm=batchnorm)
    params = init_params(spec, rng, weight_scale=weight_scale)
    return spec, params


def single_conv_spec(in_c, h, w, out_c, kernel, stride=1, padding=0,
                     use_relu=False, batchnorm=False) -> ModelSpec:
    oh = (h + 2 * padding - kernel[0]) // stride + 1
    ow = (w + 2 * padding - kernel[1]) // stride + 1
    return ModelSpec(layers=(
        ConvSpec(name="conv1", out_channels=out_c, kernel=kernel, stride=stride,
                 padding=padding, relu=use_relu, batchnorm=batchnorm),
        FlattenSpec(),
        DenseSpec(name="head", out_features=3),
    ), input_shape=(in_c, h, w), class_count=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
