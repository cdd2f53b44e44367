"""Multiplier-free integer inference.

Every multiply-accumulate is realized as signed shift-and-accumulate: an
activation held as a signed integer at scale 2^f_a is shifted left by
(frac_bits + int_bits - magnitude) for each stored term of the weight, so the
accumulator holds the exact product at scale 2^(f_a + frac_bits). Layers
requantize back to the activation grid with round-half-to-even and symmetric
saturation at the 32-bit boundary.

The functions listed in ``DATA_PATH_FUNCTIONS`` form the integer data path;
they intentionally contain no multiplication operator (a unit test audits
their AST), so the only data-dependent operations are shifts, adds and
compares. Input conditioning (``quantize_activation``) is the floating-point
boundary and sits outside that contract.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RangeError, SaturationError
from .model import ConvSpec, FlattenSpec, PoolLayerSpec
from .quantize import QuantizedLayer, QuantizedModel, ShiftQuantParam
from .encoding import decoded_model

ACT_LIMIT = (1 << 31) - 1
ACC_LIMIT = 1 << 63

# Names audited for absence of multiplication (see tests/test_engine.py).
DATA_PATH_FUNCTIONS = (
    "shift_add_mul",
    "_rshift_round_half_even",
    "_saturate",
    "_requantize",
    "_conv_int",
    "_pool_int",
    "_dense_int",
    "_forward_arrays",
)


@dataclass(frozen=True)
class FixedActivation:
    """A real number stored as value / 2^f_a."""

    value: int
    f_a: int

    def real(self) -> float:
        return self.value / float(2 ** self.f_a)


def quantize_activation(x: float, f_a: int) -> FixedActivation:
    """Round x * 2^f_a half-to-even onto the activation grid."""
    scaled = float(np.rint(float(x) * float(2 ** f_a)))
    if not np.isfinite(scaled) or abs(scaled) > ACT_LIMIT:
        raise RangeError(f"activation {x!r} does not fit 32 bits at f_a={f_a}")
    return FixedActivation(value=int(scaled), f_a=f_a)


def quantize_frame(frame: np.ndarray, f_a: int) -> np.ndarray:
    """Vector form of quantize_activation for a whole feature map."""
    scaled = np.rint(np.asarray(frame, dtype=np.float64) * float(2 ** f_a))
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) > ACT_LIMIT):
        raise RangeError(f"frame does not fit 32 bits at f_a={f_a}")
    return scaled.astype(np.int64)


def shift_add_mul(act, q: ShiftQuantParam, frac_bits: int = 16, int_bits: int = 2) -> int:
    """Contribution of one (activation, weight) pair: sign * sum(act << (align - s)).

    Exactly equals act * (dequantized weight * 2^frac_bits) as integers.
    """
    value = act.value if isinstance(act, FixedActivation) else int(act)
    if q.sign == 0:
        return 0
    align = frac_bits + int_bits
    acc = 0
    for s in q.shifts:
        acc += value << (align - s)
    if q.sign < 0:
        return -acc
    return acc


def _rshift_round_half_even(values: np.ndarray, bits: int) -> np.ndarray:
    if bits == 0:
        return values
    floor = values >> bits
    remainder = values & ((1 << bits) - 1)
    half = 1 << (bits - 1)
    round_up = (remainder > half) | ((remainder == half) & ((floor & 1) == 1))
    return floor + round_up


def _saturate(values: np.ndarray) -> tuple[np.ndarray, int]:
    over = values > ACT_LIMIT
    under = values < -ACT_LIMIT
    count = int(np.count_nonzero(over)) + int(np.count_nonzero(under))
    if count:
        values = np.where(over, ACT_LIMIT, values)
        values = np.where(under, -ACT_LIMIT, values)
    return values, count


@dataclass
class _TermPlan:
    """Per-layer shift/sign tables, one slot per term index."""

    shift: list[np.ndarray]      # left-shift amounts, 0 where the term is absent
    positive: list[np.ndarray]   # mask: term present with sign +1
    negative: list[np.ndarray]   # mask: term present with sign -1
    bias_acc: np.ndarray         # biases expanded to accumulator scale


def _build_plan(entry: QuantizedLayer, frac_bits: int, int_bits: int, f_a: int) -> _TermPlan:
    align = frac_bits + int_bits
    shape = entry.shape
    terms = max((p.term_count for p in entry.weights), default=0)
    shift, positive, negative = [], [], []
    for t in range(terms):
        sh = np.zeros(shape, dtype=np.int64)
        pos = np.zeros(shape, dtype=bool)
        neg = np.zeros(shape, dtype=bool)
        flat_sh = sh.reshape(-1)
        flat_pos = pos.reshape(-1)
        flat_neg = neg.reshape(-1)
        for i, p in enumerate(entry.weights):
            if t < p.term_count:
                amount = align - p.shifts[t]
                if amount < 0:
                    raise ConfigurationError(
                        f"layer {entry.name}: shift magnitude {p.shifts[t]} exceeds alignment {align}")
                flat_sh[i] = amount
                if p.sign > 0:
                    flat_pos[i] = True
                else:
                    flat_neg[i] = True
        shift.append(sh)
        positive.append(pos)
        negative.append(neg)
    bias_acc = np.zeros(shape[0], dtype=np.int64)
    for i, p in enumerate(entry.biases):
        acc = 0
        for s in p.shifts:
            amount = f_a + align - s
            if amount < 0:
                raise ConfigurationError(
                    f"layer {entry.name}: bias magnitude {s} exceeds alignment {f_a + align}")
            acc += 1 << amount
        bias_acc[i] = p.sign * acc
    return _TermPlan(shift=shift, positive=positive, negative=negative, bias_acc=bias_acc)


@dataclass
class _StageConfig:
    kind: str
    name: str
    plan: _TermPlan | None = None
    stride: int = 1
    padding: int = 0
    relu: bool = False
    window: tuple[int, int] = (1, 1)
    pool_mode: str = "max"
    avg_shift: int = 0
    out_hw: tuple[int, int] = (1, 1)


@dataclass
class EngineResult:
    logits: np.ndarray
    argmax: int
    saturations: dict[str, int] = field(default_factory=dict)

    @property
    def total_saturations(self) -> int:
        return sum(self.saturations.values())


class ShiftAddEngine:
    """Immutable integer inference engine built from a quantized model.

    ``mode`` is "release" (saturate and count) or "diagnostic" (raise on the
    first saturation). Construction verifies with a worst-case bound that no
    layer accumulator can overflow 64 bits for inputs within ``input_bound``.
    """

    def __init__(self, qmodel: QuantizedModel, f_a: int | None = None,
                 mode: str = "release", input_bound: float = 8.0):
        if mode not in ("release", "diagnostic"):
            raise ConfigurationError(f"mode must be 'release' or 'diagnostic', got {mode}")
        if any(e is not None and e.encoding is not None for e in qmodel.entries):
            qmodel = decoded_model(qmodel)
        self.qmodel = qmodel
        self.spec = qmodel.spec
        self.f_a = int(qmodel.f_a if f_a is None else f_a)
        if self.f_a < 0 or self.f_a > 24:
            raise ConfigurationError(f"f_a must be in [0, 24], got {self.f_a}")
        self.frac_bits = qmodel.frac_bits
        self.int_bits = qmodel.int_bits
        self.mode = mode
        self.input_bound = float(input_bound)
        self.stages = self._build_stages()
        self._check_overflow_bound()

    # -- construction ------------------------------------------------------

    def _build_stages(self) -> list[_StageConfig]:
        stages = []
        shape = self.spec.input_shape
        for layer, entry in zip(self.spec.layers, self.qmodel.entries):
            if isinstance(layer, ConvSpec):
                if layer.batchnorm:
                    raise ConfigurationError(
                        f"layer {layer.name}: fold batchnorm before integer inference")
                p, q = layer.kernel
                oh = (shape[1] + 2 * layer.padding - p) // layer.stride + 1
                ow = (shape[2] + 2 * layer.padding - q) // layer.stride + 1
                stages.append(_StageConfig(
                    kind="conv", name=layer.name,
                    plan=_build_plan(entry, self.frac_bits, self.int_bits, self.f_a),
                    stride=layer.stride, padding=layer.padding, relu=layer.relu,
                    window=(p, q), out_hw=(oh, ow)))
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, PoolLayerSpec):
                p, q = layer.window
                area = p * q
                avg_shift = 0
                if layer.mode == "avg":
                    avg_shift = area.bit_length() - 1
                    if (1 << avg_shift) != area:
                        raise ConfigurationError(
                            f"layer {layer.name}: integer average pooling needs a power-of-two "
                            f"window area, got {p}x{q}")
                oh = (shape[1] - p) // layer.stride + 1
                ow = (shape[2] - q) // layer.stride + 1
                stages.append(_StageConfig(
                    kind="pool", name=layer.name, stride=layer.stride,
                    window=(p, q), pool_mode=layer.mode, avg_shift=avg_shift,
                    out_hw=(oh, ow)))
                shape = (shape[0], oh, ow)
            elif isinstance(layer, FlattenSpec):
                stages.append(_StageConfig(kind="flatten", name=layer.name))
                shape = (int(np.prod(shape)),)
            else:
                stages.append(_StageConfig(
                    kind="dense", name=layer.name,
                    plan=_build_plan(entry, self.frac_bits, self.int_bits, self.f_a)))
                shape = (layer.out_features,)
        return stages

    def _check_overflow_bound(self) -> None:
        act_bound = int(round(self.input_bound * 2 ** self.f_a)) + 1
        align = self.frac_bits + self.int_bits
        for stage, entry in zip(self.stages, self.qmodel.entries):
            if stage.kind in ("conv", "dense"):
                worst = 0
                if stage.kind == "conv":
                    m = entry.shape[0]
                    per_out = len(entry.weights) // m
                else:
                    m = entry.shape[0]
                    per_out = entry.shape[1]
                weight_mag = max((sum(1 << (align - s) for s in p.shifts)
                                  for p in entry.weights), default=0)
                worst = per_out * act_bound * weight_mag
                worst += max((abs(int(b)) for b in stage.plan.bias_acc.tolist()), default=0)
                if worst >= ACC_LIMIT:
                    raise ConfigurationError(
                        f"layer {stage.name}: worst-case accumulator {worst} would overflow "
                        f"64 bits for inputs bounded by {self.input_bound}")
                act_bound = min((worst >> self.frac_bits) + 1, ACT_LIMIT)

    # -- integer data path (multiplication-free; audited) -------------------

    def _requantize(self, acc: np.ndarray, stats: dict, name: str) -> np.ndarray:
        out = _rshift_round_half_even(acc, self.frac_bits)
        out, clipped = _saturate(out)
        if clipped:
            if self.mode == "diagnostic":
                raise SaturationError(f"layer {name}: {clipped} saturated values")
            stats[name] = stats.get(name, 0) + clipped
        return out

    def _conv_int(self, x: np.ndarray, stage: _StageConfig, stats: dict) -> np.ndarray:
        plan = stage.plan
        p, q = stage.window
        pad = stage.padding
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (p, q), axis=(1, 2))
        win = win[:, ::stage.stride, ::stage.stride]
        oh, ow = stage.out_hw
        win = win[:, :oh, :ow]
        # win: (N, OH, OW, P, Q); tables: (M, N, P, Q)
        win_b = win[None, :, :, :, :, :]
        acc = np.broadcast_to(plan.bias_acc[:, None, None], (len(plan.bias_acc), oh, ow)).copy()
        for t in range(len(plan.shift)):
            shift_t = plan.shift[t][:, :, None, None, :, :]
            shifted = np.left_shift(win_b, shift_t)
            pos = plan.positive[t][:, :, None, None, :, :]
            neg = plan.negative[t][:, :, None, None, :, :]
            acc += np.sum(shifted, axis=(1, 4, 5), where=np.broadcast_to(pos, shifted.shape))
            acc -= np.sum(shifted, axis=(1, 4, 5), where=np.broadcast_to(neg, shifted.shape))
        out = self._requantize(acc, stats, stage.name)
        if stage.relu:
            out = np.maximum(out, 0)
        return out

    def _pool_int(self, x: np.ndarray, stage: _StageConfig) -> np.ndarray:
        p, q = stage.window
        s = stage.stride
        oh, ow = stage.out_hw
        if stage.pool_mode == "max":
            out = np.full((x.shape[0], oh, ow), np.iinfo(np.int64).min, dtype=np.int64)
            for pi in range(p):
                for qi in range(q):
                    np.maximum(out, x[:, pi::s, qi::s][:, :oh, :ow], out=out)
            return out
        acc = np.zeros((x.shape[0], oh, ow), dtype=np.int64)
        for pi in range(p):
            for qi in range(q):
                acc += x[:, pi::s, qi::s][:, :oh, :ow]
        half = 1 << (stage.avg_shift - 1) if stage.avg_shift else 0
        return (acc + half) >> stage.avg_shift

    def _dense_int(self, x: np.ndarray, stage: _StageConfig, stats: dict) -> np.ndarray:
        plan = stage.plan
        acc = plan.bias_acc.copy()
        xb = x[None, :]
        for t in range(len(plan.shift)):
            shifted = np.left_shift(xb, plan.shift[t])
            acc += np.sum(shifted, axis=1, where=plan.positive[t])
            acc -= np.sum(shifted, axis=1, where=plan.negative[t])
        return self._requantize(acc, stats, stage.name)

    def _forward_arrays(self, x: np.ndarray, stats: dict) -> np.ndarray:
        out = x
        for stage in self.stages:
            if stage.kind == "conv":
                out = self._conv_int(out, stage, stats)
            elif stage.kind == "pool":
                out = self._pool_int(out, stage)
            elif stage.kind == "flatten":
                out = out.reshape(-1)
            else:
                out = self._dense_int(out, stage, stats)
        return out

    # -- public API ---------------------------------------------------------

    def layer_forward(self, name: str, x_int: np.ndarray) -> tuple[np.ndarray, int]:
        """Run one named layer on an integer tensor; returns (output, saturations).

        Debug/verification surface: the same shift-add, requantization and
        pooling arithmetic the full forward uses, one stage at a time.
        """
        x_int = np.asarray(x_int, dtype=np.int64)
        stats: dict[str, int] = {}
        for stage in self.stages:
            if stage.name != name:
                continue
            if stage.kind == "conv":
                out = self._conv_int(x_int, stage, stats)
            elif stage.kind == "pool":
                out = self._pool_int(x_int, stage)
            elif stage.kind == "flatten":
                out = x_int.reshape(-1)
            else:
                out = self._dense_int(x_int.reshape(-1), stage, stats)
            return out, stats.get(name, 0)
        raise ConfigurationError(f"no layer named {name!r}")

    def forward_integer(self, frame_int: np.ndarray) -> EngineResult:
        """Run on an already-conditioned int64 frame."""
        frame_int = np.asarray(frame_int, dtype=np.int64)
        if frame_int.shape != self.spec.input_shape:
            raise ConfigurationError(
                f"frame shape {frame_int.shape} does not match spec {self.spec.input_shape}")
        stats: dict[str, int] = {}
        logits = self._forward_arrays(frame_int, stats)
        return EngineResult(logits=logits, argmax=int(np.argmax(logits)), saturations=stats)

    def forward(self, frame: np.ndarray) -> EngineResult:
        """Condition a float frame onto the activation grid and run it."""
        return self.forward_integer(quantize_frame(frame, self.f_a))


def quantized_model_forward(q: QuantizedModel, frame: np.ndarray,
                            f_a: int | None = None, mode: str = "release") -> EngineResult:
    """One-shot convenience wrapper around ShiftAddEngine."""
    return ShiftAddEngine(q, f_a=f_a, mode=mode).forward(frame)
