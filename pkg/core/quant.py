"""
Simulated (fake) quantization with straight-through gradients and max-abs
calibration. Quantization is symmetric and signed; weights use per-output-channel
scales, activations a single per-tensor scale.
"""
import dataclasses
import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from core import numerics
from core.error_handler import QuantizerError
from core.numerics import Tensor

logger = logging.getLogger(__name__)

PASS_THROUGH_BITS = 16
SUPPORTED_BITS = (4, 8, 16)
SCALE_FLOOR = 1e-8
SCALE_BITS = 32

WEIGHT_TENSORS = ('wq', 'wk', 'wv', 'wo', 'w1', 'w2')
ACTIVATION_TENSORS = ('attn_in', 'attn_out', 'mlp_in', 'mlp_hidden')


def qmax_for(bits: int) -> int:
    return 2 ** (bits - 1) - 1


@dataclasses.dataclass(frozen=True)
class QuantizerSpec:
    """Bit-width, scale(s) and calibration state for one tensor"""
    bits: int
    granularity: str = 'per_tensor'
    scale: Optional[np.ndarray] = None
    ema_maxabs: Optional[np.ndarray] = None
    decay: float = 0.99
    observations: int = 0
    warmup_steps: Optional[int] = None
    zero_flagged: bool = False

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantizerError(f"unsupported bit-width {self.bits}", error_code="CONFIG_INVALID")
        if self.granularity not in ('per_tensor', 'per_channel'):
            raise QuantizerError(f"unknown granularity {self.granularity}", error_code="CONFIG_INVALID")
        if not 0.0 < self.decay < 1.0:
            raise QuantizerError(f"EMA decay must be in (0, 1), got {self.decay}", error_code="CONFIG_INVALID")

    @property
    def qmax(self) -> int:
        return qmax_for(self.bits)

    @property
    def pass_through(self) -> bool:
        return self.bits >= PASS_THROUGH_BITS

    @property
    def calibrated(self) -> bool:
        return self.pass_through or self.scale is not None

    @property
    def frozen(self) -> bool:
        return self.warmup_steps is not None and self.observations >= self.warmup_steps


def _maxabs(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    if spec.granularity == 'per_channel':
        return x.reshape(-1, x.shape[-1]).max(axis=0)
    return np.array([x.max()]) if x.size else np.zeros(1)


def _scale_from(spec: QuantizerSpec, maxabs: np.ndarray) -> Tuple[np.ndarray, bool]:
    raw = maxabs / spec.qmax
    zero = bool(np.any(raw < SCALE_FLOOR))
    return np.maximum(raw, SCALE_FLOOR).astype(np.float32), zero


def calibrate(spec: QuantizerSpec, tensor) -> QuantizerSpec:
    """
    EMA max-abs update: maxabs <- decay*maxabs + (1-decay)*max|x| (the first
    observation initializes it); scale = maxabs / qmax. Frozen specs are returned
    unchanged.
    """
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if not np.all(np.isfinite(data)):
        raise QuantizerError("calibration tensor is not finite", error_code="NON_FINITE")
    if spec.frozen:
        return spec
    current = _maxabs(spec, data)
    if spec.ema_maxabs is None:
        ema = current
    else:
        ema = spec.decay * spec.ema_maxabs.astype(np.float64) + (1.0 - spec.decay) * current
    scale, zero = _scale_from(spec, ema)
    if zero:
        logger.warning(f"all-zero calibration input at {spec.bits} bits; scale floored at {SCALE_FLOOR}")
    return dataclasses.replace(spec, scale=scale, ema_maxabs=ema.astype(np.float64),
                               observations=spec.observations + 1, zero_flagged=zero)


def calibrate_current(spec: QuantizerSpec, tensor) -> QuantizerSpec:
    """Scale from the tensor's own max-abs, no smoothing (weight quantizers)"""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    current = _maxabs(spec, data)
    scale, zero = _scale_from(spec, current)
    return dataclasses.replace(spec, scale=scale, ema_maxabs=current,
                               observations=spec.observations + 1, zero_flagged=zero)


def _quantize(x64: np.ndarray, scale64: np.ndarray, qmax: int) -> Tuple[np.ndarray, np.ndarray]:
    ratio = x64 / scale64
    in_range = (ratio >= -qmax - 1) & (ratio <= qmax)
    q = np.clip(np.rint(ratio), -qmax - 1, qmax)
    return q * scale64, in_range


def fake_quant_array(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    """clamp(round_half_even(x/scale), -qmax-1, qmax) * scale on a plain array"""
    x = np.asarray(x)
    if spec.pass_through:
        return x.copy()
    if spec.scale is None:
        raise QuantizerError(f"{spec.bits}-bit quantizer used before calibration")
    value, _ = _quantize(x.astype(np.float64), spec.scale.astype(np.float64), spec.qmax)
    return value.astype(x.dtype)


def fake_quant(spec: QuantizerSpec, x: Tensor) -> Tensor:
    """
    Fake-quantize a tensor. The backward pass is straight-through inside the clip
    range and zero where the value saturated.
    """
    if spec.pass_through:
        return x
    if spec.scale is None:
        raise QuantizerError(f"{spec.bits}-bit quantizer used before calibration")
    value, in_range = _quantize(x.data.astype(np.float64), spec.scale.astype(np.float64), spec.qmax)
    mask = in_range.astype(np.float64)

    def backward(g):
        return (g * mask,)
    return numerics.custom_op(value, (x,), backward, f"fake_quant{spec.bits}")


def ste_mask(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    """1 where the straight-through gradient passes, 0 where the input saturates"""
    if spec.pass_through:
        return np.ones_like(np.asarray(x, dtype=np.float64))
    _, in_range = _quantize(np.asarray(x, dtype=np.float64), spec.scale.astype(np.float64), spec.qmax)
    return in_range.astype(np.float64)


def scale_groups(granularity: str, out_channels: int, bits: int) -> int:
    """Number of 32-bit scales stored for one quantized tensor"""
    if bits >= PASS_THROUGH_BITS:
        return 0
    return out_channels if granularity == 'per_channel' else 1


def quantized_size_bits(param_count: int, bits: int, groups: int = 1) -> int:
    """param_count * bits plus one 32-bit scale per quantization group"""
    if param_count < 0:
        raise QuantizerError(f"param_count must be >= 0, got {param_count}", error_code="CONFIG_INVALID")
    return int(param_count) * int(bits) + SCALE_BITS * int(groups)


# ===========================
# QUANTIZER BANK
# ===========================

BankKey = Tuple[int, str, int]


class QuantizerBank:
    """
    One QuantizerSpec per (layer, tensor, bit-width). Weight specs hold
    per-output-channel scales of the full supernet weight; activation specs are
    EMA-calibrated during warmup and frozen afterwards.
    """

    def __init__(self, n_layers: int, bits_menu: Iterable[int], decay: float = 0.99,
                 warmup_steps: Optional[int] = 200):
        self.n_layers = n_layers
        self.bits_menu = tuple(sorted(set(bits_menu)))
        self.decay = decay
        self.warmup_steps = warmup_steps
        self.specs: Dict[BankKey, QuantizerSpec] = {}
        for layer in range(n_layers):
            for bits in self.bits_menu:
                for name in WEIGHT_TENSORS:
                    self.specs[(layer, name, bits)] = QuantizerSpec(bits, 'per_channel', decay=decay)
                for name in ACTIVATION_TENSORS:
                    self.specs[(layer, name, bits)] = QuantizerSpec(
                        bits, 'per_tensor', decay=decay, warmup_steps=warmup_steps)

    def get(self, layer: int, name: str, bits: int) -> QuantizerSpec:
        try:
            return self.specs[(layer, name, bits)]
        except KeyError:
            if bits >= PASS_THROUGH_BITS and 0 <= layer < self.n_layers:
                return QuantizerSpec(PASS_THROUGH_BITS)
            raise QuantizerError(f"no quantizer for layer {layer} tensor {name} at {bits} bits",
                                 error_code="CONFIG_INVALID")

    def require(self, layer: int, name: str, bits: int) -> QuantizerSpec:
        spec = self.get(layer, name, bits)
        if not spec.calibrated:
            raise QuantizerError(f"quantizer layer={layer} tensor={name} bits={bits} is uncalibrated",
                                 details={'layer': layer, 'tensor': name, 'bits': bits})
        return spec

    def calibrate_activation(self, layer: int, name: str, bits: int, x: Tensor) -> QuantizerSpec:
        spec = self.get(layer, name, bits)
        if not spec.pass_through:
            spec = calibrate(spec, x)
            self.specs[(layer, name, bits)] = spec
        return spec

    def refresh_weights(self, weights: Dict[Tuple[int, str], np.ndarray]):
        """Recompute every weight scale from the current full weights"""
        for (layer, name), w in weights.items():
            for bits in self.bits_menu:
                if bits >= PASS_THROUGH_BITS:
                    continue
                key = (layer, name, bits)
                self.specs[key] = calibrate_current(self.specs[key], w)

    def activation_ready(self, layer: int, bits: int) -> bool:
        return all(self.get(layer, name, bits).calibrated for name in ACTIVATION_TENSORS)

    def is_calibrated(self, config) -> bool:
        """Every quantizer an active layer of `config` reads has a scale"""
        for layer, choice in enumerate(config.layers):
            if not choice.m:
                continue
            if not self.activation_ready(layer, choice.ba):
                return False
            if not all(self.get(layer, name, choice.bw).calibrated for name in WEIGHT_TENSORS):
                return False
        return True

    def state_dict(self) -> List[Dict]:
        entries = []
        for (layer, name, bits) in sorted(self.specs):
            spec = self.specs[(layer, name, bits)]
            entries.append({
                'layer': layer,
                'tensor': name,
                'bits': bits,
                'granularity': spec.granularity,
                'scale': None if spec.scale is None else [float(s) for s in spec.scale],
                'ema_maxabs': None if spec.ema_maxabs is None else [float(s) for s in spec.ema_maxabs],
                'decay': spec.decay,
                'observations': spec.observations,
                'warmup_steps': spec.warmup_steps,
                'zero_flagged': spec.zero_flagged,
            })
        return entries

    def load_state_dict(self, entries: List[Dict]):
        for e in entries:
            self.specs[(e['layer'], e['tensor'], e['bits'])] = QuantizerSpec(
                bits=e['bits'],
                granularity=e['granularity'],
                scale=None if e['scale'] is None else np.array(e['scale'], dtype=np.float32),
                ema_maxabs=None if e['ema_maxabs'] is None else np.array(e['ema_maxabs'], dtype=np.float64),
                decay=e['decay'],
                observations=e['observations'],
                warmup_steps=e['warmup_steps'],
                zero_flagged=e['zero_flagged'],
            )


def slice_weight_spec(spec: QuantizerSpec, count: int) -> QuantizerSpec:
    """Prefix of a per-channel spec, for output-sliced weights"""
    if spec.granularity != 'per_channel' or spec.scale is None:
        return spec
    ema = None if spec.ema_maxabs is None else spec.ema_maxabs[:count].copy()
    return dataclasses.replace(spec, scale=spec.scale[:count].copy(), ema_maxabs=ema)
