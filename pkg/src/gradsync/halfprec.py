"""Software emulation of IEEE-754 binary16, plus loss scaling.

FP16 tensors are kept as uint16 bit patterns end to end; widening and
narrowing are explicit calls, so none of the precision behaviour depends
on hardware half support.  Narrowing rounds to nearest-even, overflows to
signed infinity, flushes magnitudes below 2**-25 to signed zero, and
canonicalizes every NaN to one quiet pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SMALLEST_SUBNORMAL",
    "FLUSH_BOUND",
    "MAX_FINITE",
    "CANONICAL_NAN",
    "f32_to_f16",
    "f16_to_f32",
    "quantize_tensor",
    "describe_half",
    "LossScale",
    "apply_loss_scale",
    "unscale_gradients",
]

#: Smallest positive binary16 value, 2**-24.
SMALLEST_SUBNORMAL = 2.0 ** -24
#: Magnitudes strictly below this become signed zero when narrowing.
FLUSH_BOUND = 2.0 ** -25
#: Largest finite binary16 value.
MAX_FINITE = 65504.0
#: Every NaN narrows to this single quiet pattern.
CANONICAL_NAN = np.uint16(0x7E00)


def _narrow_bits(f: np.ndarray) -> np.ndarray:
    """Map float32 bit patterns (uint32) to binary16 bit patterns (uint16)."""
    f = f.astype(np.uint32, copy=False)
    h_sgn = (f >> 16) & np.uint32(0x8000)
    f_exp = f & np.uint32(0x7F800000)
    f_man = f & np.uint32(0x007FFFFF)

    special = f_exp == 0x7F800000
    is_nan = special & (f_man != 0)
    # Exponent >= 16 after narrowing: rounds past the largest finite half.
    too_big = (f_exp >= 0x47800000) & ~special
    normal = (f_exp >= 0x38800000) & (f_exp < 0x47800000)
    # Down to 2**-25 the value lands in (or rounds into) the subnormal range.
    subnormal = (f_exp >= 0x33000000) & (f_exp < 0x38800000)

    # Normal path: exponent rebias, then round-to-nearest-even on the
    # mantissa.  Skipping the increment exactly when the trailing bits are
    # 0b01_0000_0000_0000 implements ties-to-even; a mantissa carry rolls
    # into the exponent and can legitimately produce the infinity pattern.
    h_exp = (f_exp - np.uint32(0x38000000)) >> 13
    man = np.where((f_man & 0x3FFF) != 0x1000, f_man + 0x1000, f_man)
    h_normal = h_sgn + h_exp + (man >> 13)

    # Subnormal path: shift the significand (with its hidden bit) into
    # position, folding everything shifted out into a sticky bit so the
    # tie test still sees it, then round the same way.
    f_bexp = f_exp >> 23
    shift = np.clip(np.int64(113) - f_bexp.astype(np.int64), 0, 31).astype(np.uint32)
    sig = np.uint32(0x00800000) | f_man
    lost = sig & ((np.uint32(1) << shift) - np.uint32(1))
    sig = (sig >> shift) | (lost != 0).astype(np.uint32)
    sig = np.where((sig & 0x3FFF) != 0x1000, sig + 0x1000, sig)
    h_subnormal = h_sgn + (sig >> 13)

    out = np.select(
        [is_nan, special, too_big, normal, subnormal],
        [
            np.uint32(CANONICAL_NAN),
            h_sgn + np.uint32(0x7C00),
            h_sgn + np.uint32(0x7C00),
            h_normal,
            h_subnormal,
        ],
        default=h_sgn,  # |x| < 2**-25 flushes to signed zero
    )
    return out.astype(np.uint16)


def _widen_bits(h: np.ndarray) -> np.ndarray:
    """Map binary16 bit patterns (uint16) to float32 values, exactly."""
    h = h.astype(np.uint32, copy=False)
    negative = (h & 0x8000) != 0
    exp = (h >> 10) & np.uint32(0x1F)
    man = h & np.uint32(0x3FF)

    # Both branches are ldexp(integer, e) with the integer < 2**11, so the
    # float32 result is exact: normals are (1024+man) * 2**(exp-25),
    # subnormals man * 2**-24.
    m = np.where(exp > 0, man + np.uint32(1024), man)
    e = np.where(exp > 0, exp.astype(np.int32), np.int32(1)) - np.int32(25)
    mag = np.ldexp(m.astype(np.float32), e)
    val = np.where(negative, -mag, mag).astype(np.float32)

    inf = np.where(negative, np.float32(-np.inf), np.float32(np.inf))
    val = np.where(exp == 31, np.where(man == 0, inf, np.float32(np.nan)), val)
    return val.astype(np.float32, copy=False)


def f32_to_f16(values) -> np.ndarray | np.uint16:
    """Narrow float32 values to binary16 bit patterns.

    Args:
        values: scalar or array; anything not already float32 is cast first.

    Returns:
        uint16 bit patterns with the input's shape (a scalar input gives a
        numpy uint16 scalar).
    """
    a = np.asarray(values, dtype=np.float32)
    flat = np.ascontiguousarray(a).reshape(-1).view(np.uint32)
    out = _narrow_bits(flat).reshape(a.shape)
    return out[()] if a.ndim == 0 else out


def f16_to_f32(bits) -> np.ndarray | np.float32:
    """Widen binary16 bit patterns (uint16) to float32 values, exactly."""
    a = np.asarray(bits)
    if a.dtype != np.uint16:
        if not np.issubdtype(a.dtype, np.integer):
            raise TypeError(f"expected uint16 bit patterns, got {a.dtype}")
        a = a.astype(np.uint16)
    out = _widen_bits(a.reshape(-1)).reshape(a.shape)
    return out[()] if a.ndim == 0 else out


def quantize_tensor(values) -> np.ndarray | np.float32:
    """Round-trip float32 data through binary16 (narrow, then widen)."""
    return f16_to_f32(f32_to_f16(values))


_CATEGORIES = ("zero", "subnormal", "normal", "inf", "nan")


def describe_half(bits: int) -> dict:
    """Decompose one binary16 pattern into its fields.

    Returns a dict with the raw pattern, sign, exponent and mantissa
    fields, the category name, and the exact float32 value.
    """
    b = int(bits)
    if not 0 <= b <= 0xFFFF:
        raise ValueError(f"not a 16-bit pattern: {bits!r}")
    exp = (b >> 10) & 0x1F
    man = b & 0x3FF
    if exp == 31:
        category = "nan" if man else "inf"
    elif exp == 0:
        category = "subnormal" if man else "zero"
    else:
        category = "normal"
    return {
        "bits": f"0x{b:04X}",
        "sign": (b >> 15) & 1,
        "exponent_field": exp,
        "mantissa_field": man,
        "category": category,
        "value": float(f16_to_f32(np.uint16(b))),
    }


@dataclass
class LossScale:
    """Loss-scaling state for the mixed-precision pipeline.

    The scale multiplies the loss before backward and divides gradients
    after, pushing small gradients above the binary16 flush bound.  Under
    the dynamic policy a non-finite gradient skips the step and halves the
    scale; ``growth_interval`` consecutive clean steps double it.
    Power-of-two scales keep both directions exact in float32.
    """

    scale: float = 2.0 ** 10
    policy: str = "dynamic"
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 200
    clean_steps: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"loss scale must stay positive, got {self.scale}")
        if self.policy not in ("fixed", "dynamic"):
            raise ValueError(f"unknown loss-scale policy {self.policy!r}")
        if self.growth_factor <= 1 or not 0 < self.backoff_factor < 1:
            raise ValueError("growth factor must exceed 1 and backoff lie in (0, 1)")
        if self.growth_interval < 1:
            raise ValueError("growth interval must be at least 1")

    def update(self, grads) -> bool:
        """Inspect this step's gradients and adjust the scale.

        Args:
            grads: one array or an iterable of arrays (still scaled).

        Returns:
            True when the step may be applied; False when it must be
            skipped (non-finite gradients under the dynamic policy, which
            also backs the scale off).
        """
        arrays = [grads] if isinstance(grads, np.ndarray) else list(grads)
        finite = all(np.isfinite(g).all() for g in arrays)
        if self.policy == "fixed":
            return finite
        if not finite:
            self.scale *= self.backoff_factor
            self.clean_steps = 0
            return False
        self.clean_steps += 1
        if self.clean_steps >= self.growth_interval:
            self.scale *= self.growth_factor
            self.clean_steps = 0
        return True


def apply_loss_scale(loss: float, s) -> float:
    """Multiply the loss by the current scale (use before backward)."""
    scale = s.scale if isinstance(s, LossScale) else float(s)
    return loss * scale


def unscale_gradients(g: np.ndarray, s) -> np.ndarray:
    """Divide gradients by the scale (a LossScale or a plain number),
    preserving float32."""
    scale = s.scale if isinstance(s, LossScale) else float(s)
    return np.asarray(g, dtype=np.float32) / np.float32(scale)
