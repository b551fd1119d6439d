"""Tensorwise asymmetric uniform quantization.

Everything here is per-tensor with a dynamic (min, max) calibration on the
tensor being quantized. Rounding is half-away-from-zero and is computed
exactly, not approximately: the scale is rounded *down* to a value with
enough spare mantissa bits that every grid level ``scale * j`` and every
rounding boundary ``scale * (j + 1/2)`` is representable in the tensor's
dtype. That makes ``fake_quant`` exactly idempotent and lets the grid be
reproduced bit-for-bit elsewhere.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

import torch

SUPPORTED_BITS = (2, 4, 8)

# |2j +- 1| <= 2 * 2^8 + 3 needs 10 bits.
_RESERVED_MANTISSA_BITS = 10


class QuantizationError(ValueError):
    """Raised for invalid quantization inputs (non-finite values, bad codes)."""


class QuantMode(str, enum.Enum):
    SIMQUANT = "simquant"
    NOISEQUANT = "noisequant"
    NONE = "none"


@dataclass(frozen=True)
class QuantScheme:
    """Weight/activation bitwidths plus how quantization is simulated."""

    weight_bits: int = 8
    act_bits: int = 8
    mode: QuantMode = QuantMode.SIMQUANT
    granularity: str = "per_tensor"

    def __post_init__(self):
        object.__setattr__(self, "mode", QuantMode(self.mode))
        if self.weight_bits not in SUPPORTED_BITS or self.act_bits not in SUPPORTED_BITS:
            raise ValueError(
                f"bitwidths must be in {SUPPORTED_BITS}, got W{self.weight_bits}/A{self.act_bits}"
            )
        if self.granularity != "per_tensor":
            raise ValueError("only per_tensor granularity is supported")

    @property
    def label(self) -> str:
        return f"W{self.weight_bits}/A{self.act_bits}"

    @property
    def tag(self) -> str:
        return f"W{self.weight_bits}A{self.act_bits}"

    @property
    def enabled(self) -> bool:
        return self.mode is not QuantMode.NONE

    def with_mode(self, mode) -> "QuantScheme":
        return QuantScheme(self.weight_bits, self.act_bits, QuantMode(mode), self.granularity)

    @classmethod
    def parse(cls, tag: str, mode="simquant") -> "QuantScheme":
        """Parse ``"W4A8"`` / ``"W4/A8"`` style tags."""
        t = tag.strip().upper().replace("/", "")
        if not (t.startswith("W") and "A" in t):
            raise ValueError(f"bad scheme tag {tag!r}")
        w, a = t[1:].split("A", 1)
        try:
            return cls(int(w), int(a), QuantMode(mode))
        except ValueError as exc:
            raise ValueError(f"bad scheme tag {tag!r}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "mode": self.mode.value,
            "granularity": self.granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(d["weight_bits"], d["act_bits"], QuantMode(d["mode"]), d.get("granularity", "per_tensor"))


FLOAT_SCHEME = QuantScheme(8, 8, QuantMode.NONE)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    degenerate: bool = False

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def __post_init__(self):
        if self.degenerate:
            return
        if not self.scale > 0:
            raise QuantizationError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise QuantizationError(f"zero_point {self.zero_point} outside [0, {self.qmax}]")


class Range(NamedTuple):
    lo: float
    hi: float
    degenerate: bool


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Elementwise round-half-away-from-zero (torch.round is half-to-even)."""
    t = torch.trunc(x)
    return t + torch.sign(x) * (torch.abs(x - t) >= 0.5).to(x.dtype)


def _round_half_away_exact(f: Fraction) -> int:
    n = math.floor(abs(f) + Fraction(1, 2))
    return n if f >= 0 else -n


def nudge_range(lo: float, hi: float) -> Range:
    """Widen ``[lo, hi]`` so it contains 0.0; flag constant ranges."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise QuantizationError(f"non-finite range ({lo}, {hi})")
    if lo > hi:
        raise QuantizationError(f"empty range ({lo}, {hi})")
    if lo == hi:
        return Range(lo, hi, True)
    return Range(min(lo, 0.0), max(hi, 0.0), False)


def _scale_mantissa_bits(dtype: torch.dtype) -> int:
    significand = 1 - round(math.log2(torch.finfo(dtype).eps))
    return significand - _RESERVED_MANTISSA_BITS


def _round_down_significant(f: Fraction, bits: int) -> float:
    """Largest float with ``bits`` significant bits that is <= f (f > 0)."""
    e = f.numerator.bit_length() - f.denominator.bit_length()
    if Fraction(2) ** e > f:
        e -= 1
    # now 2^e <= f < 2^(e+1)
    shift = e - bits + 1
    q = math.floor(f / Fraction(2) ** shift)
    return math.ldexp(q, shift)


def compute_qparams(lo: float, hi: float, bits: int, dtype: torch.dtype = torch.float64) -> QuantParams:
    """Scale/zero-point for an already nudged range.

    ``scale = (hi - lo) / (2^bits - 1)`` rounded down to the representable
    grid for ``dtype``; ``zero_point = round(-lo / scale)`` clamped to the
    code range. Ranges too narrow for ``dtype`` to resolve are treated like
    constant tensors.
    """
    if bits not in SUPPORTED_BITS:
        raise QuantizationError(f"bits must be in {SUPPORTED_BITS}, got {bits}")
    n = (1 << bits) - 1
    if lo == hi:
        return QuantParams(0.0, 0, bits, degenerate=True)
    width = Fraction(hi) - Fraction(lo)
    scale = _round_down_significant(width / n, _scale_mantissa_bits(dtype))
    finfo = torch.finfo(dtype)
    if scale < finfo.tiny * 2.0**_RESERVED_MANTISSA_BITS:
        return QuantParams(0.0, 0, bits, degenerate=True)
    if scale * 2.0 ** (bits + 2) > finfo.max:
        raise QuantizationError(f"range ({lo}, {hi}) too wide for {dtype}")
    zp = _round_half_away_exact(-Fraction(lo) / Fraction(scale))
    return QuantParams(scale, min(max(zp, 0), n), bits)


def calibrate(x: torch.Tensor, bits: int) -> QuantParams:
    """Dynamic per-tensor calibration from the current values of ``x``."""
    if x.numel() == 0:
        return QuantParams(0.0, 0, bits, degenerate=True)
    xd = x.detach()
    lo, hi = float(xd.min()), float(xd.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise QuantizationError("tensor contains non-finite values")
    r = nudge_range(lo, hi)
    if r.degenerate:
        return QuantParams(0.0, 0, bits, degenerate=True)
    return compute_qparams(r.lo, r.hi, bits, x.dtype)


def _steps(x: torch.Tensor, qp: QuantParams) -> torch.Tensor:
    """Exact ``round_half_away(x / scale)``, clamped one step past the code range.

    Returned as a float tensor of integral values in ``x.dtype``.
    """
    n = qp.qmax
    s = torch.tensor(qp.scale, dtype=x.dtype)
    k = torch.round(x / s).clamp_(-qp.zero_point - 1, n - qp.zero_point + 1)
    half = s / 2
    lo = half * (2 * k - 1)
    hi = half * (2 * k + 1)
    # a boundary belongs to the neighbour farther from zero
    down = (x < lo) | ((k <= 0) & (x == lo))
    up = (x > hi) | ((k >= 0) & (x == hi))
    return k - down.to(x.dtype) + up.to(x.dtype)


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise QuantizationError("tensor contains non-finite values")


def quantize(x: torch.Tensor, qp: QuantParams) -> torch.Tensor:
    """Integer codes ``clamp(round(x / scale) + zero_point, 0, 2^b - 1)``."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    _check_finite(x)
    if qp.degenerate:
        raise QuantizationError("cannot quantize with degenerate params (pass-through)")
    k = _steps(x, qp)
    return (k + qp.zero_point).clamp_(0, qp.qmax).to(torch.int64)


def dequantize(q: torch.Tensor, qp: QuantParams, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    q = torch.as_tensor(q)
    if qp.degenerate:
        raise QuantizationError("cannot dequantize with degenerate params (pass-through)")
    if q.numel() and (int(q.min()) < 0 or int(q.max()) > qp.qmax):
        raise QuantizationError(f"codes outside [0, {qp.qmax}]")
    return torch.tensor(qp.scale, dtype=dtype) * (q.to(dtype) - qp.zero_point)


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bits):
        qp = calibrate(x, bits)
        if qp.degenerate:
            ctx.save_for_backward(torch.ones_like(x, dtype=torch.bool))
            return x.clone()
        k = _steps(x, qp)
        lo, hi = -qp.zero_point, qp.qmax - qp.zero_point
        mask = (k >= lo) & (k <= hi)
        ctx.save_for_backward(mask)
        return torch.tensor(qp.scale, dtype=x.dtype) * k.clamp_(lo, hi)

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved_tensors
        return grad * mask.to(grad.dtype), None


def fake_quant(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize-dequantize ``x`` on its own min/max grid.

    Backward is the straight-through estimator masked at saturation: the
    gradient passes where the unclamped code lies in ``[0, 2^bits - 1]``.
    Constant tensors pass through unchanged.
    """
    if bits not in SUPPORTED_BITS:
        raise QuantizationError(f"bits must be in {SUPPORTED_BITS}, got {bits}")
    _check_finite(x.detach())
    return _FakeQuantSTE.apply(x, bits)


def ste_mask(x: torch.Tensor, bits: int) -> torch.Tensor:
    """The 0/1 gradient mask ``fake_quant`` applies for input ``x``."""
    qp = calibrate(x, bits)
    if qp.degenerate:
        return torch.ones_like(x)
    k = _steps(x.detach(), qp)
    return ((k >= -qp.zero_point) & (k <= qp.qmax - qp.zero_point)).to(x.dtype)


def noise_quant(x: torch.Tensor, bits: int, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Add ``Uniform(-s/2, s/2)`` noise, with ``s`` the step of the ``bits`` grid.

    The noise is resampled on every call; the gradient w.r.t. ``x`` is the identity.
    """
    if bits not in SUPPORTED_BITS:
        raise QuantizationError(f"bits must be in {SUPPORTED_BITS}, got {bits}")
    _check_finite(x.detach())
    qp = calibrate(x, bits)
    if qp.degenerate:
        return x
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5
    return x + u * qp.scale


def grid_levels(qp: QuantParams, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """All ``2^b`` representable values of the grid, ascending."""
    codes = torch.arange(qp.qmax + 1)
    return dequantize(codes, qp, dtype)
