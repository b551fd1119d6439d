"""Randomized conformance of ``fake_quant`` against a nearest-level brute force.

The oracle does not reuse the implementation's rounding: it rebuilds the
expected grid from the tensor's range with exact rationals, lists all
``2^b`` levels, and picks the nearest one per element (ties to the level
of larger magnitude, i.e. round-half-away-from-zero).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .quantsim import SUPPORTED_BITS, calibrate, fake_quant

# scale is rounded down to 43 significant bits in float64
_SCALE_REL_SLACK = 2.0**-42
_BOUND_SLACK = 1e-9


@dataclass
class CheckResult:
    name: str
    checked: int = 0
    failed: int = 0
    example: str = ""

    @property
    def passed(self) -> bool:
        return self.failed == 0 and self.checked > 0

    def fail(self, msg: str) -> None:
        self.failed += 1
        if not self.example:
            self.example = msg


def random_tensor(rng: np.random.Generator, max_len: int = 64) -> np.ndarray:
    """Mixed bag of shapes of data: Gaussian, one-sided, wide, constant, with exact zeros."""
    n = int(rng.integers(1, max_len + 1))
    kind = int(rng.integers(0, 7))
    scale = float(10.0 ** rng.uniform(-3, 3))
    if kind == 0:
        x = rng.normal(0, scale, n)
    elif kind == 1:
        x = rng.uniform(0, scale, n)
    elif kind == 2:
        x = -rng.uniform(0, scale, n)
    elif kind == 3:
        x = rng.uniform(scale, 2 * scale, n)
    elif kind == 4:
        x = np.full(n, rng.normal(0, scale))
    elif kind == 5:
        x = rng.standard_t(2, n) * scale
    else:
        x = rng.normal(0, scale, n)
        x[rng.random(n) < 0.3] = 0.0
    return x.astype(np.float64)


def with_midpoints(x: np.ndarray, bits: int, rng: np.random.Generator) -> np.ndarray:
    """Replace interior elements by exact rounding midpoints of x's own grid."""
    qp = calibrate(torch.from_numpy(x), bits)
    if qp.degenerate or len(x) < 3:
        return x
    n = qp.qmax
    j = rng.integers(-qp.zero_point, n - qp.zero_point, size=len(x) - 2)
    mids = qp.scale * (j + 0.5)
    lo, hi = x.min(), x.max()
    mids = np.clip(mids, lo, hi)
    out = x.copy()
    inner = np.argsort(x)[1:-1]
    out[inner] = mids
    return out


def oracle_fake_quant(x: np.ndarray, bits: int, scale: float):
    """Expected output given the implementation's scale, or None if the scale is wrong."""
    lo, hi = min(float(x.min()), 0.0), max(float(x.max()), 0.0)
    n = (1 << bits) - 1
    exact = (Fraction(hi) - Fraction(lo)) / n
    if not (Fraction(scale) <= exact and Fraction(scale) >= exact * (1 - Fraction(_SCALE_REL_SLACK))):
        return None, None
    zf = -Fraction(lo) / Fraction(scale)
    zp = math.floor(zf + Fraction(1, 2))
    zp = min(max(zp, 0), n)
    levels = scale * (np.arange(n + 1, dtype=np.float64) - zp)
    dist = np.abs(x[:, None] - levels[None, :])
    best = dist.min(axis=1, keepdims=True)
    cand = np.where(dist == best, np.abs(levels)[None, :], -1.0)
    pick = cand.argmax(axis=1)
    return levels[pick], zp


def run_conformance(n_tensors: int = 10_000, bits=SUPPORTED_BITS, seed: int = 0, max_len: int = 64) -> list:
    rng = np.random.default_rng(seed)
    checks = {
        k: CheckResult(k)
        for k in ("oracle_equivalence", "idempotence", "zero_preservation", "grid_cardinality", "roundtrip_bound")
    }
    for b in bits:
        for i in range(n_tensors):
            x = random_tensor(rng, max_len)
            if i % 4 == 3:
                x = with_midpoints(x, b, rng)
            xt = torch.from_numpy(x)
            y = fake_quant(xt, b)
            qp = calibrate(xt, b)
            tag = f"bits={b} tensor={i}"

            c = checks["oracle_equivalence"]
            c.checked += 1
            if qp.degenerate:
                if not (x.min() == x.max() or (x.max() - x.min()) / 255 < 1e-290):
                    c.fail(f"{tag}: non-constant tensor treated as degenerate")
                elif not torch.equal(y, xt):
                    c.fail(f"{tag}: degenerate tensor not passed through")
            else:
                expect, zp = oracle_fake_quant(x, b, qp.scale)
                if expect is None:
                    c.fail(f"{tag}: scale {qp.scale!r} inconsistent with range")
                elif zp != qp.zero_point:
                    c.fail(f"{tag}: zero_point {qp.zero_point} != {zp}")
                elif not np.array_equal(expect, y.numpy()):
                    k = int(np.nonzero(expect != y.numpy())[0][0])
                    c.fail(f"{tag}: x={x[k]!r} got {float(y[k])!r} expected {expect[k]!r}")

            c = checks["idempotence"]
            c.checked += 1
            if not torch.equal(fake_quant(y, b), y):
                c.fail(f"{tag}: fake_quant not idempotent")

            if (x == 0.0).any():
                c = checks["zero_preservation"]
                c.checked += 1
                if not (y.numpy()[x == 0.0] == 0.0).all():
                    c.fail(f"{tag}: 0.0 not preserved")

            c = checks["grid_cardinality"]
            c.checked += 1
            if torch.unique(y).numel() > (1 << b):
                c.fail(f"{tag}: {torch.unique(y).numel()} distinct values")

            if not qp.degenerate:
                c = checks["roundtrip_bound"]
                c.checked += 1
                err = np.abs(y.numpy() - x).max()
                if err > qp.scale / 2 * (1 + _BOUND_SLACK):
                    c.fail(f"{tag}: error {err!r} > scale/2 = {qp.scale / 2!r}")
    return list(checks.values())


def main(n_tensors: int = 10_000, seed: int = 0) -> int:
    t0 = time.perf_counter()
    results = run_conformance(n_tensors, seed=seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  e.g. {r.example}" if r.example else ""
        print(f"[{status}] {r.name}: {r.checked - r.failed}/{r.checked}{extra}")
    print(f"quant-check: {n_tensors} tensors x bits {SUPPORTED_BITS} in {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1
