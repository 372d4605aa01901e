"""Quality-rate utility curves of the form ``U(r) = a * r**b + c``.

Rates are in bits/s throughout. A curve is strictly increasing and strictly
concave for ``a > 0`` and ``0 < b < 1``, which is what makes the inverse of
the marginal utility well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from qfhas.errors import CurveError, DomainError, FitError

# Fitting is done on rates expressed in Mbit/s to keep the problem well scaled.
_FIT_SCALE = 1e6


@dataclass(frozen=True)
class UtilityCurve:
    a: float
    b: float
    c: float
    valid_range: tuple[float, float] = (1e5, 2e7)
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise CurveError(f"a must be positive, got {self.a}")
        if not (0.0 < self.b < 1.0):
            raise CurveError(f"b must lie in (0, 1), got {self.b}")
        if not math.isfinite(self.c):
            raise CurveError(f"c must be finite, got {self.c}")
        lo, hi = self.valid_range
        if not (0 < lo < hi):
            raise CurveError(f"valid_range must satisfy 0 < lo < hi, got {self.valid_range}")


@dataclass(frozen=True)
class SsimSample:
    bitrate: float
    ssim: float

    def __post_init__(self):
        if not self.bitrate > 0:
            raise CurveError(f"sample bitrate must be positive, got {self.bitrate}")
        if not (0.0 <= self.ssim <= 1.0):
            raise CurveError(f"sample ssim must lie in [0, 1], got {self.ssim}")


def evaluate(curve: UtilityCurve, r: float) -> float:
    if not r > 0:
        raise DomainError(f"rate must be positive, got {r}")
    return curve.a * r**curve.b + curve.c


def marginal(curve: UtilityCurve, r: float) -> float:
    """Derivative ``a*b*r**(b-1)``."""
    if not r > 0:
        raise DomainError(f"rate must be positive, got {r}")
    return curve.a * curve.b * r ** (curve.b - 1.0)


def inverse_marginal(curve: UtilityCurve, price: float) -> float:
    """Rate at which the marginal utility equals ``price``.

    Callers dealing with a zero price must saturate on their own; the
    analytic inverse diverges as the price goes to zero.
    """
    if not price > 0:
        raise DomainError(f"price must be positive, got {price}")
    return (price / (curve.a * curve.b)) ** (1.0 / (curve.b - 1.0))


def rmse(curve: UtilityCurve, samples: Sequence[SsimSample]) -> float:
    err = [evaluate(curve, s.bitrate) - s.ssim for s in samples]
    return math.sqrt(sum(e * e for e in err) / len(err))


def _linear_ac(x: np.ndarray, y: np.ndarray, b: float) -> tuple[float, float]:
    design = np.column_stack([x**b, np.ones_like(x)])
    (a, c), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(a), float(c)


def fit_curve(samples: Sequence[SsimSample], label: str = "fitted") -> UtilityCurve:
    """Least-squares fit of ``a * r**b + c`` to SSIM samples.

    Runs a bounded trust-region solve from each start ``b in {0.1, ..., 0.9}``
    (``a`` and ``c`` initialised by linear least squares at that ``b``) and
    keeps the lowest-cost solution. A solution pinned to a bound of ``b`` is
    rejected as degenerate.
    """
    if len(samples) < 3:
        raise FitError(f"need at least 3 samples, got {len(samples)}")
    ordered = sorted(samples, key=lambda s: s.bitrate)
    rates = [s.bitrate for s in ordered]
    if len(set(rates)) != len(rates):
        raise FitError("sample bitrates must be distinct")
    ssims = [s.ssim for s in ordered]
    if any(s1 <= s0 for s0, s1 in zip(ssims, ssims[1:])):
        raise FitError("ssim must be strictly increasing in bitrate")

    x = np.asarray(rates) / _FIT_SCALE
    y = np.asarray(ssims)
    b_lo, b_hi = 0.01, 0.99

    def resid(p):
        a, b, c = p
        return a * x**b + c - y

    def jac(p):
        a, b, c = p
        xb = x**b
        return np.column_stack([xb, a * xb * np.log(x), np.ones_like(x)])

    best = None
    for b0 in np.arange(1, 10) / 10:
        a0, c0 = _linear_ac(x, y, b0)
        a0 = max(a0, 1e-6)
        sol = least_squares(
            resid, [a0, b0, c0], jac=jac,
            bounds=([1e-12, b_lo, -np.inf], [np.inf, b_hi, np.inf]),
            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
        )
        if best is None or sol.cost < best.cost:
            best = sol

    a_s, b, c = (float(v) for v in best.x)
    if b <= b_lo + 1e-6 or b >= b_hi - 1e-6:
        raise FitError(f"fit degenerated: exponent b={b:.4g} hit its bound (0.01, 0.99)")
    a = a_s * _FIT_SCALE ** (-b)
    try:
        return UtilityCurve(a=a, b=b, c=c, valid_range=(rates[0], rates[-1]), label=label)
    except CurveError as exc:
        raise FitError(f"fit produced an invalid curve: {exc}") from exc


def curve_from_anchors(b: float, low: tuple[float, float], high: tuple[float, float],
                       label: str = "", valid_range: tuple[float, float] = (1e5, 2e7)) -> UtilityCurve:
    """Curve with exponent ``b`` passing through two ``(bitrate, ssim)`` points."""
    (r0, s0), (r1, s1) = low, high
    a = (s1 - s0) / (r1**b - r0**b)
    c = s0 - a * r0**b
    return UtilityCurve(a=a, b=b, c=c, valid_range=valid_range, label=label)


# Synthetic presets, one per content class, given as (b, (rate, ssim), (rate, ssim)).
# Sport passes ~0.94 at 2.2 Mbps and lecture exceeds 0.98 at 400 kbps; more
# complex content has a larger marginal utility at every rate in valid_range.
_PRESET_ANCHORS = {
    "sport": (0.15, (2.2e6, 0.94), (6e6, 0.97)),
    "cartoon": (0.20, (4e5, 0.93), (6e6, 0.985)),
    "documentary": (0.25, (4e5, 0.95), (6e6, 0.99)),
    "lecture": (0.30, (4e5, 0.982), (6e6, 0.996)),
}

PRESETS: dict[str, UtilityCurve] = {
    name: curve_from_anchors(b, lo, hi, label=f"synthetic:{name}")
    for name, (b, lo, hi) in _PRESET_ANCHORS.items()
}

PRESET_ORDER = ("sport", "cartoon", "documentary", "lecture")


def random_curve(rng: np.random.Generator, label: str = "synthetic:random") -> UtilityCurve:
    """Draw a plausible SSIM-like curve (SSIM in roughly [0.75, 1) over the ladder)."""
    b = float(rng.uniform(0.1, 0.45))
    lo = float(rng.uniform(0.75, 0.97))
    hi = lo + float(rng.uniform(0.15, 0.9)) * (0.998 - lo)
    return curve_from_anchors(b, (4e5, lo), (6e6, hi), label=label)


def samples_from_curve(curve: UtilityCurve, bitrates: Sequence[float],
                       noise: float = 0.0, rng: np.random.Generator | None = None) -> list[SsimSample]:
    out = []
    for r in bitrates:
        s = evaluate(curve, r)
        if noise:
            s += float(rng.normal(0.0, noise))
        out.append(SsimSample(bitrate=float(r), ssim=min(max(s, 0.0), 1.0)))
    return out
