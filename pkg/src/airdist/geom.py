"""Two-part simplex and Bayes-space geometry.

Compositions here are the (below, above) threshold pair, so the ilr
transform reduces to a single scaled log-ratio.  Densities live on a fixed
equispaced grid over [0, 1] and every integral is a trapezoid rule on that
grid, which keeps the clr transform and its inverse exactly consistent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID_SIZE = 256
SQRT2 = np.sqrt(2.0)


class CompositionError(ValueError):
    """Raised for compositions that are not strictly positive."""


@dataclass(frozen=True)
class Composition:
    """A point of the 2-part simplex: (below-threshold, above-threshold)."""

    below: float
    above: float

    def __post_init__(self):
        if not (self.below > 0 and self.above > 0):
            raise CompositionError(
                "composition parts must be strictly positive; "
                "apply zero_replace to raw counts first"
            )
        if abs(self.below + self.above - 1.0) > 1e-12:
            raise CompositionError(
                f"parts must sum to 1, got {self.below + self.above!r}"
            )

    @property
    def parts(self) -> tuple[float, float]:
        return (self.below, self.above)


def ilr(c: Composition | tuple[float, float]) -> float:
    """Isometric log-ratio of a 2-part composition, ``log(c1/c2)/sqrt(2)``."""
    c1, c2 = c.parts if isinstance(c, Composition) else c
    if c1 <= 0 or c2 <= 0:
        raise CompositionError(
            "ilr of a composition with a zero part; apply zero_replace first"
        )
    return float(np.log(c1 / c2) / SQRT2)


def ilr_inverse(z: float) -> Composition:
    z = float(z)
    if not np.isfinite(z):
        raise ValueError("ilr coordinate must be finite")
    # logistic in a form that never overflows and keeps c2 > 0 to full precision
    t = SQRT2 * z
    if t >= 0:
        e = np.exp(-t)
        above = e / (1.0 + e)
        below = 1.0 - above
    else:
        e = np.exp(t)
        below = e / (1.0 + e)
        above = 1.0 - below
    return Composition(below, above)


def ilr_array(below, above) -> np.ndarray:
    below = np.asarray(below, dtype=float)
    above = np.asarray(above, dtype=float)
    if np.any(below <= 0) or np.any(above <= 0):
        raise CompositionError("zero part in composition array")
    return np.log(below / above) / SQRT2


def ilr_inverse_above(z) -> np.ndarray:
    """Vectorised above-threshold part of ``ilr_inverse``."""
    z = np.asarray(z, dtype=float)
    return 1.0 / (1.0 + np.exp(SQRT2 * z))


def zero_replace(below_count: int, above_count: int) -> Composition:
    """Additive (+0.5) smoothing of a pair of frequency counts."""
    if below_count < 0 or above_count < 0:
        raise ValueError("counts must be nonnegative")
    n = below_count + above_count
    if n < 1:
        raise CompositionError("cannot form a composition from zero observations")
    below = (below_count + 0.5) / (n + 1)
    return Composition(below, 1.0 - below)


def aitchison_distance(a: Composition, b: Composition) -> float:
    """Aitchison distance between two 2-part compositions (log-ratio form)."""
    la = np.log(np.asarray(a.parts))
    lb = np.log(np.asarray(b.parts))
    ca = la - la.mean()
    cb = lb - lb.mean()
    return float(np.sqrt(np.sum((ca - cb) ** 2)))


# ---------------------------------------------------------------------------
# Bayes space on [0, 1]
# ---------------------------------------------------------------------------

def unit_grid(m: int = GRID_SIZE) -> np.ndarray:
    return np.linspace(0.0, 1.0, m)


def trapezoid_weights(m: int = GRID_SIZE, length: float = 1.0) -> np.ndarray:
    w = np.full(m, length / (m - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass(frozen=True)
class DensityOnUnit:
    """A positive unit-integral density on [0, 1] stored by its clr image."""

    clr_values: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return unit_grid(len(self.clr_values))

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(len(self.clr_values))

    @property
    def density(self) -> np.ndarray:
        return _exp_normalised(self.clr_values, self.weights)

    def integral(self) -> float:
        return float(self.weights @ self.density)


def _exp_normalised(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    e = np.exp(g - np.max(g))
    return e / (w @ e)


def clr(f) -> DensityOnUnit:
    """Centred log-ratio of density values sampled on the unit grid."""
    f = np.asarray(f, dtype=float)
    if np.any(~np.isfinite(f)) or np.any(f <= 0):
        raise ValueError("clr requires a strictly positive density")
    w = trapezoid_weights(len(f))
    logf = np.log(f)
    return DensityOnUnit(logf - w @ logf)


def clr_inverse(g) -> DensityOnUnit:
    """Map a (near) zero-integral function back to a density.

    The input is re-centred so the stored clr image is exactly zero-mean; the
    exponentiation subtracts the maximum first and never overflows.
    """
    g = np.asarray(g, dtype=float)
    if np.any(~np.isfinite(g)):
        raise ValueError("clr values must be finite")
    w = trapezoid_weights(len(g))
    return DensityOnUnit(g - w @ g)


def as_density(f) -> DensityOnUnit:
    if isinstance(f, DensityOnUnit):
        return f
    return clr(f)


def bayes_add(f, g) -> DensityOnUnit:
    """Perturbation: renormalised pointwise product."""
    f, g = as_density(f), as_density(g)
    _check_same_grid(f, g)
    return clr_inverse(f.clr_values + g.clr_values)


def bayes_scale(alpha: float, f) -> DensityOnUnit:
    """Powering: renormalised ``f ** alpha``."""
    f = as_density(f)
    return clr_inverse(alpha * f.clr_values)


def bayes_inner(f, g) -> float:
    """Bayes-space inner product via the clr isometry."""
    f, g = as_density(f), as_density(g)
    _check_same_grid(f, g)
    return float(f.weights @ (f.clr_values * g.clr_values))


def _check_same_grid(f: DensityOnUnit, g: DensityOnUnit):
    if len(f.clr_values) != len(g.clr_values):
        raise ValueError("densities are stored on different grids")
