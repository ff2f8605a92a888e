"""Payoff/belief type distributions: sampling, densities, virtual values, ironing.

All stochastic operations take explicit 64-bit seeds and draw from numpy's
counter-based Philox generator, so any worker owning its own seed reproduces
the same stream.  Beta variates use the gamma-ratio construction
``X = G_a / (G_a + G_b)`` with ``G_a ~ Gamma(a), G_b ~ Gamma(b)`` drawn from
the generator's ``gamma`` method; reproducibility is therefore pinned to
numpy's bit-stream compatibility guarantees for a fixed version.

Virtual values are ``phi(v) = v - (1 - F(v)) / f(v)``.  Ironing flattens phi
over intervals where it decreases: in quantile space ``q = F(v)`` the
cumulative virtual value has the closed form ``H(q) = lo - v(q) * (1 - q)``,
and the ironed curve is the derivative of the lower convex hull of ``H``,
mapped back through ``F^{-1}``.  Unbounded supports are truncated at
``F(v) = 1 - 1e-6`` whenever a bounded grid is required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc, betaln

__all__ = [
    "ParameterError",
    "SingularityError",
    "UnsupportedDistributionError",
    "TypeDistribution",
    "Uniform",
    "Exponential",
    "BetaMixture",
    "PiecewiseConstant",
    "PointMass",
    "from_config",
    "make_rng",
    "virtual_value",
    "VirtualValueTable",
    "build_virtual_table",
    "ironed_virtual_value",
    "TAIL_MASS",
]

TAIL_MASS = 1e-6  # truncation point F(v) = 1 - TAIL_MASS for unbounded supports


class ParameterError(ValueError):
    """Invalid distribution parameters."""


class SingularityError(ZeroDivisionError):
    """Virtual value requested where the density vanishes."""


class UnsupportedDistributionError(ValueError):
    """Operation not defined for this distribution kind."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class TypeDistribution:
    """Base for one-dimensional type distributions.

    Subclasses provide ``pdf``/``cdf``/``ppf``/``sample`` plus support bounds.
    ``pdf_cdf`` never raises for points outside the support: it returns
    density 0 with the cdf clamped to 0 or 1.
    """

    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    def bounded_support(self) -> tuple[float, float]:
        """Support truncated to F <= 1 - TAIL_MASS when unbounded."""
        lo, hi = self.support()
        if math.isinf(hi):
            hi = float(self.ppf(np.array([1.0 - TAIL_MASS]))[0])
        return lo, hi

    def pdf(self, v):
        raise NotImplementedError

    def cdf(self, v):
        raise NotImplementedError

    def ppf(self, q):
        raise NotImplementedError

    def sample(self, count: int, seed: int) -> np.ndarray:
        if count < 1:
            raise ParameterError("count must be >= 1")
        return self._draw(count, make_rng(seed))

    def _draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def pdf_cdf(self, v) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(v, dtype=float)
        return np.asarray(self.pdf(v), dtype=float), np.clip(self.cdf(v), 0.0, 1.0)

    def mean(self) -> float:
        raise NotImplementedError

    def virtual_value(self, v):
        return virtual_value(self, v)

    def virtual_value_inverse(self, y):
        """Left inverse: inf{v in support : phi(v) >= y}, clamped to support."""
        raise UnsupportedDistributionError(
            f"{type(self).__name__} has no closed-form virtual value inverse"
        )


@dataclass(frozen=True)
class Uniform(TypeDistribution):
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ParameterError(f"need hi > lo, got [{self.lo}, {self.hi}]")

    def support(self):
        return (self.lo, self.hi)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        inside = (v >= self.lo) & (v <= self.hi)
        return np.where(inside, 1.0 / (self.hi - self.lo), 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.clip((v - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def ppf(self, q):
        return self.lo + np.asarray(q, dtype=float) * (self.hi - self.lo)

    def _draw(self, count, rng):
        return self.lo + (self.hi - self.lo) * rng.random(count)

    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def virtual_value_inverse(self, y):
        # phi(v) = 2v - hi on [lo, hi]
        return np.clip((np.asarray(y, dtype=float) + self.hi) / 2.0, self.lo, self.hi)


@dataclass(frozen=True)
class Exponential(TypeDistribution):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ParameterError(f"rate must be positive, got {self.rate}")

    def support(self):
        return (0.0, math.inf)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v >= 0, self.rate * np.exp(-self.rate * np.maximum(v, 0.0)), 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v >= 0, 1.0 - np.exp(-self.rate * np.maximum(v, 0.0)), 0.0)

    def ppf(self, q):
        return -np.log1p(-np.asarray(q, dtype=float)) / self.rate

    def _draw(self, count, rng):
        return -np.log1p(-rng.random(count)) / self.rate

    def mean(self):
        return 1.0 / self.rate

    def virtual_value_inverse(self, y):
        # phi(v) = v - 1/rate
        return np.maximum(np.asarray(y, dtype=float) + 1.0 / self.rate, 0.0)


@dataclass(frozen=True)
class BetaMixture(TypeDistribution):
    """Mixture of Beta(a, b) components given as ((a, b, weight), ...)."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple(tuple(float(x) for x in c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ParameterError("mixture needs at least one component")
        for a, b, w in comps:
            if a <= 0 or b <= 0:
                raise ParameterError(f"Beta shape parameters must be positive, got ({a}, {b})")
            if w < 0:
                raise ParameterError(f"negative mixture weight {w}")
        total = sum(w for _, _, w in comps)
        if abs(total - 1.0) > 1e-9:
            raise ParameterError(f"mixture weights sum to {total}, expected 1")

    def support(self):
        return (0.0, 1.0)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        inside = (v > 0) & (v < 1)
        x = v[inside]
        acc = np.zeros_like(x)
        for a, b, w in self.components:
            logpdf = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - betaln(a, b)
            acc += w * np.exp(logpdf)
        out[inside] = acc
        return out

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        x = np.clip(v, 0.0, 1.0)
        acc = np.zeros_like(x)
        for a, b, w in self.components:
            acc += w * betainc(a, b, x)
        return acc

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        lo = np.zeros_like(q)
        hi = np.ones_like(q)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def _draw(self, count, rng):
        weights = np.array([w for _, _, w in self.components])
        choice = np.searchsorted(np.cumsum(weights), rng.random(count), side="right")
        choice = np.minimum(choice, len(self.components) - 1)
        out = np.empty(count)
        for idx, (a, b, _) in enumerate(self.components):
            mask = choice == idx
            k = int(mask.sum())
            if k == 0:
                continue
            ga = rng.gamma(a, size=k)
            gb = rng.gamma(b, size=k)
            out[mask] = ga / (ga + gb)
        return out

    def mean(self):
        return sum(w * a / (a + b) for a, b, w in self.components)


@dataclass(frozen=True)
class PiecewiseConstant(TypeDistribution):
    """Density constant on [b_k, b_{k+1}); len(densities) == len(breakpoints) - 1."""

    breakpoints: tuple[float, ...]
    densities: tuple[float, ...]

    def __post_init__(self):
        bp = tuple(float(x) for x in self.breakpoints)
        dens = tuple(float(x) for x in self.densities)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "densities", dens)
        if len(bp) < 2 or len(dens) != len(bp) - 1:
            raise ParameterError("need K+1 breakpoints for K densities")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ParameterError("breakpoints must be strictly increasing")
        if any(d < 0 for d in dens):
            raise ParameterError("densities must be nonnegative")
        mass = sum(d * (b1 - b0) for d, b0, b1 in zip(dens, bp, bp[1:]))
        if abs(mass - 1.0) > 1e-9:
            raise ParameterError(f"density integrates to {mass}, expected 1")
        cum = np.concatenate([[0.0], np.cumsum([d * (b1 - b0) for d, b0, b1 in zip(dens, bp, bp[1:])])])
        cum[-1] = 1.0
        object.__setattr__(self, "_cum", cum)

    def support(self):
        return (self.breakpoints[0], self.breakpoints[-1])

    def _segment(self, v):
        return np.clip(np.searchsorted(self.breakpoints, v, side="right") - 1, 0, len(self.densities) - 1)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        seg = self._segment(v)
        dens = np.asarray(self.densities)[seg]
        inside = (v >= self.breakpoints[0]) & (v < self.breakpoints[-1])
        return np.where(inside, dens, 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        seg = self._segment(v)
        bp = np.asarray(self.breakpoints)
        dens = np.asarray(self.densities)
        raw = self._cum[seg] + dens[seg] * (np.clip(v, bp[0], bp[-1]) - bp[seg])
        return np.clip(raw, 0.0, 1.0)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        seg = np.clip(np.searchsorted(self._cum, q, side="right") - 1, 0, len(self.densities) - 1)
        bp = np.asarray(self.breakpoints)
        dens = np.asarray(self.densities)[seg]
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(dens > 0, (q - self._cum[seg]) / dens, 0.0)
        return np.clip(bp[seg] + off, bp[0], bp[-1])

    def _draw(self, count, rng):
        return self.ppf(rng.random(count))

    def mean(self):
        bp, dens = self.breakpoints, self.densities
        return sum(d * (b1**2 - b0**2) / 2 for d, b0, b1 in zip(dens, bp, bp[1:]))

    def virtual_value_inverse(self, y):
        # Within a segment of density d starting at b with cdf F_b:
        # phi(v) = 2v - b - (1 - F_b)/d, linear with slope 2.
        y = np.asarray(y, dtype=float)
        bp = np.asarray(self.breakpoints)
        out = np.full(y.shape, bp[-1])
        done = np.zeros(y.shape, dtype=bool)
        for k in range(len(self.densities)):
            d = self.densities[k]
            if d <= 0:
                continue
            b0, b1 = bp[k], bp[k + 1]
            intercept = b0 + (1.0 - self._cum[k]) / d
            v_cand = np.clip((y + intercept) / 2.0, b0, b1)
            hits = ~done & (2 * v_cand - intercept >= y - 1e-15)
            out[hits] = v_cand[hits]
            done |= hits
        return out


@dataclass(frozen=True)
class PointMass(TypeDistribution):
    value: float

    def support(self):
        return (self.value, self.value)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v == self.value, np.inf, 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v >= self.value, 1.0, 0.0)

    def ppf(self, q):
        return np.full_like(np.asarray(q, dtype=float), self.value)

    def _draw(self, count, rng):
        return np.full(count, self.value)

    def mean(self):
        return self.value


_KINDS = {
    "uniform": lambda params: Uniform(*params),
    "exponential": lambda params: Exponential(*params),
    "beta_mixture": lambda params: BetaMixture(tuple(tuple(c) for c in params)),
    "piecewise_constant": lambda params: PiecewiseConstant(tuple(params[0]), tuple(params[1])),
    "point_mass": lambda params: PointMass(*params),
}


def from_config(spec: dict) -> TypeDistribution:
    """Build a distribution from a config entry {"kind": ..., "params": [...]}."""
    kind = spec.get("kind")
    if kind not in _KINDS:
        raise ParameterError(f"unknown distribution kind {kind!r}")
    try:
        return _KINDS[kind](spec.get("params", []))
    except TypeError as err:
        raise ParameterError(f"bad params for {kind!r}: {err}") from err


# ---------------------------------------------------------------------------
# virtual values and ironing
# ---------------------------------------------------------------------------


def virtual_value(dist: TypeDistribution, v):
    """phi(v) = v - (1 - F(v)) / f(v); raises where the density vanishes."""
    v_arr = np.asarray(v, dtype=float)
    f, big_f = dist.pdf_cdf(v_arr)
    if np.any(f <= 0):
        raise SingularityError(f"density is zero at some of v={v!r}")
    out = v_arr - (1.0 - big_f) / f
    return float(out) if np.isscalar(v) or out.ndim == 0 else out


@dataclass
class VirtualValueTable:
    """Raw and ironed virtual values on a payoff grid (uniform in quantile space)."""

    grid: np.ndarray  # sorted payoff values
    phi: np.ndarray  # raw virtual values (+-inf where the density vanishes)
    phi_ironed: np.ndarray  # monotone ironed values
    quantiles: np.ndarray  # F(grid), uniform
    intervals: list[tuple[float, float, float]]  # (v_lo, v_hi, constant) per ironed run

    def ironed_at(self, v) -> np.ndarray:
        q = np.clip(np.asarray(v, dtype=float), self.grid[0], self.grid[-1])
        q = np.interp(q, self.grid, self.quantiles)
        return np.interp(q, self.quantiles, self.phi_ironed)


def _lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the lower convex hull vertices of the curve (x, y), x sorted."""
    hull: list[int] = []
    for i in range(len(x)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.asarray(hull)


def build_virtual_table(dist: TypeDistribution, grid_size: int = 4096) -> VirtualValueTable:
    """Tabulate phi and its ironed counterpart on a uniform quantile grid.

    The cumulative virtual value H(q) = int_0^q phi(F^{-1}(u)) du equals
    lo - v(q)(1 - q) exactly, so the hull is computed without quadrature.
    Nodes strictly inside a hull gap get the bridge slope; all other nodes
    keep the analytic phi.  Junction nodes are absorbed into the flat run
    when needed to keep the curve nondecreasing.
    """
    if grid_size < 256:
        raise ParameterError("grid_size must be >= 256")
    if isinstance(dist, PointMass):
        raise UnsupportedDistributionError("no virtual values for a point mass")
    lo, hi = dist.support()
    if math.isinf(hi):
        q_top = 1.0 - TAIL_MASS
    else:
        q_top = 1.0
    q = np.linspace(0.0, q_top, grid_size)
    v = np.asarray(dist.ppf(q), dtype=float)
    v[0], v[-1] = lo, dist.bounded_support()[1]
    h_cum = lo - v * (1.0 - q)

    f, big_f = dist.pdf_cdf(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(f > 0, v - (1.0 - big_f) / f, np.where(q < 0.5, -np.inf, np.inf))

    hull = _lower_hull(q, h_cum)
    phi_ironed = phi.copy()
    intervals: list[tuple[float, float, float]] = []
    for a, b in zip(hull[:-1], hull[1:]):
        if b - a <= 1:
            continue
        const = (h_cum[b] - h_cum[a]) / (q[b] - q[a])
        # absorb junction nodes whose raw phi would break monotonicity
        while a > 0 and phi[a] > const:
            a -= 1
        while b < grid_size - 1 and phi[b] < const:
            b += 1
        phi_ironed[a : b + 1] = const
        intervals.append((float(v[a]), float(v[b]), float(const)))
    return VirtualValueTable(grid=v, phi=phi, phi_ironed=phi_ironed, quantiles=q, intervals=intervals)


_TABLE_CACHE: dict[tuple, VirtualValueTable] = {}


def ironed_virtual_table(dist: TypeDistribution, grid_size: int = 4096) -> VirtualValueTable:
    key = (dist, grid_size)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = build_virtual_table(dist, grid_size)
    return _TABLE_CACHE[key]


def ironed_virtual_value(dist: TypeDistribution, v, grid_size: int = 4096):
    """Monotone ironed virtual value at v (table-backed, cached per distribution)."""
    lo, hi = dist.support()
    if math.isinf(lo) or (math.isinf(hi) and not isinstance(dist, Exponential)):
        raise UnsupportedDistributionError("ironing needs a bounded (or truncatable) support")
    table = ironed_virtual_table(dist, grid_size)
    out = table.ironed_at(v)
    return float(out) if np.isscalar(v) or out.ndim == 0 else out
