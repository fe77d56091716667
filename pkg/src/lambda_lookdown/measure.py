"""Driving measures on [0,1] and integrals/samplers against them.

A measure here is an atom at zero plus a list of absolutely continuous or
point-mass components on (0,1).  Everything downstream (rates, event
samplers, the jump SDE) is expressed through two derived objects:

* the size-biased intensity ``nu(dp) = p^-2 Lambda(dp)`` of reproduction
  events, which typically has infinite total mass near 0, and
* restricted masses / integrals of ``Lambda`` itself.

Closed forms are used wherever the component family allows (uniform, Beta
densities, point masses); adaptive quadrature covers the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import betainc, betaincinv, betaln


class NonIntegrableError(ValueError):
    """Raised when a nu-integral diverges and the caller disallowed infinity."""


class EmptySupportError(ValueError):
    """Raised when a sampler is asked to draw from a region of zero mass."""


@dataclass(frozen=True)
class PointMass:
    """Mass ``mass`` concentrated at ``location`` strictly inside (0,1)."""

    location: float
    mass: float

    def validate(self) -> None:
        if not (0.0 < self.location < 1.0):
            raise ValueError(f"point mass location must lie in (0,1), got {self.location}")
        if self.mass < 0.0:
            raise ValueError(f"point mass must be nonnegative, got {self.mass}")


@dataclass(frozen=True)
class BetaDensity:
    """Beta(a,b) density on (0,1), rescaled to total mass ``mass``."""

    a: float
    b: float
    mass: float

    def validate(self) -> None:
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError(f"beta shape parameters must be positive, got a={self.a}, b={self.b}")
        if self.mass < 0.0:
            raise ValueError(f"beta component mass must be nonnegative, got {self.mass}")

    def log_density_const(self) -> float:
        # log of mass / B(a,b)
        return math.log(self.mass) - betaln(self.a, self.b)


@dataclass(frozen=True)
class Uniform:
    """Lebesgue measure on (0,1) scaled to total mass ``mass``."""

    mass: float

    def validate(self) -> None:
        if self.mass < 0.0:
            raise ValueError(f"uniform component mass must be nonnegative, got {self.mass}")


Component = PointMass | BetaDensity | Uniform


@dataclass(frozen=True)
class LambdaMeasure:
    """A finite measure on [0,1] with no mass at 1.

    ``atom0`` is the mass at zero (the Kingman part); ``components`` carry the
    rest of the measure on (0,1).  Instances are immutable and hashable so
    they can be shared across threads and used as cache keys.
    """

    atom0: float = 0.0
    components: tuple[Component, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.atom0 < 0.0:
            raise ValueError(f"atom at zero must be nonnegative, got {self.atom0}")
        object.__setattr__(self, "components", tuple(self.components))
        for comp in self.components:
            comp.validate()
        total = self.atom0 + sum(c.mass for c in self.components)
        if not (total > 0.0 and math.isfinite(total)):
            raise ValueError(f"total mass must be finite and positive, got {total}")

    # -- plain Lambda masses -------------------------------------------------

    def total_mass(self) -> float:
        """Lambda([0,1]) = atom at zero plus all component masses."""
        return self.atom0 + sum(c.mass for c in self.components)

    def continuous_mass(self) -> float:
        """Lambda((0,1)): everything except the atom at zero."""
        return sum(c.mass for c in self.components)

    def mass_in(self, lo: float, hi: float) -> float:
        """Lambda mass of the open interval (lo, hi) within (0,1)."""
        lo, hi = max(lo, 0.0), min(hi, 1.0)
        if hi <= lo:
            return 0.0
        out = 0.0
        for comp in self.components:
            if isinstance(comp, PointMass):
                if lo < comp.location < hi:
                    out += comp.mass
            elif isinstance(comp, Uniform):
                out += comp.mass * (hi - lo)
            else:
                out += comp.mass * (betainc(comp.a, comp.b, hi) - betainc(comp.a, comp.b, lo))
        return out

    def has_continuous_part(self) -> bool:
        return any(not isinstance(c, PointMass) and c.mass > 0 for c in self.components)

    def point_masses_only(self) -> bool:
        return all(isinstance(c, PointMass) for c in self.components)


def total_mass(lam: LambdaMeasure) -> float:
    """Lambda([0,1])."""
    return lam.total_mass()


def moment(lam: LambdaMeasure, r: float) -> float:
    """The r-th moment of Lambda, ``int p^r Lambda(dp)``, as an extended real.

    The atom at zero contributes its mass for r = 0, nothing for r > 0 and
    +inf for r < 0.  Divergent integrals return ``math.inf``.
    """
    if lam.atom0 > 0.0 and r < 0.0:
        return math.inf
    out = lam.atom0 if r == 0.0 else 0.0
    for comp in lam.components:
        if isinstance(comp, PointMass):
            out += comp.mass * comp.location**r
        elif isinstance(comp, Uniform):
            if r <= -1.0:
                return math.inf
            out += comp.mass / (r + 1.0)
        else:
            if comp.a + r <= 0.0:
                return math.inf
            out += comp.mass * math.exp(betaln(comp.a + r, comp.b) - betaln(comp.a, comp.b))
    return out


def _probe_divergent_at_zero(g: Callable[[float], float]) -> bool:
    """Crude check that g(p) grows at least like 1/p as p -> 0+."""
    probes = [1e-4, 1e-6, 1e-8]
    vals = []
    for p in probes:
        try:
            vals.append(abs(g(p)))
        except (OverflowError, ZeroDivisionError):
            return True
        if not math.isfinite(vals[-1]):
            return True
    if vals[0] <= 0:
        return False
    # local growth exponent between successive probes; integrand ~ p^s with
    # s <= -1 is non-integrable
    for (p0, v0), (p1, v1) in zip(zip(probes, vals), zip(probes[1:], vals[1:])):
        if v1 > 0 and v0 > 0:
            s = math.log(v1 / v0) / math.log(p1 / p0)
            if s <= -1.0 + 1e-3 and v1 > 1e3 * max(vals[0], 1e-300):
                return True
    return False


def _quad_weighted(g: Callable[[float], float], lo: float, hi: float,
                   p_exp: float, q_exp: float, rel_tol: float) -> float:
    """``int_lo^hi g(p) p^p_exp (1-p)^q_exp dp`` with endpoint singularities
    passed to QUADPACK as algebraic weights whenever the singular endpoint is
    an actual interval endpoint; otherwise folded into the integrand."""
    left = p_exp if (lo == 0.0 and p_exp != 0.0) else 0.0
    right = q_exp if (hi == 1.0 and q_exp != 0.0) else 0.0
    rem_p, rem_q = p_exp - left, q_exp - right

    def h(p: float) -> float:
        val = g(p)
        if rem_p != 0.0:
            val *= p**rem_p
        if rem_q != 0.0:
            val *= (1.0 - p) ** rem_q
        return val

    if left != 0.0 or right != 0.0:
        val, _err = integrate.quad(h, lo, hi, weight="alg", wvar=(left, right),
                                   epsabs=1e-300, epsrel=rel_tol, limit=200)
    else:
        val, _err = integrate.quad(h, lo, hi, epsabs=1e-300, epsrel=rel_tol, limit=200)
    return val


def nu_integral(
    lam: LambdaMeasure,
    f: Callable[[float], float],
    lo: float = 0.0,
    hi: float = 1.0,
    allow_infinite: bool = True,
    rel_tol: float = 1e-10,
) -> float:
    """``int_{(lo,hi]} f(p) p^-2 Lambda(dp)``, an extended real.

    The atom at zero never contributes (the domain excludes 0).  When the
    lower endpoint is 0 the caller either guarantees f(p) = O(p^2) near 0 or
    accepts an infinite result; with ``allow_infinite=False`` a detected
    divergence raises :class:`NonIntegrableError` instead.
    """
    if hi <= lo:
        return 0.0
    lo = max(lo, 0.0)
    hi = min(hi, 1.0)
    out = 0.0
    for comp in lam.components:
        if comp.mass == 0.0:
            continue
        if isinstance(comp, PointMass):
            if lo <= comp.location <= hi:
                out += comp.mass * f(comp.location) / comp.location**2
            continue
        if isinstance(comp, Uniform):
            scale, a_comp, b_comp = comp.mass, 1.0, 1.0
        else:
            scale, a_comp, b_comp = math.exp(comp.log_density_const()), comp.a, comp.b

        def total_integrand(p: float, _s=scale, _a=a_comp, _b=b_comp) -> float:
            return f(p) * _s * p ** (_a - 3.0) * (1.0 - p) ** (_b - 1.0)

        if lo == 0.0 and _probe_divergent_at_zero(total_integrand):
            if not allow_infinite:
                raise NonIntegrableError("nu-integral diverges at the left endpoint 0")
            return math.inf
        # keep only genuinely singular powers in the weight; f is assumed to
        # tame the p^-2 factor near zero, so shift the benign part into g
        p_exp = a_comp - 1.0 if a_comp < 1.0 else 0.0

        def g(p: float, _s=scale, _a=a_comp, _pw=p_exp) -> float:
            return f(p) * _s * p ** (_a - 3.0 - _pw)

        val = _quad_weighted(g, lo, hi, p_exp, b_comp - 1.0, rel_tol)
        if not math.isfinite(val):
            if not allow_infinite:
                raise NonIntegrableError("nu-integral diverged")
            return math.inf
        out += val
    return out


def lambda_integral(lam: LambdaMeasure, f: Callable[[float], float], rel_tol: float = 1e-10) -> float:
    """``int_{(0,1)} f(p) Lambda(dp)`` over the continuous-part support."""
    out = 0.0
    for comp in lam.components:
        if comp.mass == 0.0:
            continue
        if isinstance(comp, PointMass):
            out += comp.mass * f(comp.location)
        elif isinstance(comp, Uniform):
            val, _ = integrate.quad(lambda p: f(p) * comp.mass, 0.0, 1.0,
                                    epsabs=1e-300, epsrel=rel_tol, limit=200)
            out += val
        else:
            scale = math.exp(comp.log_density_const())
            out += _quad_weighted(lambda p: f(p) * scale, 0.0, 1.0,
                                  comp.a - 1.0, comp.b - 1.0, rel_tol)
    return out


# -- event-size samplers ----------------------------------------------------


@lru_cache(maxsize=128)
def _truncated_weights(lam: LambdaMeasure, eps: float) -> tuple[float, ...]:
    """nu-mass of [eps, 1) carried by each component."""
    weights = []
    for comp in lam.components:
        if isinstance(comp, PointMass):
            weights.append(comp.mass / comp.location**2 if comp.location >= eps else 0.0)
        elif isinstance(comp, Uniform):
            weights.append(comp.mass * (1.0 / eps - 1.0))
        else:
            scale = math.exp(comp.log_density_const())
            val, _ = integrate.quad(
                lambda p: scale * p ** (comp.a - 3.0), eps, 1.0,
                weight="alg", wvar=(0.0, comp.b - 1.0),
                epsabs=1e-300, epsrel=1e-12, limit=200,
            )
            weights.append(val)
    return tuple(weights)


def nu_mass_above(lam: LambdaMeasure, eps: float) -> float:
    """nu([eps,1)) — the total rate of reproduction events of size >= eps."""
    if not (0.0 < eps < 1.0):
        raise ValueError(f"eps must lie in (0,1), got {eps}")
    return sum(_truncated_weights(lam, eps))


def _beta_accept_log_max(a: float, b: float, eps: float) -> float:
    """max over [eps,1) of (a-1)log p + (b-1)log(1-p)."""
    # unconstrained maximiser of p^(a-1) (1-p)^(b-1)
    if a > 1.0 and b > 1.0:
        mode = (a - 1.0) / (a + b - 2.0)
    elif a <= 1.0:
        mode = eps
    else:
        mode = 1.0 - 1e-12
    mode = min(max(mode, eps), 1.0 - 1e-12)
    candidates = [mode, eps, 1.0 - 1e-12]
    return max((a - 1.0) * math.log(p) + (b - 1.0) * math.log1p(-p) for p in candidates)


def sample_p_truncated(lam: LambdaMeasure, eps: float, rng: np.random.Generator, size: int | None = None):
    """Draw event sizes from nu restricted to [eps, 1) and normalized.

    Returns a scalar when ``size`` is None, else an ndarray of length ``size``.
    Raises :class:`EmptySupportError` when nu([eps,1)) = 0.
    """
    weights = np.array(_truncated_weights(lam, eps))
    total = weights.sum()
    if total <= 0.0:
        raise EmptySupportError(f"nu has no mass on [{eps}, 1)")
    n = 1 if size is None else int(size)
    out = np.empty(n)
    comp_idx = rng.choice(len(weights), size=n, p=weights / total)
    for i, comp in enumerate(lam.components):
        mask = comp_idx == i
        m = int(mask.sum())
        if m == 0:
            continue
        if isinstance(comp, PointMass):
            out[mask] = comp.location
        elif isinstance(comp, Uniform):
            u = rng.random(m)
            out[mask] = 1.0 / (1.0 / eps - u * (1.0 / eps - 1.0))
        else:
            out[mask] = _sample_beta_nu_truncated(comp, eps, rng, m)
    if size is None:
        return float(out[0])
    return out


def _sample_beta_nu_truncated(comp: BetaDensity, eps: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """Rejection for density ∝ p^(a-3)(1-p)^(b-1) on [eps,1).

    Proposal is nu of the uniform measure (∝ p^-2), acceptance ratio
    p^(a-1)(1-p)^(b-1) / max, which is exact for every shape.
    """
    log_max = _beta_accept_log_max(comp.a, comp.b, eps)
    out = np.empty(n)
    need = np.ones(n, dtype=bool)
    while need.any():
        m = int(need.sum())
        u = rng.random(m)
        p = 1.0 / (1.0 / eps - u * (1.0 / eps - 1.0))
        logr = (comp.a - 1.0) * np.log(p) + (comp.b - 1.0) * np.log1p(-p) - log_max
        acc = np.log(rng.random(m)) < logr
        idx = np.flatnonzero(need)[acc]
        out[idx] = p[acc]
        need[idx] = False
    return out


def birth_coverage(p: float, n: int) -> float:
    """P(a size-p event marks at least 2 of n levels) = 1-(1-p)^n-np(1-p)^(n-1).

    Evaluated by its power series when n*p is small, since the direct form
    loses all precision to cancellation there.
    """
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    if n * p > 0.5:
        return -math.expm1(n * math.log1p(-p)) - n * p * math.exp((n - 1) * math.log1p(-p))
    # sum_{j>=2} (-1)^j (j-1) C(n,j) p^j
    term = n * (n - 1) / 2.0 * p * p
    total = term
    for j in range(2, n):
        term *= -p * (n - j) / (j + 1.0) * (j / (j - 1.0))
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return total


@lru_cache(maxsize=64)
def _birth_sampler_plan(lam: LambdaMeasure, L: int):
    """Precomputed decomposition behind :func:`sample_p_birth_event`."""
    if lam.point_masses_only():
        weights = [c.mass * birth_coverage(c.location, L) / c.location**2
                   for c in lam.components]
        total = sum(weights)
        if total <= 0.0:
            raise EmptySupportError("no birth events visible for this measure")
        cum, acc = [], 0.0
        for w in weights:
            acc += w
            cum.append(acc)
        return ("categorical", tuple(cum), tuple(c.location for c in lam.components))
    c_l2 = L * (L - 1) / 2.0
    p_c = min(1.0, 1.0 / math.sqrt(c_l2))
    hi_weights = _truncated_weights(lam, p_c)
    parts: list[tuple[float, Component, str]] = []
    for i, comp in enumerate(lam.components):
        if comp.mass == 0.0:
            continue
        if isinstance(comp, PointMass):
            envelope = comp.mass * c_l2 if comp.location <= p_c else comp.mass / comp.location**2
            parts.append((envelope, comp, "point"))
        else:
            if isinstance(comp, Uniform):
                lam_mass = comp.mass * p_c
            else:
                lam_mass = comp.mass * float(betainc(comp.a, comp.b, p_c))
            parts.append((c_l2 * lam_mass, comp, "below"))
            parts.append((hi_weights[i], comp, "above"))
    cum, acc = [], 0.0
    for w, _, _ in parts:
        acc += w
        cum.append(acc)
    return ("envelope", tuple(cum), tuple(parts), c_l2, p_c)


def sample_p_birth_event(lam: LambdaMeasure, L: int, rng: np.random.Generator) -> float:
    """Draw p from the measure ∝ [1-(1-p)^L - Lp(1-p)^(L-1)] nu(dp) on (0,1].

    This is the size distribution of reproduction events visible in a window
    of L levels.  Point-mass-only measures use the categorical law directly;
    otherwise rejection against the envelope min(1, C(L,2) p^2) nu(dp), whose
    two pieces are C(L,2)·Lambda below p_c = C(L,2)^(-1/2) and nu above it.
    """
    if L < 2:
        raise ValueError(f"need at least two levels, got L={L}")
    plan = _birth_sampler_plan(lam, L)
    if plan[0] == "categorical":
        _, cum, locations = plan
        u = rng.random() * cum[-1]
        for acc, loc in zip(cum, locations):
            if u <= acc:
                return loc
        return locations[-1]
    _, cum, parts, c_l2, p_c = plan
    total = cum[-1]
    while True:
        u = rng.random() * total
        k = 0
        while cum[k] < u:
            k += 1
        _, comp, kind = parts[k]
        if kind == "point":
            p = comp.location
        elif kind == "below":
            if isinstance(comp, Uniform):
                p = rng.random() * p_c
            else:
                p = float(betaincinv(comp.a, comp.b, rng.random() * betainc(comp.a, comp.b, p_c)))
        else:
            p = _single_truncated_draw(comp, p_c, rng)
        if p <= 0.0:
            continue
        accept = birth_coverage(p, L) / min(1.0, c_l2 * p * p)
        if rng.random() < accept:
            return float(p)


def _single_truncated_draw(comp: Component, eps: float, rng: np.random.Generator) -> float:
    if isinstance(comp, Uniform):
        u = rng.random()
        return 1.0 / (1.0 / eps - u * (1.0 / eps - 1.0))
    return float(_sample_beta_nu_truncated(comp, eps, rng, 1)[0])


def sample_p_given_second_mark(lam: LambdaMeasure, j: int, rng: np.random.Generator) -> float:
    """Draw p conditionally on the event's second-lowest mark sitting at level j.

    The conditional law is ∝ (1-p)^(j-2) Lambda(dp), which is closed-form for
    every supported component.  Used by the level-indexed event stream of the
    coupled lookdown engine.
    """
    if j < 2:
        raise ValueError("second mark is at level >= 2")
    weights = []
    for comp in lam.components:
        if isinstance(comp, PointMass):
            weights.append(comp.mass * (1.0 - comp.location) ** (j - 2))
        elif isinstance(comp, Uniform):
            weights.append(comp.mass / (j - 1.0))
        else:
            weights.append(comp.mass * math.exp(betaln(comp.a, comp.b + j - 2) - betaln(comp.a, comp.b)))
    weights = np.asarray(weights)
    total = weights.sum()
    if total <= 0.0:
        raise EmptySupportError("no visible birth events for this measure")
    comp = lam.components[rng.choice(len(weights), p=weights / total)]
    if isinstance(comp, PointMass):
        return comp.location
    if isinstance(comp, Uniform):
        return float(rng.beta(1.0, j - 1.0))
    return float(rng.beta(comp.a, comp.b + j - 2.0))


def second_mark_rate(lam: LambdaMeasure, j: int) -> float:
    """Rate of events whose second-lowest mark is exactly level j.

    Equals (j-1) * int (1-p)^(j-2) Lambda(dp); summing over j = 2..L gives
    the total rate of events visible in a window of L levels.
    """
    out = 0.0
    for comp in lam.components:
        if isinstance(comp, PointMass):
            out += comp.mass * (1.0 - comp.location) ** (j - 2)
        elif isinstance(comp, Uniform):
            out += comp.mass / (j - 1.0)
        else:
            out += comp.mass * math.exp(betaln(comp.a, comp.b + j - 2) - betaln(comp.a, comp.b))
    return (j - 1.0) * out


# convenience constructors used all over the tests and scenario files

def uniform_measure(mass: float = 1.0) -> LambdaMeasure:
    return LambdaMeasure(components=(Uniform(mass),))


def point_mass_measure(location: float, mass: float) -> LambdaMeasure:
    return LambdaMeasure(components=(PointMass(location, mass),))


def kingman_measure(c: float = 1.0) -> LambdaMeasure:
    return LambdaMeasure(atom0=c)
