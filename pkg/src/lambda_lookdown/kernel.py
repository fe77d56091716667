"""The finite-population increment kernel and exact checks of its identities.

A reproduction event seen from a window of N levels changes the type-b
proportion r by a quantity psi(r, u, p, v, w)/1 built from three inverse
CDFs: a binomial one (how many of the N levels the event marks) and two
hypergeometric ones (how the marked levels split between the two types).
The kernel integrates to zero in (u, w), its second moment in (u, v, w) is
exactly p^2 r (1-r), and its L2 distance to the limiting jump kernel
p(1_{u<=r} - r) has a closed form; those three facts are what this module
exposes and what the tests verify, in exact rational arithmetic for small N.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable

from .measure import LambdaMeasure, lambda_integral, nu_integral

EXACT_N_LIMIT = 16


class ParameterDomainError(ValueError):
    """Raised when N*r is not an integer on a branch that requires it."""


def _window_count(N: int, r) -> int:
    """N*r as an exact integer, or raise."""
    nr = N * r
    if isinstance(nr, Fraction):
        if nr.denominator != 1:
            raise ParameterDomainError(f"N*r must be an integer, got {nr}")
        return int(nr)
    rounded = round(nr)
    if abs(nr - rounded) > 1e-9:
        raise ParameterDomainError(f"N*r must be an integer, got {nr}")
    return int(rounded)


# -- distribution functions ---------------------------------------------------


def binomial_pmf(s: int, N: int, p):
    if s < 0 or s > N:
        return 0 * p
    return math.comb(N, s) * p**s * (1 - p) ** (N - s)


def binomial_inverse(v, N: int, p) -> int:
    """Left-continuous inverse of the binomial CDF: inf{s : P(X <= s) >= v}."""
    cdf = 0 * p
    for s in range(N + 1):
        cdf += binomial_pmf(s, N, p)
        if cdf >= v:
            return s
    return N


def hypergeom_support(M: int, m: int, K: int) -> range:
    """Support of draws without replacement: m draws, K successes among M."""
    return range(max(0, m - (M - K)), min(m, K) + 1)


def hypergeom_pmf(s: int, M: int, m: int, K: int) -> Fraction:
    if s not in hypergeom_support(M, m, K):
        return Fraction(0)
    return Fraction(math.comb(K, s) * math.comb(M - K, m - s), math.comb(M, m))


def hypergeom_inverse(w, M: int, m: int, K: int) -> int:
    """inf{s : P(X <= s) >= w} for the hypergeometric law (M, m, K)."""
    cdf = Fraction(0)
    lo = max(0, m - (M - K))
    for s in hypergeom_support(M, m, K):
        cdf += hypergeom_pmf(s, M, m, K)
        if cdf >= w:
            return s
    return min(m, K)


def hypergeom_moments(M: int, m: int, K: int, exact: bool) -> tuple:
    """(E X, E X^2) by literal summation over the support."""
    m1 = Fraction(0) if exact else 0.0
    m2 = Fraction(0) if exact else 0.0
    for s in hypergeom_support(M, m, K):
        w = hypergeom_pmf(s, M, m, K)
        if not exact:
            w = float(w)
        m1 += s * w
        m2 += s * s * w
    return m1, m2


# -- the kernel ---------------------------------------------------------------


def psi(N: int, r, u, p, v, w) -> float:
    """Evaluate the window-N increment kernel at (r, u, p, v, w).

    The gate is the number of marked levels F = binomial_inverse(v, N, p):
    events marking fewer than two levels do nothing.  On the u <= r branch
    the value is (F - 1 - G)/N with G hypergeometric on successes Nr - 1;
    otherwise -Gbar/N with successes Nr.
    """
    F = binomial_inverse(v, N, p)
    if F < 2:
        return 0.0
    nr = _window_count(N, r)
    if u <= r:
        if nr == 0:
            # r = 0 makes this branch unreachable for u in (0,1]
            return 0.0
        G = hypergeom_inverse(w, N - 1, F - 1, nr - 1)
        return float(Fraction(F - 1 - G, N))
    Gbar = hypergeom_inverse(w, N - 1, F - 1, nr)
    return float(Fraction(-Gbar, N))


def mean_zero_residual(N: int, r, p, v, exact: bool | None = None) -> float:
    """Residual of ``int psi du dw = 0`` at fixed (p, v).

    The u-integral weights the two branches by r and 1-r; the w-integral of
    an inverse CDF is the distribution's mean, here obtained by literal
    summation of s * pmf(s) so the check does not reuse the closed-form mean
    the identity rests on.
    """
    if exact is None:
        exact = N <= EXACT_N_LIMIT
    F = binomial_inverse(v, N, p)
    if F < 2:
        return 0.0
    nr = _window_count(N, r)
    if exact:
        r = Fraction(nr, N)
        one = Fraction(1)
    else:
        r = nr / N
        one = 1.0
    if nr >= 1:
        g_mean, _ = hypergeom_moments(N - 1, F - 1, nr - 1, exact)
        lhs = r * ((F - 1) - g_mean)
    else:
        lhs = 0 * one
    gbar_mean, _ = hypergeom_moments(N - 1, F - 1, nr, exact)
    residual = (lhs - (one - r) * gbar_mean) / N
    return float(residual)


def second_moment(N: int, r, p, exact: bool | None = None) -> float:
    """``int psi^2 du dv dw``, which the variance identity pins to p^2 r(1-r).

    Computed as a finite sum over the binomial outcome F with exact
    hypergeometric second moments; in exact mode every term is a Fraction.
    """
    if exact is None:
        exact = N <= EXACT_N_LIMIT
    nr = _window_count(N, r)
    if exact:
        p = Fraction(p)
        r = Fraction(nr, N)
        total = Fraction(0)
    else:
        r = nr / N
        total = 0.0
    for F in range(2, N + 1):
        weight = binomial_pmf(F, N, p)
        if nr >= 1:
            m1, m2 = hypergeom_moments(N - 1, F - 1, nr - 1, exact)
            branch_b = (F - 1) ** 2 - 2 * (F - 1) * m1 + m2
        else:
            branch_b = 0
        _, m2bar = hypergeom_moments(N - 1, F - 1, nr, exact)
        total += weight * (r * branch_b + (1 - r) * m2bar)
    total /= N * N
    return float(total)


def second_moment_closed_form(r: float, p: float) -> float:
    return p * p * r * (1.0 - r)


# -- distance to the limiting kernel ------------------------------------------


def _kernel_quadratic_coeffs(N: int, nr: int) -> list[tuple[float, float, float, float]]:
    """Per-F coefficients of the (u,w)-integrated squared distance.

    For each F the integral of (psi - p*Psi)^2 over u and w is a quadratic
    a_F - 2 p b_F + p^2 c with c = r(1-r) common to all F; the returned
    tuples are (Ea, Ea2, Eb, Eb2) moments of the two branches, from which
    the quadratic is assembled at any p.
    """
    out = []
    for F in range(2, N + 1):
        if nr >= 1:
            m1, m2 = hypergeom_moments(N - 1, F - 1, nr - 1, exact=False)
            ea = (F - 1 - m1) / N
            ea2 = ((F - 1) ** 2 - 2 * (F - 1) * m1 + m2) / N**2
        else:
            ea = ea2 = 0.0
        m1b, m2b = hypergeom_moments(N - 1, F - 1, nr, exact=False)
        out.append((ea, ea2, m1b / N, m2b / N**2))
    return out


def conv_identity_check(N: int, r, lam: LambdaMeasure) -> dict:
    """Both sides of the closed form for ``int (psi - p Psi)^2 du nu(dp) dv dw``.

    Returns lhs (exact finite sums in (u,v,w), quadrature in p), the
    closed-form rhs 2r(1-r)[N/(N-1) int (1-up)^(N-1) du Lambda(dp)
    - Lambda([0,1])/(N-1)], and their relative residual.
    """
    if lam.atom0 > 0.0:
        raise ValueError("identity is stated for measures with no atom at zero")
    nr = _window_count(N, r)
    r = nr / N
    if r in (0.0, 1.0):
        return {"lhs": 0.0, "rhs": 0.0, "residual": 0.0}
    coeffs = _kernel_quadratic_coeffs(N, nr)

    def integrated_square(p: float) -> float:
        # sum over F of P(F) * [ r E(a - p(1-r))^2 + (1-r) E(pr - b)^2 ]
        total = 0.0
        cdf_small = 0.0
        for s in (0, 1):
            cdf_small += float(binomial_pmf(s, N, p))
        total += cdf_small * (r * (p * (1 - r)) ** 2 + (1 - r) * (p * r) ** 2)
        for F in range(2, N + 1):
            wgt = float(binomial_pmf(F, N, p))
            ea, ea2, eb, eb2 = coeffs[F - 2]
            branch_b = ea2 - 2 * p * (1 - r) * ea + (p * (1 - r)) ** 2
            branch_top = (p * r) ** 2 - 2 * p * r * eb + eb2
            total += wgt * (r * branch_b + (1 - r) * branch_top)
        return total

    lhs = nu_integral(lam, integrated_square, 0.0, 1.0, rel_tol=1e-11)

    def mean_survival(p: float) -> float:
        # int_0^1 (1-up)^(N-1) du = (1 - (1-p)^N) / (N p)
        if p < 1e-12:
            return 1.0 - (N - 1) * p / 2.0
        return -math.expm1(N * math.log1p(-p)) / (N * p)

    big_i = lambda_integral(lam, mean_survival)
    rhs = 2.0 * r * (1 - r) * (N / (N - 1.0) * big_i - lam.total_mass() / (N - 1.0))
    residual = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return {"lhs": lhs, "rhs": rhs, "residual": residual}


def identity_grid_report(
    n_values: Iterable[int] = (2, 4, 6, 8),
    p_values: Iterable[float] = (0.1, 0.5, 0.9),
    v_values: Iterable[float] = (0.05, 0.5, 0.95),
) -> dict:
    """Run the mean-zero and second-moment identity grids in exact mode.

    Returns maximum absolute residuals; this backs the kernel-check CLI
    subcommand and the acceptance suite.
    """
    max_mean_zero = 0.0
    max_second = 0.0
    cases = 0
    for N in n_values:
        for nr in range(1, N):
            r = Fraction(nr, N)
            for p in p_values:
                for v in v_values:
                    res = abs(mean_zero_residual(N, r, Fraction(p), Fraction(v), exact=True))
                    max_mean_zero = max(max_mean_zero, res)
                    cases += 1
                sm = second_moment(N, r, Fraction(p), exact=True)
                target = float(Fraction(p) ** 2 * r * (1 - r))
                max_second = max(max_second, abs(sm - target))
    return {
        "cases": cases,
        "max_mean_zero_residual": max_mean_zero,
        "max_second_moment_residual": max_second,
        "pass": max_mean_zero <= 1e-12 and max_second <= 1e-12,
    }
