"""Finite truncation of the lookdown particle system with selection.

Levels 1..L carry types (1 = type b, 0 = type B).  Reproduction events copy
the type of the lowest participating level onto the other participants and
shift the displaced types upward in order; selection places death crosses at
rate alpha per level, killing type-b individuals and shifting everything
above them down one level.  The reported observable is the proportion of
type b among the lowest N levels; the extra ``buffer`` levels shield the
window from the truncation at the top, where a death refills the vacated
top level with a Bernoulli draw at the current window proportion (the
mean-field closure) or with a fixed 1 (conservative mode).

Two event engines produce the same law:

* :func:`simulate` superposes all event sources into one Gillespie clock
  (fast; the default), drawing the event size with the window-visibility
  weighting and the participant set as Bernoulli marks conditioned on at
  least two hits.
* :func:`simulate_coupled` generates events level-indexed (one stream per
  level, keyed by a counter-based seed sequence) so runs with different L
  share every stream they have in common; this is the engine behind the
  window-consistency test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rates
from .measure import (
    LambdaMeasure,
    sample_p_birth_event,
    sample_p_given_second_mark,
    second_mark_rate,
)
from .paths import Path, normalize_grid

REFILL_MODES = ("mean_field", "ones")


class InvalidEventError(ValueError):
    """A birth event that does not describe a merger."""


@dataclass
class LookdownState:
    """Ordered type vector over levels 1..L plus the simulation clock."""

    types: bytearray
    N: int
    clock: float = 0.0

    def __post_init__(self) -> None:
        if self.N < 1 or self.N > len(self.types):
            raise ValueError(f"window size {self.N} incompatible with {len(self.types)} levels")
        if any(t not in (0, 1) for t in self.types):
            raise ValueError("types must be 0/1")

    @property
    def L(self) -> int:
        return len(self.types)

    def window_proportion(self) -> float:
        return sum(self.types[: self.N]) / self.N

    def copy(self) -> "LookdownState":
        return LookdownState(bytearray(self.types), self.N, self.clock)


@dataclass(frozen=True)
class BirthEvent:
    """A multi-birth: sorted participant levels and the event size p."""

    participants: tuple[int, ...]
    p: float = float("nan")

    def __post_init__(self) -> None:
        part = tuple(sorted(self.participants))
        object.__setattr__(self, "participants", part)
        if len(part) < 2:
            raise InvalidEventError("a birth event needs at least two participants")
        if len(set(part)) != len(part) or part[0] < 1:
            raise InvalidEventError(f"participants must be distinct levels >= 1, got {part}")


def init_state(N: int, buffer: int, x: float, rng: np.random.Generator) -> LookdownState:
    """Independent Bernoulli(x) types on L = N + buffer levels."""
    if N < 1 or buffer < 0:
        raise ValueError("need N >= 1 and buffer >= 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"initial proportion must be in [0,1], got {x}")
    L = N + buffer
    types = bytearray((rng.random(L) < x).astype(np.uint8).tobytes())
    return LookdownState(types, N)


def _birth_inplace(types: bytearray, L: int, participants: tuple[int, ...]) -> None:
    visible = [lvl for lvl in participants if lvl <= L]
    if len(visible) < 2:
        return
    parent_type = types[visible[0] - 1]
    for lvl in visible[1:]:
        types.insert(lvl - 1, parent_type)
    del types[L:]


def apply_birth(state: LookdownState, event: BirthEvent) -> LookdownState:
    """Copy the lowest participant's type onto the others, shifting the rest up.

    Participants above the truncation are ignored; if fewer than two remain
    the window sees nothing and the state is returned unchanged.
    """
    out = state.copy()
    _birth_inplace(out.types, out.L, event.participants)
    return out


def _death_inplace(types: bytearray, i: int, refill: int) -> bool:
    if types[i - 1] == 0:
        return False
    del types[i - 1]
    types.append(refill)
    return True


def apply_death(state: LookdownState, i: int, refill: int) -> LookdownState:
    """Death cross at level i: a no-op on type B, otherwise a downward shift.

    ``refill`` is the caller-supplied Bernoulli draw closing the top level.
    """
    if not 1 <= i <= state.L:
        raise ValueError(f"level {i} outside 1..{state.L}")
    out = state.copy()
    _death_inplace(out.types, i, int(refill))
    return out


def _single_birth_inplace(types: bytearray, i: int, j: int) -> None:
    types.insert(j - 1, types[i - 1])
    del types[-1]


def apply_single_birth(state: LookdownState, i: int, j: int) -> LookdownState:
    """Kingman-part arrow i -> j (i < j): a single child of i lands on level j."""
    if i >= j:
        raise InvalidEventError(f"arrow must point upward, got {i} -> {j}")
    if i < 1 or j > state.L:
        raise ValueError(f"arrow {i}->{j} outside 1..{state.L}")
    out = state.copy()
    _single_birth_inplace(out.types, i, j)
    return out


def first_B_level(state: LookdownState) -> float:
    """Lowest level occupied by a type-B individual, or +inf if none visible."""
    idx = state.types.find(0)
    return math.inf if idx < 0 else idx + 1


# -- event-size and participant draws ----------------------------------------


def _draw_count_at_least_two(L: int, p: float, rng: np.random.Generator) -> int:
    """Number of Bernoulli(p) marks on L levels conditioned on >= 2.

    Inverse-CDF enumeration when L*p is small (a bare rejection loop would
    essentially never terminate there); rejection on the binomial count
    otherwise.
    """
    if L * p < 0.5:
        log_t = math.log(L * (L - 1) / 2.0) + 2.0 * math.log(p) + (L - 2) * math.log1p(-p)
        term = math.exp(log_t)
        probs = [term]
        k = 2
        while term > 1e-16 * sum(probs) and k < L:
            term *= (L - k) / (k + 1.0) * p / (1.0 - p)
            probs.append(term)
            k += 1
        u = rng.random() * sum(probs)
        acc = 0.0
        for j, q in enumerate(probs):
            acc += q
            if u <= acc:
                return j + 2
        return len(probs) + 1
    while True:
        k = int(rng.binomial(L, p))
        if k >= 2:
            return k


def _draw_levels(L: int, k: int, rng: np.random.Generator) -> list[int]:
    """k distinct uniform levels in 1..L (Floyd's algorithm), sorted."""
    chosen: set[int] = set()
    for j in range(L - k, L):
        t = int(rng.integers(0, j + 1))
        chosen.add(t if t not in chosen else j)
    return sorted(lvl + 1 for lvl in chosen)


def _refill_draw(types: bytearray, N: int, mode: str, rng: np.random.Generator) -> int:
    if mode == "ones":
        return 1
    prop = sum(types[:N]) / N
    return 1 if rng.random() < prop else 0


def simulate(
    lam: LambdaMeasure,
    alpha: float,
    x: float,
    N: int,
    buffer: int | None,
    T: float,
    rng: np.random.Generator,
    record_grid=None,
    refill_mode: str = "mean_field",
    record_levels: int = 0,
) -> Path:
    """Event-driven simulation of the window proportion on [0, T].

    Multi-birth events arrive at the total visibility rate of the window of
    L = N + buffer levels; their size comes from the visibility-weighted law
    and the participant set from Bernoulli marks conditioned on two hits.
    With an atom at zero, single-birth arrows arrive at rate atom0 * C(L,2)
    on uniform ordered pairs.  Death crosses arrive at rate alpha per level.
    Deterministic given (rng, parameters).

    ``record_levels`` > 0 additionally stores the first so-many level types
    at each grid time (used by the exchangeability test).
    """
    if N < 1:
        raise ValueError("window must hold at least one level")
    if alpha < 0.0:
        raise ValueError(f"death rate must be nonnegative, got {alpha}")
    if refill_mode not in REFILL_MODES:
        raise ValueError(f"unknown refill mode {refill_mode!r}")
    if buffer is None:
        buffer = N
    grid = normalize_grid(record_grid, T)
    state = init_state(N, buffer, x, rng)
    L = state.L
    types = state.types

    birth_rate = rates.total_rate(lam, L) - lam.atom0 * rates.binom2(L) if lam.components else 0.0
    single_rate = lam.atom0 * rates.binom2(L)
    death_rate = alpha * L
    total = birth_rate + single_rate + death_rate

    values = np.empty(len(grid))
    levels_out = np.empty((len(grid), record_levels), dtype=np.uint8) if record_levels else None
    g = 0
    t = 0.0
    counts = {"births": 0, "single_births": 0, "crosses": 0, "deaths": 0}
    fix_time = math.nan
    window_sum = sum(types[:N])
    if window_sum in (0, N):
        fix_time = 0.0

    def record_up_to(limit: float) -> None:
        nonlocal g
        while g < len(grid) and grid[g] < limit:
            values[g] = sum(types[:N]) / N
            if levels_out is not None:
                levels_out[g] = list(types[:record_levels])
            g += 1

    check_every = 16  # absorption checks cost O(L); amortize them
    since_check = 0
    while total > 0.0:
        dt = rng.exponential(1.0 / total)
        t_next = t + dt
        record_up_to(min(t_next, T))
        if t_next > T or g >= len(grid):
            t = min(t_next, T)
            break
        t = t_next
        u = rng.random() * total
        if u < birth_rate:
            counts["births"] += 1
            p = sample_p_birth_event(lam, L, rng)
            k = _draw_count_at_least_two(L, p, rng)
            _birth_inplace(types, L, tuple(_draw_levels(L, k, rng)))
        elif u < birth_rate + single_rate:
            counts["single_births"] += 1
            i, j = _draw_levels(L, 2, rng)
            _single_birth_inplace(types, i, j)
        else:
            counts["crosses"] += 1
            i = int(rng.integers(1, L + 1))
            if types[i - 1] == 1:
                refill = _refill_draw(types, N, refill_mode, rng)
                _death_inplace(types, i, refill)
                counts["deaths"] += 1
        since_check += 1
        if math.isnan(fix_time) or since_check >= check_every:
            since_check = 0
            if math.isnan(fix_time) and sum(types[:N]) in (0, N):
                fix_time = t
            full = sum(types)
            if full == 0 or full == L:
                # uniform full states are invariant under every event source
                # (mean-field refills reproduce the constant type)
                break

    record_up_to(grid[-1] + 1.0)  # flush remaining grid points with final state
    meta = {"counts": counts, "first_window_fixation": fix_time,
            "final_window": sum(types[:N]) / N, "L": L}
    if levels_out is not None:
        meta["levels"] = levels_out
    return Path(grid, values, meta)


# -- level-indexed coupled engine ---------------------------------------------

_KIND_INIT, _KIND_CROSS, _KIND_BIRTH, _KIND_MARK, _KIND_ARROW = range(5)


def _stream(seed: int, kind: int, level: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(kind, level))))


def simulate_coupled(
    lam: LambdaMeasure,
    alpha: float,
    x: float,
    N: int,
    buffer: int,
    T: float,
    seed: int,
    record_grid=None,
    refill_mode: str = "mean_field",
) -> Path:
    """Level-indexed variant of :func:`simulate` with the same law.

    Every event source is its own counter-based stream keyed by (kind,
    level): crosses per level, multi-births indexed by the level of their
    second-lowest mark (rate (j-1) * int (1-p)^(j-2) Lambda(dp), with marks
    above j drawn from per-level mark streams), and Kingman arrows indexed
    by their target level.  Enlarging the buffer adds streams without
    disturbing shared ones, so two runs agree on the window until a refill
    propagates into it.
    """
    if refill_mode not in REFILL_MODES:
        raise ValueError(f"unknown refill mode {refill_mode!r}")
    grid = normalize_grid(record_grid, T)
    L = N + buffer
    init_rng = _stream(seed, _KIND_INIT, 0)
    state = init_state(N, buffer, x, init_rng)
    types = state.types

    cross_rngs = [_stream(seed, _KIND_CROSS, i) for i in range(1, L + 1)]
    mark_rngs = [_stream(seed, _KIND_MARK, i) for i in range(1, L + 1)]
    birth_rngs = [_stream(seed, _KIND_BIRTH, j) for j in range(2, L + 1)]
    birth_rates = [second_mark_rate(lam, j) if lam.components else 0.0 for j in range(2, L + 1)]
    arrow_rngs = [_stream(seed, _KIND_ARROW, j) for j in range(2, L + 1)] if lam.atom0 > 0 else []
    arrow_rates = [lam.atom0 * (j - 1) for j in range(2, L + 1)] if lam.atom0 > 0 else []

    def first_times(rngs, rate_list):
        return np.array([r.exponential(1.0 / rate) if rate > 0 else math.inf
                         for r, rate in zip(rngs, rate_list)])

    cross_next = first_times(cross_rngs, [alpha] * L if alpha > 0 else [0.0] * L)
    birth_next = first_times(birth_rngs, birth_rates)
    arrow_next = first_times(arrow_rngs, arrow_rates) if arrow_rates else np.array([])

    values = np.empty(len(grid))
    g = 0
    t = 0.0
    counts = {"births": 0, "single_births": 0, "crosses": 0, "deaths": 0}

    def record_up_to(limit: float) -> None:
        nonlocal g
        while g < len(grid) and grid[g] < limit:
            values[g] = sum(types[:N]) / N
            g += 1

    while True:
        candidates = [cross_next.min() if len(cross_next) else math.inf,
                      birth_next.min() if len(birth_next) else math.inf,
                      arrow_next.min() if len(arrow_next) else math.inf]
        t_next = min(candidates)
        record_up_to(min(t_next, T))
        if t_next > T or g >= len(grid):
            break
        t = t_next
        which = candidates.index(t_next)
        if which == 0:
            i = int(cross_next.argmin()) + 1
            counts["crosses"] += 1
            if types[i - 1] == 1:
                refill = _refill_draw(types, N, refill_mode, cross_rngs[i - 1])
                _death_inplace(types, i, refill)
                counts["deaths"] += 1
            cross_next[i - 1] = t + cross_rngs[i - 1].exponential(1.0 / alpha)
        elif which == 1:
            jdx = int(birth_next.argmin())
            j = jdx + 2
            rng_j = birth_rngs[jdx]
            counts["births"] += 1
            p = sample_p_given_second_mark(lam, j, rng_j)
            j0 = int(rng_j.integers(1, j))
            participants = [j0, j]
            for i in range(j + 1, L + 1):
                if mark_rngs[i - 1].random() < p:
                    participants.append(i)
            _birth_inplace(types, L, tuple(participants))
            birth_next[jdx] = t + rng_j.exponential(1.0 / birth_rates[jdx])
        else:
            jdx = int(arrow_next.argmin())
            j = jdx + 2
            counts["single_births"] += 1
            i = int(arrow_rngs[jdx].integers(1, j))
            _single_birth_inplace(types, i, j)
            arrow_next[jdx] = t + arrow_rngs[jdx].exponential(1.0 / arrow_rates[jdx])

    record_up_to(grid[-1] + 1.0)
    return Path(grid, values, {"counts": counts, "L": L})
