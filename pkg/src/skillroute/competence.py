"""Beta-Bernoulli competence counters and running cost estimates.

All functions are pure: they return new profiles and never touch their
inputs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .errors import NegativeCostError, ProfileMismatchError, UnknownSkillError
from .handbook import PRIOR, AgentProfile, BetaCounts, CostStats


@dataclass(frozen=True)
class Outcome:
    """One labeled use of an agent on a set of skills.

    ``query`` is optional bookkeeping used by the refiner's per-query index.
    """

    agent_id: str
    mode: str
    skill_ids: tuple[str, ...]
    success: bool
    cost: float = 0.0
    query: str = ""

    def __post_init__(self):
        if not self.skill_ids:
            raise ValueError("outcome needs at least one active skill")
        if self.cost < 0:
            raise NegativeCostError(f"negative outcome cost {self.cost!r}")


def update_counters(
    profile: AgentProfile,
    outcomes: Iterable[Outcome],
    *,
    known_skills: Iterable[str] | None = None,
    prior: BetaCounts = PRIOR,
) -> AgentProfile:
    """Add one success/failure per (outcome, active skill) pair.

    ``known_skills`` restricts which skill ids are accepted; by default any id
    is accepted.
    """
    allowed = None if known_skills is None else set(known_skills)
    wins: dict[str, int] = defaultdict(int)
    losses: dict[str, int] = defaultdict(int)
    for o in outcomes:
        if o.agent_id != profile.agent_id or o.mode != profile.mode:
            raise ProfileMismatchError(
                f"outcome for ({o.agent_id}, {o.mode}) applied to profile ({profile.agent_id}, {profile.mode})"
            )
        # a skill listed twice in one outcome is one incidence
        for sid in dict.fromkeys(o.skill_ids):
            if allowed is not None and sid not in allowed:
                raise UnknownSkillError(sid)
            if o.success:
                wins[sid] += 1
            else:
                losses[sid] += 1
    if not wins and not losses:
        return profile
    counters = dict(profile.counters)
    for sid in sorted(set(wins) | set(losses)):
        a, b = counters.get(sid, prior)
        counters[sid] = BetaCounts(a + wins[sid], b + losses[sid])
    return replace(profile, counters=counters)


def posterior_mean(profile: AgentProfile | None, skill_id: str, prior: BetaCounts = PRIOR) -> float:
    a, b = prior if profile is None else profile.counts(skill_id, prior)
    return a / (a + b)


def update_cost(profile: AgentProfile, observed_cost: float) -> AgentProfile:
    if observed_cost < 0:
        raise NegativeCostError(f"observed cost must be >= 0, got {observed_cost!r}")
    n = profile.cost.count
    mean = profile.cost.mean + (observed_cost - profile.cost.mean) / (n + 1)
    return replace(profile, cost=CostStats(mean=mean, count=n + 1))


def update_costs(profile: AgentProfile, costs: Sequence[float]) -> AgentProfile:
    for c in costs:
        profile = update_cost(profile, c)
    return profile


@dataclass(frozen=True)
class CounterDelta:
    """Counter and cost increments from one batch, mergeable across workers."""

    wins: Mapping[str, int]
    losses: Mapping[str, int]
    cost_sum: float = 0.0
    cost_count: int = 0

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[Outcome]) -> CounterDelta:
        wins: dict[str, int] = defaultdict(int)
        losses: dict[str, int] = defaultdict(int)
        total, n = 0.0, 0
        for o in outcomes:
            for sid in dict.fromkeys(o.skill_ids):
                (wins if o.success else losses)[sid] += 1
            total += o.cost
            n += 1
        return cls(dict(wins), dict(losses), total, n)


def merge_deltas(deltas: Iterable[CounterDelta]) -> CounterDelta:
    wins: dict[str, int] = defaultdict(int)
    losses: dict[str, int] = defaultdict(int)
    total, n = 0.0, 0
    for d in deltas:
        for sid, k in d.wins.items():
            wins[sid] += k
        for sid, k in d.losses.items():
            losses[sid] += k
        total += d.cost_sum
        n += d.cost_count
    return CounterDelta(dict(wins), dict(losses), total, n)


def apply_delta(profile: AgentProfile, delta: CounterDelta, prior: BetaCounts = PRIOR) -> AgentProfile:
    """Apply merged counter increments; the cost mean is combined exactly by weight."""
    counters = dict(profile.counters)
    for sid in sorted(set(delta.wins) | set(delta.losses)):
        a, b = counters.get(sid, prior)
        counters[sid] = BetaCounts(a + delta.wins.get(sid, 0), b + delta.losses.get(sid, 0))
    cost = profile.cost
    if delta.cost_count:
        n = cost.count + delta.cost_count
        cost = CostStats(mean=(cost.mean * cost.count + delta.cost_sum) / n, count=n)
    return replace(profile, counters=counters, cost=cost)


def normalize_cost(raw_cost: float, reference_cost: float) -> float:
    """Map a raw per-call cost (currency, tokens) to normalized cost units."""
    if reference_cost <= 0:
        raise ValueError(f"reference cost must be > 0, got {reference_cost!r}")
    if raw_cost < 0:
        raise NegativeCostError(f"raw cost must be >= 0, got {raw_cost!r}")
    return raw_cost / reference_cost
