"""Skill-grounded routing at inference time.

Each turn: pick a mode, retrieve the active skills for that mode, score every
allowed agent by weighted posterior-mean competence minus lambda_c times its
mode cost, and hand the step to the highest scorer. ``run_episode`` loops
that against an environment until the terminal mode runs or the turn budget
is spent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Protocol, Sequence

from .competence import posterior_mean
from .errors import GatewayError, RoutingError, UnknownSkillError
from .handbook import PRIOR, Handbook
from .policies import ModePolicy, RuleModePolicy
from .text import cosine, hashed_bag
from .trajectory import Step, Trajectory

log = logging.getLogger(__name__)

Similarity = Callable[[str, str], float]


@dataclass(frozen=True)
class HistoryEntry:
    mode: str
    agent: str
    trace_digest: str = ""
    observation_digest: str = ""


@dataclass(frozen=True)
class InteractionState:
    query: str
    history: tuple[HistoryEntry, ...] = ()

    @property
    def turn(self) -> int:
        return len(self.history)

    @property
    def text(self) -> str:
        parts = [self.query]
        for h in self.history:
            parts.append(h.trace_digest)
            parts.append(h.observation_digest)
        return " ".join(p for p in parts if p)

    def advance(self, mode: str, agent: str, trace_digest: str, observation_digest: str) -> InteractionState:
        return InteractionState(self.query, self.history + (HistoryEntry(mode, agent, trace_digest, observation_digest),))


@dataclass(frozen=True)
class ActiveSkillSet:
    """Weighted active skills. Entries are pairs so a skill may appear more than once."""

    entries: tuple[tuple[str, float], ...] = ()
    fallback: bool = False

    def weights(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for sid, w in self.entries:
            out[sid] = out.get(sid, 0.0) + w
        return out

    @property
    def skill_ids(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(sid for sid, _ in self.entries))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RoutingDecision:
    turn: int
    mode: str
    active_skills: ActiveSkillSet
    utilities: dict[str, float]
    costs: dict[str, float]
    chosen: str
    lambda_c: float
    handbook_version: int
    tie_break: str | None = None
    unprofiled: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "turn": self.turn,
            "mode": self.mode,
            "active_skills": self.active_skills.weights(),
            "active_fallback": self.active_skills.fallback,
            "utilities": dict(self.utilities),
            "costs": dict(self.costs),
            "chosen": self.chosen,
            "lambda_c": self.lambda_c,
            "handbook_version": self.handbook_version,
            "tie_break": self.tie_break,
            "unprofiled": list(self.unprofiled),
        }


@dataclass(frozen=True)
class RouterConfig:
    lambda_c: float = 0.5
    lambda_c_by_mode: Mapping[str, float] = field(default_factory=dict)
    k: int = 3
    threshold: float = 0.1
    max_turns: int = 4
    terminal_mode: str = "answer"
    mode_policy: ModePolicy = field(default_factory=lambda: RuleModePolicy.for_modes(("search", "code")))
    similarity: Similarity | None = None
    tie_tolerance: float = 1e-12
    # on an environment error: keep going ("continue") or stop the episode
    on_failure: str = "continue"
    failure_cost: float = 0.0

    def lambda_for(self, mode: str) -> float:
        return self.lambda_c_by_mode.get(mode, self.lambda_c)


@dataclass(frozen=True)
class StepResult:
    trace: str
    observation: str
    success: bool
    cost: float
    error: str | None = None


class Environment(Protocol):
    def execute(self, agent_id: str, mode: str, state: InteractionState, stream: str) -> StepResult: ...

    def judge(self, trajectory: Trajectory) -> float: ...


def select_mode(
    state: InteractionState,
    handbook: Handbook,
    policy: ModePolicy,
    *,
    max_turns: int | None = None,
    terminal_mode: str = "answer",
) -> str:
    modes = handbook.mode_ids
    if not modes:
        raise RoutingError("handbook has no modes")
    if len(modes) == 1:
        return modes[0]
    if max_turns is not None and state.turn >= max_turns - 1 and terminal_mode in modes:
        return terminal_mode
    insights = {m.mode: m.insights for m in handbook.modes}
    try:
        mode = policy.choose(state, insights, modes)
    except RoutingError:
        raise
    except Exception as exc:
        raise RoutingError(f"mode policy {getattr(policy, 'name', policy)!r} failed: {exc}") from exc
    if mode not in modes:
        raise RoutingError(f"mode policy {getattr(policy, 'name', policy)!r} returned unknown mode {mode!r}")
    return mode


@lru_cache(maxsize=8192)
def _bag(text: str):
    return hashed_bag(text)


def default_similarity(a: str, b: str) -> float:
    return cosine(_bag(a), _bag(b))


def retrieve_active_skills(
    state: InteractionState,
    mode: str,
    handbook: Handbook,
    k: int,
    threshold: float,
    similarity: Similarity | None = None,
) -> ActiveSkillSet:
    ids = handbook.skill_ids_for(mode)
    if not ids:
        return ActiveSkillSet()
    uniform = ActiveSkillSet(tuple((sid, 1.0 / len(ids)) for sid in ids), fallback=True)
    if k <= 0:
        return uniform
    sim = similarity or default_similarity
    text = state.text
    scored = []
    for pos, sid in enumerate(ids):
        s = sim(text, handbook.skill(sid).text)
        if s > threshold:
            scored.append((-s, pos, sid))
    if not scored:
        return uniform
    top = sorted(scored)[:k]
    total = sum(-neg for neg, _, _ in top)
    return ActiveSkillSet(tuple((sid, -neg / total) for neg, _, sid in top))


def score_agents(
    active: ActiveSkillSet,
    mode: str,
    handbook: Handbook,
    lambda_c: float,
) -> dict[str, float]:
    if lambda_c < 0:
        raise ValueError(f"lambda_c must be >= 0, got {lambda_c!r}")
    agents = handbook.agents_for(mode)
    if not agents:
        raise RoutingError(f"no agents allowed in mode {mode!r}")
    in_mode = set(handbook.skill_ids_for(mode))
    for sid in active.skill_ids:
        if sid not in in_mode:
            raise UnknownSkillError(sid)
    out: dict[str, float] = {}
    for agent in agents:
        profile = handbook.profile(agent, mode)
        competence = 0.0
        for sid, w in active.entries:
            competence += w * posterior_mean(profile, sid, PRIOR)
        cost = profile.cost.mean if profile is not None else 0.0
        out[agent] = competence - lambda_c * cost
    return out


def pick_agent(
    utilities: Mapping[str, float],
    costs: Mapping[str, float],
    tolerance: float = 1e-12,
) -> tuple[str, str | None]:
    """Argmax with ties broken by lower cost, then agent id."""
    best = max(utilities.values())
    tol = tolerance * max(1.0, abs(best))
    tied = sorted(a for a, u in utilities.items() if u >= best - tol)
    if len(tied) == 1:
        return tied[0], None
    chosen = min(tied, key=lambda a: (costs.get(a, 0.0), a))
    return chosen, f"tie among {tied}; chose lowest cost then id"


def route_step(state: InteractionState, handbook: Handbook, config: RouterConfig) -> RoutingDecision:
    if state.turn >= config.max_turns:
        raise RoutingError(f"turn {state.turn} is past the turn budget {config.max_turns}")
    mode = select_mode(
        state, handbook, config.mode_policy, max_turns=config.max_turns, terminal_mode=config.terminal_mode
    )
    active = retrieve_active_skills(state, mode, handbook, config.k, config.threshold, config.similarity)
    lam = config.lambda_for(mode)
    utilities = score_agents(active, mode, handbook, lam)
    costs: dict[str, float] = {}
    unprofiled: list[str] = []
    for agent in utilities:
        profile = handbook.profile(agent, mode)
        if profile is None:
            unprofiled.append(agent)
            costs[agent] = 0.0
        else:
            costs[agent] = profile.cost.mean
    chosen, note = pick_agent(utilities, costs, config.tie_tolerance)
    return RoutingDecision(
        turn=state.turn,
        mode=mode,
        active_skills=active,
        utilities=utilities,
        costs=costs,
        chosen=chosen,
        lambda_c=lam,
        handbook_version=handbook.version,
        tie_break=note,
        unprofiled=tuple(unprofiled),
    )


def rederive(record: Mapping, handbook: Handbook, tolerance: float = 1e-12) -> bool:
    """Check that a decision record follows from itself plus the handbook it cites."""
    if record["handbook_version"] != handbook.version:
        return False
    active = ActiveSkillSet(tuple(record["active_skills"].items()))
    utilities = score_agents(active, record["mode"], handbook, record["lambda_c"])
    if set(utilities) != set(record["utilities"]):
        return False
    if any(abs(utilities[a] - record["utilities"][a]) > 1e-9 for a in utilities):
        return False
    chosen, _ = pick_agent(utilities, record["costs"], tolerance)
    return chosen == record["chosen"]


Chooser = Callable[[InteractionState, str], "str | None"]


def run_episode(
    query: str,
    handbook: Handbook,
    environment: Environment,
    config: RouterConfig,
    *,
    trajectory_id: str | None = None,
    stream: str | None = None,
    method: str = "skill-router",
    chooser: Chooser | None = None,
) -> Trajectory:
    """Route and execute one query until the terminal mode runs or turns run out.

    ``chooser`` forces the agent for a step when it returns a non-None id; the
    step then carries no routing decision. ``stream`` keys the environment's
    randomness (defaults to the query) so different routers can share draws.
    """
    state = InteractionState(query)
    stream = query if stream is None else stream
    steps: list[Step] = []
    while state.turn < config.max_turns:
        forced = None
        if chooser is not None:
            mode = select_mode(
                state, handbook, config.mode_policy, max_turns=config.max_turns, terminal_mode=config.terminal_mode
            )
            forced = chooser(state, mode)
        if forced is not None:
            decision = None
            agent = forced
        else:
            decision = route_step(state, handbook, config)
            mode, agent = decision.mode, decision.chosen
        try:
            result = environment.execute(agent, mode, state, stream)
        except GatewayError as exc:
            log.warning("step %d: %s failure for agent %s: %s", state.turn, exc.kind, agent, exc)
            result = StepResult("", "", False, config.failure_cost, exc.kind)
        steps.append(
            Step(
                turn=state.turn,
                mode=mode,
                agent=agent,
                cost=result.cost,
                success=result.success,
                trace_digest=result.trace,
                observation_digest=result.observation,
                active_skills=decision.active_skills.weights() if decision else {},
                utilities=dict(decision.utilities) if decision else {},
                error=result.error,
                decision=decision.to_dict() if decision else None,
            )
        )
        state = state.advance(mode, agent, result.trace, result.observation)
        if mode == config.terminal_mode:
            break
        if result.error is not None and config.on_failure == "terminate":
            break
    traj = Trajectory(
        id=trajectory_id or f"{method}:{query}",
        query=query,
        steps=tuple(steps),
        method=method,
        handbook_version=handbook.version,
    )
    return traj.with_reward(environment.judge(traj))


def route_dry(query: str, handbook: Handbook, config: RouterConfig) -> list[RoutingDecision]:
    """Decisions for a query without calling any environment; history digests stay empty."""
    state = InteractionState(query)
    out: list[RoutingDecision] = []
    while state.turn < config.max_turns:
        decision = route_step(state, handbook, config)
        out.append(decision)
        if decision.mode == config.terminal_mode:
            break
        state = state.advance(decision.mode, decision.chosen, "", "")
    return out


def choose_uniform(agents_for: Callable[[str], Sequence[str]], rng) -> Chooser:
    """Chooser that picks uniformly among a mode's agents using ``rng``."""

    def chooser(state: InteractionState, mode: str) -> str:
        agents = agents_for(mode)
        return agents[int(rng.integers(len(agents)))]

    return chooser


def choose_fixed(agent: str) -> Chooser:
    return lambda state, mode: agent
