"""Synthetic agent pool with latent ground-truth skills.

A :class:`LatentWorld` fixes, for every agent, a true success probability on
each latent skill and a true per-call cost in each mode. Queries name the
modes they need and one latent skill per mode; their text carries the
skill's indicator tokens so token retrieval has something to find. Success
traces repeat the skill's full vocabulary, failed ones do not, which gives
the baseline proposer a signal to diff.

Everything is a pure function of ``(spec, seed)``; per-step randomness is
derived from the seed, a stream key, the turn and the mode, so episodes are
reproducible regardless of execution order.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .competence import Outcome, update_costs, update_counters
from .errors import UnknownModeError, WorldSpecError
from .handbook import Handbook, Skill, skeleton
from .router import InteractionState, RouterConfig, StepResult, run_episode
from .trajectory import Trajectory, TrajectoryBundle

HETEROGENEITY = ("strict", "mild", "none")


@dataclass(frozen=True)
class WorldSpec:
    modes: tuple[str, ...] = ("search", "code", "answer")
    skills_per_mode: int = 4
    n_agents: int = 6
    heterogeneity: str = "strict"
    vocab_per_skill: int = 6
    indicators_per_query: int = 3
    filler_tokens: int = 4
    filler_vocab: int = 200
    cost_range: tuple[float, float] = (0.05, 0.5)
    cost_noise: float = 0.05
    specialist_p: tuple[float, float] = (0.85, 0.97)
    generalist_p: tuple[float, float] = (0.2, 0.6)
    min_gap: float = 0.2
    optional_mode_prob: float = 0.6
    terminal_mode: str = "answer"
    success_model: str = "mean"

    def check(self) -> None:
        if self.n_agents <= 0:
            raise WorldSpecError("world needs at least one agent")
        if not self.modes:
            raise WorldSpecError("world needs at least one mode")
        if len(set(self.modes)) != len(self.modes):
            raise WorldSpecError("duplicate mode names")
        if self.terminal_mode not in self.modes:
            raise WorldSpecError(f"terminal mode {self.terminal_mode!r} not among modes")
        if self.skills_per_mode <= 0:
            raise WorldSpecError("skills_per_mode must be positive")
        if self.heterogeneity not in HETEROGENEITY:
            raise WorldSpecError(f"heterogeneity must be one of {HETEROGENEITY}")
        if not 0 < self.indicators_per_query <= self.vocab_per_skill:
            raise WorldSpecError("indicators_per_query must be in [1, vocab_per_skill]")
        lo, hi = self.cost_range
        if not 0 <= lo <= hi:
            raise WorldSpecError("cost_range must satisfy 0 <= lo <= hi")
        for name in ("specialist_p", "generalist_p"):
            a, b = getattr(self, name)
            if not 0 <= a <= b <= 1:
                raise WorldSpecError(f"{name} must satisfy 0 <= lo <= hi <= 1")
        if not 0 <= self.cost_noise < 1:
            raise WorldSpecError("cost_noise must be in [0, 1)")
        if self.success_model not in ("mean", "min"):
            raise WorldSpecError("success_model must be 'mean' or 'min'")
        if self.heterogeneity == "strict":
            if self.n_agents < 2:
                raise WorldSpecError("strict heterogeneity needs at least two agents")
            if self.specialist_p[0] - self.generalist_p[1] < self.min_gap:
                raise WorldSpecError("specialist/generalist ranges cannot guarantee min_gap")

    @classmethod
    def from_mapping(cls, data: Mapping) -> WorldSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise WorldSpecError(f"unknown world spec keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        try:
            spec = cls(**kwargs)
        except TypeError as exc:
            raise WorldSpecError(str(exc)) from None
        spec.check()
        return spec


@dataclass(frozen=True)
class LatentSkill:
    id: str
    mode: str
    vocab: tuple[str, ...]


@dataclass(frozen=True)
class SimAgent:
    id: str
    p: Mapping[str, float]
    cost: Mapping[str, float]


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    # (mode, latent skill ids) in the order the query needs them
    steps: tuple[tuple[str, tuple[str, ...]], ...]

    @property
    def required_modes(self) -> tuple[str, ...]:
        return tuple(m for m, _ in self.steps)

    def skills_for(self, mode: str) -> tuple[str, ...]:
        for m, sids in self.steps:
            if m == mode:
                return sids
        return ()

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "steps": [[m, list(s)] for m, s in self.steps]}

    @classmethod
    def from_dict(cls, d: Mapping) -> Query:
        return cls(d["id"], d["text"], tuple((m, tuple(s)) for m, s in d["steps"]))


@dataclass(frozen=True)
class LatentWorld:
    spec: WorldSpec
    seed: int
    skills: tuple[LatentSkill, ...]
    agents: tuple[SimAgent, ...]
    filler: tuple[str, ...] = field(repr=False, default=())

    @property
    def modes(self) -> tuple[str, ...]:
        return self.spec.modes

    @property
    def agent_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.agents)

    def agent(self, agent_id: str) -> SimAgent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"unknown agent {agent_id!r}")

    def skill(self, skill_id: str) -> LatentSkill:
        for s in self.skills:
            if s.id == skill_id:
                return s
        raise KeyError(f"unknown latent skill {skill_id!r}")

    def skills_in(self, mode: str) -> tuple[LatentSkill, ...]:
        return tuple(s for s in self.skills if s.mode == mode)

    def p(self, agent_id: str, skill_id: str) -> float:
        return self.agent(agent_id).p[skill_id]

    def cost(self, agent_id: str, mode: str) -> float:
        return self.agent(agent_id).cost[mode]

    def skeleton(self) -> Handbook:
        return skeleton({m: self.agent_ids for m in self.modes}, provenance=f"skeleton for world seed {self.seed}")

    def sample_queries(self, n: int, seed: int, prefix: str | None = None) -> list[Query]:
        """Draw ``n`` queries; ids are ``<prefix><index>`` with prefix defaulting to ``q<seed>-``."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, seed, 0x51]))
        prefix = f"q{seed}-" if prefix is None else prefix
        spec = self.spec
        optional = [m for m in spec.modes if m != spec.terminal_mode]
        out = []
        for i in range(n):
            needed = [m for m in optional if rng.random() < spec.optional_mode_prob]
            modes = needed + [spec.terminal_mode]
            steps = []
            content: list[str] = []
            for m in modes:
                pool = self.skills_in(m)
                sk = pool[int(rng.integers(len(pool)))]
                steps.append((m, (sk.id,)))
                idx = rng.choice(len(sk.vocab), size=spec.indicators_per_query, replace=False)
                content.extend(sk.vocab[j] for j in sorted(idx))
            for _ in range(spec.filler_tokens):
                content.append(self.filler[int(rng.integers(len(self.filler)))])
            rng.shuffle(content)
            qid = f"{prefix}{i}"
            tags = [f"needs:{m}" for m in needed]
            text = " ".join([f"[{qid}]", *tags, *content])
            out.append(Query(qid, text, tuple(steps)))
        return out

    def to_dict(self) -> dict:
        spec = asdict(self.spec)
        return {
            "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in spec.items()},
            "seed": self.seed,
            "skills": [{"id": s.id, "mode": s.mode, "vocab": list(s.vocab)} for s in self.skills],
            "agents": [{"id": a.id, "p": dict(a.p), "cost": dict(a.cost)} for a in self.agents],
            "filler": list(self.filler),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LatentWorld:
        return cls(
            spec=WorldSpec.from_mapping(d["spec"]),
            seed=d["seed"],
            skills=tuple(LatentSkill(s["id"], s["mode"], tuple(s["vocab"])) for s in d["skills"]),
            agents=tuple(SimAgent(a["id"], dict(a["p"]), dict(a["cost"])) for a in d["agents"]),
            filler=tuple(d["filler"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> LatentWorld:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _word(rng: np.random.Generator, syllables: int = 3) -> str:
    cons, vows = "bdfgklmnprstvz", "aeiou"
    return "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(syllables))


def strict_gap_holds(world: LatentWorld, gap: float) -> bool:
    """Every agent has some skill where another agent is better by at least ``gap``."""
    for a in world.agents:
        if not any(
            other.p[s.id] - a.p[s.id] >= gap - 1e-12
            for s in world.skills
            for other in world.agents
            if other.id != a.id
        ):
            return False
    return True


def generate_world(spec: WorldSpec, seed: int) -> LatentWorld:
    spec.check()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    words: set[str] = set()

    def fresh() -> str:
        while True:
            w = _word(rng)
            if w not in words:
                words.add(w)
                return w

    skills = []
    for m in spec.modes:
        for j in range(spec.skills_per_mode):
            vocab = tuple(fresh() for _ in range(spec.vocab_per_skill))
            skills.append(LatentSkill(f"{m}_l{j}", m, vocab))
    filler = tuple(fresh() for _ in range(spec.filler_vocab))
    agent_ids = [f"a{i}" for i in range(spec.n_agents)]

    p: dict[str, dict[str, float]] = {a: {} for a in agent_ids}
    if spec.heterogeneity == "strict":
        # round-robin specialists over a shuffled agent order: each agent owns some skills
        order = list(rng.permutation(spec.n_agents))
        for k, s in enumerate(skills):
            owner = agent_ids[order[k % spec.n_agents]]
            for a in agent_ids:
                lo, hi = spec.specialist_p if a == owner else spec.generalist_p
                p[a][s.id] = float(rng.uniform(lo, hi))
    elif spec.heterogeneity == "mild":
        lo, hi = spec.generalist_p[0], spec.specialist_p[1]
        for s in skills:
            for a in agent_ids:
                p[a][s.id] = float(rng.uniform(lo, hi))
    else:
        lo, hi = spec.generalist_p[0], spec.specialist_p[1]
        for s in skills:
            shared = float(rng.uniform(lo, hi))
            for a in agent_ids:
                p[a][s.id] = shared

    lo, hi = spec.cost_range
    agents = []
    for a in agent_ids:
        base = float(rng.uniform(lo, hi))
        costs = {m: base * float(rng.uniform(0.8, 1.2)) for m in spec.modes}
        agents.append(SimAgent(a, p[a], costs))
    world = LatentWorld(spec, seed, tuple(skills), tuple(agents), filler)
    if spec.heterogeneity == "strict" and spec.skills_per_mode * len(spec.modes) >= 2 and not strict_gap_holds(world, spec.min_gap):
        raise WorldSpecError("generated world violates the strict heterogeneity gap")
    return world


# ---------------------------------------------------------------------------
# Execution and judging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Execution:
    trace: str
    observation: str
    success: bool
    cost: float


def step_probability(world: LatentWorld, agent_id: str, mode: str, latent: Sequence[str]) -> float:
    """Success probability of one step; an unrequired mode averages over the mode's skills."""
    ids = list(latent) or [s.id for s in world.skills_in(mode)]
    ps = [world.p(agent_id, sid) for sid in ids]
    if world.spec.success_model == "min":
        return min(ps)
    return sum(ps) / len(ps)


def execute(world: LatentWorld, agent_id: str, mode: str, query: Query, rng: np.random.Generator) -> Execution:
    if mode not in world.modes:
        raise UnknownModeError(mode)
    agent = world.agent(agent_id)
    latent = query.skills_for(mode)
    p = step_probability(world, agent_id, mode, latent)
    success = bool(rng.random() < p)
    noise = world.spec.cost_noise * float(rng.uniform(-1.0, 1.0))
    cost = agent.cost[mode] * (1.0 + noise)
    tokens: list[str] = []
    if success:
        for sid in latent:
            tokens.extend(world.skill(sid).vocab)
    trace = " ".join([mode, agent_id, *tokens])
    observation = f"{mode} {'ok' if success else 'failed'}"
    return Execution(trace, observation, success, cost)


def judge(world: LatentWorld, query: Query, trajectory: Trajectory, partial_credit: bool = False) -> float:
    required = query.required_modes
    if not required:
        return 1.0
    done = {s.mode for s in trajectory.steps if s.success}
    hits = sum(1 for m in required if m in done)
    if partial_credit:
        return hits / len(required)
    return 1.0 if hits == len(required) else 0.0


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def step_rng(seed: int, stream: str, turn: int, mode: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _crc(stream), turn, _crc(mode)]))


class SimulatorEnvironment:
    """Environment adapter over a latent world and a table of known queries."""

    def __init__(self, world: LatentWorld, queries: Iterable[Query], seed: int = 0, partial_credit: bool = False):
        self.world = world
        self.seed = seed
        self.partial_credit = partial_credit
        self.queries = {q.text: q for q in queries}

    def query(self, text: str) -> Query:
        try:
            return self.queries[text]
        except KeyError:
            raise KeyError(f"query not known to the simulator: {text[:60]!r}") from None

    def execute(self, agent_id: str, mode: str, state: InteractionState, stream: str) -> StepResult:
        q = self.query(state.query)
        ex = execute(self.world, agent_id, mode, q, step_rng(self.seed, stream, state.turn, mode))
        return StepResult(ex.trace, ex.observation, ex.success, ex.cost)

    def judge(self, trajectory: Trajectory) -> float:
        return judge(self.world, self.query(trajectory.query), trajectory, self.partial_credit)


# ---------------------------------------------------------------------------
# Oracle routing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleRoute:
    steps: tuple[tuple[str, str], ...]
    expected_reward: float
    expected_cost: float
    objective: float


def oracle_route(world: LatentWorld, query: Query, lambda_c: float, lam: float | None = None) -> OracleRoute:
    """Per-step argmax of true competence minus ``lambda_c`` times true cost.

    The returned objective is the expected reward of that route minus ``lam``
    (default ``lambda_c``) times its expected cost. Ties go to the cheaper
    agent, then the lower id.
    """
    lam = lambda_c if lam is None else lam
    steps = []
    reward = 1.0
    fractions = []
    cost = 0.0
    for mode, latent in query.steps:
        best = None
        for a in world.agents:
            u = step_probability(world, a.id, mode, latent) - lambda_c * a.cost[mode]
            key = (-u, a.cost[mode], a.id)
            if best is None or key < best[0]:
                best = (key, a.id)
        agent = best[1]
        p = step_probability(world, agent, mode, latent)
        steps.append((mode, agent))
        reward *= p
        fractions.append(p)
        cost += world.cost(agent, mode)
    return OracleRoute(tuple(steps), reward, cost, reward - lam * cost)


def expected_objective(world: LatentWorld, query: Query, agents: Sequence[str], lam: float) -> float:
    """Expected reward minus ``lam`` times expected cost for one agent per required step."""
    reward, cost = 1.0, 0.0
    for (mode, latent), a in zip(query.steps, agents):
        reward *= step_probability(world, a, mode, latent)
        cost += world.cost(a, mode)
    return reward - lam * cost


def exhaustive_best(world: LatentWorld, query: Query, lam: float) -> tuple[tuple[str, ...], float]:
    """Best agent sequence for the true expected objective, by full enumeration."""
    best = None
    for combo in product(world.agent_ids, repeat=len(query.steps)):
        j = expected_objective(world, query, combo, lam)
        if best is None or j > best[1]:
            best = (combo, j)
    return best


# ---------------------------------------------------------------------------
# Exploration bundles
# ---------------------------------------------------------------------------


def explore_query(
    world: LatentWorld,
    query: Query,
    env: SimulatorEnvironment,
    config: RouterConfig,
    seed: int,
    modes: Sequence[str] | None = None,
    handbook: Handbook | None = None,
) -> TrajectoryBundle:
    """Run the query once per agent at each designated mode.

    Other modes get one background agent per designated mode, drawn from the
    seed, and every variant shares the same random stream, so trajectories in
    a group differ only at the designated mode.
    """
    hb = handbook or world.skeleton()
    designated = list(query.required_modes if modes is None else modes)
    trajectories = []
    for mode in designated:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _crc(query.id), _crc(mode), 0xB6]))
        background = {m: world.agent_ids[int(rng.integers(len(world.agent_ids)))] for m in world.modes}
        for agent in hb.agents_for(mode):
            assignment = dict(background)
            assignment[mode] = agent

            def chooser(state, m, assignment=assignment):
                return assignment[m]

            trajectories.append(
                run_episode(
                    query.text,
                    hb,
                    env,
                    config,
                    trajectory_id=f"{query.id}/{mode}={agent}",
                    stream=f"{query.id}|{mode}",
                    method="explore",
                    chooser=chooser,
                )
            )
    return TrajectoryBundle(query.text, tuple(trajectories), query.id)


def simulate_bundles(
    world: LatentWorld,
    queries: Sequence[Query],
    config: RouterConfig,
    seed: int,
    modes: Sequence[str] | None = None,
) -> list[TrajectoryBundle]:
    env = SimulatorEnvironment(world, queries, seed)
    hb = world.skeleton()
    return [explore_query(world, q, env, config, seed, modes, hb) for q in queries]


# ---------------------------------------------------------------------------
# Refinement fixtures
# ---------------------------------------------------------------------------


def with_mirrored_skill(world: LatentWorld, source: str, target: str) -> LatentWorld:
    """Copy of ``world`` where agents rank on ``target`` in the reverse order of ``source``.

    The multiset of success probabilities is kept; the best agent on
    ``source`` gets the worst value on ``target`` and so on.
    """
    ranked = sorted(world.agents, key=lambda a: (-a.p[source], a.id))
    values = sorted(a.p[source] for a in world.agents)  # ascending: best agent gets the lowest
    new_p = {a.id: v for a, v in zip(ranked, values)}
    agents = tuple(SimAgent(a.id, {**a.p, target: new_p[a.id]}, a.cost) for a in world.agents)
    return replace(world, agents=agents)


def with_copied_skill(world: LatentWorld, source: str, target: str) -> LatentWorld:
    """Copy of ``world`` where every agent has the same probability on ``target`` as on ``source``."""
    agents = tuple(SimAgent(a.id, {**a.p, target: a.p[source]}, a.cost) for a in world.agents)
    return replace(world, agents=agents)


def probe_outcomes(
    world: LatentWorld,
    queries: Sequence[Query],
    label: Callable[[Query, str], str | None],
    seed: int,
    repeats: int = 1,
) -> list[Outcome]:
    """Run every agent on every labeled step, outside of any routing.

    ``label(query, mode)`` names the registered skill a step exercises, or
    None to skip it. Each outcome is labeled by the step's own success.
    """
    out = []
    for q in queries:
        for mode, _ in q.steps:
            sid = label(q, mode)
            if sid is None:
                continue
            for r in range(repeats):
                for agent in world.agent_ids:
                    ex = execute(world, agent, mode, q, step_rng(seed, f"{q.id}|probe|{agent}", r, mode))
                    out.append(Outcome(agent, mode, (sid,), ex.success, ex.cost, q.text))
    return out


def registry_handbook(world: LatentWorld, skills: Sequence[Skill], outcomes: Iterable[Outcome]) -> Handbook:
    """Skeleton plus ``skills`` with profiles fitted to ``outcomes``."""
    hb = world.skeleton()
    edges = {m: tuple(s.id for s in skills if s.mode == m) for m in hb.mode_ids}
    grouped: dict[tuple[str, str], list[Outcome]] = {}
    for o in outcomes:
        grouped.setdefault((o.agent_id, o.mode), []).append(o)
    profiles = []
    for p in hb.profiles:
        obs = grouped.get((p.agent_id, p.mode), [])
        p = update_counters(p, obs, known_skills=edges[p.mode])
        profiles.append(update_costs(p, [o.cost for o in obs]))
    return replace(hb, skills=tuple(skills), edges=edges, profiles=tuple(profiles))


@dataclass(frozen=True)
class RefinementFixture:
    world: LatentWorld
    handbook: Handbook
    outcomes: tuple[Outcome, ...]
    truth: Mapping[str, tuple[str, ...]]  # registered skill -> latent skills it covers


def _fixture_queries(world: LatentWorld, mode: str, latent: Sequence[str], n: int, seed: int) -> list[Query]:
    pool = [q for q in world.sample_queries(n * 20, seed, prefix=f"fx{seed}-") if q.skills_for(mode) and q.skills_for(mode)[0] in latent]
    per = {sid: [q for q in pool if q.skills_for(mode)[0] == sid][:n] for sid in latent}
    return [q for sid in latent for q in per[sid]]


def with_ladder_skill(world: LatentWorld, skill_id: str, seed: int) -> LatentWorld:
    """Copy of ``world`` where agents' probabilities on ``skill_id`` are evenly spaced.

    The ladder runs from the specialist ceiling down to the generalist floor
    in a seeded agent order, so every adjacent pair of agents differs.
    """
    hi, lo = world.spec.specialist_p[1], world.spec.generalist_p[0]
    n = len(world.agents)
    order = np.random.default_rng(np.random.SeedSequence([seed, _crc(skill_id), 0x1AD])).permutation(n)
    values = {world.agents[int(i)].id: hi - (hi - lo) * k / max(n - 1, 1) for k, i in enumerate(order)}
    agents = tuple(SimAgent(a.id, {**a.p, skill_id: values[a.id]}, a.cost) for a in world.agents)
    return replace(world, agents=agents)


def confounded_fixture(seed: int = 0, mode: str = "search", n_per_skill: int = 12, repeats: int = 3) -> RefinementFixture:
    """One registered skill secretly covering two latent skills with opposite agent rankings.

    The first latent skill gets an evenly spaced probability ladder and the
    second its mirror image, so the true mean per-agent gap is known.
    """
    base = generate_world(WorldSpec(), seed)
    a, b = (s.id for s in base.skills_in(mode)[:2])
    world = with_mirrored_skill(with_ladder_skill(base, a, seed), a, b)
    queries = _fixture_queries(world, mode, (a, b), n_per_skill, seed + 1)
    vocab = world.skill(a).vocab + world.skill(b).vocab
    skill = Skill(f"{mode}_mixed", mode, f"{mode} work mixing two kinds of case", vocab)
    outcomes = probe_outcomes(world, queries, lambda q, m: skill.id if m == mode else None, seed + 2, repeats)
    return RefinementFixture(world, registry_handbook(world, [skill], outcomes), tuple(outcomes), {skill.id: (a, b)})


def duplicated_fixture(seed: int = 0, mode: str = "search", n_per_skill: int = 12, repeats: int = 3) -> RefinementFixture:
    """Two registered skills over two latent skills with identical agent profiles."""
    base = generate_world(WorldSpec(), seed)
    a, b = (s.id for s in base.skills_in(mode)[:2])
    world = with_copied_skill(base, a, b)
    queries = _fixture_queries(world, mode, (a, b), n_per_skill, seed + 1)
    skills = [Skill(f"{mode}_dup{k}", mode, f"{mode} cases of kind {k}", world.skill(sid).vocab) for k, sid in enumerate((a, b))]
    names = {a: skills[0].id, b: skills[1].id}

    def label(q: Query, m: str) -> str | None:
        return names.get(q.skills_for(m)[0]) if m == mode else None

    outcomes = probe_outcomes(world, queries, label, seed + 2, repeats)
    hb = registry_handbook(world, skills, outcomes)
    return RefinementFixture(world, hb, tuple(outcomes), {skills[0].id: (a,), skills[1].id: (b,)})
