"""Skill discovery and profile construction from exploration bundles.

Pipeline: contrast successful and failed trajectories at each mode, turn the
contrasts into skill proposals, add them to the registry, then replay every
step as labeled outcomes to fill the Beta counters and cost estimates, and
finally mine mode-level insights.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Mapping, Protocol, Sequence

from .competence import Outcome, update_cost, update_counters
from .errors import IdCollisionError, InvalidHandbookError, SkillRouteError
from .handbook import PRIOR, AgentProfile, Handbook, Skill, validate
from .router import InteractionState, Similarity, retrieve_active_skills
from .text import jaccard, tokenize
from .trajectory import Trajectory, TrajectoryBundle

if TYPE_CHECKING:
    from .simulator import LatentWorld, Query

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Divergence:
    query: str
    positive_turn: int
    negative_turn: int
    positive_agent: str
    negative_agent: str
    positive_trace: str
    negative_trace: str
    positive_observation: str
    negative_observation: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ContrastiveDiff:
    mode: str
    positive: str
    negative: str
    divergence: Divergence

    @property
    def id(self) -> str:
        return f"{self.positive}||{self.negative}@{self.mode}"

    def tokens(self) -> frozenset[str]:
        """Tokens the successful trace has and the failed one lacks, minus agent ids and the mode name."""
        d = self.divergence
        drop = {d.positive_agent.lower(), d.negative_agent.lower(), self.mode.lower()}
        pos = set(tokenize(d.positive_trace))
        neg = set(tokenize(d.negative_trace))
        return frozenset(pos - neg - drop)

    def to_dict(self) -> dict:
        return {"id": self.id, "mode": self.mode, "positive": self.positive, "negative": self.negative,
                "divergence": self.divergence.to_dict()}


@dataclass(frozen=True)
class SkillProposal:
    skill: Skill
    evidence: tuple[str, ...]
    proposer: str

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("a skill proposal needs at least one contrastive diff as evidence")


def _mode_steps(traj: Trajectory, mode: str):
    return [s for s in traj.steps if s.mode == mode]


def diff_trajectories(bundle: TrajectoryBundle, mode: str, success_threshold: float = 0.5) -> list[ContrastiveDiff]:
    positives = [t for t in bundle.trajectories if t.reward >= success_threshold]
    negatives = [t for t in bundle.trajectories if t.reward < success_threshold]
    out = []
    for pos in positives:
        pos_steps = _mode_steps(pos, mode)
        for neg in negatives:
            for ps, ns in zip(pos_steps, _mode_steps(neg, mode)):
                if ps.agent != ns.agent:
                    div = Divergence(
                        query=bundle.query,
                        positive_turn=ps.turn,
                        negative_turn=ns.turn,
                        positive_agent=ps.agent,
                        negative_agent=ns.agent,
                        positive_trace=ps.trace_digest,
                        negative_trace=ns.trace_digest,
                        positive_observation=ps.observation_digest,
                        negative_observation=ns.observation_digest,
                    )
                    out.append(ContrastiveDiff(mode, pos.id, neg.id, div))
                    break
    return out


# ---------------------------------------------------------------------------
# Proposers
# ---------------------------------------------------------------------------


class ProposalError(SkillRouteError):
    pass


class Proposer(Protocol):
    name: str

    def propose(self, cluster: Sequence[ContrastiveDiff]) -> Skill: ...

    def phrase_insight(self, pattern: Mapping) -> str: ...


def templated_insight(pattern: Mapping) -> str:
    if pattern["kind"] == "transition":
        return (f"after {pattern['mode']}, continue with {pattern['next']} "
                f"(in {pattern['support']:.0%} of {pattern['total']} successful trajectories)")
    if pattern["kind"] == "failure":
        return (f"agent {pattern['agent']} fails often in {pattern['mode']} "
                f"({pattern['rate']:.0%} of {pattern['count']} calls)")
    raise ValueError(f"unknown insight pattern kind {pattern['kind']!r}")


@dataclass
class BaselineProposer:
    """Indicators are the tokens that successful traces have and failed ones lack."""

    name: str = "baseline"
    max_indicators: int = 12

    def propose(self, cluster: Sequence[ContrastiveDiff]) -> Skill:
        freq: Counter[str] = Counter()
        for d in cluster:
            freq.update(d.tokens())
        if not freq:
            raise ProposalError("no distinguishing tokens in the diff cluster")
        floor = (len(cluster) + 1) // 2
        ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [t for t, n in ranked if n >= floor][: self.max_indicators] or [ranked[0][0]]
        mode = cluster[0].mode
        indicators = tuple(sorted(kept))
        return Skill(
            id=f"{mode}_{kept[0]}",
            mode=mode,
            description=f"{mode} capability marked by {' '.join(kept[:3])}",
            indicators=indicators,
        )

    def phrase_insight(self, pattern: Mapping) -> str:
        return templated_insight(pattern)


class OracleProposer:
    """Looks the diverging step up in the simulator's ground truth."""

    name = "oracle"

    def __init__(self, world: LatentWorld, queries: Iterable[Query]):
        self.world = world
        self.queries = {q.text: q for q in queries}

    def propose(self, cluster: Sequence[ContrastiveDiff]) -> Skill:
        votes: Counter[str] = Counter()
        for d in cluster:
            q = self.queries.get(d.divergence.query)
            if q is None:
                raise ProposalError(f"query not in the oracle table: {d.divergence.query[:40]!r}")
            votes.update(q.skills_for(d.mode))
        if not votes:
            raise ProposalError(f"no latent skill behind mode {cluster[0].mode!r} for this cluster")
        latent_id = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        latent = self.world.skill(latent_id)
        return Skill(id=latent.id, mode=latent.mode, description=f"latent capability {latent.id}",
                     indicators=latent.vocab)

    def phrase_insight(self, pattern: Mapping) -> str:
        return templated_insight(pattern)


def cluster_diffs(diffs: Sequence[ContrastiveDiff], threshold: float = 0.5) -> list[list[ContrastiveDiff]]:
    """Greedy single pass: a diff joins the first same-mode cluster whose token union it overlaps enough."""
    clusters: list[tuple[str, set[str], list[ContrastiveDiff]]] = []
    for d in diffs:
        toks = d.tokens()
        for mode, union, members in clusters:
            if mode == d.mode and toks and union and jaccard(toks, union) >= threshold:
                members.append(d)
                union |= toks
                break
        else:
            clusters.append((d.mode, set(toks), [d]))
    return [members for _, _, members in clusters]


def propose_skills(
    diffs: Sequence[ContrastiveDiff],
    proposer: Proposer,
    registry: Handbook | None = None,
    *,
    cluster_threshold: float = 0.5,
    dedup_threshold: float = 0.6,
    failures: list | None = None,
) -> list[SkillProposal]:
    """One proposal per diff cluster, minus near-duplicates of existing or already-proposed skills."""
    existing = list(registry.skills) if registry is not None else []
    accepted: list[SkillProposal] = []
    for cluster in cluster_diffs(diffs, cluster_threshold):
        try:
            skill = proposer.propose(cluster)
        except Exception as exc:  # a bad proposal must not stop the batch
            log.debug("proposer %s failed on %d diff(s): %s", proposer.name, len(cluster), exc)
            if failures is not None:
                failures.extend({"diff": d.id, "error": str(exc)} for d in cluster)
            continue
        evidence = tuple(d.id for d in cluster)
        dup = None
        for other in existing + [p.skill for p in accepted]:
            if other.mode == skill.mode and (
                other.id == skill.id or jaccard(other.indicators, skill.indicators) >= dedup_threshold
            ):
                dup = other
                break
        if dup is not None:
            for i, p in enumerate(accepted):
                if p.skill.id == dup.id:
                    accepted[i] = replace(p, evidence=p.evidence + evidence)
            continue
        accepted.append(SkillProposal(skill, evidence, proposer.name))
    return accepted


def apply_proposals(handbook: Handbook, proposals: Sequence[SkillProposal], *, bump: bool = True) -> Handbook:
    ids = {s.id for s in handbook.skills}
    for p in proposals:
        if p.skill.id in ids:
            raise IdCollisionError(f"skill id {p.skill.id!r} already exists")
        ids.add(p.skill.id)
    if not proposals:
        return handbook.bumped() if bump else handbook
    new_skills = tuple(p.skill for p in proposals)
    edges = {m: tuple(v) for m, v in handbook.edges.items()}
    for s in new_skills:
        handbook.mode(s.mode)
        edges[s.mode] = edges.get(s.mode, ()) + (s.id,)
    by_mode: dict[str, list[str]] = defaultdict(list)
    for s in new_skills:
        by_mode[s.mode].append(s.id)
    profiles = []
    for prof in handbook.profiles:
        fresh = by_mode.get(prof.mode)
        if fresh:
            counters = dict(prof.counters)
            for sid in fresh:
                counters[sid] = PRIOR
            prof = replace(prof, counters=counters)
        profiles.append(prof)
    out = replace(handbook, skills=handbook.skills + new_skills, edges=edges, profiles=tuple(profiles))
    violations = validate(out)
    if violations:
        raise InvalidHandbookError(violations)
    return out.bumped() if bump else out


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeConfig:
    """How steps become labeled outcomes.

    ``label="trajectory"`` gives every step the trajectory's pass/fail label;
    ``label="step"`` uses the per-step success flag recorded in the log.
    Steps without recorded active skills are replayed through retrieval with
    ``k``/``threshold``.
    """

    label: str = "trajectory"
    success_threshold: float = 0.5
    k: int = 3
    threshold: float = 0.1
    similarity: Similarity | None = None

    def __post_init__(self):
        if self.label not in ("trajectory", "step"):
            raise ValueError(f"judge label must be 'trajectory' or 'step', got {self.label!r}")


def _replay_states(traj: Trajectory):
    state = InteractionState(traj.query)
    for step in traj.steps:
        yield state, step
        state = state.advance(step.mode, step.agent, step.trace_digest, step.observation_digest)


def step_outcomes(handbook: Handbook, traj: Trajectory, judge: JudgeConfig) -> list[tuple[Outcome | None, float, str, str]]:
    """Per step: (outcome or None when the mode has no skills, cost, agent, mode)."""
    traj_ok = traj.reward >= judge.success_threshold
    out = []
    for state, step in _replay_states(traj):
        if not handbook.has_mode(step.mode):
            continue
        in_mode = handbook.skill_ids_for(step.mode)
        recorded = [sid for sid in step.active_skills if sid in in_mode]
        if recorded and len(recorded) == len(step.active_skills):
            skills = tuple(recorded)
        else:
            active = retrieve_active_skills(state, step.mode, handbook, judge.k, judge.threshold, judge.similarity)
            skills = active.skill_ids
        success = step.success if judge.label == "step" else traj_ok
        outcome = (
            Outcome(step.agent, step.mode, skills, bool(success), step.cost, traj.query) if skills else None
        )
        out.append((outcome, step.cost, step.agent, step.mode))
    return out


def extract_outcomes(handbook: Handbook, bundles: Iterable[TrajectoryBundle], judge: JudgeConfig) -> list[Outcome]:
    return [
        o
        for b in bundles
        for t in b.trajectories
        for o, _, _, _ in step_outcomes(handbook, t, judge)
        if o is not None
    ]


def build_profiles(
    handbook: Handbook,
    bundles: Iterable[TrajectoryBundle],
    judge: JudgeConfig = JudgeConfig(),
    *,
    bump: bool = True,
) -> Handbook:
    outcomes: dict[tuple[str, str], list[Outcome]] = defaultdict(list)
    costs: dict[tuple[str, str], list[float]] = defaultdict(list)
    for b in bundles:
        for t in b.trajectories:
            for outcome, cost, agent, mode in step_outcomes(handbook, t, judge):
                if outcome is not None:
                    outcomes[(agent, mode)].append(outcome)
                costs[(agent, mode)].append(cost)

    modes = {m.mode: m for m in handbook.modes}
    profiles = {(p.agent_id, p.mode): p for p in handbook.profiles}
    for agent, mode in costs:
        if (agent, mode) not in profiles:
            # an agent observed in a mode is valid there
            profiles[(agent, mode)] = AgentProfile(agent, mode)
            meta = modes[mode]
            if agent not in meta.allowed_agents:
                modes[mode] = replace(meta, allowed_agents=meta.allowed_agents + (agent,))
    for key in sorted(costs):
        prof = profiles[key]
        prof = update_counters(prof, outcomes.get(key, ()), known_skills=handbook.skill_ids_for(key[1]))
        for c in costs[key]:
            prof = update_cost(prof, c)
        profiles[key] = prof
    out = replace(
        handbook,
        modes=tuple(modes[m.mode] for m in handbook.modes),
        profiles=tuple(profiles.values()),
    )
    return out.bumped() if bump else out


# ---------------------------------------------------------------------------
# Insights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InsightConfig:
    min_support: float = 0.5
    min_count: int = 3
    failure_rate: float = 0.7
    success_threshold: float = 0.5


def mine_patterns(bundles: Iterable[TrajectoryBundle], cfg: InsightConfig = InsightConfig()) -> list[dict]:
    trajs = [t for b in bundles for t in b.trajectories]
    wins = [t for t in trajs if t.reward >= cfg.success_threshold]
    patterns: list[dict] = []
    if wins:
        seen: Counter[tuple[str, str]] = Counter()
        for t in wins:
            seen.update(set(zip(t.modes, t.modes[1:])))
        for (a, b), n in sorted(seen.items()):
            support = n / len(wins)
            if n >= cfg.min_count and support >= cfg.min_support:
                patterns.append({"kind": "transition", "mode": a, "next": b, "count": n,
                                 "total": len(wins), "support": support})
    calls: Counter[tuple[str, str]] = Counter()
    fails: Counter[tuple[str, str]] = Counter()
    for t in trajs:
        for s in t.steps:
            calls[(s.mode, s.agent)] += 1
            if not s.success:
                fails[(s.mode, s.agent)] += 1
    for (mode, agent), n in sorted(calls.items()):
        rate = fails[(mode, agent)] / n
        if n >= cfg.min_count and rate >= cfg.failure_rate:
            patterns.append({"kind": "failure", "mode": mode, "agent": agent, "count": n, "rate": rate})
    return patterns


def distill_insights(
    bundles: Iterable[TrajectoryBundle],
    handbook: Handbook,
    proposer: Proposer | None = None,
    cfg: InsightConfig = InsightConfig(),
    *,
    bump: bool = True,
) -> Handbook:
    phrase = proposer.phrase_insight if proposer is not None else templated_insight
    added: dict[str, list[str]] = defaultdict(list)
    for pat in mine_patterns(bundles, cfg):
        if handbook.has_mode(pat["mode"]):
            added[pat["mode"]].append(phrase(pat))
    modes = []
    for m in handbook.modes:
        new = [s for s in added.get(m.mode, ()) if s not in m.insights]
        modes.append(replace(m, insights=m.insights + tuple(dict.fromkeys(new))) if new else m)
    out = replace(handbook, modes=tuple(modes))
    return out.bumped() if bump else out


# ---------------------------------------------------------------------------
# Composed stage
# ---------------------------------------------------------------------------


@dataclass
class LearnReport:
    diffs: int = 0
    proposals: int = 0
    failures: list = field(default_factory=list)
    outcomes: int = 0
    insights: int = 0
    skills: list = field(default_factory=list)


def learn(
    handbook: Handbook,
    bundles: Sequence[TrajectoryBundle],
    proposer: Proposer,
    judge: JudgeConfig = JudgeConfig(),
    insights: InsightConfig = InsightConfig(),
    *,
    cluster_threshold: float = 0.5,
    dedup_threshold: float = 0.6,
    max_bundles: int | None = None,
) -> tuple[Handbook, LearnReport]:
    """Discover skills, fill profiles and distill insights; the version moves by exactly one.

    ``max_bundles`` keeps the first k bundles in input order.
    """
    if max_bundles is not None:
        bundles = list(bundles)[:max_bundles]
    report = LearnReport()
    diffs = [d for b in bundles for m in handbook.mode_ids for d in diff_trajectories(b, m, judge.success_threshold)]
    report.diffs = len(diffs)
    proposals = propose_skills(
        diffs, proposer, handbook,
        cluster_threshold=cluster_threshold, dedup_threshold=dedup_threshold, failures=report.failures,
    )
    report.proposals = len(proposals)
    report.skills = [p.skill.id for p in proposals]
    hb = apply_proposals(handbook, proposals, bump=False)
    report.outcomes = len(extract_outcomes(hb, bundles, judge))
    hb = build_profiles(hb, bundles, judge, bump=False)
    before = sum(len(m.insights) for m in hb.modes)
    hb = distill_insights(bundles, hb, proposer, insights, bump=False)
    report.insights = sum(len(m.insights) for m in hb.modes) - before
    return hb.bumped(provenance=f"learned from {len(bundles)} bundles with {proposer.name} proposer"), report
