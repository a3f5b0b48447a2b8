"""Handbook refinement: split skills whose agent performance depends on which
queries they cover, merge skill pairs whose agent profiles cannot be told
apart.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

from .competence import Outcome
from .errors import InvalidHandbookError, RefinementConflictError
from .handbook import PRIOR, BetaCounts, Handbook, Skill, validate
from .text import jaccard, tokenize

log = logging.getLogger(__name__)

MIN_QUERIES = 6
VARIANCE_THRESHOLD = 0.3
SIGNIFICANCE_ALPHA = 0.05
MIN_MERGE_OBSERVATIONS = 10


@dataclass(frozen=True)
class RefinementCandidate:
    kind: str  # "split" | "merge"
    targets: tuple[str, ...]
    statistic: float
    evidence: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "targets": list(self.targets), "statistic": self.statistic,
                "evidence": self.evidence}


class TrajectoryStore:
    """Per-skill, per-query, per-agent success tallies built from labeled outcomes."""

    def __init__(self, outcomes: Iterable[Outcome]):
        # skill -> query -> agent -> [successes, trials]
        self._index: dict[str, dict[str, dict[str, list[int]]]] = defaultdict(lambda: defaultdict(dict))
        for o in outcomes:
            for sid in dict.fromkeys(o.skill_ids):
                tally = self._index[sid][o.query].setdefault(o.agent_id, [0, 0])
                tally[0] += int(o.success)
                tally[1] += 1

    def queries(self, skill_id: str) -> list[str]:
        return sorted(self._index.get(skill_id, {}))

    def tally(self, skill_id: str, query: str) -> Mapping[str, Sequence[int]]:
        return self._index.get(skill_id, {}).get(query, {})


# ---------------------------------------------------------------------------
# Split detection
# ---------------------------------------------------------------------------


def _features(query: str, indicators: Iterable[str]) -> frozenset[str]:
    vocab = {t for ind in indicators for t in tokenize(ind)}
    return frozenset(t for t in tokenize(query) if t in vocab)


def two_medoids(items: Sequence[str], features: Mapping[str, frozenset[str]], max_iter: int = 20) -> tuple[list[str], list[str]]:
    """Deterministic 2-medoid clustering under Jaccard distance.

    Items equidistant from both medoids (typically disjoint from both) are
    then settled by mean distance to each group's other members.
    """

    def dist(a: str, b: str) -> float:
        return 1.0 - jaccard(features[a], features[b])

    items = sorted(items)
    m0 = items[0]
    m1 = max(enumerate(items), key=lambda iq: (dist(m0, iq[1]), -iq[0]))[1]
    groups: tuple[list[str], list[str]] = ([], [])
    for _ in range(max_iter):
        groups = ([], [])
        for q in items:
            groups[0 if dist(q, m0) <= dist(q, m1) else 1].append(q)
        if not groups[1]:
            return groups
        new0 = min(groups[0], key=lambda q: (sum(dist(q, o) for o in groups[0]), q))
        new1 = min(groups[1], key=lambda q: (sum(dist(q, o) for o in groups[1]), q))
        if (new0, new1) == (m0, m1):
            break
        m0, m1 = new0, new1

    for _ in range(max_iter):
        moved = False
        for q in items:
            mine = 0 if q in groups[0] else 1
            other = groups[1 - mine]
            if len(groups[mine]) == 1:
                continue
            own = sum(dist(q, o) for o in groups[mine] if o != q) / (len(groups[mine]) - 1)
            far = sum(dist(q, o) for o in other) / len(other)
            if far < own:
                groups[mine].remove(q)
                other.append(q)
                moved = True
        if not moved:
            break
    return sorted(groups[0]), sorted(groups[1])


def _rates(store: TrajectoryStore, skill_id: str, queries: Sequence[str]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for q in queries:
        for agent, (s, n) in store.tally(skill_id, q).items():
            acc = out.setdefault(agent, [0, 0])
            acc[0] += s
            acc[1] += n
    return out


def find_split_candidates(
    handbook: Handbook,
    store: TrajectoryStore,
    min_queries: int = MIN_QUERIES,
    variance_threshold: float = VARIANCE_THRESHOLD,
) -> list[RefinementCandidate]:
    """Top-level leaf skills whose two query clusters rank agents differently.

    Skills that already have a parent or children are skipped: splitting them
    would break the two-level hierarchy.
    """
    out = []
    parents = {s.parent for s in handbook.skills if s.parent}
    for skill in handbook.skills:
        if skill.parent is not None or skill.id in parents:
            continue
        queries = store.queries(skill.id)
        if len(queries) < min_queries:
            continue
        feats = {q: _features(q, skill.indicators) for q in queries}
        if not any(feats.values()):
            feats = {q: frozenset(tokenize(q)) for q in queries}
        g0, g1 = two_medoids(queries, feats)
        if not g0 or not g1:
            continue
        r0, r1 = _rates(store, skill.id, g0), _rates(store, skill.id, g1)
        agents = sorted(a for a in r0 if a in r1 and r0[a][1] and r1[a][1])
        if not agents:
            continue
        gaps = {a: r0[a][0] / r0[a][1] - r1[a][0] / r1[a][1] for a in agents}
        stat = sum(abs(g) for g in gaps.values()) / len(gaps)
        if stat > variance_threshold:
            tokens = []
            for group in (g0, g1):
                freq = Counter(t for q in group for t in feats[q])
                tokens.append([t for t, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))])
            out.append(
                RefinementCandidate(
                    "split",
                    (skill.id,),
                    stat,
                    {
                        "clusters": [g0, g1],
                        "tokens": tokens,
                        "agents": {a: [list(r0.get(a, [0, 0])), list(r1.get(a, [0, 0]))] for a in sorted(set(r0) | set(r1))},
                        "gaps": gaps,
                    },
                )
            )
    return out


# ---------------------------------------------------------------------------
# Merge detection
# ---------------------------------------------------------------------------


def two_proportion_z(s1: float, n1: float, s2: float, n2: float) -> tuple[float, float]:
    """Pooled two-proportion z statistic and its two-sided p-value."""
    if n1 <= 0 or n2 <= 0:
        raise ValueError("both samples need at least one trial")
    pooled = (s1 + s2) / (n1 + n2)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return 0.0, 1.0
    z = (s1 / n1 - s2 / n2) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


def find_merge_candidates(
    handbook: Handbook,
    significance_alpha: float = SIGNIFICANCE_ALPHA,
    min_observations: int = MIN_MERGE_OBSERVATIONS,
    prior: BetaCounts = PRIOR,
) -> list[RefinementCandidate]:
    parents = {s.parent for s in handbook.skills if s.parent}
    out = []
    for mode in handbook.mode_ids:
        ids = [sid for sid in handbook.skill_ids_for(mode) if sid not in parents]
        profiles = [p for p in (handbook.profile(a, mode) for a in handbook.agents_for(mode)) if p is not None]
        if not profiles:
            continue
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if handbook.skill(a).parent != handbook.skill(b).parent:
                    continue
                tests = {}
                enough = True
                for prof in profiles:
                    ca, cb = prof.counts(a, prior), prof.counts(b, prior)
                    sa, fa = ca.alpha - prior.alpha, ca.beta - prior.beta
                    sb, fb = cb.alpha - prior.alpha, cb.beta - prior.beta
                    if sa + fa < min_observations or sb + fb < min_observations:
                        enough = False
                        break
                    z, p = two_proportion_z(sa, sa + fa, sb, sb + fb)
                    tests[prof.agent_id] = {"z": z, "p": p, "a": [sa, sa + fa], "b": [sb, sb + fb]}
                if not enough:
                    continue
                if all(t["p"] >= significance_alpha for t in tests.values()):
                    stat = max(abs(t["z"]) for t in tests.values())
                    out.append(RefinementCandidate("merge", (a, b), stat, {"tests": tests}))
    return out


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Review:
    approved: bool
    skill: Skill | None = None  # revised definition for a merge result
    children: tuple[Skill, Skill] | None = None  # revised definitions for split children
    note: str = ""


class Reviewer(Protocol):
    name: str

    def review(self, candidate: RefinementCandidate, handbook: Handbook) -> Review: ...


class AutoApprove:
    name = "auto-approve"

    def review(self, candidate: RefinementCandidate, handbook: Handbook) -> Review:
        return Review(True)


@dataclass
class RefineReport:
    applied: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def _check_conflicts(candidates: Sequence[RefinementCandidate]) -> None:
    split_targets = {t for c in candidates if c.kind == "split" for t in c.targets}
    merge_targets = {t for c in candidates if c.kind == "merge" for t in c.targets}
    both = sorted(split_targets & merge_targets)
    if both:
        raise RefinementConflictError(f"skills in both a split and a merge candidate: {both}")


def _merged_skill(a: Skill, b: Skill) -> Skill:
    return Skill(
        id=a.id,
        mode=a.mode,
        description=a.description if a.description == b.description else f"{a.description}; {b.description}",
        indicators=tuple(dict.fromkeys(a.indicators + b.indicators)),
        parent=a.parent,
    )


def _apply_merge(hb: Handbook, cand: RefinementCandidate, review: Review, prior: BetaCounts) -> Handbook:
    a_id, b_id = cand.targets
    a, b = hb.skill(a_id), hb.skill(b_id)
    merged = review.skill or _merged_skill(a, b)
    if merged.id not in (a_id, b_id) and hb.has_skill(merged.id):
        raise RefinementConflictError(f"revised merge id {merged.id!r} collides with an existing skill")
    merged = replace(merged, mode=a.mode, parent=a.parent)
    skills = []
    for s in hb.skills:
        if s.id == a_id:
            skills.append(merged)
        elif s.id != b_id:
            skills.append(replace(s, parent=merged.id) if s.parent in (a_id, b_id) else s)
    edges = dict(hb.edges)
    edges[a.mode] = tuple(merged.id if sid == a_id else sid for sid in edges[a.mode] if sid != b_id)
    profiles = []
    for p in hb.profiles:
        if p.mode == a.mode and (a_id in p.counters or b_id in p.counters):
            ca, cb = p.counts(a_id, prior), p.counts(b_id, prior)
            counters = {k: v for k, v in p.counters.items() if k not in (a_id, b_id)}
            counters[merged.id] = BetaCounts(ca.alpha + cb.alpha - prior.alpha, ca.beta + cb.beta - prior.beta)
            p = replace(p, counters=counters)
        profiles.append(p)
    return replace(hb, skills=tuple(skills), edges=edges, profiles=tuple(profiles))


def _child_skills(parent: Skill, cand: RefinementCandidate, taken: set[str]) -> tuple[Skill, Skill]:
    children = []
    for k, toks in enumerate(cand.evidence["tokens"]):
        head = toks[0] if toks else f"part{k}"
        cid = f"{parent.id}/{head}"
        while cid in taken:
            cid += f"_{k}"
        taken.add(cid)
        inds = tuple(toks) or parent.indicators
        children.append(Skill(cid, parent.mode, f"{parent.description} ({head} cases)", inds, parent.id))
    return children[0], children[1]


def _apply_split(hb: Handbook, cand: RefinementCandidate, review: Review, prior: BetaCounts) -> Handbook:
    (pid,) = cand.targets
    parent = hb.skill(pid)
    if parent.parent is not None or hb.children(pid):
        raise RefinementConflictError(f"cannot split {pid!r}: it is already part of a hierarchy")
    taken = {s.id for s in hb.skills}
    kids = review.children or _child_skills(parent, cand, taken)
    kids = tuple(replace(k, mode=parent.mode, parent=pid) for k in kids)
    for k in kids:
        if hb.has_skill(k.id):
            raise RefinementConflictError(f"split child id {k.id!r} collides with an existing skill")
    pos = hb.skills.index(parent)
    skills = hb.skills[: pos + 1] + kids + hb.skills[pos + 1:]
    edges = dict(hb.edges)
    order = list(edges[parent.mode])
    at = order.index(pid) + 1
    edges[parent.mode] = tuple(order[:at] + [k.id for k in kids] + order[at:])
    agents = cand.evidence["agents"]
    profiles = []
    for p in hb.profiles:
        if p.mode == parent.mode:
            counters = dict(p.counters)
            total = p.counts(pid, prior)
            rest_s, rest_f = total.alpha - prior.alpha, total.beta - prior.beta
            for kid, (s, n) in zip(kids, agents.get(p.agent_id, [[0, 0], [0, 0]])):
                counters[kid.id] = BetaCounts(prior.alpha + s, prior.beta + (n - s))
                rest_s -= s
                rest_f -= n - s
            if rest_s < 0 or rest_f < 0:
                log.warning("split of %s: store holds more records than %s's counters", pid, p.agent_id)
            counters[pid] = BetaCounts(prior.alpha + max(rest_s, 0.0), prior.beta + max(rest_f, 0.0))
            p = replace(p, counters=counters)
        profiles.append(p)
    return replace(hb, skills=skills, edges=edges, profiles=tuple(profiles))


def apply_refinements(
    handbook: Handbook,
    candidates: Sequence[RefinementCandidate],
    reviewer: Reviewer | None = None,
    *,
    prior: BetaCounts = PRIOR,
    bump: bool = True,
    report: RefineReport | None = None,
) -> Handbook:
    """Apply reviewer-approved splits and merges.

    Merges run most-similar first; a merge touching a skill already merged
    this round is skipped and noted in ``report``.
    """
    _check_conflicts(candidates)
    reviewer = reviewer or AutoApprove()
    report = report if report is not None else RefineReport()
    hb = handbook
    touched: set[str] = set()
    merges = sorted((c for c in candidates if c.kind == "merge"), key=lambda c: (c.statistic, c.targets))
    splits = [c for c in candidates if c.kind == "split"]
    for cand in splits + merges:
        if touched & set(cand.targets):
            report.skipped.append(cand.targets)
            continue
        review = reviewer.review(cand, hb)
        if not review.approved:
            report.rejected.append(cand.targets)
            continue
        hb = _apply_split(hb, cand, review, prior) if cand.kind == "split" else _apply_merge(hb, cand, review, prior)
        touched |= set(cand.targets)
        report.applied.append((cand.kind, cand.targets))
    violations = validate(hb)
    if violations:
        raise InvalidHandbookError(violations)
    return hb.bumped(provenance=f"refined: {len(report.applied)} operation(s)") if bump else hb


def refine(
    handbook: Handbook,
    store: TrajectoryStore,
    reviewer: Reviewer | None = None,
    *,
    min_queries: int = MIN_QUERIES,
    variance_threshold: float = VARIANCE_THRESHOLD,
    significance_alpha: float = SIGNIFICANCE_ALPHA,
    min_observations: int = MIN_MERGE_OBSERVATIONS,
) -> tuple[Handbook, RefineReport, list[RefinementCandidate]]:
    """Detect and apply one round of refinements; a split wins over a merge on the same skill."""
    splits = find_split_candidates(handbook, store, min_queries, variance_threshold)
    split_ids = {t for c in splits for t in c.targets}
    merges = [
        c for c in find_merge_candidates(handbook, significance_alpha, min_observations)
        if not split_ids & set(c.targets)
    ]
    report = RefineReport()
    hb = apply_refinements(handbook, splits + merges, reviewer, report=report)
    return hb, report, splits + merges
