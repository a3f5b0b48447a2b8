"""Orchestrator-specific handbook selection on a validation set.

Candidate handbooks are induced subgraphs of the learned one: per mode, keep
coarse skills only, fine skills only, or both; globally, keep or drop the
mode insights. Each candidate is scored by running whole episodes, and the
winner maximizes mean reward minus lambda times mean cost.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import Sequence

from .errors import EvaluationError, InvalidHandbookError
from .handbook import PRIOR, BetaCounts, Handbook, validate
from .router import Environment, RouterConfig, run_episode

log = logging.getLogger(__name__)

GRANULARITIES = ("both", "coarse", "fine")


@dataclass(frozen=True)
class VariantDescriptor:
    granularity: tuple[tuple[str, str], ...]  # (mode, both|coarse|fine), sorted by mode
    insights: bool = True

    def __str__(self) -> str:
        parts = ",".join(f"{m}={g}" for m, g in self.granularity)
        return f"{parts};insights={'on' if self.insights else 'off'}"


@dataclass(frozen=True)
class HandbookVariant:
    descriptor: VariantDescriptor
    handbook: Handbook


def has_fine_skills(handbook: Handbook, mode: str) -> bool:
    return any(handbook.skill(sid).parent is not None for sid in handbook.skill_ids_for(mode))


def induce(handbook: Handbook, descriptor: VariantDescriptor, prior: BetaCounts = PRIOR) -> Handbook:
    """Build the induced subgraph for ``descriptor``.

    coarse: children are removed and their counters folded into the parent
    (sum minus the duplicated priors). fine: parents that have children are
    removed and the children become top-level. Version is inherited.
    """
    choice = dict(descriptor.granularity)
    drop: set[str] = set()
    fold_into: dict[str, str] = {}
    orphan: set[str] = set()
    for s in handbook.skills:
        g = choice.get(s.mode, "both")
        if s.parent is not None and g == "coarse":
            drop.add(s.id)
            fold_into[s.id] = s.parent
        elif g == "fine" and handbook.children(s.id):
            drop.add(s.id)
        elif s.parent is not None and g == "fine":
            orphan.add(s.id)

    skills = tuple(replace(s, parent=None) if s.id in orphan else s for s in handbook.skills if s.id not in drop)
    edges = {m: tuple(sid for sid in ids if sid not in drop) for m, ids in handbook.edges.items()}
    profiles = []
    for p in handbook.profiles:
        counters = {sid: c for sid, c in p.counters.items() if sid not in drop}
        for child, parent in fold_into.items():
            if child in p.counters:
                base = counters.get(parent, prior)
                c = p.counters[child]
                counters[parent] = BetaCounts(base.alpha + c.alpha - prior.alpha, base.beta + c.beta - prior.beta)
        profiles.append(replace(p, counters=counters))
    modes = handbook.modes if descriptor.insights else tuple(replace(m, insights=()) for m in handbook.modes)
    out = replace(handbook, skills=skills, edges=edges, profiles=tuple(profiles), modes=modes)
    violations = validate(out)
    if violations:
        raise InvalidHandbookError(violations)
    return out


def enumerate_variants(handbook: Handbook) -> list[HandbookVariant]:
    modes = sorted(handbook.mode_ids)
    per_mode = [GRANULARITIES if has_fine_skills(handbook, m) else ("both",) for m in modes]
    out = []
    for combo in product(*per_mode):
        for insights in (True, False):
            d = VariantDescriptor(tuple(zip(modes, combo)), insights)
            out.append(HandbookVariant(d, induce(handbook, d)))
    return out


@dataclass(frozen=True)
class EvaluationPoint:
    descriptor: str
    reward: float
    cost: float
    objective: float
    n: int = 0

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"mean reward {self.reward} outside [0, 1]")
        if self.cost < 0:
            raise ValueError(f"mean cost {self.cost} is negative")


def evaluate_variant(
    variant: HandbookVariant,
    validation_queries: Sequence[str],
    environment: Environment,
    lam: float,
    seed: int,
    config: RouterConfig,
) -> EvaluationPoint:
    """Mean reward, mean total cost and their tradeoff over whole episodes.

    ``seed`` keys the environment streams, so two variants see the same draws.
    """
    if not validation_queries:
        raise EvaluationError("cannot evaluate a handbook on an empty validation set")
    rewards = 0.0
    costs = 0.0
    for q in validation_queries:
        traj = run_episode(q, variant.handbook, environment, config, stream=f"{seed}|{q}", method=str(variant.descriptor))
        rewards += traj.reward
        costs += traj.total_cost
    n = len(validation_queries)
    r, c = rewards / n, costs / n
    return EvaluationPoint(str(variant.descriptor), r, c, r - lam * c, n)


def dominates(a: EvaluationPoint, b: EvaluationPoint) -> bool:
    return a.reward >= b.reward and a.cost <= b.cost and (a.reward > b.reward or a.cost < b.cost)


def pareto_frontier(points: Sequence[EvaluationPoint]) -> list[EvaluationPoint]:
    """Non-dominated points, sorted by cost ascending (then reward descending).

    Sort by cost, sweep keeping points whose reward beats everything cheaper.
    Exact duplicates do not dominate each other and are all kept.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i].cost, -points[i].reward, i))
    out: list[EvaluationPoint] = []
    best_reward = float("-inf")
    best_cost = None
    for i in order:
        p = points[i]
        if p.reward > best_reward:
            out.append(p)
            best_reward, best_cost = p.reward, p.cost
        elif p.reward == best_reward and p.cost == best_cost:
            out.append(p)
    return out


@dataclass
class SelectionReport:
    lam: float
    points: list[EvaluationPoint]
    frontier: list[EvaluationPoint]
    winner: str
    failed: dict

    def to_dict(self) -> dict:
        front = {p.descriptor for p in self.frontier}
        return {
            "lambda": self.lam,
            "winner": self.winner,
            "points": [dict(p.__dict__, on_frontier=p.descriptor in front) for p in self.points],
            "frontier": [p.descriptor for p in self.frontier],
            "failed": self.failed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        front = {p.descriptor for p in self.frontier}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["descriptor", "reward", "cost", "J", "on_frontier"])
        for p in self.points:
            w.writerow([p.descriptor, repr(p.reward), repr(p.cost), repr(p.objective), p.descriptor in front])
        return buf.getvalue()


def argmax_objective(points: Sequence[EvaluationPoint], lam: float) -> EvaluationPoint:
    """Highest reward - lam * cost; ties go to lower cost, then earlier position."""
    best = None
    for i, p in enumerate(points):
        key = (-(p.reward - lam * p.cost), p.cost, i)
        if best is None or key < best[0]:
            best = (key, p)
    return best[1]


def select_handbook(
    handbook: Handbook,
    validation_queries: Sequence[str],
    environment: Environment,
    lam: float,
    seed: int,
    config: RouterConfig,
) -> tuple[HandbookVariant, SelectionReport]:
    variants = enumerate_variants(handbook)
    points: list[EvaluationPoint] = []
    survivors: list[HandbookVariant] = []
    failed: dict[str, str] = {}
    for v in variants:
        try:
            points.append(evaluate_variant(v, validation_queries, environment, lam, seed, config))
            survivors.append(v)
        except EvaluationError:
            raise
        except Exception as exc:
            log.warning("variant %s failed: %s", v.descriptor, exc)
            failed[str(v.descriptor)] = str(exc)
    if not points:
        raise EvaluationError(f"all {len(variants)} handbook variants failed to evaluate")
    best = argmax_objective(points, lam)
    winner = survivors[points.index(best)]
    frontier = pareto_frontier(points)
    report = SelectionReport(lam, points, frontier, str(winner.descriptor), failed)
    chosen = winner.handbook.bumped(provenance=f"selected {winner.descriptor} at lambda={lam}")
    return HandbookVariant(winner.descriptor, chosen), report
