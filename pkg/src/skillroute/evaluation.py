"""Metrics over routed trajectories and the comparison baselines.

Selection entropy is measured over routed steps (one draw per agent call),
in bits. Baselines: uniform-random routing with a per-query seeded stream,
and always routing to the single agent with the best pooled learned
competence minus ``lambda_c`` times its pooled mean cost.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EvaluationError
from .handbook import PRIOR, BetaCounts, Handbook
from .router import (
    Chooser,
    Environment,
    RouterConfig,
    choose_fixed,
    choose_uniform,
    run_episode,
)
from .trajectory import Trajectory


def entropy_bits(weights: Iterable[float]) -> float:
    """Shannon entropy in bits of nonnegative weights, normalized to sum to one."""
    w = [float(x) for x in weights]
    if any(x < 0 for x in w):
        raise ValueError("weights must be nonnegative")
    total = sum(w)
    if total <= 0:
        raise ValueError("weights must have positive mass")
    h = 0.0
    for x in w:
        if x > 0:
            p = x / total
            h -= p * math.log2(p)
    return h + 0.0  # turn -0.0 into 0.0


def selection_counts(trajectories: Iterable[Trajectory]) -> Counter[str]:
    return Counter(s.agent for t in trajectories for s in t.steps)


def selection_distribution(trajectories: Iterable[Trajectory]) -> dict[str, float]:
    counts = selection_counts(trajectories)
    total = sum(counts.values())
    return {a: counts[a] / total for a in sorted(counts)} if total else {}


def selection_entropy(trajectories: Iterable[Trajectory]) -> float:
    counts = selection_counts(trajectories)
    if not counts:
        raise EvaluationError("no routed steps to measure")
    return entropy_bits(counts[a] for a in sorted(counts))


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    mean_reward: float
    mean_cost: float
    total_cost: float
    objective: Mapping[str, float]  # str(lambda) -> J
    distribution: Mapping[str, float]
    entropy_bits: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(trajectories: Sequence[Trajectory], lambdas: Sequence[float], method: str = "") -> MethodSummary:
    if not trajectories:
        raise EvaluationError("no trajectories to evaluate")
    n = len(trajectories)
    reward = sum(t.reward for t in trajectories) / n
    total = 0.0
    for t in trajectories:
        total += t.total_cost
    cost = total / n
    return MethodSummary(
        method=method,
        n=n,
        mean_reward=reward,
        mean_cost=cost,
        total_cost=total,
        objective={repr(float(lam)): reward - lam * cost for lam in lambdas},
        distribution=selection_distribution(trajectories),
        entropy_bits=selection_entropy(trajectories) if any(t.steps for t in trajectories) else 0.0,
    )


def summarize_by_method(trajectories: Sequence[Trajectory], lambdas: Sequence[float]) -> list[MethodSummary]:
    if not trajectories:
        raise EvaluationError("no trajectories to evaluate")
    groups: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        groups.setdefault(t.method, []).append(t)
    return [summarize(groups[m], lambdas, m) for m in sorted(groups)]


def pareto_csv(summaries: Sequence[MethodSummary]) -> str:
    """Plot data: one (reward, cost) point per method tag."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "mean_reward", "mean_cost"])
    for s in summaries:
        w.writerow([s.method, repr(s.mean_reward), repr(s.mean_cost)])
    return buf.getvalue()


def bootstrap_ci(
    differences: Sequence[float], *, n_boot: int = 2000, alpha: float = 0.05, seed: int = 0
) -> tuple[float, float, float]:
    """Mean of paired differences and its percentile bootstrap interval."""
    d = np.asarray(differences, dtype=float)
    if d.size == 0:
        raise EvaluationError("bootstrap needs at least one difference")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(n_boot, d.size))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(d.mean()), float(lo), float(hi)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def best_overall_agent(handbook: Handbook, lambda_c: float, prior: BetaCounts = PRIOR) -> str:
    """Agent with the highest pooled success rate minus ``lambda_c`` times pooled mean cost.

    Pooling sums observations over all of the agent's skills and modes.
    Ties go to the lower agent id.
    """
    wins: Counter[str] = Counter()
    trials: Counter[str] = Counter()
    cost_sum: Counter[str] = Counter()
    cost_n: Counter[str] = Counter()
    for p in handbook.profiles:
        for c in p.counters.values():
            s, f = c.alpha - prior.alpha, c.beta - prior.beta
            wins[p.agent_id] += s
            trials[p.agent_id] += s + f
        cost_sum[p.agent_id] += p.cost.mean * p.cost.count
        cost_n[p.agent_id] += p.cost.count
    agents = sorted({p.agent_id for p in handbook.profiles})
    if not agents:
        raise EvaluationError("handbook has no agent profiles")

    def score(a: str) -> float:
        rate = (wins[a] + prior.alpha) / (trials[a] + prior.alpha + prior.beta)
        cost = cost_sum[a] / cost_n[a] if cost_n[a] else 0.0
        return rate - lambda_c * cost

    return max(agents, key=lambda a: (score(a), [-ord(ch) for ch in a]))


def random_chooser(handbook: Handbook, seed: int, stream: str) -> Chooser:
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stream.encode("utf-8"))]))
    return choose_uniform(handbook.agents_for, rng)


def run_method(
    method: str,
    queries: Sequence[str],
    handbook: Handbook,
    environment: Environment,
    config: RouterConfig,
    *,
    seed: int = 0,
) -> list[Trajectory]:
    """Run ``method`` ("skill-router", "random" or "best-overall") over ``queries``.

    Every method uses the query text as the environment stream, so methods
    share random draws wherever they make the same choice.
    """
    if method == "skill-router":
        chooser_for = lambda q: None
    elif method == "random":
        chooser_for = lambda q: random_chooser(handbook, seed, q)
    elif method == "best-overall":
        fixed = choose_fixed(best_overall_agent(handbook, config.lambda_c))
        chooser_for = lambda q: fixed
    else:
        raise ValueError(f"unknown method {method!r}")
    return [
        run_episode(q, handbook, environment, config, method=method, chooser=chooser_for(q), trajectory_id=f"{method}:{i}")
        for i, q in enumerate(queries)
    ]
