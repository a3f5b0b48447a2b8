"""Fixture builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from skillroute.handbook import (
    AgentProfile,
    BetaCounts,
    CostStats,
    Handbook,
    ModeMetadata,
    Skill,
)
from skillroute.router import StepResult


def registry_example() -> Handbook:
    """Three modes; code has a coarse skill with two fine children."""
    modes = (
        ModeMetadata("search", ("prefer cheap lookups first",), ("a1", "a2")),
        ModeMetadata("code", (), ("a1", "a2")),
        ModeMetadata("answer", (), ("a1", "a2")),
    )
    skills = (
        Skill("web_lookup", "search", "find facts online", ("search", "lookup", "fact")),
        Skill("data_processing", "code", "process tabular data", ("data", "table", "csv")),
        Skill("symbolic_logic", "code", "verify logical constraints", ("logic", "constraint"), "data_processing"),
        Skill("numerical_approximation", "code", "approximate numerically", ("numeric", "float"), "data_processing"),
        Skill("synthesis", "answer", "compose the final answer", ("answer", "summary")),
    )
    profiles = (
        AgentProfile("a1", "code", {"data_processing": BetaCounts(4, 2), "symbolic_logic": BetaCounts(3, 1)},
                     CostStats(0.4, 3)),
        AgentProfile("a2", "code", {"numerical_approximation": BetaCounts(5, 1)}, CostStats(0.1, 2)),
        AgentProfile("a1", "search", {}, CostStats()),
    )
    edges = {
        "search": ("web_lookup",),
        "code": ("data_processing", "symbolic_logic", "numerical_approximation"),
        "answer": ("synthesis",),
    }
    return Handbook(modes, skills, profiles, edges, version=1, provenance="example")


def random_handbook(rng: np.random.Generator, n_modes: int = 3, n_skills: int = 8, n_agents: int = 4,
                    hierarchy: bool = True, version: int | None = None) -> Handbook:
    modes = [f"m{i}" for i in range(n_modes)]
    agents = [f"ag{i}" for i in range(n_agents)]
    skills: list[Skill] = []
    for j in range(n_skills):
        mode = modes[int(rng.integers(n_modes))]
        tops = [s for s in skills if s.mode == mode and s.parent is None]
        parent = tops[int(rng.integers(len(tops)))].id if hierarchy and tops and rng.random() < 0.4 else None
        inds = tuple(f"tok{int(t)}" for t in rng.choice(40, size=int(rng.integers(1, 5)), replace=False))
        skills.append(Skill(f"s{j}", mode, f"skill number {j}", inds, parent))
    edges = {m: tuple(s.id for s in skills if s.mode == m) for m in modes}
    mode_meta = tuple(ModeMetadata(m, tuple(f"insight {k}" for k in range(int(rng.integers(0, 3)))),
                                   tuple(agents)) for m in modes)
    profiles = []
    for m in modes:
        for a in agents:
            if rng.random() < 0.8:
                counters = {sid: BetaCounts(1.0 + float(rng.integers(0, 20)), 1.0 + float(rng.integers(0, 20)))
                            for sid in edges[m] if rng.random() < 0.7}
                n = int(rng.integers(0, 10))
                cost = CostStats(float(rng.uniform(0, 1)) if n else 0.0, n)
                profiles.append(AgentProfile(a, m, counters, cost, ("sig",) if rng.random() < 0.3 else (),
                                             "summary" if rng.random() < 0.5 else ""))
    return Handbook(mode_meta, tuple(skills), tuple(profiles), edges,
                    version=int(rng.integers(1, 50)) if version is None else version, provenance="random")


class TableEnvironment:
    """Environment replaying fixed (trace, observation, success, cost) per (agent, mode)."""

    def __init__(self, table, reward=None):
        self.table = table
        self.calls = []
        self.reward = reward

    def execute(self, agent_id, mode, state, stream):
        self.calls.append((agent_id, mode, state.turn))
        trace, obs, ok, cost = self.table[(agent_id, mode)]
        return StepResult(trace, obs, ok, cost)

    def judge(self, trajectory):
        if self.reward is not None:
            return self.reward
        return 1.0 if trajectory.steps and all(s.success for s in trajectory.steps) else 0.0
