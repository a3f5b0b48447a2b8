from __future__ import annotations

import numpy as np
import pytest
from helpers import registry_example
from hypothesis import given
from hypothesis import strategies as st

from skillroute.errors import EvaluationError
from skillroute.handbook import (
    PRIOR,
    AgentProfile,
    BetaCounts,
    CostStats,
    Handbook,
    ModeMetadata,
    Skill,
    validate,
)
from skillroute.policies import RuleModePolicy
from skillroute.router import RouterConfig, StepResult
from skillroute.selector import (
    EvaluationPoint,
    HandbookVariant,
    VariantDescriptor,
    argmax_objective,
    dominates,
    enumerate_variants,
    evaluate_variant,
    induce,
    pareto_frontier,
    select_handbook,
)

CONFIG = RouterConfig(mode_policy=RuleModePolicy.for_modes(("answer",)))
QUERIES = [f"{kind} task {i}" for i in range(6) for kind in ("logic", "numeric")]


class KindEnvironment:
    """a1 solves logic queries, a2 numeric ones; every call costs its agent's price."""

    def __init__(self, prices=None):
        self.prices = prices or {"a1": 0.1, "a2": 0.1}
        self.calls = 0

    def execute(self, agent_id, mode, state, stream):
        self.calls += 1
        ok = ("logic" in state.query) == (agent_id == "a1")
        return StepResult(f"{agent_id} ran", "done", ok, self.prices[agent_id])

    def judge(self, trajectory):
        return 1.0 if all(s.success for s in trajectory.steps) else 0.0


def kinds_handbook() -> Handbook:
    skills = (
        Skill("general", "answer", "generic work", ("task",)),
        Skill("logic", "answer", "logic work", ("logic",), "general"),
        Skill("numeric", "answer", "numeric work", ("numeric",), "general"),
    )
    profiles = (
        AgentProfile("a1", "answer", {"general": BetaCounts(5, 5), "logic": BetaCounts(9, 1),
                                      "numeric": BetaCounts(1, 9)}, CostStats(0.1, 10)),
        AgentProfile("a2", "answer", {"general": BetaCounts(5, 5), "logic": BetaCounts(1, 9),
                                      "numeric": BetaCounts(9, 1)}, CostStats(0.1, 10)),
    )
    return Handbook((ModeMetadata("answer", ("be brief",), ("a1", "a2")),), skills, profiles,
                    {"answer": ("general", "logic", "numeric")}, version=4)


# -- variants -----------------------------------------------------------------


def test_no_fine_skills_gives_two_variants():
    hb = Handbook((ModeMetadata("answer", (), ("a1",)),), (Skill("s", "answer"),), (), {"answer": ("s",)})
    variants = enumerate_variants(hb)
    assert [str(v.descriptor) for v in variants] == ["answer=both;insights=on", "answer=both;insights=off"]


def test_two_hierarchical_modes_give_eighteen_variants():
    hb = registry_example()
    skills = hb.skills + (Skill("news", "search", "", ("news",), "web_lookup"),)
    edges = dict(hb.edges, search=("web_lookup", "news"))
    hb = Handbook(hb.modes, skills, hb.profiles, edges, version=1)
    variants = enumerate_variants(hb)
    assert len(variants) == 18
    assert len({str(v.descriptor) for v in variants}) == 18
    assert all(validate(v.handbook) == [] for v in variants)


def test_coarse_folds_children_into_parent():
    hb = registry_example()
    d = VariantDescriptor((("answer", "both"), ("code", "coarse"), ("search", "both")))
    out = induce(hb, d)
    assert {s.id for s in out.skills if s.mode == "code"} == {"data_processing"}
    for p in hb.profiles:
        if p.mode != "code":
            continue
        expected_a, expected_b = PRIOR
        for sid in ("data_processing", "symbolic_logic", "numerical_approximation"):
            c = p.counts(sid)
            expected_a += c.alpha - PRIOR.alpha
            expected_b += c.beta - PRIOR.beta
        assert out.profile(p.agent_id, "code").counts("data_processing") == BetaCounts(expected_a, expected_b)
    assert out.profile("a1", "code").counters["data_processing"] == BetaCounts(6, 2)


def test_fine_drops_parents_and_orphans_children():
    hb = registry_example()
    out = induce(hb, VariantDescriptor((("answer", "both"), ("code", "fine"), ("search", "both"))))
    code = {s.id: s for s in out.skills if s.mode == "code"}
    assert set(code) == {"symbolic_logic", "numerical_approximation"}
    assert all(s.parent is None for s in code.values())
    assert "data_processing" not in out.profile("a1", "code").counters


def test_insights_off_clears_insights():
    out = induce(registry_example(), VariantDescriptor((("code", "both"),), insights=False))
    assert all(m.insights == () for m in out.modes)


# -- Pareto frontier ------------------------------------------------------------


def _pt(r, c, name=None):
    return EvaluationPoint(name or f"{r},{c}", r, c, r - c)


def test_frontier_example():
    pts = [_pt(0.8, 10), _pt(0.7, 5), _pt(0.75, 12)]
    assert [(p.reward, p.cost) for p in pareto_frontier(pts)] == [(0.7, 5), (0.8, 10)]


def test_frontier_singleton():
    p = _pt(0.5, 1)
    assert pareto_frontier([p]) == [p]


def test_frontier_matches_brute_force():
    rng = np.random.default_rng(12)
    pts = [_pt(float(rng.integers(0, 20)) / 20, float(rng.integers(0, 20)), f"p{i}") for i in range(100)]
    brute = {p.descriptor for p in pts if not any(dominates(q, p) for q in pts)}
    assert {p.descriptor for p in pareto_frontier(pts)} == brute


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 10)), min_size=1, max_size=30),
       st.floats(0, 5))
def test_winner_is_on_frontier(raw, lam):
    pts = [EvaluationPoint(f"p{i}", r, c, r - lam * c) for i, (r, c) in enumerate(raw)]
    best = argmax_objective(pts, lam)
    front = pareto_frontier(pts)
    assert best in front


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 10)), min_size=1, max_size=30))
def test_winner_cost_non_increasing_in_lambda(raw):
    pts = [EvaluationPoint(f"p{i}", r, c, 0.0) for i, (r, c) in enumerate(raw)]
    costs = [argmax_objective(pts, lam).cost for lam in (0.0, 0.1, 0.5, 1.0, 2.0, 10.0)]
    assert costs == sorted(costs, reverse=True)


def test_lambda_extremes():
    pts = [_pt(0.9, 8, "rich"), _pt(0.6, 2, "mid"), _pt(0.3, 0.5, "cheap")]
    assert argmax_objective(pts, 0.0).descriptor == "rich"
    assert argmax_objective(pts, 100.0).descriptor == "cheap"
    # rich beats mid while 0.9 - 8 lam > 0.6 - 2 lam, i.e. lam < 0.05
    assert argmax_objective(pts, 0.049).descriptor == "rich"
    assert argmax_objective(pts, 0.051).descriptor == "mid"


def test_ties_prefer_lower_cost():
    pts = [_pt(0.6, 2, "a"), _pt(0.5, 1, "b")]
    assert argmax_objective(pts, 0.1).descriptor == "b"


def test_point_validation():
    with pytest.raises(ValueError):
        EvaluationPoint("x", 1.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        EvaluationPoint("x", 0.5, -1.0, 0.0)


# -- evaluation -----------------------------------------------------------------


def _variant(hb, mode_choice):
    d = VariantDescriptor((("answer", mode_choice),))
    return HandbookVariant(d, induce(hb, d))


def test_hiding_distinguishing_skill_lowers_objective():
    hb = kinds_handbook()
    env = KindEnvironment()
    fine = evaluate_variant(_variant(hb, "fine"), QUERIES, env, 0.5, 0, CONFIG)
    coarse = evaluate_variant(_variant(hb, "coarse"), QUERIES, env, 0.5, 0, CONFIG)
    assert fine.reward == 1.0 and coarse.reward == 0.5
    assert coarse.objective < fine.objective


def test_identical_variants_score_identically():
    hb = kinds_handbook()
    a = evaluate_variant(_variant(hb, "both"), QUERIES, KindEnvironment(), 0.5, 3, CONFIG)
    b = evaluate_variant(_variant(hb, "both"), QUERIES, KindEnvironment(), 0.5, 3, CONFIG)
    assert (a.reward, a.cost, a.objective) == (b.reward, b.cost, b.objective)


def test_empty_validation_set_raises():
    with pytest.raises(EvaluationError):
        evaluate_variant(_variant(kinds_handbook(), "both"), [], KindEnvironment(), 0.5, 0, CONFIG)


def test_select_handbook_picks_best_and_bumps_once():
    hb = kinds_handbook()
    chosen, report = select_handbook(hb, QUERIES, KindEnvironment(), 0.5, 0, CONFIG)
    assert len(report.points) == 6
    assert "answer=coarse" not in report.winner
    assert chosen.handbook.version == hb.version + 1
    assert report.winner == str(chosen.descriptor)
    best = max(p.objective for p in report.points)
    assert next(p for p in report.points if p.descriptor == report.winner).objective == best
    lines = report.to_csv().splitlines()
    assert lines[0] == "descriptor,reward,cost,J,on_frontier" and len(lines) == 7


def test_winner_cost_over_lambda_sweep():
    hb = kinds_handbook()
    env = KindEnvironment({"a1": 0.4, "a2": 0.05})
    costs = []
    for lam in (0.0, 0.5, 2.0):
        chosen, report = select_handbook(hb, QUERIES, env, lam, 0, CONFIG)
        costs.append(next(p.cost for p in report.points if p.descriptor == report.winner))
    assert costs == sorted(costs, reverse=True)
