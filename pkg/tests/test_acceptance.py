"""Acceptance criteria, one test per criterion.

Each test reports a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary. Run just these with
``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import json
import time
import zlib
from collections import Counter
from dataclasses import replace

import httpx
import numpy as np
import pytest
from helpers import random_handbook

from skillroute import handbook as hbio
from skillroute.competence import Outcome, posterior_mean, update_counters
from skillroute.evaluation import bootstrap_ci, run_method, selection_entropy
from skillroute.gateway import AgentEndpoint, GatewayEnvironment
from skillroute.handbook import PRIOR, AgentProfile, BetaCounts, CostStats, Handbook
from skillroute.learner import JudgeConfig, OracleProposer, extract_outcomes, learn
from skillroute.policies import RuleModePolicy
from skillroute.refiner import (
    TrajectoryStore,
    apply_refinements,
    find_merge_candidates,
    find_split_candidates,
    refine,
)
from skillroute.router import (
    HistoryEntry,
    InteractionState,
    RouterConfig,
    StepResult,
    route_step,
    run_episode,
)
from skillroute.selector import (
    EvaluationPoint,
    argmax_objective,
    dominates,
    pareto_frontier,
    select_handbook,
)
from skillroute.simulator import (
    SimulatorEnvironment,
    WorldSpec,
    confounded_fixture,
    duplicated_fixture,
    generate_world,
    oracle_route,
    simulate_bundles,
)
from skillroute.text import tokenize
from skillroute.trajectory import dump_line, to_records

LAMBDA = 0.5
LAMBDA_C = 0.5


# ---------------------------------------------------------------------------
# 1. Beta math
# ---------------------------------------------------------------------------


def test_criterion_1_beta_math(criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    worst = 0.0
    skills = [f"s{i}" for i in range(6)]
    for _ in range(1000):
        init = {s: BetaCounts(float(rng.integers(1, 9)), float(rng.integers(1, 9))) for s in skills if rng.random() < 0.5}
        profile = AgentProfile("a", "m", init, CostStats())
        outcomes = [
            Outcome("a", "m", tuple(rng.choice(skills, size=int(rng.integers(1, 4)))), bool(rng.random() < 0.6))
            for _ in range(int(rng.integers(0, 40)))
        ]
        got = update_counters(profile, outcomes)
        wins, losses = Counter(), Counter()
        for o in outcomes:
            for s in set(o.skill_ids):
                (wins if o.success else losses)[s] += 1
        for s in skills:
            a0, b0 = init.get(s, PRIOR)
            expect = (a0 + wins[s], b0 + losses[s])
            touched = s in init or wins[s] or losses[s]
            if touched and tuple(got.counters[s]) != expect:
                mismatches += 1
            if not touched and s in got.counters:
                mismatches += 1
            worst = max(worst, abs(posterior_mean(got, s) - expect[0] / (expect[0] + expect[1])))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and worst <= 1e-12 and elapsed < 5.0
    criterion(1, "Beta counters and posterior means match tally oracle", ok,
              f"(mismatches={mismatches}, max mean error={worst:.1e}, {elapsed:.2f}s)")
    assert mismatches == 0 and worst <= 1e-12
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. Routing argmax and 3. invariances
# ---------------------------------------------------------------------------

TERMINAL = "m0"
POLICY = RuleModePolicy.for_modes(("m1", "m2"), terminal=TERMINAL)


def _fixture(rng: np.random.Generator) -> tuple[Handbook, InteractionState]:
    hb = random_handbook(rng, n_modes=3, n_skills=10, n_agents=int(rng.integers(2, 6)))
    if rng.random() < 0.4:
        # exact utility ties: copy one agent's profile onto another in every mode
        agents = sorted({p.agent_id for p in hb.profiles})
        if len(agents) >= 2:
            src, dst = agents[0], agents[1]
            # same cost: tie broken by id; cheaper copy: tie only at lambda_c = 0, broken by cost
            factor = 1.0 if rng.random() < 0.5 else 0.5
            profiles = [p for p in hb.profiles if p.agent_id != dst]
            for p in hb.profiles:
                if p.agent_id == src:
                    cost = CostStats(p.cost.mean * factor, p.cost.count)
                    profiles.append(replace(p, agent_id=dst, cost=cost))
            hb = replace(hb, profiles=tuple(profiles))
    words = [f"tok{int(t)}" for t in rng.integers(0, 40, size=int(rng.integers(1, 6)))]
    for m in ("m1", "m2"):
        if rng.random() < 0.5:
            words.append(f"needs:{m}")
    state = InteractionState(" ".join(words))
    for _ in range(int(rng.integers(0, 3))):
        state = state.advance(str(rng.choice(["m1", "m2"])), "ag0", "t", "o")
    return hb, state


def _oracle_mode(state: InteractionState, max_turns: int) -> str:
    if state.turn >= max_turns - 1:
        return TERMINAL
    tokens = set(tokenize(state.query))
    done = {h.mode for h in state.history}
    for m in ("m1", "m2"):
        if f"needs:{m}" in tokens and m not in done:
            return m
    return TERMINAL


def _oracle_agent(hb: Handbook, mode: str, entries, lam: float) -> str:
    rows = []
    for agent in hb.agents_for(mode):
        p = hb.profile(agent, mode)
        comp = 0.0
        for sid, w in entries:
            a, b = p.counters.get(sid, PRIOR) if p is not None else PRIOR
            comp += w * a / (a + b)
        cost = p.cost.mean if p is not None else 0.0
        rows.append((comp - lam * cost, cost, agent))
    best = max(r[0] for r in rows)
    tied = [r for r in rows if r[0] >= best - 1e-12 * max(1.0, abs(best))]
    return min(tied, key=lambda r: (r[1], r[2]))[2]


def test_criterion_2_routing_argmax(criterion):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    agree = ties = 0
    for _ in range(500):
        hb, state = _fixture(rng)
        lam = float(rng.choice([0.0, 0.25, 0.5, 1.0, 2.0]))
        cfg = RouterConfig(lambda_c=lam, max_turns=4, terminal_mode=TERMINAL, mode_policy=POLICY)
        d = route_step(state, hb, cfg)
        expect_mode = _oracle_mode(state, 4)
        expect = _oracle_agent(hb, expect_mode, d.active_skills.entries, lam)
        agree += d.mode == expect_mode and d.chosen == expect
        ties += d.tie_break is not None
    elapsed = time.perf_counter() - start
    ok = agree == 500 and elapsed < 10.0
    criterion(2, "route_step matches exhaustive utility oracle", ok,
              f"({agree}/500 agree, {ties} tie cases, {elapsed:.2f}s)")
    assert agree == 500 and ties > 0
    assert elapsed < 10.0


def _scaled(hb: Handbook, count_scale: float, cost_scale: float) -> Handbook:
    profiles = tuple(
        replace(p, counters={s: BetaCounts(c.alpha * count_scale, c.beta * count_scale) for s, c in p.counters.items()},
                cost=CostStats(p.cost.mean * cost_scale, p.cost.count))
        for p in hb.profiles
    )
    return replace(hb, profiles=profiles)


def test_criterion_3_scale_invariance_and_lambda_monotonicity(criterion):
    rng = np.random.default_rng(303)
    invariant = monotone = 0
    grid = (0.0, 0.25, 0.5, 1.0, 2.0)
    for _ in range(200):
        hb, state = _fixture(rng)
        lam = float(rng.uniform(0.1, 2.0))
        base = route_step(state, hb, RouterConfig(lambda_c=lam, terminal_mode=TERMINAL, mode_policy=POLICY))
        # joint scaling: counters by s1 (means unchanged), costs by s2 with lambda_c by 1/s2
        s1, s2 = float(rng.uniform(0.5, 20.0)), float(rng.uniform(0.1, 10.0))
        scaled = route_step(state, _scaled(hb, s1, s2),
                            RouterConfig(lambda_c=lam / s2, terminal_mode=TERMINAL, mode_policy=POLICY))
        invariant += scaled.chosen == base.chosen
        costs = []
        for g in grid:
            d = route_step(state, hb, RouterConfig(lambda_c=g, terminal_mode=TERMINAL, mode_policy=POLICY))
            costs.append(d.costs[d.chosen])
        monotone += all(b <= a for a, b in zip(costs, costs[1:]))
    ok = invariant == 200 and monotone == 200
    criterion(3, "argmax scale invariance and lambda_c monotonicity", ok,
              f"(invariant {invariant}/200, monotone {monotone}/200)")
    assert invariant == 200 and monotone == 200


# ---------------------------------------------------------------------------
# 4. Pareto frontier and selection
# ---------------------------------------------------------------------------


class HashEnvironment:
    """Deterministic environment: success iff a hash of (agent, mode, query) falls under the agent's rate."""

    def __init__(self, rates, prices):
        self.rates, self.prices = rates, prices

    def execute(self, agent_id, mode, state, stream):
        h = zlib.crc32(f"{agent_id}|{mode}|{stream}".encode()) % 1000 / 1000
        return StepResult("t", "o", h < self.rates[(agent_id, mode)], self.prices[agent_id])

    def judge(self, trajectory):
        return 1.0 if all(s.success for s in trajectory.steps) else 0.0


def test_criterion_4_pareto_and_selection(criterion):
    rng = np.random.default_rng(404)
    frontier_ok = 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        pts = [EvaluationPoint(f"p{i}", float(rng.integers(0, 11)) / 10, float(rng.integers(0, 11)), 0.0)
               for i in range(n)]
        brute = sorted(p.descriptor for p in pts if not any(dominates(q, p) for q in pts))
        frontier_ok += sorted(p.descriptor for p in pareto_frontier(pts)) == brute

    on_front = sweeps_ok = 0
    n_fixtures = 8
    for _ in range(n_fixtures):
        hb = random_handbook(rng, n_modes=3, n_skills=9, n_agents=3)
        agents = sorted({a for m in hb.modes for a in m.allowed_agents})
        rates = {(a, m): float(rng.uniform(0.2, 1.0)) for a in agents for m in hb.mode_ids}
        prices = {a: float(rng.uniform(0.05, 0.6)) for a in agents}
        env = HashEnvironment(rates, prices)
        queries = [" ".join(f"tok{int(t)}" for t in rng.integers(0, 40, 3)) + " needs:m1" for _ in range(12)]
        cfg = RouterConfig(terminal_mode=TERMINAL, mode_policy=POLICY)
        costs = []
        for lam in (0.0, 0.5, 2.0):
            _, rep = select_handbook(hb, queries, env, lam, 0, cfg)
            winner = next(p for p in rep.points if p.descriptor == rep.winner)
            on_front += winner in rep.frontier and winner == argmax_objective(rep.points, lam)
            costs.append(winner.cost)
        sweeps_ok += all(b <= a for a, b in zip(costs, costs[1:]))
    ok = frontier_ok == 1000 and on_front == 3 * n_fixtures and sweeps_ok == n_fixtures
    criterion(4, "Pareto frontier equals domination oracle; winners on frontier; sweep monotone", ok,
              f"(frontier {frontier_ok}/1000, winner on frontier {on_front}/{3 * n_fixtures}, "
              f"monotone sweeps {sweeps_ok}/{n_fixtures})")
    assert frontier_ok == 1000
    assert on_front == 3 * n_fixtures and sweeps_ok == n_fixtures


# ---------------------------------------------------------------------------
# 5. Refinement
# ---------------------------------------------------------------------------


def _mass(hb: Handbook) -> float:
    return sum(c.alpha + c.beta - 2 for p in hb.profiles for c in p.counters.values())


def test_criterion_5_refinement(criterion):
    split_fx = confounded_fixture(0)
    splits = find_split_candidates(split_fx.handbook, TrajectoryStore(split_fx.outcomes))
    split_ok = [c.targets for c in splits] == [("search_mixed",)]
    after_split = apply_refinements(split_fx.handbook, splits)

    merge_fx = duplicated_fixture(0)
    merges = find_merge_candidates(merge_fx.handbook)
    merge_ok = [c.targets for c in merges] == [("search_dup0", "search_dup1")]
    after_merge = apply_refinements(merge_fx.handbook, merges)

    conserved = _mass(after_split) == _mass(split_fx.handbook) and _mass(after_merge) == _mass(merge_fx.handbook)
    stat = splits[0].statistic if splits else float("nan")
    ok = split_ok and merge_ok and conserved
    criterion(5, "confounded skill flagged for split, duplicate pair for merge, mass conserved", ok,
              f"(split statistic {stat:.3f}, merge candidates {len(merges)}, conserved={conserved})")
    assert split_ok and merge_ok and conserved


# ---------------------------------------------------------------------------
# 6-8. End-to-end pipeline on the heterogeneous world
# ---------------------------------------------------------------------------

WORLD_SEED, TRAIN_SEED, BUNDLE_SEED, VALID_SEED, TEST_SEED, ENV_SEED = 7, 1, 11, 3, 2, 99


def _policy(order):
    return RuleModePolicy(tuple((f"needs:{m}", m) for m in order), "answer", name="rule:" + ",".join(order))


def _learn_pipeline(world, order):
    cfg = RouterConfig(lambda_c=LAMBDA_C, mode_policy=_policy(order))
    train = world.sample_queries(300, TRAIN_SEED)
    bundles = simulate_bundles(world, train, cfg, BUNDLE_SEED)
    hb, _ = learn(world.skeleton(), bundles, OracleProposer(world, train))
    hb, _, _ = refine(hb, TrajectoryStore(extract_outcomes(hb, bundles, JudgeConfig())))
    valid = world.sample_queries(100, VALID_SEED)
    env = SimulatorEnvironment(world, valid, ENV_SEED)
    chosen, _ = select_handbook(hb, [q.text for q in valid], env, LAMBDA, ENV_SEED, cfg)
    return chosen.handbook


def _objective(trajs):
    return np.array([t.reward - LAMBDA * t.total_cost for t in trajs])


@pytest.fixture(scope="module")
def pipeline():
    start = time.perf_counter()
    world = generate_world(WorldSpec(), WORLD_SEED)
    order = tuple(m for m in world.modes if m != "answer")
    hb = _learn_pipeline(world, order)
    test = world.sample_queries(200, TEST_SEED)
    env = SimulatorEnvironment(world, test, ENV_SEED)
    cfg = RouterConfig(lambda_c=LAMBDA_C, mode_policy=_policy(order))
    texts = [q.text for q in test]
    runs = {m: run_method(m, texts, hb, env, cfg, seed=ENV_SEED) for m in ("skill-router", "random", "best-overall")}
    oracle = float(np.mean([oracle_route(world, q, LAMBDA_C, LAMBDA).objective for q in test]))
    elapsed = time.perf_counter() - start
    return {"world": world, "handbook": hb, "test": test, "runs": runs, "oracle": oracle, "elapsed": elapsed,
            "order": order}


def test_criterion_6_learning_lift(pipeline, criterion):
    runs = pipeline["runs"]
    learned = _objective(runs["skill-router"])
    j = float(learned.mean())
    oracle = pipeline["oracle"]
    cis = {}
    for base in ("random", "best-overall"):
        cis[base] = bootstrap_ci(learned - _objective(runs[base]), n_boot=2000, seed=0)
    ratio_ok = j >= 0.8 * oracle
    lift_ok = all(lo > 0 for _, lo, _ in cis.values())
    time_ok = pipeline["elapsed"] < 180.0
    detail = (f"(J={j:.3f}, oracle={oracle:.3f}, ratio={j / oracle:.2f}; "
              + "; ".join(f"vs {b}: diff={m:.3f} CI=[{lo:.3f}, {hi:.3f}]" for b, (m, lo, hi) in cis.items())
              + f"; {pipeline['elapsed']:.1f}s)")
    criterion(6, "learned router reaches 80% of oracle J and beats both baselines", ratio_ok and lift_ok and time_ok,
              detail)
    assert ratio_ok and lift_ok and time_ok


def test_criterion_7_anti_collapse(pipeline, criterion):
    learned = selection_entropy(pipeline["runs"]["skill-router"])
    fixed = selection_entropy(pipeline["runs"]["best-overall"])
    ok = learned >= 0.5 and fixed == 0.0
    criterion(7, "learned router spreads calls; always-best baseline collapses", ok,
              f"(learned {learned:.2f} bits, best-overall {fixed:.2f} bits)")
    assert ok


def test_criterion_8_transfer(pipeline, criterion):
    world, hb, test = pipeline["world"], pipeline["handbook"], pipeline["test"]
    texts = [q.text for q in test]
    env = SimulatorEnvironment(world, test, ENV_SEED)
    lifts = {}
    for name, order in (("a", pipeline["order"]), ("b", tuple(reversed(pipeline["order"])))):
        cfg = RouterConfig(lambda_c=LAMBDA_C, mode_policy=_policy(order))
        learned = _objective(run_method("skill-router", texts, hb, env, cfg, seed=ENV_SEED)).mean()
        rand = _objective(run_method("random", texts, hb, env, cfg, seed=ENV_SEED)).mean()
        lifts[name] = float(learned - rand)
    kept = lifts["b"] / lifts["a"]
    ok = lifts["a"] > 0 and kept >= 0.9
    criterion(8, "handbook learned under one rule table keeps its lift under another", ok,
              f"(lift a={lifts['a']:.3f}, lift b={lifts['b']:.3f}, retained {kept:.2f})")
    assert ok


# ---------------------------------------------------------------------------
# 9. Serialization
# ---------------------------------------------------------------------------


def test_criterion_9_serialization(criterion):
    rng = np.random.default_rng(909)
    round_trips = deterministic = 0
    for _ in range(1000):
        hb = random_handbook(rng, n_modes=int(rng.integers(1, 4)), n_skills=int(rng.integers(0, 10)),
                             n_agents=int(rng.integers(1, 5)))
        text = hbio.dumps(hb)
        round_trips += hbio.loads(text) == hb
        deterministic += hbio.dumps(hbio.loads(text)) == text and hbio.dumps(hb) == text
    ok = round_trips == 1000 and deterministic == 1000
    criterion(9, "handbooks round-trip and serialize byte-deterministically", ok,
              f"(round trips {round_trips}/1000, deterministic {deterministic}/1000)")
    assert ok


# ---------------------------------------------------------------------------
# 10. Gateway contract
# ---------------------------------------------------------------------------


def test_criterion_10_gateway(criterion):
    world = generate_world(WorldSpec(), WORLD_SEED)
    queries = world.sample_queries(30, TEST_SEED)
    sim = SimulatorEnvironment(world, queries, ENV_SEED)

    def handler(request):
        b = json.loads(request.content)
        st = InteractionState(b["query"], tuple(
            HistoryEntry(h["mode"], h["agent"], h["trace_digest"], h["observation_digest"]) for h in b["history"]))
        r = sim.execute(b["agent_id"], b["mode"], st, b["episode"])
        return httpx.Response(200, json={"trace": r.trace, "observation": r.observation, "cost": r.cost,
                                         "success": r.success})

    endpoints = [AgentEndpoint(a, f"http://agents/{a}") for a in world.agent_ids]
    gw = GatewayEnvironment(endpoints, sim.judge, client=httpx.Client(transport=httpx.MockTransport(handler)))
    cfg = RouterConfig(lambda_c=LAMBDA_C, mode_policy=RuleModePolicy.for_modes(world.modes))
    hb = world.skeleton()
    equal = sum(
        [dump_line(r) for r in to_records(run_episode(q.text, hb, sim, cfg))]
        == [dump_line(r) for r in to_records(run_episode(q.text, hb, gw, cfg))]
        for q in queries
    )

    def timeout(request):
        raise httpx.ReadTimeout("slow", request=request)

    def refused(request):
        raise httpx.ConnectError("refused", request=request)

    def malformed(request):
        return httpx.Response(200, json={"trace": "t", "observation": "o", "success": True})

    failures = {}
    for kind, h in (("timeout", timeout), ("transport", refused), ("malformed_response", malformed)):
        env = GatewayEnvironment(endpoints, sim.judge, client=httpx.Client(transport=httpx.MockTransport(h)))
        traj = run_episode(queries[0].text, hb, env, cfg)
        failures[kind] = all(not s.success and s.cost == 1.0 for s in traj.steps) and traj.reward == 0.0 and \
            {e[2] for e in env.errors} == {kind}
    ok = equal == len(queries) and all(failures.values())
    criterion(10, "mock gateway matches simulator; gateway errors become penalized failures", ok,
              f"(equal trajectories {equal}/{len(queries)}, error kinds {failures})")
    assert ok
