"""Command line: init, simulate, learn, refine, select, route, eval.

Exit codes: 0 success, 2 config error, 3 data error, 4 environment error.
Failures print a one-line JSON error report on stderr. Every report embeds
the handbook version it read and the resolved config hash.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import click

from . import handbook as hbio
from .config import config_hash, defaults_table, load_config
from .errors import (
    ConfigError,
    EvaluationError,
    ExternalRejected,
    GatewayError,
    InvalidHandbookError,
    RoutingError,
    SchemaError,
    SkillRouteError,
    UnknownModeError,
    UnknownSkillError,
    WorldSpecError,
)
from .evaluation import entropy_bits, pareto_csv, run_method, summarize_by_method
from .handbook import Handbook
from .learner import (
    BaselineProposer,
    InsightConfig,
    JudgeConfig,
    OracleProposer,
    extract_outcomes,
    learn,
)
from .policies import RuleModePolicy, ScriptedModePolicy
from .refiner import TrajectoryStore, refine
from .router import RouterConfig, route_dry
from .selector import select_handbook
from .simulator import (
    LatentWorld,
    Query,
    SimulatorEnvironment,
    WorldSpec,
    generate_world,
    simulate_bundles,
)
from .trajectory import (
    dump_line,
    iter_records,
    load_bundles,
    read_jsonl,
    save_bundles,
    save_jsonl,
)

EXIT_CONFIG, EXIT_DATA, EXIT_ENV = 2, 3, 4

log = logging.getLogger("skillroute")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


class Ctx:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = config_hash(cfg)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(report: dict, out: Path | None) -> None:
    text = _json(report)
    if out is not None:
        _write(out, text)
    click.echo(text, nl=False)


def _load_world(path: str | None) -> LatentWorld:
    if path is None:
        raise ConfigError("--world is required (create one with `skillroute init`)")
    try:
        return LatentWorld.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read world {path}: {exc}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"not a world file: {exc}", path=str(path)) from None


def _load_handbook(path: str | None, world: LatentWorld | None) -> Handbook:
    if path is None:
        if world is None:
            raise ConfigError("--handbook or --world is required")
        return world.skeleton()
    try:
        return hbio.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read handbook {path}: {exc}") from None


def _policy(cfg: dict, modes: Sequence[str]):
    p, terminal = cfg["policy"], cfg["router"]["terminal_mode"]
    if p["kind"] == "rule":
        order = p["order"] or [m for m in modes if m != terminal]
        unknown = [m for m in order if m not in modes]
        if unknown:
            raise ConfigError(f"policy.order names unknown modes {unknown}")
        return RuleModePolicy(tuple((f"needs:{m}", m) for m in order), terminal, name="rule:" + ",".join(order))
    if p["kind"] == "scripted":
        return ScriptedModePolicy(tuple(p["schedule"]), terminal)
    raise ConfigError(f"policy.kind must be 'rule' or 'scripted', got {p['kind']!r}")


def _router_config(cfg: dict, modes: Sequence[str]) -> RouterConfig:
    r = cfg["router"]
    if r["max_turns"] < 1:
        raise ConfigError("max_turns must be >= 1")
    return RouterConfig(
        lambda_c=float(r["lambda_c"]),
        k=int(r["k"]),
        threshold=float(r["threshold"]),
        max_turns=int(r["max_turns"]),
        terminal_mode=r["terminal_mode"],
        mode_policy=_policy(cfg, modes),
        on_failure=r["on_failure"],
        failure_cost=float(r["failure_cost"]),
    )


def _read_queries(path: Path) -> list[Query]:
    with open(path, encoding="utf-8") as fh:
        return [Query.from_dict(rec) for _, rec in iter_records(fh)]


def _queries(world: LatentWorld, path: str | None, n: int, seed: int) -> list[Query]:
    if path is not None:
        return _read_queries(Path(path))
    return world.sample_queries(n, seed)


def _stamp(hb: Handbook, ctx: Ctx) -> Handbook:
    return replace(hb, provenance=f"{hb.provenance} [config {ctx.hash}]")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file."),
    click.option("--seed", type=int, help="Seed (world seed for init, environment seed otherwise)."),
    click.option("--lambda", "lam", type=float, multiple=True, help="Objective tradeoff; repeat to sweep."),
    click.option("--lambda-c", type=float, help="Per-step cost weight in the routing utility."),
    click.option("--max-turns", type=int, help="Turn budget per episode (default 4)."),
    click.option("--world", "world_path", type=click.Path(dir_okay=False), help="World JSON from `init`."),
    click.option("--handbook", "handbook_path", type=click.Path(dir_okay=False), help="Input handbook JSON."),
    click.option("--out", type=click.Path(), help="Output file or directory."),
]


def common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


def _ctx(config_path, seed, lam, lambda_c, max_turns, **extra) -> Ctx:
    overrides: dict[str, dict] = {
        "run": {"seed": seed, "lambda": lam[0] if lam else None, "lambdas": list(lam) if lam else None},
        "router": {"lambda_c": lambda_c, "max_turns": max_turns},
    }
    for section, values in extra.items():
        overrides.setdefault(section, {}).update(values)
    return Ctx(load_config(config_path, overrides))


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging.")
def cli(verbose: int) -> None:
    """Skill-aware agent routing over a learned handbook."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@cli.command()
def defaults() -> None:
    """Print the table of configuration defaults."""
    click.echo(defaults_table())


@cli.command()
@common
def init(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out) -> None:
    """Generate a latent world (JSON) from the [world] config table."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns)
    spec = WorldSpec.from_mapping(ctx.cfg["world"])
    world = generate_world(spec, ctx.cfg["run"]["seed"])
    dest = Path(out or "world.json")
    dest.parent.mkdir(parents=True, exist_ok=True)
    world.save(dest)
    _emit({"command": "init", "world": str(dest), "world_seed": world.seed, "agents": list(world.agent_ids),
           "modes": list(world.modes), "handbook_version": None, "config_hash": ctx.hash}, None)


@cli.command()
@common
@click.option("--n-queries", type=int, help="Number of training queries.")
@click.option("--query-seed", type=int, help="Seed for query sampling.")
@click.option("--mode", "modes", multiple=True, help="Designated exploration mode; repeatable.")
def simulate(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, n_queries, query_seed, modes):
    """Collect exploration bundles: each query once per agent at the designated modes."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns,
               simulate={"n_queries": n_queries, "query_seed": query_seed, "modes": list(modes) or None})
    world = _load_world(world_path)
    s = ctx.cfg["simulate"]
    queries = world.sample_queries(int(s["n_queries"]), int(s["query_seed"]))
    config = _router_config(ctx.cfg, world.modes)
    bundles = simulate_bundles(world, queries, config, ctx.cfg["run"]["seed"], s["modes"] or None)
    dest = Path(out or "bundles")
    save_bundles(bundles, dest)
    _write(dest / "queries.jsonl", "".join(dump_line(q.to_dict()) + "\n" for q in queries))
    report = {
        "command": "simulate", "queries": len(queries), "bundles": len(bundles),
        "trajectories": sum(len(b.trajectories) for b in bundles),
        "mean_reward": sum(t.reward for b in bundles for t in b.trajectories) / max(1, sum(len(b.trajectories) for b in bundles)),
        "handbook_version": world.skeleton().version, "config_hash": ctx.hash,
    }
    _emit(report, dest / "report.json")


def _bundles(path: str | None):
    if path is None:
        raise ConfigError("--bundles is required")
    try:
        bundles = load_bundles(path)
    except OSError as exc:
        raise ConfigError(f"cannot read bundles from {path}: {exc}") from None
    if not bundles:
        raise EvaluationError(f"no bundles in {path}")
    return bundles


@cli.command("learn")
@common
@click.option("--bundles", "bundles_path", type=click.Path(file_okay=False), help="Directory written by `simulate`.")
@click.option("--proposer", type=click.Choice(["oracle", "baseline"]), help="Skill proposer.")
def learn_cmd(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, bundles_path, proposer):
    """Learn skills, agent profiles and insights from exploration bundles."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns, learner={"proposer": proposer})
    lc = ctx.cfg["learner"]
    world = _load_world(world_path) if world_path or lc["proposer"] == "oracle" else None
    hb = _load_handbook(handbook_path, world)
    bundles = _bundles(bundles_path)
    if lc["proposer"] == "oracle":
        prop = OracleProposer(world, _read_queries(Path(bundles_path) / "queries.jsonl"))
    else:
        prop = BaselineProposer()
    judge = JudgeConfig(label=lc["judge_label"], success_threshold=lc["success_threshold"],
                        k=ctx.cfg["router"]["k"], threshold=ctx.cfg["router"]["threshold"])
    new, rep = learn(hb, bundles, prop, judge, InsightConfig(success_threshold=lc["success_threshold"]),
                     cluster_threshold=lc["cluster_threshold"], dedup_threshold=lc["dedup_threshold"],
                     max_bundles=lc["max_bundles"])
    new = _stamp(new, ctx)
    dest = Path(out or "handbook.json")
    dest.parent.mkdir(parents=True, exist_ok=True)
    hbio.save(new, dest)
    _emit({"command": "learn", "input_handbook_version": hb.version, "handbook_version": new.version,
           "skills": len(new.skills), "diffs": rep.diffs, "proposals": rep.proposals, "outcomes": rep.outcomes,
           "insights": rep.insights, "proposer_failures": len(rep.failures), "config_hash": ctx.hash},
          dest.with_suffix(".report.json"))


@cli.command("refine")
@common
@click.option("--bundles", "bundles_path", type=click.Path(file_okay=False), help="Directory written by `simulate`.")
def refine_cmd(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, bundles_path):
    """Split confounded skills and merge redundant ones."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns)
    if handbook_path is None:
        raise ConfigError("--handbook is required")
    hb = _load_handbook(handbook_path, None)
    lc, rc = ctx.cfg["learner"], ctx.cfg["refiner"]
    judge = JudgeConfig(label=lc["judge_label"], success_threshold=lc["success_threshold"],
                        k=ctx.cfg["router"]["k"], threshold=ctx.cfg["router"]["threshold"])
    store = TrajectoryStore(extract_outcomes(hb, _bundles(bundles_path), judge))
    new, rep, cands = refine(hb, store, min_queries=rc["min_queries"], variance_threshold=rc["variance_threshold"],
                             significance_alpha=rc["significance_alpha"], min_observations=rc["min_observations"])
    new = _stamp(new, ctx)
    dest = Path(out or "handbook.refined.json")
    dest.parent.mkdir(parents=True, exist_ok=True)
    hbio.save(new, dest)
    _emit({"command": "refine", "input_handbook_version": hb.version, "handbook_version": new.version,
           "candidates": [{"kind": c.kind, "targets": list(c.targets), "statistic": c.statistic} for c in cands],
           "applied": [[k, list(t)] for k, t in rep.applied], "rejected": [list(t) for t in rep.rejected],
           "skipped": [list(t) for t in rep.skipped], "config_hash": ctx.hash},
          dest.with_suffix(".report.json"))


@cli.command("select")
@common
@click.option("--queries", "queries_path", type=click.Path(dir_okay=False), help="Validation queries JSONL.")
def select_cmd(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, queries_path):
    """Pick the handbook variant maximizing validation J, once per lambda."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns)
    world = _load_world(world_path)
    hb = _load_handbook(handbook_path, world)
    sc = ctx.cfg["selector"]
    queries = _queries(world, queries_path, int(sc["n_queries"]), int(sc["query_seed"]))
    config = _router_config(ctx.cfg, world.modes)
    seed_ = ctx.cfg["run"]["seed"]
    env = SimulatorEnvironment(world, queries, seed_)
    dest = Path(out or "selection")
    sweep = []
    for lam_ in ctx.cfg["run"]["lambdas"]:
        variant, rep = select_handbook(hb, [q.text for q in queries], env, float(lam_), seed_, config)
        tag = f"lambda={float(lam_)!r}"
        body = rep.to_dict() | {"input_handbook_version": hb.version, "handbook_version": variant.handbook.version,
                                "mode_policy": getattr(config.mode_policy, "name", ""), "config_hash": ctx.hash}
        _write(dest / f"select_{tag}.json", _json(body))
        _write(dest / f"select_{tag}.csv", rep.to_csv())
        hbio.save(_stamp(variant.handbook, ctx), dest / f"handbook_{tag}.json")
        win = next(p for p in rep.points if p.descriptor == rep.winner)
        sweep.append({"lambda": float(lam_), "winner": rep.winner, "reward": win.reward, "cost": win.cost,
                      "objective": win.objective})
    _emit({"command": "select", "input_handbook_version": hb.version, "sweep": sweep,
           "mode_policy": getattr(config.mode_policy, "name", ""), "config_hash": ctx.hash},
          dest / "sweep.json")


@cli.command()
@common
@click.option("--queries", "queries_path", type=click.Path(dir_okay=False), help="Queries JSONL.")
@click.option("--method", type=click.Choice(["skill-router", "random", "best-overall"]), default="skill-router")
@click.option("--dry-run", is_flag=True, help="Emit routing decisions without executing any agent.")
def route(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, queries_path, method, dry_run):
    """Route queries with a handbook; writes a trajectory log (or decisions with --dry-run)."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns)
    world = _load_world(world_path)
    hb = _load_handbook(handbook_path, world)
    ec = ctx.cfg["eval"]
    queries = _queries(world, queries_path, int(ec["n_queries"]), int(ec["query_seed"]))
    config = _router_config(ctx.cfg, world.modes)
    dest = Path(out or ("decisions.jsonl" if dry_run else "trajectories.jsonl"))
    if dry_run:
        if method != "skill-router":
            raise ConfigError("--dry-run only applies to the skill router")
        lines = []
        for q in queries:
            for d in route_dry(q.text, hb, config):
                lines.append(dump_line({"query": q.text, "query_id": q.id, "method": method, **d.to_dict()}))
        _write(dest, "".join(line + "\n" for line in lines))
        report = {"command": "route", "dry_run": True, "decisions": len(lines)}
    else:
        env = SimulatorEnvironment(world, queries, ctx.cfg["run"]["seed"])
        trajs = run_method(method, [q.text for q in queries], hb, env, config, seed=ctx.cfg["run"]["seed"])
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_jsonl(trajs, dest)
        report = {"command": "route", "dry_run": False, "trajectories": len(trajs), "method": method}
    _emit(report | {"handbook_version": hb.version, "config_hash": ctx.hash, "output": str(dest)},
          dest.with_suffix(".report.json"))


def _decision_metrics(records: list[dict]) -> list[dict]:
    groups: dict[str, dict[str, int]] = {}
    for r in records:
        counts = groups.setdefault(r.get("method", ""), {})
        counts[r["chosen"]] = counts.get(r["chosen"], 0) + 1
    out = []
    for m in sorted(groups):
        c = groups[m]
        total = sum(c.values())
        out.append({"method": m, "decisions": total, "distribution": {a: c[a] / total for a in sorted(c)},
                    "entropy_bits": entropy_bits(c[a] for a in sorted(c))})
    return out


@cli.command("eval")
@common
@click.argument("inputs", nargs=-1, type=click.Path(dir_okay=False, exists=True))
def eval_cmd(config_path, seed, lam, lambda_c, max_turns, world_path, handbook_path, out, inputs):
    """Metrics from trajectory logs or dry-run decision logs."""
    ctx = _ctx(config_path, seed, lam, lambda_c, max_turns)
    if not inputs:
        raise EvaluationError("no input logs given")
    lines: list[str] = []
    for path in inputs:
        with open(path, encoding="utf-8") as fh:
            lines.extend(fh)
    records = [r for _, r in iter_records(lines)]
    if not records:
        raise EvaluationError("input logs are empty")
    dest = Path(out or "eval")
    versions = sorted({r.get("handbook_version") for r in records if r.get("handbook_version") is not None})
    if all("chosen" in r and "terminal" not in r for r in records):
        report = {"kind": "decisions", "methods": _decision_metrics(records)}
    else:
        summaries = summarize_by_method(read_jsonl(lines), ctx.cfg["run"]["lambdas"])
        report = {"kind": "trajectories", "methods": [s.to_dict() for s in summaries]}
        _write(dest / "pareto.csv", pareto_csv(summaries))
    _emit(report | {"command": "eval", "handbook_version": versions, "config_hash": ctx.hash}, dest / "metrics.json")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, WorldSpecError, click.UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, (GatewayError, ExternalRejected, RoutingError)):
        return EXIT_ENV
    if isinstance(exc, (SchemaError, InvalidHandbookError, EvaluationError, UnknownModeError, UnknownSkillError,
                        SkillRouteError, KeyError, ValueError)):
        return EXIT_DATA
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except Exception as exc:
        code = exit_code(exc)
        if code == 1:
            raise
        click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), err=True)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
