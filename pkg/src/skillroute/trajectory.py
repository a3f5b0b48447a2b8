"""Trajectory records and the JSONL step log.

Log layout: one object per step carrying ``turn``, ``mode``, ``agent``,
``active_skills``, ``utilities``, ``cost``, ``trace_digest`` and
``observation_digest`` (plus the routing decision verbatim), followed by a
terminal object with ``reward`` and ``total_cost``. Every record carries the
``trajectory`` id so several trajectories can share one file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import SchemaError


@dataclass(frozen=True)
class Step:
    turn: int
    mode: str
    agent: str
    cost: float
    success: bool
    trace_digest: str = ""
    observation_digest: str = ""
    active_skills: dict[str, float] = field(default_factory=dict)
    utilities: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    decision: dict | None = None


@dataclass(frozen=True)
class Trajectory:
    id: str
    query: str
    steps: tuple[Step, ...] = ()
    reward: float = 0.0
    method: str = ""
    handbook_version: int | None = None

    @property
    def total_cost(self) -> float:
        total = 0.0
        for s in self.steps:
            total += s.cost
        return total

    @property
    def modes(self) -> tuple[str, ...]:
        return tuple(s.mode for s in self.steps)

    def agent_at(self, mode: str) -> str | None:
        for s in self.steps:
            if s.mode == mode:
                return s.agent
        return None

    def objective(self, lam: float) -> float:
        return self.reward - lam * self.total_cost

    def with_reward(self, reward: float) -> Trajectory:
        return replace(self, reward=reward)


def step_record(traj: Trajectory, step: Step) -> dict:
    return {
        "trajectory": traj.id,
        "query": traj.query,
        "turn": step.turn,
        "mode": step.mode,
        "agent": step.agent,
        "active_skills": dict(step.active_skills),
        "utilities": dict(step.utilities),
        "cost": step.cost,
        "success": step.success,
        "error": step.error,
        "trace_digest": step.trace_digest,
        "observation_digest": step.observation_digest,
        "decision": step.decision,
    }


def terminal_record(traj: Trajectory) -> dict:
    return {
        "trajectory": traj.id,
        "query": traj.query,
        "terminal": True,
        "steps": len(traj.steps),
        "reward": traj.reward,
        "total_cost": traj.total_cost,
        "method": traj.method,
        "handbook_version": traj.handbook_version,
    }


def to_records(traj: Trajectory) -> list[dict]:
    return [step_record(traj, s) for s in traj.steps] + [terminal_record(traj)]


def dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, allow_nan=False)


def write_jsonl(trajectories: Iterable[Trajectory], fh: IO[str]) -> None:
    for traj in trajectories:
        for rec in to_records(traj):
            fh.write(dump_line(rec) + "\n")


def save_jsonl(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(trajectories, fh)


_STEP_KEYS = ("turn", "mode", "agent", "active_skills", "utilities", "cost", "trace_digest", "observation_digest")


def _step_from(rec: dict, lineno: int) -> Step:
    missing = [k for k in _STEP_KEYS if k not in rec]
    if missing:
        raise SchemaError(f"step record missing {missing}", path=f"line {lineno}")
    return Step(
        turn=int(rec["turn"]),
        mode=rec["mode"],
        agent=rec["agent"],
        cost=float(rec["cost"]),
        success=bool(rec.get("success", False)),
        trace_digest=rec["trace_digest"],
        observation_digest=rec["observation_digest"],
        active_skills={k: float(v) for k, v in rec["active_skills"].items()},
        utilities={k: float(v) for k, v in rec["utilities"].items()},
        error=rec.get("error"),
        decision=rec.get("decision"),
    )


def iter_records(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(exc.msg, path=f"line {lineno}", offset=exc.pos) from None


def read_jsonl(lines: Iterable[str]) -> list[Trajectory]:
    """Rebuild trajectories from step/terminal records, in file order."""
    pending: dict[str, list[Step]] = {}
    out: list[Trajectory] = []
    for lineno, rec in iter_records(lines):
        tid = rec.get("trajectory")
        if tid is None:
            raise SchemaError("record without trajectory id", path=f"line {lineno}")
        if rec.get("terminal"):
            steps = pending.pop(tid, [])
            if rec.get("steps", len(steps)) != len(steps):
                raise SchemaError(f"trajectory {tid!r}: terminal says {rec['steps']} steps, saw {len(steps)}",
                                  path=f"line {lineno}")
            out.append(
                Trajectory(
                    id=tid,
                    query=rec.get("query", ""),
                    steps=tuple(steps),
                    reward=float(rec["reward"]),
                    method=rec.get("method", ""),
                    handbook_version=rec.get("handbook_version"),
                )
            )
        else:
            pending.setdefault(tid, []).append(_step_from(rec, lineno))
    if pending:
        raise SchemaError(f"trajectories without terminal record: {sorted(pending)[:3]}")
    return out


def load_jsonl(path: str | Path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return read_jsonl(fh)


@dataclass(frozen=True)
class TrajectoryBundle:
    """All trajectories collected for one query by varying agent choices."""

    query: str
    trajectories: tuple[Trajectory, ...]
    query_id: str = ""

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("bundle needs at least one trajectory")
        for t in self.trajectories:
            if t.query != self.query:
                raise ValueError(f"trajectory {t.id!r} is for another query")


def save_bundles(bundles: Iterable[TrajectoryBundle], directory: str | Path, log_name: str = "trajectories.jsonl") -> None:
    """Write ``bundles.jsonl`` (one line per bundle, referencing trajectory ids) and the step log."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bundles = list(bundles)
    with open(directory / log_name, "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl((t for b in bundles for t in b.trajectories), fh)
    with open(directory / "bundles.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for b in bundles:
            rec = {"query": b.query, "query_id": b.query_id, "log": log_name,
                   "trajectories": [t.id for t in b.trajectories]}
            fh.write(dump_line(rec) + "\n")


def load_bundles(directory: str | Path) -> list[TrajectoryBundle]:
    directory = Path(directory)
    logs: dict[str, dict[str, Trajectory]] = {}
    out = []
    with open(directory / "bundles.jsonl", encoding="utf-8") as fh:
        for lineno, rec in iter_records(fh):
            for key in ("query", "log", "trajectories"):
                if key not in rec:
                    raise SchemaError(f"bundle record missing {key!r}", path=f"bundles.jsonl line {lineno}")
            log = rec["log"]
            if log not in logs:
                logs[log] = {t.id: t for t in load_jsonl(directory / log)}
            try:
                trajs = tuple(logs[log][tid] for tid in rec["trajectories"])
            except KeyError as exc:
                raise SchemaError(f"bundle references unknown trajectory {exc.args[0]!r}",
                                  path=f"bundles.jsonl line {lineno}") from None
            out.append(TrajectoryBundle(rec["query"], trajs, rec.get("query_id", "")))
    return out
