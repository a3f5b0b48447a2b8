"""Skill handbook data model: modes, skill registry, agent profiles and the
mode -> skill index, plus validation and deterministic JSON persistence.

Handbooks are immutable. Every mutating pipeline stage returns a new value
with ``version`` bumped by one.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import IO, Iterable, Mapping, NamedTuple, Union

import jsonschema

from .errors import (
    InvalidHandbookError,
    SchemaError,
    UnknownModeError,
    UnknownSkillError,
)


class BetaCounts(NamedTuple):
    alpha: float
    beta: float


# Uniform Beta(1, 1): unobserved skills score 0.5.
PRIOR = BetaCounts(1.0, 1.0)


@dataclass(frozen=True)
class Skill:
    id: str
    mode: str
    description: str = ""
    indicators: tuple[str, ...] = ()
    parent: str | None = None

    @property
    def text(self) -> str:
        """Text matched against interaction state during retrieval."""
        return " ".join([self.description, *self.indicators])


@dataclass(frozen=True)
class ModeMetadata:
    mode: str
    insights: tuple[str, ...] = ()
    allowed_agents: tuple[str, ...] = ()


@dataclass(frozen=True)
class CostStats:
    """Running mean of per-call cost in normalized cost units."""

    mean: float = 0.0
    count: int = 0


@dataclass(frozen=True)
class AgentProfile:
    agent_id: str
    mode: str
    counters: Mapping[str, BetaCounts] = field(default_factory=dict)
    cost: CostStats = CostStats()
    routing_signals: tuple[str, ...] = ()
    summary: str = ""

    def counts(self, skill_id: str, prior: BetaCounts = PRIOR) -> BetaCounts:
        return self.counters.get(skill_id, prior)


@dataclass(frozen=True)
class Handbook:
    modes: tuple[ModeMetadata, ...] = ()
    skills: tuple[Skill, ...] = ()
    profiles: tuple[AgentProfile, ...] = ()
    edges: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    version: int = 1
    provenance: str = ""

    @cached_property
    def _mode_index(self) -> dict[str, ModeMetadata]:
        return {m.mode: m for m in self.modes}

    @cached_property
    def _skill_index(self) -> dict[str, Skill]:
        return {s.id: s for s in self.skills}

    @cached_property
    def _profile_index(self) -> dict[tuple[str, str], AgentProfile]:
        return {(p.agent_id, p.mode): p for p in self.profiles}

    @property
    def mode_ids(self) -> tuple[str, ...]:
        return tuple(m.mode for m in self.modes)

    def has_mode(self, mode: str) -> bool:
        return mode in self._mode_index

    def mode(self, mode: str) -> ModeMetadata:
        try:
            return self._mode_index[mode]
        except KeyError:
            raise UnknownModeError(mode) from None

    def skill(self, skill_id: str) -> Skill:
        try:
            return self._skill_index[skill_id]
        except KeyError:
            raise UnknownSkillError(skill_id) from None

    def has_skill(self, skill_id: str) -> bool:
        return skill_id in self._skill_index

    def profile(self, agent_id: str, mode: str) -> AgentProfile | None:
        return self._profile_index.get((agent_id, mode))

    def skill_ids_for(self, mode: str) -> tuple[str, ...]:
        """Skill ids indexed under ``mode``, in edge order."""
        self.mode(mode)
        return tuple(self.edges.get(mode, ()))

    def children(self, skill_id: str) -> tuple[Skill, ...]:
        return tuple(s for s in self.skills if s.parent == skill_id)

    def agents_for(self, mode: str) -> tuple[str, ...]:
        return self.mode(mode).allowed_agents

    def bumped(self, provenance: str | None = None, **changes) -> Handbook:
        """Copy with ``changes`` applied and the version incremented once."""
        if provenance is not None:
            changes["provenance"] = provenance
        return replace(self, version=self.version + 1, **changes)


def skeleton(modes: Mapping[str, Iterable[str]], provenance: str = "skeleton") -> Handbook:
    """Handbook with modes and empty per-agent profiles but no skills."""
    mode_meta = tuple(ModeMetadata(mode=m, allowed_agents=tuple(agents)) for m, agents in modes.items())
    profiles = tuple(AgentProfile(agent_id=a, mode=m.mode) for m in mode_meta for a in m.allowed_agents)
    return Handbook(
        modes=mode_meta,
        profiles=profiles,
        edges={m.mode: () for m in mode_meta},
        version=1,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str


def validate(handbook: Handbook) -> list[Violation]:
    """Return one record per invariant breach; an empty list means valid."""
    out: list[Violation] = []

    def bad(path: str, message: str) -> None:
        out.append(Violation(path, message))

    if not isinstance(handbook.version, int) or handbook.version < 0:
        bad("version", f"version must be a nonnegative integer, got {handbook.version!r}")

    mode_ids: set[str] = set()
    for i, m in enumerate(handbook.modes):
        if m.mode in mode_ids:
            bad(f"modes[{i}].mode", f"duplicate mode {m.mode!r}")
        mode_ids.add(m.mode)
        if len(set(m.allowed_agents)) != len(m.allowed_agents):
            bad(f"modes[{i}].allowed_agents", "duplicate agent ids")

    skills: dict[str, Skill] = {}
    for i, s in enumerate(handbook.skills):
        if s.id in skills:
            bad(f"skills[{i}].id", f"duplicate skill id {s.id!r}")
        skills[s.id] = s
        if s.mode not in mode_ids:
            bad(f"skills[{i}].mode", f"skill {s.id!r} references unknown mode {s.mode!r}")

    for i, s in enumerate(handbook.skills):
        if s.parent is None:
            continue
        parent = skills.get(s.parent)
        path = f"skills[{i}].parent"
        if parent is None:
            bad(path, f"parent {s.parent!r} of skill {s.id!r} does not exist")
        elif s.parent == s.id:
            bad(path, f"skill {s.id!r} is its own parent")
        elif parent.mode != s.mode:
            bad(path, f"parent {s.parent!r} is in mode {parent.mode!r}, not {s.mode!r}")
        elif parent.parent is not None:
            bad(path, f"hierarchy deeper than two levels at {s.id!r} -> {s.parent!r} -> {parent.parent!r}")

    owner: dict[str, str] = {}
    for mode, ids in handbook.edges.items():
        if mode not in mode_ids:
            bad(f"edges.{mode}", f"edge set for unknown mode {mode!r}")
        for j, sid in enumerate(ids):
            path = f"edges.{mode}[{j}]"
            if sid not in skills:
                bad(path, f"edge references missing skill {sid!r}")
                continue
            if sid in owner:
                bad(path, f"skill {sid!r} already indexed under mode {owner[sid]!r}")
                continue
            owner[sid] = mode
            if skills[sid].mode != mode:
                bad(path, f"skill {sid!r} belongs to mode {skills[sid].mode!r}")
    for i, s in enumerate(handbook.skills):
        if s.id not in owner:
            bad(f"skills[{i}]", f"skill {s.id!r} is not reachable from any mode edge set")

    seen_profiles: set[tuple[str, str]] = set()
    for i, p in enumerate(handbook.profiles):
        base = f"profiles[{i}]"
        key = (p.agent_id, p.mode)
        if key in seen_profiles:
            bad(base, f"duplicate profile for agent {p.agent_id!r} in mode {p.mode!r}")
        seen_profiles.add(key)
        if p.mode not in mode_ids:
            bad(f"{base}.mode", f"profile references unknown mode {p.mode!r}")
        for sid, (a, b) in p.counters.items():
            cpath = f"{base}.counters.{sid}"
            if sid not in skills:
                bad(cpath, f"counter for missing skill {sid!r}")
            elif skills[sid].mode != p.mode:
                bad(cpath, f"counter for skill {sid!r} of another mode")
            if not (math.isfinite(a) and a > 0):
                bad(f"{cpath}.alpha", f"alpha must be positive, got {a!r}")
            if not (math.isfinite(b) and b > 0):
                bad(f"{cpath}.beta", f"beta must be positive, got {b!r}")
        mean, count = p.cost.mean, p.cost.count
        if not (math.isfinite(mean) and mean >= 0):
            bad(f"{base}.cost.mean", f"cost mean must be >= 0, got {mean!r}")
        if not isinstance(count, int) or count < 0:
            bad(f"{base}.cost.count", f"call count must be a nonnegative integer, got {count!r}")
        elif count == 0 and mean != 0:
            bad(f"{base}.cost.mean", "nonzero cost mean with zero calls")
    return out


def mode_skills(handbook: Handbook, mode: str) -> frozenset[Skill]:
    """Skills indexed under ``mode``."""
    return frozenset(handbook.skill(sid) for sid in handbook.skill_ids_for(mode))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_SCHEMA = json.loads(resources.files(__package__).joinpath("schemas/handbook.schema.json").read_text("utf-8"))
_VALIDATOR = jsonschema.Draft202012Validator(_SCHEMA)


def to_dict(handbook: Handbook) -> dict:
    return {
        "version": handbook.version,
        "provenance": handbook.provenance,
        "modes": [
            {"mode": m.mode, "insights": list(m.insights), "allowed_agents": list(m.allowed_agents)}
            for m in handbook.modes
        ],
        "skills": [
            {
                "id": s.id,
                "mode": s.mode,
                "description": s.description,
                "indicators": list(s.indicators),
                "parent": s.parent,
            }
            for s in handbook.skills
        ],
        "profiles": [
            {
                "agent_id": p.agent_id,
                "mode": p.mode,
                "counters": {sid: {"alpha": float(c.alpha), "beta": float(c.beta)} for sid, c in p.counters.items()},
                "cost": {"mean": float(p.cost.mean), "count": p.cost.count},
                "routing_signals": list(p.routing_signals),
                "summary": p.summary,
            }
            for p in handbook.profiles
        ],
        "edges": {mode: list(ids) for mode, ids in handbook.edges.items()},
    }


def from_dict(data: object) -> Handbook:
    errors = sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise SchemaError(err.message, path=path)
    assert isinstance(data, dict)
    return Handbook(
        version=data["version"],
        provenance=data["provenance"],
        modes=tuple(
            ModeMetadata(mode=m["mode"], insights=tuple(m["insights"]), allowed_agents=tuple(m["allowed_agents"]))
            for m in data["modes"]
        ),
        skills=tuple(
            Skill(
                id=s["id"],
                mode=s["mode"],
                description=s["description"],
                indicators=tuple(s["indicators"]),
                parent=s["parent"],
            )
            for s in data["skills"]
        ),
        profiles=tuple(
            AgentProfile(
                agent_id=p["agent_id"],
                mode=p["mode"],
                counters={sid: BetaCounts(float(c["alpha"]), float(c["beta"])) for sid, c in p["counters"].items()},
                cost=CostStats(mean=float(p["cost"]["mean"]), count=p["cost"]["count"]),
                routing_signals=tuple(p["routing_signals"]),
                summary=p["summary"],
            )
            for p in data["profiles"]
        ),
        edges={mode: tuple(ids) for mode, ids in data["edges"].items()},
    )


def dumps(handbook: Handbook) -> str:
    """Canonical JSON text; equal handbooks give identical strings."""
    violations = validate(handbook)
    if violations:
        raise InvalidHandbookError(violations)
    return json.dumps(to_dict(handbook), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def loads(text: str | bytes) -> Handbook:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"invalid UTF-8: {exc.reason}", offset=exc.start) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, offset=exc.pos) from None
    return from_dict(data)


PathOrFile = Union[str, "os.PathLike[str]", IO[str], IO[bytes]]


def save(handbook: Handbook, destination: PathOrFile) -> None:
    text = dumps(handbook)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            fh.write(text.encode("utf-8"))
    elif isinstance(destination, io.TextIOBase):
        destination.write(text)
    else:
        destination.write(text.encode("utf-8"))  # type: ignore[arg-type]


def load(source: PathOrFile) -> Handbook:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return loads(fh.read())
    return loads(source.read())
