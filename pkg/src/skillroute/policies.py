"""Pluggable mode policies.

A mode policy looks at the interaction state and the per-mode routing
insights and names the operational mode to run next. The rule and scripted
policies are deterministic; the external one lives in :mod:`skillroute.gateway`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Protocol, Sequence

from .text import tokenize

if TYPE_CHECKING:
    from .router import InteractionState


class ModePolicy(Protocol):
    name: str

    def choose(
        self,
        state: InteractionState,
        insights: Mapping[str, Sequence[str]],
        modes: Sequence[str],
    ) -> str: ...


@dataclass(frozen=True)
class RuleModePolicy:
    """Tag-driven policy.

    ``rules`` is an ordered table of ``(tag, mode)``. Every tag present in the
    query marks its mode as required; the policy runs required modes in table
    order, each once, then hands over to ``terminal``.
    """

    rules: tuple[tuple[str, str], ...]
    terminal: str = "answer"
    name: str = "rule"

    @classmethod
    def for_modes(cls, modes: Sequence[str], terminal: str = "answer", name: str = "rule") -> RuleModePolicy:
        return cls(tuple((f"needs:{m}", m) for m in modes if m != terminal), terminal, name)

    def required_modes(self, query: str) -> list[str]:
        tokens = set(tokenize(query))
        out: list[str] = []
        for tag, mode in self.rules:
            if tag.lower() in tokens and mode not in out:
                out.append(mode)
        return out

    def choose(self, state, insights, modes):
        done = {h.mode for h in state.history}
        for mode in self.required_modes(state.query):
            if mode not in done and mode in modes:
                return mode
        return self.terminal


@dataclass(frozen=True)
class ScriptedModePolicy:
    """Fixed schedule: turn ``t`` runs ``schedule[t]``; past the end, the terminal mode."""

    schedule: tuple[str, ...]
    terminal: str = "answer"
    name: str = "scripted"

    def choose(self, state, insights, modes):
        if state.turn < len(self.schedule):
            return self.schedule[state.turn]
        return self.terminal
