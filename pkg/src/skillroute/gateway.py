"""HTTP adapters so the router, learner and refiner can run against live services.

Four JSON contracts are spoken here (see ``schemas/contracts.json``):
agent calls, and the external mode-policy, proposer, reviewer and judge
roles. Agent-call failures become failed steps with a penalty cost; an
external role that keeps answering out of contract is replaced, for that
call, by the deterministic implementation, and the fallback is logged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Mapping, Sequence

import httpx
import jsonschema

from .competence import normalize_cost
from .errors import (
    ConfigError,
    ExternalRejected,
    GatewayError,
    GatewayTimeout,
    GatewayTransportError,
    MalformedResponse,
    RoutingError,
)
from .handbook import Handbook, Skill
from .learner import BaselineProposer, ContrastiveDiff, Proposer
from .policies import ModePolicy
from .refiner import AutoApprove, RefinementCandidate, Review, Reviewer
from .router import InteractionState, StepResult
from .trajectory import Trajectory

log = logging.getLogger(__name__)

_CONTRACTS = json.loads(resources.files(__package__).joinpath("schemas/contracts.json").read_text("utf-8"))
ROLES = ("mode-policy", "proposer", "reviewer", "judge")


def _validator(name: str) -> jsonschema.Draft202012Validator:
    schema = {"$schema": _CONTRACTS["$schema"], "$defs": _CONTRACTS["$defs"], "$ref": f"#/$defs/{name}"}
    return jsonschema.Draft202012Validator(schema)


_RESPONSE = {
    "agent-call": _validator("agent_call_response"),
    "mode-policy": _validator("mode_policy_response"),
    "proposer": _validator("proposer_response"),
    "reviewer": _validator("reviewer_response"),
    "judge": _validator("judge_response"),
}
AGENT_CALL_REQUEST = _validator("agent_call_request")


def check_response(role: str, body: Any) -> None:
    """Raise :class:`MalformedResponse` unless ``body`` satisfies the role's response schema."""
    err = jsonschema.exceptions.best_match(_RESPONSE[role].iter_errors(body))
    if err is not None:
        path = "$" + "".join(f"[{p!r}]" if isinstance(p, str) else f"[{p}]" for p in err.absolute_path)
        raise MalformedResponse(f"{role} response at {path}: {err.message}")


def _auth_headers(token_env: str | None) -> dict[str, str]:
    if not token_env:
        return {}
    token = os.environ.get(token_env)
    if not token:
        raise ConfigError(f"environment variable {token_env!r} holding the bearer token is not set")
    return {"Authorization": f"Bearer {token}"}


def _post(client: httpx.Client, url: str, payload: Mapping, *, timeout: float, token_env: str | None,
          request_id: str) -> Any:
    headers = {"Idempotency-Key": request_id, **_auth_headers(token_env)}
    try:
        resp = client.post(url, json=payload, headers=headers, timeout=timeout)
    except httpx.TimeoutException as exc:
        raise GatewayTimeout(f"{url}: timed out after {timeout}s") from exc
    except httpx.HTTPError as exc:
        raise GatewayTransportError(f"{url}: {exc}") from exc
    if resp.status_code >= 400:
        raise GatewayTransportError(f"{url}: HTTP {resp.status_code}")
    try:
        return resp.json()
    except ValueError as exc:
        raise MalformedResponse(f"{url}: body is not JSON ({exc})") from exc


def request_id(*parts: object) -> str:
    """Stable id for a logical request, reused across retries."""
    return hashlib.sha1("|".join(map(str, parts)).encode("utf-8")).hexdigest()[:20]


# ---------------------------------------------------------------------------
# Agent calls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentEndpoint:
    agent_id: str
    base_url: str
    token_env: str | None = None  # name of the env var holding the bearer token
    timeout: float = 30.0
    reference_cost: float = 1.0
    modes: tuple[str, ...] = ()  # empty: serves every mode

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError(f"endpoint {self.agent_id}: timeout must be > 0")
        if self.reference_cost <= 0:
            raise ConfigError(f"endpoint {self.agent_id}: reference cost must be > 0")

    def serves(self, mode: str) -> bool:
        return not self.modes or mode in self.modes


@dataclass(frozen=True)
class AgentReply:
    trace: str
    observation: str
    cost: float  # normalized
    success: bool | None
    raw_cost: float


def agent_payload(endpoint: AgentEndpoint, mode: str, state: InteractionState, episode: str = "") -> dict:
    return {
        "request_id": request_id(episode, state.turn, mode, endpoint.agent_id),
        "agent_id": endpoint.agent_id,
        "mode": mode,
        "query": state.query,
        "turn": state.turn,
        "episode": episode,
        "history": [
            {"turn": t, "mode": h.mode, "agent": h.agent, "trace_digest": h.trace_digest,
             "observation_digest": h.observation_digest}
            for t, h in enumerate(state.history)
        ],
    }


def call_agent(
    endpoint: AgentEndpoint,
    mode: str,
    state: InteractionState,
    *,
    episode: str = "",
    client: httpx.Client | None = None,
) -> AgentReply:
    """POST one agent call and parse the reply; cost comes back normalized."""
    payload = agent_payload(endpoint, mode, state, episode)
    own = client is None
    client = client or httpx.Client()
    try:
        body = _post(client, endpoint.base_url, payload, timeout=endpoint.timeout, token_env=endpoint.token_env,
                     request_id=payload["request_id"])
    finally:
        if own:
            client.close()
    check_response("agent-call", body)
    return AgentReply(
        trace=body["trace"],
        observation=body["observation"],
        cost=normalize_cost(float(body["cost"]), endpoint.reference_cost),
        success=body.get("success"),
        raw_cost=float(body["cost"]),
    )


class GatewayEnvironment:
    """Environment over HTTP agent endpoints.

    ``judge`` scores finished trajectories (a callable or an
    :class:`ExternalJudge`). A failed call costs ``penalty_cost`` normalized
    units, defaulting to one reference cost. Replies without a success
    signal count as failed steps.
    """

    def __init__(
        self,
        endpoints: Sequence[AgentEndpoint],
        judge: Callable[[Trajectory], float],
        *,
        client: httpx.Client | None = None,
        penalty_cost: float | None = None,
    ):
        self.endpoints = {e.agent_id: e for e in endpoints}
        self._judge = judge
        self.client = client or httpx.Client()
        self.penalty_cost = penalty_cost
        self.errors: list[tuple[str, str, str]] = []  # (agent, mode, kind)

    def penalty(self, endpoint: AgentEndpoint) -> float:
        if self.penalty_cost is not None:
            return self.penalty_cost
        return normalize_cost(endpoint.reference_cost, endpoint.reference_cost)

    def execute(self, agent_id: str, mode: str, state: InteractionState, stream: str) -> StepResult:
        try:
            endpoint = self.endpoints[agent_id]
        except KeyError:
            raise RoutingError(f"no endpoint configured for agent {agent_id!r}") from None
        if not endpoint.serves(mode):
            raise RoutingError(f"agent {agent_id!r} does not serve mode {mode!r}")
        try:
            reply = call_agent(endpoint, mode, state, episode=stream, client=self.client)
        except GatewayError as exc:
            log.warning("agent %s in %s: %s (%s)", agent_id, mode, exc.kind, exc)
            self.errors.append((agent_id, mode, exc.kind))
            return StepResult("", "", False, self.penalty(endpoint), exc.kind)
        if reply.success is None:
            log.debug("agent %s returned no success signal; step counted as failed", agent_id)
        return StepResult(reply.trace, reply.observation, bool(reply.success), reply.cost)

    def judge(self, trajectory: Trajectory) -> float:
        return float(self._judge(trajectory))


# ---------------------------------------------------------------------------
# External roles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServiceEndpoint:
    url: str
    token_env: str | None = None
    timeout: float = 30.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("service timeout must be > 0")


def external_policy(
    endpoint: ServiceEndpoint,
    role: str,
    payload: Mapping,
    *,
    client: httpx.Client | None = None,
    retries: int = 2,
    check: Callable[[Any], None] | None = None,
) -> Any:
    """Ask an external service to play ``role``; return its validated response.

    Transport failures and out-of-contract replies are retried up to
    ``retries`` extra times under the same request id, then
    :class:`ExternalRejected` is raised. ``check`` adds role-specific
    validation and should raise :class:`MalformedResponse`.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    body = {"role": role, **payload}
    rid = request_id(role, json.dumps(body, sort_keys=True, default=str))
    own = client is None
    client = client or httpx.Client()
    last: GatewayError | None = None
    try:
        for _ in range(retries + 1):
            try:
                resp = _post(client, endpoint.url, body, timeout=endpoint.timeout, token_env=endpoint.token_env,
                             request_id=rid)
                check_response(role, resp)
                if check is not None:
                    check(resp)
                return resp
            except GatewayError as exc:
                last = exc
                log.info("%s service: attempt failed (%s): %s", role, exc.kind, exc)
    finally:
        if own:
            client.close()
    raise ExternalRejected(f"{role} service failed {retries + 1} attempt(s); last error: {last}")


def skill_to_json(skill: Skill) -> dict:
    return {"id": skill.id, "mode": skill.mode, "description": skill.description,
            "indicators": list(skill.indicators), "parent": skill.parent}


def skill_from_json(d: Mapping) -> Skill:
    return Skill(d["id"], d["mode"], d.get("description", ""), tuple(d["indicators"]), d.get("parent"))


@dataclass
class _External:
    endpoint: ServiceEndpoint
    client: httpx.Client | None = None
    retries: int = 2
    fallbacks: list[str] = field(default_factory=list)

    def _ask(self, role: str, payload: Mapping, check=None) -> Any:
        return external_policy(self.endpoint, role, payload, client=self.client, retries=self.retries, check=check)

    def _fell_back(self, role: str, exc: Exception) -> None:
        log.warning("%s: falling back to the deterministic implementation: %s", role, exc)
        self.fallbacks.append(f"{role}: {exc}")


@dataclass
class ExternalModePolicy(_External):
    fallback: ModePolicy | None = None
    name: str = "external"

    def choose(self, state: InteractionState, insights: Mapping[str, Sequence[str]], modes: Sequence[str]) -> str:
        payload = {
            "query": state.query,
            "turn": state.turn,
            "history": [{"mode": h.mode, "agent": h.agent, "trace_digest": h.trace_digest,
                         "observation_digest": h.observation_digest} for h in state.history],
            "modes": list(modes),
            "insights": {m: list(v) for m, v in insights.items()},
        }

        def known(resp):
            if resp["mode"] not in modes:
                raise MalformedResponse(f"mode {resp['mode']!r} is not one of {list(modes)}")

        try:
            return self._ask("mode-policy", payload, known)["mode"]
        except ExternalRejected as exc:
            if self.fallback is None:
                raise
            self._fell_back("mode-policy", exc)
            return self.fallback.choose(state, insights, modes)


@dataclass
class ExternalProposer(_External):
    fallback: Proposer = field(default_factory=BaselineProposer)
    name: str = "external"

    def propose(self, cluster: Sequence[ContrastiveDiff]) -> Skill:
        mode = cluster[0].mode

        def same_mode(resp):
            if resp["mode"] != mode:
                raise MalformedResponse(f"proposed skill is for mode {resp['mode']!r}, cluster is {mode!r}")

        try:
            resp = self._ask("proposer", {"mode": mode, "diffs": [d.to_dict() for d in cluster]}, same_mode)
        except ExternalRejected as exc:
            self._fell_back("proposer", exc)
            return self.fallback.propose(cluster)
        return skill_from_json({**resp, "parent": None})

    def phrase_insight(self, pattern: Mapping) -> str:
        return self.fallback.phrase_insight(pattern)


@dataclass
class ExternalReviewer(_External):
    fallback: Reviewer = field(default_factory=AutoApprove)
    name: str = "external"

    def review(self, candidate: RefinementCandidate, handbook: Handbook) -> Review:
        payload = {
            "candidate": json.loads(json.dumps(candidate.to_dict(), default=list)),
            "skills": [skill_to_json(handbook.skill(t)) for t in candidate.targets],
        }
        try:
            resp = self._ask("reviewer", payload)
        except ExternalRejected as exc:
            self._fell_back("reviewer", exc)
            return self.fallback.review(candidate, handbook)
        children = resp.get("children")
        return Review(
            approved=resp["approved"],
            skill=skill_from_json(resp["skill"]) if "skill" in resp else None,
            children=tuple(skill_from_json(c) for c in children) if children else None,
            note=resp.get("note", ""),
        )


@dataclass
class ExternalJudge(_External):
    fallback: Callable[[Trajectory], float] | None = None

    def __call__(self, trajectory: Trajectory) -> float:
        payload = {
            "query": trajectory.query,
            "steps": [{"turn": s.turn, "mode": s.mode, "agent": s.agent, "trace_digest": s.trace_digest,
                       "observation_digest": s.observation_digest, "success": s.success} for s in trajectory.steps],
        }
        try:
            return float(self._ask("judge", payload)["reward"])
        except ExternalRejected as exc:
            if self.fallback is None:
                raise
            self._fell_back("judge", exc)
            return float(self.fallback(trajectory))
