"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SkillRouteError(Exception):
    """Base class for all package errors."""


class UnknownModeError(SkillRouteError, KeyError):
    def __init__(self, mode: str):
        super().__init__(mode)
        self.mode = mode

    def __str__(self) -> str:
        return f"unknown mode {self.mode!r}"


class UnknownSkillError(SkillRouteError, KeyError):
    def __init__(self, skill_id: str):
        super().__init__(skill_id)
        self.skill_id = skill_id

    def __str__(self) -> str:
        return f"unknown skill {self.skill_id!r}"


class SchemaError(SkillRouteError, ValueError):
    """Input did not conform to a documented JSON schema.

    ``path`` is the JSON path of the offending element (``$`` for the root);
    ``offset`` is the byte offset when the failure happened while decoding.
    """

    def __init__(self, message: str, path: str = "$", offset: int | None = None):
        super().__init__(message)
        self.path = path
        self.offset = offset

    def __str__(self) -> str:
        loc = self.path if self.offset is None else f"{self.path} (byte {self.offset})"
        return f"{self.args[0]} at {loc}"


class InvalidHandbookError(SkillRouteError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{v.path}: {v.message}" for v in self.violations[:5])
        super().__init__(f"handbook has {len(self.violations)} violation(s): {lines}")


class ProfileMismatchError(SkillRouteError, ValueError):
    pass


class NegativeCostError(SkillRouteError, ValueError):
    pass


class RoutingError(SkillRouteError, RuntimeError):
    pass


class IdCollisionError(SkillRouteError, ValueError):
    pass


class RefinementConflictError(SkillRouteError, ValueError):
    pass


class WorldSpecError(SkillRouteError, ValueError):
    pass


class EvaluationError(SkillRouteError, RuntimeError):
    pass


class GatewayError(SkillRouteError):
    """Base for failures talking to an external agent or policy service."""

    kind = "gateway"


class GatewayTimeout(GatewayError):
    kind = "timeout"


class GatewayTransportError(GatewayError):
    kind = "transport"


class MalformedResponse(GatewayError):
    kind = "malformed_response"


class ConfigError(SkillRouteError, ValueError):
    """Invalid or missing configuration (CLI exit code 2)."""


class ExternalRejected(SkillRouteError):
    """An external policy service kept returning invalid responses."""
