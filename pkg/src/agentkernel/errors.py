"""Exception hierarchy shared by every kernel subsystem.

Each error carries a stable ``code`` so that tool dispatch can turn it into a
structured response for the model instead of aborting the run.
"""

from __future__ import annotations

from typing import Any


class KernelError(Exception):
    """Base class for domain errors raised by the kernel."""

    code = "kernel_error"

    def to_response(self) -> dict[str, Any]:
        return {"status": "failed", "error": str(self), "code": self.code}


# model gateway
class UnknownBackend(KernelError):
    code = "unknown_backend"


class DuplicateBackend(KernelError):
    code = "duplicate_backend"


class TranscriptExhausted(KernelError):
    code = "transcript_exhausted"


class PredicateMismatch(KernelError):
    code = "predicate_mismatch"


class ConcurrentConsumption(KernelError):
    """A single-consumer backend was driven by two runs at once."""

    code = "concurrent_consumption"


# agent topology
class DuplicateAgentName(KernelError):
    code = "duplicate_agent_name"


class UnresolvableTool(KernelError):
    code = "unresolvable_tool"


class InvalidModel(KernelError):
    code = "invalid_model"


class AgentNotFound(KernelError):
    code = "agent_not_found"

    def __init__(self, agent_name: str) -> None:
        super().__init__(f"Agent '{agent_name}' not found.")
        self.agent_name = agent_name

    def to_response(self) -> dict[str, Any]:
        return {
            "status": "failed",
            "error": str(self),
            "summary": (
                "No suitable agents available. Create a dynamic sub-agent "
                "and invoke it via the agent ensemble."
            ),
        }


class SubAgentError(KernelError):
    code = "sub_agent_error"


class MemberFailed(KernelError):
    code = "member_failed"


class BoardClosed(KernelError):
    code = "board_closed"


class UnknownBoard(KernelError):
    code = "unknown_board"


class NotBoardMember(KernelError):
    code = "not_board_member"


class StepLimitExceeded(KernelError):
    code = "step_limit_exceeded"


class UnknownTool(KernelError):
    code = "unknown_tool"


# tool registry
class MalformedRegistry(KernelError):
    code = "malformed_registry"


class UnknownCategory(KernelError):
    code = "unknown_category"


class InvalidManifest(KernelError):
    """Manifest failed validation; ``diagnostics`` lists (field, message) pairs."""

    code = "invalid_manifest"

    def __init__(self, diagnostics: list[tuple[str, str]]) -> None:
        self.diagnostics = list(diagnostics)
        detail = "; ".join(f"{field}: {msg}" for field, msg in self.diagnostics)
        super().__init__(f"invalid manifest ({detail})")

    def to_response(self) -> dict[str, Any]:
        resp = super().to_response()
        resp["diagnostics"] = [{"field": f, "message": m} for f, m in self.diagnostics]
        return resp


class DuplicateTool(KernelError):
    code = "duplicate_tool"


class OutOfScope(KernelError):
    code = "out_of_scope"


class ArgValidation(KernelError):
    code = "arg_validation"

    def __init__(self, diagnostics: list[tuple[str, str]]) -> None:
        self.diagnostics = list(diagnostics)
        detail = "; ".join(f"{name}: {msg}" for name, msg in self.diagnostics)
        super().__init__(f"argument validation failed ({detail})")

    def to_response(self) -> dict[str, Any]:
        resp = super().to_response()
        resp["diagnostics"] = [{"param": p, "message": m} for p, m in self.diagnostics]
        return resp


# sandbox runtime
class DriverUnavailable(KernelError):
    code = "driver_unavailable"


class SetupFailed(KernelError):
    code = "setup_failed"

    def __init__(self, command: str, exit_status: int, output: str) -> None:
        super().__init__(f"setup command {command!r} exited {exit_status}: {output.strip()[:500]}")
        self.command = command
        self.exit_status = exit_status
        self.output = output


class SandboxDead(KernelError):
    code = "sandbox_dead"


class UnknownHandle(KernelError):
    code = "unknown_handle"


class NotFinished(KernelError):
    code = "not_finished"


class Busy(KernelError):
    code = "busy"


class UnknownEnvironment(KernelError):
    code = "unknown_environment"


# short-term memory
class InvalidParent(KernelError):
    code = "invalid_parent"


class RunClosed(KernelError):
    code = "run_closed"


class NothingToSummarize(KernelError):
    code = "nothing_to_summarize"


class UnknownRun(KernelError):
    code = "unknown_run"


class UnknownEvent(KernelError):
    code = "unknown_event"


class NoRawAttachment(KernelError):
    code = "no_raw_attachment"


class MalformedPattern(KernelError):
    code = "malformed_pattern"


# long-term memory
class EmptyLabel(KernelError):
    code = "empty_label"


class ProviderFailure(KernelError):
    code = "provider_failure"


class UnknownNode(KernelError):
    code = "unknown_node"


class DuplicateEdge(KernelError):
    code = "duplicate_edge"


class UnknownNodeType(KernelError):
    code = "unknown_node_type"


# memory agent
class RoutingFailure(KernelError):
    code = "routing_failure"


# config / cli
class ParseError(KernelError):
    code = "parse_error"


class InvalidConfig(KernelError):
    code = "invalid_config"

    def __init__(self, diagnostics: list[tuple[str, str]]) -> None:
        self.diagnostics = list(diagnostics)
        detail = "; ".join(f"{field}: {msg}" for field, msg in self.diagnostics)
        super().__init__(f"invalid config ({detail})")
