"""Kernel configuration: one JSON document, defaults filled in, validated."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import InvalidConfig, ParseError

BACKEND_KINDS = ("scripted",)


@dataclass
class KernelConfig:
    registry_root: str
    workspace: str
    ltm_path: str | None = None
    state_dir: str | None = None
    summarization_threshold_tokens: int = 24_000
    keep_recent_events: int = 8
    truncation_limit_bytes: int = 65_536
    dedup_threshold: float = 0.9
    max_steps: int = 100
    default_backend: str | None = None
    backends: list[dict[str, Any]] = field(default_factory=list)

    def validate(self) -> KernelConfig:
        diags: list[tuple[str, str]] = []
        for name in ("summarization_threshold_tokens", "keep_recent_events", "truncation_limit_bytes", "max_steps"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                diags.append((name, "must be a positive integer"))
        t = self.dedup_threshold
        if isinstance(t, bool) or not isinstance(t, (int, float)) or not 0 < t <= 1:
            diags.append(("dedup_threshold", "must be a number in (0, 1]"))
        for name in ("registry_root", "workspace"):
            value = getattr(self, name)
            if not isinstance(value, str) or not Path(value).is_dir():
                diags.append((name, f"directory {value!r} does not exist"))
        for name in ("ltm_path", "state_dir", "default_backend"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                diags.append((name, "must be text or null"))
        if not isinstance(self.backends, list):
            diags.append(("backends", "must be a list"))
        else:
            seen = set()
            for i, decl in enumerate(self.backends):
                where = f"backends[{i}]"
                if not isinstance(decl, dict):
                    diags.append((where, "must be an object"))
                    continue
                bid = decl.get("id")
                if not isinstance(bid, str) or not bid or bid == "inherit":
                    diags.append((f"{where}.id", "must be a non-reserved identifier"))
                elif bid in seen:
                    diags.append((f"{where}.id", f"duplicate backend id {bid!r}"))
                seen.add(bid)
                if decl.get("kind") not in BACKEND_KINDS:
                    diags.append((f"{where}.kind", f"must be one of {', '.join(BACKEND_KINDS)}"))
                transcript = decl.get("transcript")
                if not isinstance(transcript, str) or not Path(transcript).is_file():
                    diags.append((f"{where}.transcript", f"file {transcript!r} does not exist"))
        if diags:
            raise InvalidConfig(diags)
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def config_from_dict(doc: Any, overrides: dict[str, Any] | None = None) -> KernelConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig([("config", "must be a JSON object")])
    merged = dict(doc)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(KernelConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise InvalidConfig([(k, "unknown field") for k in unknown])
    missing = [k for k in ("registry_root", "workspace") if k not in merged]
    if missing:
        raise InvalidConfig([(k, "required") for k in missing])
    return KernelConfig(**merged).validate()


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> KernelConfig:
    """Read a JSON config file; ``overrides`` (e.g. CLI flags) win over file values."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, overrides)


def dump_config(config: KernelConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
