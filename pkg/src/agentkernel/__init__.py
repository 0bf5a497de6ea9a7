"""A self-programming agent runtime kernel.

Agents create sub-agents, write their own tools into a hierarchical registry,
run them in snapshot-cached sandboxes, and keep both an execution-history graph
and a long-term knowledge graph. Model calls go through a gateway; the
bundled backend replays scripted transcripts.
"""

from __future__ import annotations

from .config import KernelConfig, config_from_dict, dump_config, load_config
from .errors import KernelError
from .gateway import ModelGateway, ModelRequest, ModelResponse, ScriptedBackend, estimate_tokens
from .kernel import Kernel
from .ltm import HashingEmbedder, LongTermMemory, RetrievalQuery
from .memory_agent import MemoryAgent, MemoryQuery
from .registry import ToolRegistry
from .sandbox import EnvSpec, LocalDriver, SandboxRuntime
from .stm import ShortTermMemory
from .topology import AgentSpec, EnsembleRequest

__all__ = [
    "AgentSpec",
    "EnsembleRequest",
    "EnvSpec",
    "HashingEmbedder",
    "Kernel",
    "KernelConfig",
    "KernelError",
    "LocalDriver",
    "LongTermMemory",
    "MemoryAgent",
    "MemoryQuery",
    "ModelGateway",
    "ModelRequest",
    "ModelResponse",
    "RetrievalQuery",
    "SandboxRuntime",
    "ScriptedBackend",
    "ShortTermMemory",
    "ToolRegistry",
    "config_from_dict",
    "dump_config",
    "estimate_tokens",
    "load_config",
]
