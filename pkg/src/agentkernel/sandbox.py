"""Sandboxed execution environments with snapshot caching and async handles.

The runtime talks to a :class:`Driver`. :class:`LocalDriver` gives every
sandbox a private host directory and is what the test-suite uses; it is a
hermetic stand-in, not a security boundary. :class:`DockerDriver` maps the
same contract onto the ``docker`` CLI.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets
import shutil
import signal
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol

from .errors import (
    Busy,
    DriverUnavailable,
    NotFinished,
    SandboxDead,
    SetupFailed,
    UnknownHandle,
)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    base: str = "local"
    setup_commands: tuple[str, ...] = ()
    workspace_mount: str = "/workspace"

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> EnvSpec:
        return cls(
            env_id=str(doc["env_id"]),
            base=str(doc.get("base", "local")),
            setup_commands=tuple(str(c) for c in doc.get("setup_commands", [])),
            workspace_mount=str(doc.get("workspace_mount", "/workspace")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "env_id": self.env_id,
            "base": self.base,
            "setup_commands": list(self.setup_commands),
            "workspace_mount": self.workspace_mount,
        }


@dataclass(frozen=True)
class SnapshotKey:
    env_id: str
    digest: str

    def __str__(self) -> str:
        return f"{self.env_id}@{self.digest}"

    @classmethod
    def parse(cls, text: str) -> SnapshotKey:
        env_id, _, digest = text.rpartition("@")
        if not env_id or not digest:
            raise ValueError(f"not a snapshot key: {text!r}")
        return cls(env_id, digest)


def history_digest(spec: EnvSpec, history: list[str] | tuple[str, ...]) -> SnapshotKey:
    blob = json.dumps([spec.env_id, spec.base, list(history)]).encode("utf-8")
    return SnapshotKey(spec.env_id, hashlib.sha256(blob).hexdigest())


@dataclass(frozen=True)
class ExecResult:
    exit_status: int
    stdout: bytes
    stderr: bytes

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_status": self.exit_status,
            "stdout": self.stdout.decode("utf-8", errors="replace"),
            "stderr": self.stderr.decode("utf-8", errors="replace"),
        }


class HandleState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    TERMINATED = "terminated"

    @property
    def terminal(self) -> bool:
        return self in (HandleState.DONE, HandleState.FAILED, HandleState.TERMINATED)


_TRANSITIONS = {
    HandleState.PENDING: {HandleState.RUNNING, HandleState.TERMINATED, HandleState.FAILED},
    HandleState.RUNNING: {HandleState.DONE, HandleState.FAILED, HandleState.TERMINATED},
}


@dataclass
class InvocationHandle:
    handle_id: str
    sandbox_id: str
    command: str
    state: HandleState = HandleState.PENDING
    started_at: float = field(default_factory=time.monotonic)
    finished_at: float | None = None
    result: ExecResult | None = None
    _kill: Callable[[], None] | None = field(default=None, repr=False)
    _done: threading.Event = field(default_factory=threading.Event, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"handle_id": self.handle_id, "state": self.state.value, "command": self.command}


class Driver(Protocol):
    def available(self) -> bool: ...

    def create(self, sandbox_id: str, spec: EnvSpec, workspace: Path) -> None: ...

    def restore(self, sandbox_id: str, spec: EnvSpec, key: SnapshotKey, workspace: Path) -> None: ...

    def run(
        self, sandbox_id: str, command: str, on_start: Callable[[Callable[[], None]], None]
    ) -> ExecResult: ...

    def snapshot(self, sandbox_id: str, key: SnapshotKey) -> None: ...

    def has_snapshot(self, key: SnapshotKey) -> bool: ...

    def destroy(self, sandbox_id: str) -> None: ...


class LocalDriver:
    """One host directory per sandbox; snapshots are directory copies.

    The shared workspace appears inside each sandbox as a symlink at
    ``workspace_mount`` (taken relative to the sandbox root).
    """

    def __init__(self, state_root: str | Path) -> None:
        self.state_root = Path(state_root)
        (self.state_root / "sandboxes").mkdir(parents=True, exist_ok=True)
        (self.state_root / "snapshots").mkdir(parents=True, exist_ok=True)
        self._mounts: dict[str, str] = {}
        self._lock = threading.Lock()
        # (sandbox_id, command) for every command actually executed
        self.executed: list[tuple[str, str]] = []

    def available(self) -> bool:
        return shutil.which("bash") is not None

    def root(self, sandbox_id: str) -> Path:
        return self.state_root / "sandboxes" / sandbox_id

    def _snapshot_dir(self, key: SnapshotKey) -> Path:
        return self.state_root / "snapshots" / key.digest

    def _mount(self, sandbox_id: str, spec: EnvSpec, workspace: Path) -> None:
        rel = spec.workspace_mount.strip("/") or "workspace"
        link = self.root(sandbox_id) / rel
        link.parent.mkdir(parents=True, exist_ok=True)
        if link.is_symlink() or link.exists():
            link.unlink()
        link.symlink_to(workspace.resolve(), target_is_directory=True)
        self._mounts[sandbox_id] = rel

    def create(self, sandbox_id: str, spec: EnvSpec, workspace: Path) -> None:
        self.root(sandbox_id).mkdir(parents=True)
        self._mount(sandbox_id, spec, workspace)

    def restore(self, sandbox_id: str, spec: EnvSpec, key: SnapshotKey, workspace: Path) -> None:
        shutil.copytree(self._snapshot_dir(key), self.root(sandbox_id), symlinks=True)
        self._mount(sandbox_id, spec, workspace)

    def run(
        self, sandbox_id: str, command: str, on_start: Callable[[Callable[[], None]], None]
    ) -> ExecResult:
        root = self.root(sandbox_id)
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(root),
            "WORKSPACE": str(root / self._mounts.get(sandbox_id, "workspace")),
            "LANG": "C.UTF-8",
        }
        with self._lock:
            self.executed.append((sandbox_id, command))
        proc = subprocess.Popen(
            ["bash", "-c", command],
            cwd=root,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )

        def kill() -> None:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass

        on_start(kill)
        out, err = proc.communicate()
        return ExecResult(proc.returncode, out, err)

    def snapshot(self, sandbox_id: str, key: SnapshotKey) -> None:
        target = self._snapshot_dir(key)
        mount = self._mounts.get(sandbox_id)
        tmp = target.with_name(target.name + f".tmp-{secrets.token_hex(4)}")

        def skip(src: str, names: list[str]) -> list[str]:
            if Path(src) == self.root(sandbox_id) and mount:
                return [n for n in names if n == mount.split("/")[0]]
            return []

        shutil.copytree(self.root(sandbox_id), tmp, symlinks=True, ignore=skip)
        with self._lock:
            if target.exists():
                shutil.rmtree(target)
            tmp.rename(target)

    def has_snapshot(self, key: SnapshotKey) -> bool:
        return self._snapshot_dir(key).is_dir()

    def destroy(self, sandbox_id: str) -> None:
        shutil.rmtree(self.root(sandbox_id), ignore_errors=True)
        self._mounts.pop(sandbox_id, None)


class DockerDriver:
    """Container-backed driver using the ``docker`` CLI; snapshots are committed images."""

    def __init__(self, docker: str = "docker", image_prefix: str = "agentkernel-snap") -> None:
        self.docker = docker
        self.image_prefix = image_prefix
        self._containers: dict[str, str] = {}

    def available(self) -> bool:
        if shutil.which(self.docker) is None:
            return False
        probe = subprocess.run([self.docker, "info"], capture_output=True)
        return probe.returncode == 0

    def _image(self, key: SnapshotKey) -> str:
        return f"{self.image_prefix}:{key.digest[:32]}"

    def _start(self, sandbox_id: str, image: str, spec: EnvSpec, workspace: Path) -> None:
        name = f"agentkernel-{sandbox_id}"
        subprocess.run(
            [self.docker, "run", "-d", "--name", name,
             "-v", f"{workspace.resolve()}:{spec.workspace_mount}",
             image, "sleep", "infinity"],
            check=True, capture_output=True,
        )
        self._containers[sandbox_id] = name

    def create(self, sandbox_id: str, spec: EnvSpec, workspace: Path) -> None:
        self._start(sandbox_id, spec.base, spec, workspace)

    def restore(self, sandbox_id: str, spec: EnvSpec, key: SnapshotKey, workspace: Path) -> None:
        self._start(sandbox_id, self._image(key), spec, workspace)

    def run(
        self, sandbox_id: str, command: str, on_start: Callable[[Callable[[], None]], None]
    ) -> ExecResult:
        proc = subprocess.Popen(
            [self.docker, "exec", self._containers[sandbox_id], "sh", "-c", command],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, stdin=subprocess.DEVNULL,
        )
        on_start(proc.kill)
        out, err = proc.communicate()
        return ExecResult(proc.returncode, out, err)

    def snapshot(self, sandbox_id: str, key: SnapshotKey) -> None:
        subprocess.run(
            [self.docker, "commit", self._containers[sandbox_id], self._image(key)],
            check=True, capture_output=True,
        )

    def has_snapshot(self, key: SnapshotKey) -> bool:
        probe = subprocess.run([self.docker, "image", "inspect", self._image(key)], capture_output=True)
        return probe.returncode == 0

    def destroy(self, sandbox_id: str) -> None:
        name = self._containers.pop(sandbox_id, None)
        if name:
            subprocess.run([self.docker, "rm", "-f", name], capture_output=True)


@dataclass
class _Sandbox:
    sandbox_id: str
    spec: EnvSpec
    history: list[str]
    queue: ThreadPoolExecutor
    live: bool = True


class SandboxRuntime:
    """Provisioning, execution and handle bookkeeping on top of a driver.

    Each sandbox runs at most one command at a time (a single-worker queue);
    different sandboxes run concurrently.
    """

    def __init__(self, driver: Driver, workspace: str | Path) -> None:
        self.driver = driver
        self.workspace = Path(workspace)
        self._sandboxes: dict[str, _Sandbox] = {}
        self._handles: dict[str, InvocationHandle] = {}
        self._lock = threading.RLock()
        self.setup_executions = 0

    def _sandbox(self, sandbox_id: str) -> _Sandbox:
        box = self._sandboxes.get(sandbox_id)
        if box is None or not box.live:
            raise SandboxDead(f"sandbox {sandbox_id!r} is not live")
        return box

    def provision(self, spec: EnvSpec, snapshot: SnapshotKey | None = None) -> str:
        """Create a sandbox for ``spec``, restoring a cached snapshot when one exists."""
        if not self.driver.available():
            raise DriverUnavailable(f"{type(self.driver).__name__} is not available")
        sandbox_id = f"sbx-{secrets.token_hex(6)}"
        if snapshot is not None:
            if not self.driver.has_snapshot(snapshot):
                raise SandboxDead(f"no snapshot {snapshot}")
            self.driver.restore(sandbox_id, spec, snapshot, self.workspace)
            history = [f"#restore {snapshot}"]
        else:
            key = history_digest(spec, spec.setup_commands)
            history = list(spec.setup_commands)
            if self.driver.has_snapshot(key):
                self.driver.restore(sandbox_id, spec, key, self.workspace)
            else:
                self.driver.create(sandbox_id, spec, self.workspace)
                for command in spec.setup_commands:
                    with self._lock:
                        self.setup_executions += 1
                    result = self.driver.run(sandbox_id, command, lambda _kill: None)
                    if result.exit_status != 0:
                        self.driver.destroy(sandbox_id)
                        output = (result.stdout + result.stderr).decode("utf-8", errors="replace")
                        raise SetupFailed(command, result.exit_status, output)
                self.driver.snapshot(sandbox_id, key)
        with self._lock:
            self._sandboxes[sandbox_id] = _Sandbox(
                sandbox_id, spec, history, ThreadPoolExecutor(max_workers=1, thread_name_prefix=sandbox_id)
            )
        return sandbox_id

    def _transition(self, handle: InvocationHandle, new: HandleState) -> bool:
        # caller holds self._lock
        if new not in _TRANSITIONS.get(handle.state, ()):
            return False
        handle.state = new
        if new.terminal:
            handle.finished_at = time.monotonic()
        return True

    def _job(self, handle: InvocationHandle) -> None:
        with self._lock:
            if not self._transition(handle, HandleState.RUNNING):
                handle._done.set()
                return
            box = self._sandboxes[handle.sandbox_id]
            box.history.append(handle.command)

        def on_start(kill: Callable[[], None]) -> None:
            with self._lock:
                handle._kill = kill
                if handle.state is HandleState.TERMINATED:
                    kill()

        try:
            result = self.driver.run(handle.sandbox_id, handle.command, on_start)
        except Exception as exc:  # noqa: BLE001
            result = ExecResult(-1, b"", f"driver error: {exc}".encode())
        with self._lock:
            handle._kill = None
            if handle.state is HandleState.RUNNING:
                handle.result = result
                self._transition(
                    handle, HandleState.DONE if result.exit_status == 0 else HandleState.FAILED
                )
        handle._done.set()

    def exec(
        self,
        sandbox_id: str,
        command: str,
        timeout_seconds: float | None = None,
        mode: str = "sync",
    ) -> ExecResult | InvocationHandle:
        """Run ``command``; sync calls that outlive ``timeout_seconds`` come back as handles."""
        if mode not in ("sync", "background"):
            raise ValueError(f"mode must be 'sync' or 'background', not {mode!r}")
        with self._lock:
            box = self._sandbox(sandbox_id)
            handle = InvocationHandle(secrets.token_urlsafe(12), sandbox_id, command)
            self._handles[handle.handle_id] = handle
            box.queue.submit(self._job, handle)
        if mode == "background":
            return handle
        if handle._done.wait(timeout_seconds) and handle.result is not None:
            return handle.result
        return handle

    def handle(self, handle: InvocationHandle | str) -> InvocationHandle:
        handle_id = handle.handle_id if isinstance(handle, InvocationHandle) else handle
        try:
            return self._handles[handle_id]
        except KeyError:
            raise UnknownHandle(f"unknown invocation handle {handle_id!r}") from None

    def poll(self, handle: InvocationHandle | str) -> HandleState:
        return self.handle(handle).state

    def wait(self, handle: InvocationHandle | str, timeout: float | None = None) -> HandleState:
        h = self.handle(handle)
        h._done.wait(timeout)
        return h.state

    def fetch_result(self, handle: InvocationHandle | str) -> ExecResult:
        h = self.handle(handle)
        with self._lock:
            if h.state not in (HandleState.DONE, HandleState.FAILED) or h.result is None:
                raise NotFinished(f"invocation {h.handle_id} is {h.state.value}")
            return h.result

    def terminate(self, handle: InvocationHandle | str) -> None:
        h = self.handle(handle)
        with self._lock:
            if self._transition(h, HandleState.TERMINATED) and h._kill is not None:
                h._kill()

    def _busy(self, sandbox_id: str) -> bool:
        return any(
            h.sandbox_id == sandbox_id and not h.state.terminal for h in self._handles.values()
        ) or any(
            h.sandbox_id == sandbox_id and h.state is HandleState.TERMINATED and not h._done.is_set()
            for h in self._handles.values()
        )

    def commit_snapshot(self, sandbox_id: str) -> SnapshotKey:
        with self._lock:
            box = self._sandbox(sandbox_id)
            if self._busy(sandbox_id):
                raise Busy(f"sandbox {sandbox_id!r} has an invocation in flight")
            key = history_digest(box.spec, box.history)
            self.driver.snapshot(sandbox_id, key)
            return key

    def destroy(self, sandbox_id: str) -> None:
        with self._lock:
            box = self._sandbox(sandbox_id)
            box.live = False
            for h in self._handles.values():
                if h.sandbox_id == sandbox_id and not h.state.terminal:
                    if self._transition(h, HandleState.TERMINATED) and h._kill is not None:
                        h._kill()
        box.queue.shutdown(wait=True)
        self.driver.destroy(sandbox_id)

    def shutdown(self) -> None:
        for sandbox_id in [s for s, b in self._sandboxes.items() if b.live]:
            self.destroy(sandbox_id)
