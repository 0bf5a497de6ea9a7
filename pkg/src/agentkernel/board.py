"""Message boards shared by the members of one ensemble.

A board is an append-only JSON-lines file, one ``{seq, writer, text}``
record per line. Appends hold both an in-process lock and an exclusive
``flock`` on the file and are fsynced before returning. Read offsets live
in memory, per (board, reader), so the file itself is never rewritten.
"""

from __future__ import annotations

import fcntl
import json
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import BoardClosed, NotBoardMember, UnknownBoard


@dataclass(frozen=True)
class BoardMessage:
    seq: int
    writer: Any
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "writer": self.writer, "text": self.text}


class MessageBoard:
    def __init__(self, board_id: str, path: Path, members: list[Any]) -> None:
        self.board_id = board_id
        self.path = path
        self.members = list(members)
        self.closed = False
        self._messages: list[BoardMessage] = []
        self._offsets: dict[Any, int] = {m: 0 for m in members}
        self._append_lock = threading.Lock()
        self._reader_locks: dict[Any, threading.Lock] = {m: threading.Lock() for m in members}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch()

    def _check_member(self, agent: Any) -> None:
        if agent not in self._offsets:
            raise NotBoardMember(f"agent {agent!r} is not a member of board {self.board_id}")

    def post(self, writer: Any, text: str) -> int:
        self._check_member(writer)
        with self._append_lock:
            if self.closed:
                raise BoardClosed(f"board {self.board_id} is closed")
            msg = BoardMessage(len(self._messages) + 1, writer, text)
            line = json.dumps(msg.to_dict()) + "\n"
            with open(self.path, "a", encoding="utf-8") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                try:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
                finally:
                    fcntl.flock(fh, fcntl.LOCK_UN)
            self._messages.append(msg)
            return msg.seq

    def drain(self, reader: Any) -> list[BoardMessage]:
        """Messages by other writers past ``reader``'s offset; moves the offset to the head."""
        self._check_member(reader)
        with self._reader_locks[reader]:
            # list appends are atomic; the slice is an immutable prefix
            head = len(self._messages)
            fresh = self._messages[self._offsets[reader]:head]
            self._offsets[reader] = head
        return [m for m in fresh if m.writer != reader]

    def offset(self, reader: Any) -> int:
        self._check_member(reader)
        return self._offsets[reader]

    def close(self) -> None:
        with self._append_lock:
            self.closed = True

    def read_file(self) -> list[BoardMessage]:
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    out.append(BoardMessage(rec["seq"], rec["writer"], rec["text"]))
        return out


class BoardManager:
    """Creates boards under a directory and routes post/drain by board id."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._boards: dict[str, MessageBoard] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def create(self, members: list[Any]) -> MessageBoard:
        with self._lock:
            self._counter += 1
            board_id = f"board-{self._counter}-{secrets.token_hex(4)}"
            board = MessageBoard(board_id, self.directory / f"{board_id}.jsonl", members)
            self._boards[board_id] = board
            return board

    def get(self, board_id: str) -> MessageBoard:
        try:
            return self._boards[board_id]
        except KeyError:
            raise UnknownBoard(f"no board {board_id!r}") from None

    def post_message(self, board_id: str, writer: Any, text: str) -> int:
        return self.get(board_id).post(writer, text)

    def drain_messages(self, board_id: str, reader: Any) -> list[BoardMessage]:
        return self.get(board_id).drain(reader)

    def close(self, board_id: str) -> None:
        self.get(board_id).close()
