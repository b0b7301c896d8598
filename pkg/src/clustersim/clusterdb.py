"""Replicated cluster configuration database.

Every node holds a :class:`DbState` replica: a flat map of ``/``-joined
hierarchical paths to string values, the gseq of the last applied global
update, and a running hash chain over the applied update stream.  The chain
lets a sponsor decide whether a joining node's replica is a prefix of its own
history (ship a log suffix) or has diverged (ship a full snapshot).

The quorum device carries the :class:`MasterLog`, a checkpoint plus the log
of updates applied since that checkpoint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

GENESIS = "0" * 16


class SyncFailed(Exception):
    pass


class QuorumUnreadable(Exception):
    pass


class Payload(Protocol):
    def apply_entries(self, entries: dict[str, str]) -> None: ...


@dataclass(frozen=True)
class DbWrite:
    path: str
    value: str

    def apply_entries(self, entries: dict[str, str]) -> None:
        entries[self.path] = self.value


def owner_key(gid: str) -> str:
    return f"group/{gid}/owner"


def state_key(gid: str) -> str:
    return f"group/{gid}/state"


@dataclass(frozen=True)
class OwnerChange:
    """Compare-and-set of a group's owner; a no-op unless the current owner
    equals ``expected`` (``0`` meaning unowned)."""

    gid: str
    owner: int
    expected: int
    state: str

    def apply_entries(self, entries: dict[str, str]) -> None:
        if int(entries.get(owner_key(self.gid), "0")) != self.expected:
            return
        entries[owner_key(self.gid)] = str(self.owner)
        entries[state_key(self.gid)] = self.state


@dataclass(frozen=True)
class GroupStatus:
    """Status write that only takes effect while ``owner`` still owns the group."""

    gid: str
    owner: int
    state: str

    def apply_entries(self, entries: dict[str, str]) -> None:
        if int(entries.get(owner_key(self.gid), "0")) == self.owner:
            entries[state_key(self.gid)] = self.state


def chain_next(prev: str, gseq: int, payload: Any) -> str:
    h = hashlib.sha256(f"{prev}|{gseq}|{payload!r}".encode()).hexdigest()
    return h[:16]


def serialize_entries(entries: dict[str, str]) -> str:
    return "".join(f"{k}={entries[k]}\n" for k in sorted(entries))


@dataclass
class LogEntry:
    update: Any
    chain: str


@dataclass
class SyncPayload:
    """What a sponsor ships to an applicant: nothing, a log suffix, or a snapshot."""

    mode: str
    entries: Optional[dict[str, str]] = None
    version: int = 0
    chain: str = GENESIS
    applied: Optional[dict[Any, int]] = None
    log: list[LogEntry] = field(default_factory=list)

    @property
    def size(self) -> int:
        if self.mode == "log":
            return len(self.log)
        if self.mode == "snapshot":
            return len(self.entries or {})
        return 0


class DbState:
    """One node's replica."""

    def __init__(self, checkpoint_every: int = 64) -> None:
        self.entries: dict[str, str] = {}
        self.version = 0
        self.chain = GENESIS
        self.applied: dict[Any, int] = {}
        self.checkpoint_every = checkpoint_every
        self._cp_version = 0
        self._cp_chain = GENESIS
        self.log: list[LogEntry] = []
        self.last_update: Any = None

    def get(self, path: str, default: Optional[str] = None) -> Optional[str]:
        return self.entries.get(path, default)

    def subtree(self, prefix: str) -> dict[str, str]:
        return {k: v for k, v in self.entries.items() if k.startswith(prefix)}

    def serialize(self) -> str:
        return serialize_entries(self.entries)

    def digest(self) -> str:
        head = f"version={self.version} chain={self.chain}\n"
        return hashlib.sha256((head + self.serialize()).encode()).hexdigest()[:16]

    def apply(self, update: Any) -> bool:
        """Apply ``update`` if it is the next in sequence.

        Returns ``True`` when applied, ``False`` for a duplicate.  A gap raises
        ``ValueError``; callers check ``update.gseq`` first.
        """
        if update.gseq <= self.version:
            return False
        if update.gseq != self.version + 1:
            raise ValueError(f"gap: have {self.version}, got {update.gseq}")
        update.payload.apply_entries(self.entries)
        self.version = update.gseq
        self.chain = chain_next(self.chain, update.gseq, update.payload)
        if update.req_id is not None:
            self.applied[update.req_id] = update.gseq
        self.last_update = update
        self.log.append(LogEntry(update, self.chain))
        if len(self.log) >= self.checkpoint_every:
            self._cp_version, self._cp_chain = self.version, self.chain
            self.log = []
        return True

    def chain_at(self, version: int) -> Optional[str]:
        if version == self.version:
            return self.chain
        if version == self._cp_version:
            return self._cp_chain
        for entry in self.log:
            if entry.update.gseq == version:
                return entry.chain
        return None

    def sync_for(self, version: int, chain: str) -> SyncPayload:
        """Compute what an applicant at (``version``, ``chain``) needs."""
        if version == self.version and chain == self.chain:
            return SyncPayload("none", version=self.version, chain=self.chain)
        if self._cp_version <= version < self.version and self.chain_at(version) == chain:
            suffix = [e for e in self.log if e.update.gseq > version]
            return SyncPayload("log", version=self.version, chain=self.chain, log=suffix)
        return SyncPayload(
            "snapshot",
            entries=dict(self.entries),
            version=self.version,
            chain=self.chain,
            applied=dict(self.applied),
        )

    def install_sync(self, sync: SyncPayload) -> None:
        if sync.mode == "none":
            if sync.version != self.version or sync.chain != self.chain:
                raise SyncFailed("replica changed since version exchange")
            return
        if sync.mode == "log":
            for entry in sync.log:
                if entry.update.gseq == self.version + 1:
                    self.apply(entry.update)
            if self.version != sync.version or self.chain != sync.chain:
                raise SyncFailed("log suffix did not reproduce sponsor state")
            return
        self.restore(sync.entries or {}, sync.version, sync.chain, sync.applied or {})

    def restore(
        self, entries: dict[str, str], version: int, chain: str, applied: dict[Any, int]
    ) -> None:
        self.entries = dict(entries)
        self.version = version
        self.chain = chain
        self.applied = dict(applied)
        self._cp_version, self._cp_chain = version, chain
        self.log = []
        self.last_update = None

    def updates_after(self, version: int) -> Optional[list[Any]]:
        """Log entries strictly after ``version``, or None if not covered."""
        if version < self._cp_version:
            return None
        return [e.update for e in self.log if e.update.gseq > version]


class MasterLog:
    """Checkpoint plus change log kept on the quorum resource."""

    def __init__(self, checkpoint_every: int = 64) -> None:
        self.checkpoint_every = checkpoint_every
        self.cp_entries: dict[str, str] = {}
        self.cp_version = 0
        self.cp_chain = GENESIS
        self.cp_applied: dict[Any, int] = {}
        self.log: list[Any] = []
        self.readable = True

    def replay(self) -> DbState:
        if not self.readable:
            raise QuorumUnreadable("quorum log unreadable")
        db = DbState(self.checkpoint_every)
        db.restore(self.cp_entries, self.cp_version, self.cp_chain, self.cp_applied)
        for update in self.log:
            db.apply(update)
        return db

    @property
    def version(self) -> int:
        return self.log[-1].gseq if self.log else self.cp_version

    def append(self, update: Any) -> None:
        if update.gseq != self.version + 1:
            return
        self.log.append(update)
        if len(self.log) >= self.checkpoint_every:
            self.rewrite(self.replay())

    def rewrite(self, db: DbState) -> None:
        """Replace the master with a fresh checkpoint of ``db``."""
        self.cp_entries = dict(db.entries)
        self.cp_version = db.version
        self.cp_chain = db.chain
        self.cp_applied = dict(db.applied)
        self.log = []

    def serialize(self) -> str:
        return self.replay().serialize()
