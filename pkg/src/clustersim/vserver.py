"""Virtual servers: node-independent names that follow their group."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from .clusterdb import DbState, DbWrite, owner_key, state_key

UNAVAILABLE = "unavailable"


class UnknownName(Exception):
    pass


class NoVirtualContext(Exception):
    pass


@dataclass(frozen=True)
class VirtualServer:
    vname: str
    vip: str
    gid: str

    @property
    def config_root(self) -> str:
        return f"vs/{self.vname}/"

    @property
    def name_rid(self) -> str:
        return f"{self.vname}-name"

    @property
    def ip_rid(self) -> str:
        return f"{self.vname}-ip"


_PIPE = re.compile(r"^\\\\([^\\]+)\\(.+)$")


class VirtualServerRegistry:
    def __init__(self) -> None:
        self.by_name: dict[str, VirtualServer] = {}
        self.by_group: dict[str, VirtualServer] = {}

    def register(self, vs: VirtualServer) -> None:
        if vs.vname in self.by_name:
            raise ValueError(f"virtual server {vs.vname} already registered")
        self.by_name[vs.vname] = vs
        self.by_group[vs.gid] = vs

    def get(self, vname: str) -> VirtualServer:
        try:
            return self.by_name[vname]
        except KeyError:
            raise UnknownName(vname) from None

    def resolve(self, vname: str, db: DbState) -> Optional[int]:
        """Hosting node of ``vname``'s group, or None while it is not Online."""
        vs = self.get(vname)
        owner = int(db.get(owner_key(vs.gid), "0"))
        if owner == 0 or db.get(state_key(vs.gid)) != "Online":
            return None
        return owner

    def remap_endpoint(self, path: str, db: DbState) -> str:
        m = _PIPE.match(path)
        if m is None:
            raise ValueError(f"not a \\\\name\\service path: {path!r}")
        vname, service = m.groups()
        host = self.resolve(vname, db)
        if host is None:
            return UNAVAILABLE
        return f"\\\\n{host}\\${vname}\\{service}"

    def virtual_identity(self, gid: Optional[str]) -> str:
        if gid is None or gid not in self.by_group:
            raise NoVirtualContext(gid)
        return self.by_group[gid].vname

    def config_write(self, vname: str, key: str, value: str) -> DbWrite:
        """Database write confined to the server's private subtree."""
        vs = self.get(vname)
        parts = key.split("/")
        if not key or any(p in ("", ".", "..") for p in parts):
            raise ValueError(f"bad config key {key!r}")
        return DbWrite(vs.config_root + key, value)
