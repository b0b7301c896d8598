"""Scenario file parser.

One directive per line, ``#`` starts a comment.  Every line either parses or
raises :class:`ParseError` carrying its line number.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

from .cluster import ClusterSpec, LinkDef, NodeDef
from .failover import FailbackPolicy, GroupSpec
from .resmgr import LIBRARIES, ResourceSpec, RestartPolicy
from .vserver import VirtualServer


class ParseError(Exception):
    def __init__(self, line: int, message: str, source: str = "") -> None:
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.message = message


class UnknownCommand(ParseError):
    pass


@dataclass(frozen=True)
class Command:
    at: int
    verb: str
    args: tuple[str, ...]
    line: int

    def text(self) -> str:
        return " ".join((self.verb,) + self.args)


@dataclass(frozen=True)
class Trigger:
    kind: str
    match: str
    action: str
    target: int
    line: int


@dataclass
class Scenario:
    spec: ClusterSpec = field(default_factory=ClusterSpec)
    commands: list[Command] = field(default_factory=list)
    triggers: list[Trigger] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    until: Optional[int] = None
    source: str = ""

    @property
    def expects(self) -> list[Command]:
        return [c for c in self.commands if c.verb == "expect"]

    @property
    def last_time(self) -> int:
        return max((c.at for c in self.commands), default=0)


# verb -> (min args, max args or None)
TIMED_VERBS: dict[str, tuple[int, Optional[int]]] = {
    "crash": (1, 1), "revive": (1, 1), "boot": (1, 1), "partition": (1, 1), "heal": (0, 0),
    "drop": (2, 4), "delay": (3, 3), "update": (3, 3), "pause": (1, 1), "resume": (1, 1),
    "leave": (1, 1), "evict": (1, 1), "movegroup": (3, 3), "online": (1, 1),
    "offline": (1, 1), "fail": (1, 1), "failonline": (2, 2), "probe": (2, 2),
    "event": (2, None), "clockjump": (2, 2), "drift": (2, 2), "quorum": (1, 1),
    "vsconfig": (3, 3), "expect": (1, None),
}

ASSERTIONS = ("views", "view", "epoch", "state", "owner", "group", "resource", "db",
              "event", "skew", "replicas", "resolve", "remap", "identity", "quorum")


def _ids(text: str, line: int) -> tuple[int, ...]:
    if text in ("", "-", "none"):
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ParseError(line, f"bad id list {text!r}") from None


def _int(text: str, line: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(line, f"bad {what} {text!r}") from None


def _kv(tokens: list[str], line: int, allowed: set[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(line, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise ParseError(line, f"unknown option {k!r}")
        out[k] = v
    return out


def _bool(text: str) -> bool:
    return text.lower() in ("1", "yes", "true", "on")


def _split(body: str) -> list[str]:
    # backslashes are literal so UNC-style paths survive
    lex = shlex.shlex(body, posix=True)
    lex.whitespace_split = True
    lex.escape = ""
    lex.commenters = ""
    return list(lex)


def parse_text(text: str, source: str = "") -> Scenario:
    sc = Scenario(source=source)
    spec = sc.spec
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            toks = _split(body)
        except ValueError as exc:
            raise ParseError(lineno, str(exc), source) from None
        try:
            _directive(sc, spec, toks, lineno)
        except ParseError as exc:
            raise type(exc)(exc.line, exc.message, source) from None
    if not spec.nodes:
        raise ParseError(0, "scenario defines no nodes", source)
    return sc


def _directive(sc: Scenario, spec: ClusterSpec, toks: list[str], ln: int) -> None:
    head, rest = toks[0], toks[1:]
    if head == "seed":
        if len(rest) != 1:
            raise ParseError(ln, "seed takes one value")
        sc.seed = _int(rest[0], ln, "seed")
    elif head == "until":
        if len(rest) != 1:
            raise ParseError(ln, "until takes one value")
        sc.until = _int(rest[0], ln, "time")
    elif head == "config":
        for k, v in _kv(rest, ln, set(_config_keys())).items():
            sc.config[k] = v
    elif head == "node":
        if not rest:
            raise ParseError(ln, "node needs an id")
        nid = _int(rest[0], ln, "node id")
        if nid <= 0:
            raise ParseError(ln, "node ids are positive")
        if any(n.nid == nid for n in spec.nodes):
            raise ParseError(ln, f"node {nid} defined twice")
        kv = _kv(rest[1:], ln, {"offset", "drift", "boot"})
        boot: Optional[int] = 0
        if "boot" in kv:
            boot = None if kv["boot"] == "never" else _int(kv["boot"], ln, "boot time")
        try:
            drift = Fraction(kv.get("drift", "0"))
        except ValueError:
            raise ParseError(ln, f"bad drift {kv['drift']!r}") from None
        spec.nodes.append(NodeDef(nid, _int(kv.get("offset", "0"), ln, "offset"), drift, boot))
    elif head == "nodes":
        if len(rest) != 1:
            raise ParseError(ln, "nodes takes a count")
        for i in range(1, _int(rest[0], ln, "count") + 1):
            spec.nodes.append(NodeDef(i))
    elif head == "allow":
        spec.allowed = set(_ids(rest[0] if rest else "", ln))
    elif head == "link":
        if len(rest) < 2:
            raise ParseError(ln, "link needs two endpoints")
        kv = _kv(rest[2:], ln, {"delay", "ifaces", "drop"})
        spec.links.append(LinkDef(_int(rest[0], ln, "node"), _int(rest[1], ln, "node"),
                                  _int(kv.get("delay", "2"), ln, "delay"),
                                  _int(kv.get("ifaces", "1"), ln, "ifaces"),
                                  Fraction(kv.get("drop", "0"))))
    elif head == "device":
        kv = _kv(rest, ln, {"delay"})
        spec.device_delay = _int(kv.get("delay", "2"), ln, "delay")
    elif head == "resource":
        _resource(spec, rest, ln)
    elif head == "group":
        _group(spec, rest, ln)
    elif head == "vserver":
        _vserver(spec, rest, ln)
    elif head == "at":
        if len(rest) < 2:
            raise ParseError(ln, "at <t> <command>")
        t = _int(rest[0], ln, "time")
        if t < 0:
            raise ParseError(ln, "negative time")
        verb, args = rest[1], tuple(rest[2:])
        if verb not in TIMED_VERBS:
            raise UnknownCommand(ln, f"unknown command {verb!r}")
        lo, hi = TIMED_VERBS[verb]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ParseError(ln, f"{verb}: wrong number of arguments")
        if verb == "expect" and args[0] not in ASSERTIONS:
            raise ParseError(ln, f"unknown assertion {args[0]!r}")
        sc.commands.append(Command(t, verb, args, ln))
    elif head == "on":
        # on <kind> <substring> crash <node>
        if len(rest) != 4 or rest[2] != "crash":
            raise ParseError(ln, "on <kind> <match> crash <node>")
        sc.triggers.append(Trigger(rest[0], rest[1], "crash", _int(rest[3], ln, "node"), ln))
    else:
        raise ParseError(ln, f"unknown directive {head!r}")


def _config_keys() -> list[str]:
    from dataclasses import fields
    from .config import SimConfig
    return [f.name for f in fields(SimConfig)]


def _resource(spec: ClusterSpec, rest: list[str], ln: int) -> None:
    if not rest:
        raise ParseError(ln, "resource needs an id")
    rid = rest[0]
    kv = _kv(rest[1:], ln, {"type", "group", "deps", "hosts", "restarts", "escalate",
                             "poll", "local"})
    rtype = kv.get("type", "generic-app")
    if rtype not in LIBRARIES:
        raise ParseError(ln, f"unknown resource type {rtype!r}")
    if "group" not in kv:
        raise ParseError(ln, "resource needs group=")
    policy = RestartPolicy()
    if "restarts" in kv:
        n, _, window = kv["restarts"].partition("/")
        policy = RestartPolicy(_int(n, ln, "restart count"),
                               _int(window or "1000", ln, "restart window"),
                               _bool(kv.get("escalate", "yes")))
    elif "escalate" in kv:
        policy = RestartPolicy(then_escalate=_bool(kv["escalate"]))
    deps = tuple(d for d in kv.get("deps", "").split(",") if d)
    if rid in spec.resources:
        raise ParseError(ln, f"resource {rid} defined twice")
    spec.resources[rid] = ResourceSpec(rid, rtype, kv["group"], deps,
                                       _ids(kv.get("hosts", ""), ln), policy,
                                       _int(kv.get("poll", "100"), ln, "poll"),
                                       _bool(kv.get("local", "no")))


def _blackouts(text: str, ln: int) -> tuple[tuple[int, int], ...]:
    out = []
    for part in filter(None, text.split(",")):
        a, sep, b = part.partition("-")
        if not sep:
            raise ParseError(ln, f"blackout {part!r} is not start-end")
        s, e = _int(a, ln, "blackout start"), _int(b, ln, "blackout end")
        if e <= s:
            raise ParseError(ln, f"empty blackout {part!r}")
        out.append((s, e))
    return tuple(out)


def _group(spec: ClusterSpec, rest: list[str], ln: int) -> None:
    if not rest:
        raise ParseError(ln, "group needs an id")
    gid = rest[0]
    kv = _kv(rest[1:], ln, {"preferred", "failback", "min_uptime", "blackout"})
    policy = FailbackPolicy(_bool(kv.get("failback", "no")),
                            _int(kv.get("min_uptime", "0"), ln, "min_uptime"),
                            _blackouts(kv.get("blackout", ""), ln))
    members = tuple(sorted(r for r, s in spec.resources.items() if s.group == gid))
    spec.groups[gid] = GroupSpec(gid, members, _ids(kv.get("preferred", ""), ln), policy)


def _vserver(spec: ClusterSpec, rest: list[str], ln: int) -> None:
    if not rest:
        raise ParseError(ln, "vserver needs a name")
    kv = _kv(rest[1:], ln, {"group", "ip"})
    if "group" not in kv:
        raise ParseError(ln, "vserver needs group=")
    vs = VirtualServer(rest[0], kv.get("ip", f"ip-{rest[0]}"), kv["group"])
    spec.vservers.append(vs)
    gid = vs.gid
    spec.resources[vs.ip_rid] = ResourceSpec(vs.ip_rid, "ip-addr", gid)
    spec.resources[vs.name_rid] = ResourceSpec(vs.name_rid, "net-name", gid, (vs.ip_rid,))
    if gid in spec.groups:
        g = spec.groups[gid]
        members = tuple(sorted(set(g.members) | {vs.ip_rid, vs.name_rid}))
        spec.groups[gid] = GroupSpec(gid, members, g.preferred_owners, g.failback)


def finalize(sc: Scenario) -> Scenario:
    """Refresh group member lists after every resource line has been read."""
    spec = sc.spec
    for gid, g in list(spec.groups.items()):
        members = tuple(sorted(r for r, s in spec.resources.items() if s.group == gid))
        spec.groups[gid] = GroupSpec(gid, members, g.preferred_owners, g.failback)
    return sc


def load(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    return finalize(parse_text(p.read_text(), source=str(p)))


def parse(text: str, source: str = "") -> Scenario:
    return finalize(parse_text(text, source))
