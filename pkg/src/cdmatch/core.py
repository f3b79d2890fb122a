"""Shared vocabulary: IPv4 addresses, prefixes, ASNs and the registries
(AS relationships, organisations, ROAs, IXPs) every stage consults.

Addresses are plain ``int`` values internally; :func:`ip_to_int` and
:func:`int_to_ip` convert at the file boundary.
"""
from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class FormatError(ValueError):
    """A registry/corpus file line could not be parsed."""

    def __init__(self, path, lineno: int, msg: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


# ---------------------------------------------------------------- addresses

def ip_to_int(text: str) -> int:
    return int(ipaddress.IPv4Address(text.strip()))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def is_private_asn(asn: int) -> bool:
    return 64512 <= asn <= 65534 or 4200000000 <= asn <= 4294967294


def valid_asn(asn: int) -> bool:
    return 0 < asn <= 0xFFFFFFFF


def _mask(length: int) -> int:
    return (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF if length else 0


@dataclass(frozen=True, order=True)
class Prefix:
    base: int
    length: int

    def __post_init__(self):
        if not 0 <= self.length <= 32:
            raise ValueError(f"prefix length out of range: {self.length}")
        if self.base & ~_mask(self.length) & 0xFFFFFFFF:
            raise ValueError(f"host bits set in {int_to_ip(self.base)}/{self.length}")

    @classmethod
    def parse(cls, text: str) -> "Prefix":
        net = ipaddress.IPv4Network(text.strip(), strict=True)
        return cls(int(net.network_address), net.prefixlen)

    @property
    def mask(self) -> int:
        return _mask(self.length)

    @property
    def size(self) -> int:
        return 1 << (32 - self.length)

    def covers(self, ip: int) -> bool:
        return (ip & self.mask) == self.base

    def contains(self, other: "Prefix") -> bool:
        """True if ``other`` is this prefix or a more specific one inside it."""
        return other.length >= self.length and self.covers(other.base)

    def bits(self) -> Iterator[int]:
        for i in range(self.length):
            yield (self.base >> (31 - i)) & 1

    def __str__(self) -> str:
        return f"{int_to_ip(self.base)}/{self.length}"


def prefix_covers(p: Prefix, ip: int) -> bool:
    return p.covers(ip)


# ---------------------------------------------------------- relationships

class RelKind(enum.Enum):
    P2C = "p2c"
    C2P = "c2p"
    P2P = "p2p"
    SIBLING = "sibling"
    NONE = "none"

    def mirror(self) -> "RelKind":
        return _MIRROR[self]


_MIRROR = {
    RelKind.P2C: RelKind.C2P,
    RelKind.C2P: RelKind.P2C,
    RelKind.P2P: RelKind.P2P,
    RelKind.SIBLING: RelKind.SIBLING,
    RelKind.NONE: RelKind.NONE,
}


class ConflictingRelationship(ValueError):
    pass


@dataclass
class RelDb:
    """AS links plus organisation membership.

    ``edges`` maps an unordered pair to its kind from the point of view of
    the first element of the stored (sorted) key.
    """

    edges: dict[tuple[int, int], RelKind] = field(default_factory=dict)
    orgs: dict[int, str] = field(default_factory=dict)
    _adj: dict[int, dict[int, RelKind]] = field(default_factory=dict, repr=False)

    def add_link(self, a: int, b: int, kind: RelKind) -> None:
        if kind not in (RelKind.P2C, RelKind.P2P):
            raise ValueError(f"only p2c/p2p links are stored, got {kind}")
        if a == b:
            raise ValueError(f"self link on AS{a}")
        key, k = ((a, b), kind) if a < b else ((b, a), kind.mirror())
        old = self.edges.get(key)
        if old is not None and old != k:
            raise ConflictingRelationship(f"AS{a}-AS{b} given as both {old.value} and {k.value}")
        self.edges[key] = k
        self._adj.setdefault(key[0], {})[key[1]] = k
        self._adj.setdefault(key[1], {})[key[0]] = k.mirror()

    def link_kind(self, a: int, b: int) -> RelKind:
        """Link relationship ignoring organisations."""
        return self._adj.get(a, {}).get(b, RelKind.NONE)

    def same_org(self, a: int, b: int) -> bool:
        oa = self.orgs.get(a)
        return oa is not None and oa == self.orgs.get(b)

    def lookup(self, a: int, b: int) -> RelKind:
        if a != b and self.same_org(a, b):
            return RelKind.SIBLING
        return self.link_kind(a, b)

    def neighbors(self, a: int) -> dict[int, RelKind]:
        return self._adj.get(a, {})

    def providers(self, a: int) -> list[int]:
        return sorted(n for n, k in self.neighbors(a).items() if k == RelKind.C2P)

    def customers(self, a: int) -> list[int]:
        return sorted(n for n, k in self.neighbors(a).items() if k == RelKind.P2C)

    def peers(self, a: int) -> list[int]:
        return sorted(n for n, k in self.neighbors(a).items() if k == RelKind.P2P)

    def siblings(self, a: int) -> list[int]:
        org = self.orgs.get(a)
        if org is None:
            return []
        return sorted(x for x, o in self.orgs.items() if o == org and x != a)

    def asns(self) -> set[int]:
        return set(self._adj) | set(self.orgs)


def lookup_relationship(db: RelDb, a: int, b: int) -> RelKind:
    return db.lookup(a, b)


# ------------------------------------------------------------------- ROAs

class RoaState(enum.Enum):
    VALID = "valid"
    INVALID = "invalid"
    NOT_FOUND = "notfound"


@dataclass(frozen=True)
class Roa:
    prefix: Prefix
    max_length: int
    origin: int

    def __post_init__(self):
        if not self.prefix.length <= self.max_length <= 32:
            raise ValueError(f"max length {self.max_length} invalid for {self.prefix}")


class RoaDb:
    def __init__(self, records: Iterable[Roa] = ()):
        self.records: list[Roa] = []
        self._by_len: dict[int, dict[int, list[Roa]]] = {}
        for r in records:
            self.add(r)

    def add(self, roa: Roa) -> None:
        self.records.append(roa)
        self._by_len.setdefault(roa.prefix.length, {}).setdefault(roa.prefix.base, []).append(roa)

    def covering(self, prefix: Prefix) -> list[Roa]:
        out = []
        for length, table in self._by_len.items():
            if length <= prefix.length:
                out.extend(table.get(prefix.base & _mask(length), ()))
        return out

    def origin_state(self, prefix: Prefix, origin: int) -> RoaState:
        cover = self.covering(prefix)
        if not cover:
            return RoaState.NOT_FOUND
        for r in cover:
            if r.origin == origin and prefix.length <= r.max_length:
                return RoaState.VALID
        return RoaState.INVALID

    def __len__(self) -> int:
        return len(self.records)


def roa_origin_state(db: RoaDb, prefix: Prefix, origin: int) -> RoaState:
    return db.origin_state(prefix, origin)


# ------------------------------------------------------------------- IXPs

@dataclass
class IxpDb:
    ixp_prefixes: set[Prefix] = field(default_factory=set)
    ixp_asns: set[int] = field(default_factory=set)

    def __post_init__(self):
        self._lens = sorted({p.length for p in self.ixp_prefixes})
        self._bases = {(p.base, p.length) for p in self.ixp_prefixes}

    def add_prefix(self, p: Prefix) -> None:
        self.ixp_prefixes.add(p)
        self._bases.add((p.base, p.length))
        self._lens = sorted({p.length for p in self.ixp_prefixes})

    def is_ixp_ip(self, ip: int) -> bool:
        return any((ip & _mask(n), n) in self._bases for n in self._lens)

    def is_ixp_asn(self, asn) -> bool:
        return asn in self.ixp_asns


# ------------------------------------------------------------------ loading

def iter_records(path) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(lineno, fields)`` for the non-comment lines of a pipe file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("|")


def _int_field(path, lineno, text, what="integer") -> int:
    try:
        return int(text)
    except ValueError:
        raise FormatError(path, lineno, f"bad {what}: {text!r}") from None


def _asn_field(path, lineno, text) -> int:
    asn = _int_field(path, lineno, text, "ASN")
    if not valid_asn(asn):
        raise FormatError(path, lineno, f"ASN out of range: {asn}")
    return asn


def _prefix_field(path, lineno, text) -> Prefix:
    try:
        return Prefix.parse(text)
    except ValueError as exc:
        raise FormatError(path, lineno, f"bad prefix {text!r}: {exc}") from None


def load_reldb(rel_path=None, orgs_path=None) -> RelDb:
    db = RelDb()
    if rel_path is not None:
        for lineno, f in iter_records(rel_path):
            if len(f) < 3:
                raise FormatError(rel_path, lineno, "expected asn1|asn2|rel")
            a, b = _asn_field(rel_path, lineno, f[0]), _asn_field(rel_path, lineno, f[1])
            code = f[2].strip()
            if code == "-1":
                kind = RelKind.P2C
            elif code == "0":
                kind = RelKind.P2P
            else:
                raise FormatError(rel_path, lineno, f"unknown relationship code {code!r}")
            try:
                db.add_link(a, b, kind)
            except ValueError as exc:
                raise FormatError(rel_path, lineno, str(exc)) from None
    if orgs_path is not None:
        for lineno, f in iter_records(orgs_path):
            if len(f) != 2:
                raise FormatError(orgs_path, lineno, "expected asn|org_id")
            db.orgs[_asn_field(orgs_path, lineno, f[0])] = f[1].strip()
    return db


def write_reldb(db: RelDb, rel_path, orgs_path=None) -> None:
    with open(rel_path, "w", encoding="utf-8") as fh:
        fh.write("# asn1|asn2|rel  (-1: asn1 is provider of asn2, 0: peers)\n")
        for (a, b), kind in sorted(db.edges.items()):
            if kind == RelKind.P2C:
                fh.write(f"{a}|{b}|-1\n")
            elif kind == RelKind.C2P:
                fh.write(f"{b}|{a}|-1\n")
            else:
                fh.write(f"{a}|{b}|0\n")
    if orgs_path is not None:
        with open(orgs_path, "w", encoding="utf-8") as fh:
            fh.write("# asn|org_id\n")
            for asn, org in sorted(db.orgs.items()):
                fh.write(f"{asn}|{org}\n")


def load_roadb(path) -> RoaDb:
    db = RoaDb()
    for lineno, f in iter_records(path):
        if len(f) != 3:
            raise FormatError(path, lineno, "expected prefix|maxlen|asn")
        p = _prefix_field(path, lineno, f[0])
        maxlen = _int_field(path, lineno, f[1], "max length")
        try:
            db.add(Roa(p, maxlen, _asn_field(path, lineno, f[2])))
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from None
    return db


def write_roadb(db: RoaDb, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# prefix|maxlen|asn\n")
        for r in sorted(db.records, key=lambda r: (r.prefix, r.max_length, r.origin)):
            fh.write(f"{r.prefix}|{r.max_length}|{r.origin}\n")


def load_ixpdb(path) -> IxpDb:
    db = IxpDb()
    for lineno, f in iter_records(path):
        if len(f) != 2 or f[0] not in ("P", "A"):
            raise FormatError(path, lineno, "expected P|prefix or A|asn")
        if f[0] == "P":
            db.add_prefix(_prefix_field(path, lineno, f[1]))
        else:
            db.ixp_asns.add(_asn_field(path, lineno, f[1]))
    return db


def write_ixpdb(db: IxpDb, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# P|prefix or A|asn\n")
        for p in sorted(db.ixp_prefixes):
            fh.write(f"P|{p}\n")
        for a in sorted(db.ixp_asns):
            fh.write(f"A|{a}\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
