"""Per-VP routing tables with longest-prefix match, and IP-to-AS mapping
tables (RIB-match, RIB+IXP, or imported from external tools)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .core import FormatError, IxpDb, Prefix, int_to_ip, ip_to_int, iter_records

IXP_WILDCARD = "ixp"


@dataclass(frozen=True)
class RibEntry:
    prefix: Prefix
    as_path: tuple[int, ...]
    timestamp: int

    def __post_init__(self):
        if not self.as_path:
            raise ValueError(f"empty AS path for {self.prefix}")

    @property
    def origin(self) -> int:
        return self.as_path[-1]


class RibTable:
    """Binary prefix tree; each node holding entries keeps them ordered by
    timestamp."""

    def __init__(self, entries: Iterable[RibEntry] = ()):
        self._root: list = [None, None, None]
        self._count = 0
        for e in entries:
            self.insert(e)

    def insert(self, entry: RibEntry) -> None:
        node = self._root
        for bit in entry.prefix.bits():
            if node[bit] is None:
                node[bit] = [None, None, None]
            node = node[bit]
        if node[2] is None:
            node[2] = []
        bucket = node[2]
        i = len(bucket)
        while i > 0 and bucket[i - 1].timestamp > entry.timestamp:
            i -= 1
        bucket.insert(i, entry)
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def __iter__(self) -> Iterator[RibEntry]:
        stack = [self._root]
        while stack:
            node = stack.pop()
            if node[2]:
                yield from node[2]
            for child in (node[1], node[0]):
                if child is not None:
                    stack.append(child)

    def _deepest_bucket(self, ip: int) -> Optional[list[RibEntry]]:
        node = self._root
        best = node[2]
        for shift in range(31, -1, -1):
            node = node[(ip >> shift) & 1]
            if node is None:
                break
            if node[2]:
                best = node[2]
        return best

    def candidates(self, ip: int, at: int) -> list[RibEntry]:
        """All entries of the longest covering prefix sharing the timestamp
        closest to ``at`` (more than one means a multi-origin prefix)."""
        bucket = self._deepest_bucket(ip)
        if not bucket:
            return []
        best_ts = None
        best_gap = None
        for e in bucket:
            gap = abs(e.timestamp - at)
            # bucket is time ordered, so a strict ``<`` keeps the earlier one on ties
            if best_gap is None or gap < best_gap:
                best_gap, best_ts = gap, e.timestamp
        return [e for e in bucket if e.timestamp == best_ts]

    def lpm(self, ip: int, at: int) -> Optional[RibEntry]:
        found = self.candidates(ip, at)
        return found[0] if found else None

    def covering_prefix(self, ip: int) -> Optional[Prefix]:
        bucket = self._deepest_bucket(ip)
        return bucket[0].prefix if bucket else None


def lpm(rib: RibTable, ip: int, at: int) -> Optional[RibEntry]:
    return rib.lpm(ip, at)


def map_rib_match(rib: RibTable, ip: int, at: int) -> Optional[int]:
    found = rib.candidates(ip, at)
    if not found:
        return None
    origins = {e.origin for e in found}
    if len(origins) > 1:
        return None
    return found[0].origin


def map_rib_plus_ixp(rib: RibTable, ixp: IxpDb, ip: int, at: int):
    if ixp.is_ixp_ip(ip):
        return IXP_WILDCARD
    asn = map_rib_match(rib, ip, at)
    if asn is not None and ixp.is_ixp_asn(asn):
        return IXP_WILDCARD
    return asn


# ------------------------------------------------------------ RIB files

def parse_rib_line(path, lineno: int, fields: list[str]) -> tuple[int, Prefix, list[str]]:
    """Split one ``timestamp|prefix|as_path`` record; the path stays raw
    tokens so cleansing can see AS-sets and private ASNs."""
    if len(fields) != 3:
        raise FormatError(path, lineno, "expected timestamp|prefix|as_path")
    try:
        ts = int(fields[0])
    except ValueError:
        raise FormatError(path, lineno, f"bad timestamp {fields[0]!r}") from None
    try:
        prefix = Prefix.parse(fields[1])
    except ValueError as exc:
        raise FormatError(path, lineno, f"bad prefix {fields[1]!r}: {exc}") from None
    tokens = fields[2].split()
    if not tokens:
        raise FormatError(path, lineno, "empty AS path")
    return ts, prefix, tokens


def read_raw_rib(path) -> list[tuple[int, Prefix, list[str]]]:
    return [parse_rib_line(path, lineno, f) for lineno, f in iter_records(path)]


def write_rib(entries: Iterable[RibEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp|prefix|as_path\n")
        for e in entries:
            fh.write(f"{e.timestamp}|{e.prefix}|{' '.join(map(str, e.as_path))}\n")


# ------------------------------------------------------------ mapping tables

@dataclass
class MappingTable:
    """IP -> ASN; ``None`` is an explicit unmap entry."""

    method: str
    entries: dict[int, Optional[int]] = field(default_factory=dict)

    def get(self, ip: int) -> Optional[int]:
        return self.entries.get(ip)

    def __contains__(self, ip: int) -> bool:
        return ip in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self, method: Optional[str] = None) -> "MappingTable":
        return MappingTable(method or self.method, dict(self.entries))

    def mapped(self) -> dict[int, int]:
        return {ip: a for ip, a in self.entries.items() if a is not None}


class DuplicateKeyError(FormatError):
    pass


def load_mapping(path, method: Optional[str] = None) -> MappingTable:
    from pathlib import Path

    table = MappingTable(method or Path(path).stem)
    seen: dict[int, int] = {}
    for lineno, f in iter_records(path):
        if len(f) != 2:
            raise FormatError(path, lineno, "expected ip|asn or ip|-")
        try:
            ip = ip_to_int(f[0])
        except ValueError:
            raise FormatError(path, lineno, f"bad IP {f[0]!r}") from None
        if ip in seen:
            raise DuplicateKeyError(path, lineno, f"duplicate IP {f[0]} (first on line {seen[ip]})")
        seen[ip] = lineno
        val = f[1].strip()
        if val == "-":
            table.entries[ip] = None
        else:
            try:
                asn = int(val)
            except ValueError:
                raise FormatError(path, lineno, f"bad ASN {val!r}") from None
            if asn <= 0:
                raise FormatError(path, lineno, f"ASN out of range: {asn}")
            table.entries[ip] = asn
    return table


def load_external_mapping(path) -> MappingTable:
    return load_mapping(path)


def write_mapping(table: MappingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ip in sorted(table.entries):
            asn = table.entries[ip]
            fh.write(f"{int_to_ip(ip)}|{'-' if asn is None else asn}\n")


def build_rib_mapping(rib: RibTable, ips: Iterable[int], at: int, method="rib") -> MappingTable:
    return MappingTable(method, {ip: map_rib_match(rib, ip, at) for ip in sorted(set(ips))})


def build_rib_ixp_mapping(rib: RibTable, ixp: IxpDb, ips: Iterable[int], at: int,
                          method="rib_ixp") -> MappingTable:
    """RIB+IXP mapping as a table; IXP addresses become unmap entries, which
    translate to the same wildcard an IXP-mapped hop would."""
    out = {}
    for ip in sorted(set(ips)):
        asn = map_rib_plus_ixp(rib, ixp, ip, at)
        out[ip] = None if asn == IXP_WILDCARD else asn
    return MappingTable(method, out)
