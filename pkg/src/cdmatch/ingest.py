"""Parse and cleanse traceroute and BGP corpora, then pair each trace with
the control-plane path its VP held for the destination."""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .core import FormatError, IxpDb, Prefix, int_to_ip, ip_to_int, is_private_asn, iter_records
from .ribstore import MappingTable, RibEntry, RibTable, read_raw_rib


@dataclass(frozen=True)
class RawTrace:
    timestamp: int
    src: int
    dst: int
    hops: tuple[tuple[int, ...], ...]  # empty slot = unresponsive
    vp: str = ""


@dataclass(frozen=True)
class CleanTrace:
    timestamp: int
    src: int
    dst: int
    hops: tuple[Optional[int], ...]  # None = unresponsive
    reached: bool
    vp: str = ""
    unresp: bool = False

    def ips(self) -> list[int]:
        return [h for h in self.hops if h is not None]


@dataclass(frozen=True)
class PathPair:
    d: CleanTrace
    c: RibEntry
    dst_prefix: Prefix
    vp: str
    date: str
    pair_id: int = 0


# ------------------------------------------------------------------ parsing

def _parse_hop(path, lineno, text) -> tuple[int, ...]:
    text = text.strip()
    if text in ("*", ""):
        return ()
    try:
        return tuple(ip_to_int(t) for t in text.split(";"))
    except ValueError:
        raise FormatError(path, lineno, f"bad hop {text!r}") from None


def load_traces(path, vp: Optional[str] = None) -> list[RawTrace]:
    vp = vp if vp is not None else Path(path).stem
    out = []
    for lineno, f in iter_records(path):
        if len(f) != 4:
            raise FormatError(path, lineno, "expected timestamp|src_ip|dst_ip|hops")
        try:
            ts = int(f[0])
            src, dst = ip_to_int(f[1]), ip_to_int(f[2])
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from None
        hops = tuple(_parse_hop(path, lineno, h) for h in f[3].split(",")) if f[3].strip() else ()
        out.append(RawTrace(ts, src, dst, hops, vp))
    return out


def _fmt_slot(slot) -> str:
    if slot is None or slot == ():
        return "*"
    if isinstance(slot, int):
        return int_to_ip(slot)
    return ";".join(int_to_ip(x) for x in slot)


def write_traces(traces: Iterable[Union[RawTrace, CleanTrace]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp|src_ip|dst_ip|hops\n")
        for t in traces:
            hops = ",".join(_fmt_slot(h) for h in t.hops)
            fh.write(f"{t.timestamp}|{int_to_ip(t.src)}|{int_to_ip(t.dst)}|{hops}\n")


# ------------------------------------------------------------- trace cleansing

@dataclass
class CleansingReport:
    raw_total: int = 0
    loop: int = 0
    mul_resp: int = 0
    no_bgp: int = 0
    retained: int = 0
    unresp: int = 0
    incomplete: int = 0

    def merge(self, other: "CleansingReport") -> "CleansingReport":
        return CleansingReport(*(getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__))

    def ratios(self) -> dict[str, Optional[float]]:
        def r(n, d):
            return n / d if d else None

        return {
            "loop": r(self.loop, self.raw_total),
            "mul-resp": r(self.mul_resp, self.raw_total),
            "no-BGP": r(self.no_bgp, self.raw_total),
            "unresp": r(self.unresp, self.retained),
            "incomplete": r(self.incomplete, self.retained),
        }

    def after_pairing(self, no_bgp: int, kept: Sequence[CleanTrace]) -> "CleansingReport":
        return CleansingReport(
            raw_total=self.raw_total, loop=self.loop, mul_resp=self.mul_resp, no_bgp=no_bgp,
            retained=len(kept), unresp=sum(t.unresp for t in kept),
            incomplete=sum(not t.reached for t in kept),
        )


def _as_slots(t) -> tuple[tuple[int, ...], ...]:
    if isinstance(t, CleanTrace):
        return tuple(() if h is None else (h,) for h in t.hops)
    return t.hops


def cleanse_trace(t: Union[RawTrace, CleanTrace]) -> tuple[Optional[CleanTrace], Optional[str]]:
    """Return the cleansed trace, or ``(None, reason)`` with reason ``loop`` or
    ``mul-resp``."""
    slots = []
    for s in _as_slots(t):
        # the same router answering twice in a row is one hop
        if s and slots and slots[-1] == s and len(s) == 1:
            continue
        slots.append(s)
    seen: dict[int, int] = {}
    loop = False
    for i, s in enumerate(slots):
        for ip in s:
            j = seen.get(ip)
            if j is not None and j != i:
                loop = True
            seen[ip] = i
    if loop:
        return None, "loop"
    if any(len(s) > 1 for s in slots):
        return None, "mul-resp"
    unresp = any(not s for s in slots) or (isinstance(t, CleanTrace) and t.unresp)
    while slots and not slots[-1]:
        slots.pop()
    hops = tuple(s[0] if s else None for s in slots)
    reached = bool(hops) and hops[-1] == t.dst
    return CleanTrace(t.timestamp, t.src, t.dst, hops, reached, t.vp, unresp), None


def cleanse_traces(raw: Iterable[Union[RawTrace, CleanTrace]]) -> tuple[list[CleanTrace], CleansingReport]:
    rep = CleansingReport()
    kept = []
    for t in raw:
        rep.raw_total += 1
        clean, why = cleanse_trace(t)
        if clean is None:
            if why == "loop":
                rep.loop += 1
            else:
                rep.mul_resp += 1
            continue
        kept.append(clean)
    rep.retained = len(kept)
    rep.unresp = sum(t.unresp for t in kept)
    rep.incomplete = sum(not t.reached for t in kept)
    return kept, rep


# --------------------------------------------------------------- BGP cleansing

@dataclass
class BgpReport:
    total: int = 0
    loop: int = 0
    priv_asn: int = 0
    as_set: int = 0
    dup_asn: int = 0
    ixp: int = 0
    retained: int = 0

    def ratios(self) -> dict[str, Optional[float]]:
        d = self.total
        return {k: (getattr(self, f) / d if d else None) for k, f in
                (("loop", "loop"), ("priv-ASN", "priv_asn"), ("AS-SET", "as_set"),
                 ("dup-ASN", "dup_asn"), ("IXP", "ixp"))}


def _collapse(path: list[int]) -> list[int]:
    out: list[int] = []
    for a in path:
        if not out or out[-1] != a:
            out.append(a)
    return out


def cleanse_bgp_path(tokens: Sequence[Union[str, int]], ixp_asns=frozenset()) -> tuple[Optional[tuple[int, ...]], set[str]]:
    """Cleanse one AS path. Returns ``(path, flags)``; ``path`` is None when
    the path is discarded (flags then name the reason)."""
    flags: set[str] = set()
    asns: list[int] = []
    has_set = False
    for tok in tokens:
        s = str(tok).strip()
        if s.startswith("{") or s.startswith("[") or "," in s:
            has_set = True
            continue
        try:
            asns.append(int(s))
        except ValueError:
            raise ValueError(f"bad AS path token {s!r}") from None
    collapsed = _collapse(asns)
    if len(set(collapsed)) != len(collapsed):
        return None, {"loop"}
    if any(is_private_asn(a) for a in asns):
        return None, {"priv-ASN"}
    if has_set:
        return None, {"AS-SET"}
    if len(collapsed) != len(asns):
        flags.add("dup-ASN")
    stripped = [a for a in collapsed if a not in ixp_asns]
    if len(stripped) != len(collapsed):
        flags.add("IXP")
        stripped = _collapse(stripped)
    if not stripped:
        return None, flags | {"IXP"}
    return tuple(stripped), flags


def cleanse_bgp(paths: Iterable[Sequence[Union[str, int]]], ixp_asns=frozenset()) -> tuple[list[Optional[tuple[int, ...]]], BgpReport]:
    rep = BgpReport()
    out = []
    for tokens in paths:
        rep.total += 1
        path, flags = cleanse_bgp_path(tokens, ixp_asns)
        if path is None:
            if "loop" in flags:
                rep.loop += 1
            elif "priv-ASN" in flags:
                rep.priv_asn += 1
            elif "AS-SET" in flags:
                rep.as_set += 1
            else:
                rep.ixp += 1
        else:
            rep.retained += 1
            rep.dup_asn += "dup-ASN" in flags
            rep.ixp += "IXP" in flags
        out.append(path)
    return out, rep


def load_rib(path, ixp: Optional[IxpDb] = None) -> tuple[RibTable, BgpReport]:
    raw = read_raw_rib(path)
    ixp_asns = ixp.ixp_asns if ixp is not None else frozenset()
    try:
        paths, rep = cleanse_bgp((tokens for _, _, tokens in raw), ixp_asns)
    except ValueError as exc:
        raise FormatError(path, 0, str(exc)) from None
    rib = RibTable()
    for (ts, prefix, _), p in zip(raw, paths):
        if p is not None:
            rib.insert(RibEntry(prefix, p, ts))
    return rib, rep


# ------------------------------------------------------------------- pairing

def _date(ts: int) -> str:
    return _dt.datetime.fromtimestamp(ts, _dt.timezone.utc).strftime("%Y-%m-%d")


def pair_paths(traces: Iterable[CleanTrace], rib: RibTable, start_id: int = 0) -> tuple[list[PathPair], int]:
    pairs = []
    no_bgp = 0
    for t in traces:
        entry = rib.lpm(t.dst, t.timestamp)
        if entry is None:
            no_bgp += 1
            continue
        pairs.append(PathPair(t, entry, entry.prefix, t.vp, _date(t.timestamp), start_id + len(pairs)))
    return pairs, no_bgp


def _second_hop(hops) -> Optional[int]:
    from .compare import WILDCARD

    i = 0
    while i < len(hops) and hops[i] == WILDCARD:
        i += 1
    if i + 1 >= len(hops):
        return None
    h = hops[i + 1]
    return None if h == WILDCARD else h


def discard_second_hop_bifurcation(pairs: Sequence[PathPair], tables: Sequence[MappingTable],
                                   ixp: Optional[IxpDb] = None) -> tuple[list[PathPair], int]:
    from .compare import END, translate

    if not tables:
        raise ValueError("at least one mapping table is required")
    kept = []
    dropped = 0
    for pair in pairs:
        c2 = pair.c.as_path[1] if len(pair.c.as_path) > 1 else None
        differs_everywhere = c2 is not None
        if differs_everywhere:
            for table in tables:
                hops = [h for h in translate(pair.d, table, ixp).hops if h != END]
                d2 = _second_hop(hops)
                if d2 is None or d2 == c2:
                    differs_everywhere = False
                    break
        if differs_everywhere:
            dropped += 1
        else:
            kept.append(pair)
    return kept, dropped


# ------------------------------------------------------------------- pair files

def write_pairs(pairs: Iterable[PathPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# pair_id|vp|timestamp|src_ip|dst_ip|reached|unresp|hops|prefix|rib_timestamp|as_path\n")
        for p in pairs:
            d, c = p.d, p.c
            hops = ",".join(_fmt_slot(h) for h in d.hops)
            fh.write(f"{p.pair_id}|{p.vp}|{d.timestamp}|{int_to_ip(d.src)}|{int_to_ip(d.dst)}|"
                     f"{int(d.reached)}|{int(d.unresp)}|{hops}|{c.prefix}|{c.timestamp}|"
                     f"{' '.join(map(str, c.as_path))}\n")


def load_pairs(path) -> list[PathPair]:
    out = []
    for lineno, f in iter_records(path):
        if len(f) != 11:
            raise FormatError(path, lineno, "expected 11 fields")
        try:
            pid, ts, rts = int(f[0]), int(f[2]), int(f[9])
            src, dst = ip_to_int(f[3]), ip_to_int(f[4])
            prefix = Prefix.parse(f[8])
            as_path = tuple(int(a) for a in f[10].split())
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from None
        hops = tuple((s[0] if s else None) for s in
                     (_parse_hop(path, lineno, h) for h in f[7].split(","))) if f[7].strip() else ()
        d = CleanTrace(ts, src, dst, hops, f[5] == "1", f[1], f[6] == "1")
        out.append(PathPair(d, RibEntry(prefix, as_path, rts), prefix, f[1], _date(ts), pid))
    return out
