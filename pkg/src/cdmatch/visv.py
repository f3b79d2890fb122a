"""Iterative strict voting over CD path pairs.

Every IP seen in a D-path collects candidate ASes from the segments it sits
in; each candidate is scored by how many of the IP's path pairs (and how
many distinct IP-level triples) it makes match. An IP is determined only
when a single candidate wins on both counts. Determined mappings are fixed,
pairs that still mismatch because of a determined hop outside the
C-segment are dropped as real mismatches, and the loop repeats until
nothing new is determined.
"""
from __future__ import annotations

import csv
import enum
import multiprocessing as mp
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .compare import (END, WILDCARD, DegenerateInput, Label, anchor_source, c_as_path, hops_match,
                      label_bounds, segment_bounds, translate_hops)
from .core import IxpDb, RelDb, RelKind
from .ribstore import MappingTable, RibTable

START_MARK = "^"
END_MARK = "$"


class IpCategory(enum.Enum):
    BORDER_MATCH = "border-match"
    INTERNAL_MATCH = "internal-match"
    BORDER_MISMATCH = "border-mismatch"
    INTERNAL_MISMATCH = "internal-mismatch"
    UNMAP = "unmap"


@dataclass
class CandidateSet:
    ip: int
    candidates: set = field(default_factory=set)
    triples: set = field(default_factory=set)
    categories: Counter = field(default_factory=Counter)


@dataclass
class Verdict:
    ip: int
    asn: Optional[int]  # None = undetermined
    votes: dict = field(default_factory=dict)  # candidate -> (pairs, triples)

    @property
    def determined(self) -> bool:
        return self.asn is not None


@dataclass
class PrimitiveSet:
    method: str
    mapping: dict = field(default_factory=dict)

    def as_table(self) -> MappingTable:
        return MappingTable(self.method, dict(self.mapping))


@dataclass
class _PairState:
    hops: list
    groups: list
    bounds: list
    labels: list

    @property
    def matched(self) -> bool:
        return all(l is Label.MATCH for l in self.labels)


def pair_state(c: tuple, ips: Sequence, lookup, ixp=None) -> Optional[_PairState]:
    hops, groups = translate_hops(ips, lookup, ixp)
    if not any(h != WILDCARD and h != END for h in hops):
        return None
    hops, groups = anchor_source(c, hops, groups)
    bounds = segment_bounds(c, hops)
    last = len(bounds) - 1
    labels = [label_bounds(c, hops, b, k == last) for k, b in enumerate(bounds)]
    return _PairState(hops, groups, bounds, labels)


def _prev_concrete(hops, h):
    for x in range(h - 1, -1, -1):
        if hops[x] != WILDCARD:
            return hops[x]
    return None


def _next_concrete(hops, h):
    for x in range(h + 1, len(hops)):
        v = hops[x]
        if v == END:
            return None
        if v != WILDCARD:
            return v
    return None


def pair_candidates(c: tuple, ips: Sequence, st: _PairState):
    """Yield ``(ip, category, candidates)`` for every responsive IP hop."""
    endpoint: dict[int, int] = {}
    interior: dict[int, int] = {}
    for s, (c_lo, c_hi, d_lo, d_hi) in enumerate(st.bounds):
        endpoint[d_lo] = c_lo
        endpoint[d_hi] = c_hi
        for h in range(d_lo + 1, d_hi):
            interior[h] = s
    hops = st.hops
    for h, g in enumerate(st.groups):
        if not g:
            continue
        hv = hops[h]
        if hv == WILDCARD:
            ip = ips[g[0]]
            if ip is None:
                continue
            c_lo, c_hi, _, _ = st.bounds[interior[h]]
            yield ip, IpCategory.UNMAP, {a for a in c[c_lo:c_hi + 1] if a != END}
            continue
        prev_as = _prev_concrete(hops, h)
        next_as = _next_concrete(hops, h)
        n = len(g)
        if h in endpoint:
            ci = endpoint[h]
            for pos, k in enumerate(g):
                left = pos == 0 and prev_as is not None and prev_as != hv
                right = pos == n - 1 and next_as is not None and next_as != hv
                cands = {hv}
                if left and ci > 0:
                    cands.add(c[ci - 1])
                if right and c[ci + 1] != END:
                    cands.add(c[ci + 1])
                cat = IpCategory.BORDER_MATCH if (left or right) else IpCategory.INTERNAL_MATCH
                yield ips[k], cat, cands
        else:
            c_lo, c_hi, _, _ = st.bounds[interior[h]]
            cseg = {a for a in c[c_lo:c_hi + 1] if a != END}
            for pos, k in enumerate(g):
                left = pos == 0 and prev_as is not None and prev_as != hv
                right = pos == n - 1 and next_as is not None and next_as != hv
                if left or right:
                    yield ips[k], IpCategory.BORDER_MISMATCH, set(cseg)
                else:
                    yield ips[k], IpCategory.INTERNAL_MISMATCH, cseg | {hv}


def ip_triples(ips: Sequence, ip: int) -> list[tuple]:
    out = []
    n = len(ips)
    for k, x in enumerate(ips):
        if x == ip:
            out.append((ips[k - 1] if k > 0 else START_MARK, ip, ips[k + 1] if k + 1 < n else END_MARK))
    return out


def pick_winner(votes: dict) -> Optional[int]:
    """The unique candidate reaching both the highest matched-pair count and
    the highest distinct-triple count, else None. A candidate that makes no
    pair match carries no evidence and never wins."""
    if not votes:
        return None
    best_p = max(v[0] for v in votes.values())
    if best_p == 0:
        return None
    best_t = max(v[1] for v in votes.values())
    top = [a for a, v in votes.items() if v[0] == best_p and v[1] == best_t]
    return top[0] if len(top) == 1 else None


class VisvCorpus:
    """Mutable voting state over a pair corpus."""

    def __init__(self, pairs: Sequence, base: MappingTable, ixp: Optional[IxpDb] = None):
        self.ixp = ixp
        self.base = base
        self.pair_ids = [p.pair_id for p in pairs]
        self.c = [c_as_path(p.c.as_path) for p in pairs]
        self.ips = [tuple(p.d.hops) for p in pairs]
        self.cur: dict = dict(base.entries)
        self.determined: dict[int, int] = {}
        self.active = [True] * len(pairs)
        self.ip_pairs: dict[int, list[int]] = defaultdict(list)
        for i, hops in enumerate(self.ips):
            for ip in dict.fromkeys(h for h in hops if h is not None):
                self.ip_pairs[ip].append(i)
        self.states: list[Optional[_PairState]] = [None] * len(pairs)
        self.refresh(range(len(pairs)))

    def refresh(self, idx: Iterable[int]) -> None:
        get = self.cur.get
        for i in idx:
            try:
                self.states[i] = pair_state(self.c[i], self.ips[i], get, self.ixp)
            except DegenerateInput:
                self.states[i] = None

    def all_ips(self) -> list[int]:
        return sorted(self.ip_pairs)

    def live_pairs(self, ip: int) -> list[int]:
        return [i for i in self.ip_pairs.get(ip, ()) if self.active[i] and self.states[i] is not None]

    def collect_all(self, only: Optional[set] = None) -> dict[int, CandidateSet]:
        out: dict[int, CandidateSet] = {}
        idx = range(len(self.c)) if only is None else sorted(
            {i for ip in only for i in self.ip_pairs.get(ip, ())})
        for i in idx:
            st = self.states[i]
            if not self.active[i] or st is None:
                continue
            for ip, cat, cands in pair_candidates(self.c[i], self.ips[i], st):
                if only is not None and ip not in only:
                    continue
                cs = out.get(ip)
                if cs is None:
                    cs = out[ip] = CandidateSet(ip)
                cs.candidates |= cands
                cs.categories[cat] += 1
                cs.triples.update(ip_triples(self.ips[i], ip))
        return out

    def collect_candidates(self, ip: int) -> CandidateSet:
        return self.collect_all({ip}).get(ip, CandidateSet(ip))

    def vote(self, ip: int, cands: Iterable[int]) -> Verdict:
        live = self.live_pairs(ip)
        cur = self.cur
        get = cur.get
        mapped = get(ip)
        votes = {}
        for a in sorted(cands):
            matched = 0
            tri: set = set()
            if a == mapped:
                lookup = get
            else:
                lookup = (lambda x, _a=a: _a if x == ip else get(x))
            for i in live:
                if a == mapped:
                    ok = self.states[i].matched
                else:
                    hops, _ = translate_hops(self.ips[i], lookup, self.ixp)
                    hops, _ = anchor_source(self.c[i], hops)
                    try:
                        ok = hops_match(self.c[i], hops)
                    except DegenerateInput:
                        ok = False
                if ok:
                    matched += 1
                    tri.update(ip_triples(self.ips[i], ip))
            votes[a] = (matched, len(tri))
        return Verdict(ip, pick_winner(votes), votes)

    def apply(self, verdicts: dict[int, int]) -> tuple[set[int], set[int]]:
        """A winner equal to the current mapping is fixed; any other winner
        only replaces the current mapping and must be confirmed by a later
        vote. Returns (fixed IPs, indices of pairs whose translation
        changed)."""
        dirty = set()
        fixed = set()
        for ip, a in verdicts.items():
            if self.cur.get(ip) == a:
                self.determined[ip] = a
                fixed.add(ip)
            else:
                self.cur[ip] = a
                dirty.update(self.ip_pairs.get(ip, ()))
        self.refresh(sorted(dirty))
        return fixed, dirty

    def interior_determined(self, i: int, seg: int) -> list[tuple[int, int]]:
        """``(ip, asn)`` for D-interior IPs of a segment whose mapping is
        determined."""
        st = self.states[i]
        _, _, d_lo, d_hi = st.bounds[seg]
        ips = self.ips[i]
        out = []
        for h in range(d_lo + 1, d_hi):
            for k in st.groups[h]:
                a = self.determined.get(ips[k])
                if a is not None:
                    out.append((ips[k], a))
        return out

    def is_real_mismatch(self, i: int) -> bool:
        """A pair is a real mismatch when, under the determined mappings, a
        mismatching segment still has a determined D-interior hop in an AS
        its C-segment does not contain."""
        st = self.states[i]
        if st is None or st.matched:
            return False
        c = self.c[i]
        for s, lab in enumerate(st.labels):
            if lab is not Label.MISMATCH:
                continue
            c_lo, c_hi, _, _ = st.bounds[s]
            cseg = set(c[c_lo:c_hi + 1])
            if any(a not in cseg for _, a in self.interior_determined(i, s)):
                return True
        return False

    def prune_real_mismatches(self) -> list[int]:
        removed = []
        for i in range(len(self.states)):
            if self.active[i] and self.is_real_mismatch(i):
                self.active[i] = False
                removed.append(i)
        return removed


# ------------------------------------------------------------- parallel vote

_WORKER: Optional[VisvCorpus] = None


def _vote_chunk(items):
    return [_WORKER.vote(ip, cands) for ip, cands in items]


def _vote_all(corpus: VisvCorpus, items: list, jobs: int) -> list[Verdict]:
    global _WORKER
    if jobs <= 1 or len(items) < 200 or "fork" not in mp.get_all_start_methods():
        return [corpus.vote(ip, cands) for ip, cands in items]
    _WORKER = corpus
    try:
        n = jobs * 4
        chunks = [items[k::n] for k in range(n)]
        with mp.get_context("fork").Pool(jobs) as pool:
            parts = pool.map(_vote_chunk, chunks)
    finally:
        _WORKER = None
    out = [v for part in parts for v in part]
    out.sort(key=lambda v: v.ip)
    return out


@dataclass
class VisvResult:
    primitive: PrimitiveSet
    removed_pair_ids: list
    iterations: int
    verdicts: list
    n_ips: int

    @property
    def coverage(self) -> Optional[float]:
        return len(self.primitive.mapping) / self.n_ips if self.n_ips else None


def visv_iterate(pairs: Sequence, base: MappingTable, ixp: Optional[IxpDb] = None,
                 jobs: int = 1, max_iter: int = 100) -> VisvResult:
    corpus = VisvCorpus(pairs, base, ixp)
    removed: list[int] = []
    audit: dict[int, Verdict] = {}
    todo: Optional[set] = None  # None = every IP
    it = 0
    while it < max_iter:
        it += 1
        cand = corpus.collect_all(todo)
        items = [(ip, cand[ip].candidates) for ip in sorted(cand)
                 if ip not in corpus.determined and cand[ip].candidates]
        verdicts = _vote_all(corpus, items, jobs)
        new = {}
        for v in verdicts:
            audit[v.ip] = v
            if v.determined:
                new[v.ip] = v.asn
        if not new:
            break
        fixed, dirty = corpus.apply(new)
        if not fixed and not dirty:
            break
        gone = corpus.prune_real_mismatches()
        removed.extend(gone)
        touched = dirty | set(gone)
        todo = {ip for i in touched for ip in corpus.ips[i] if ip is not None}
        todo |= set(new) - fixed
        todo -= set(corpus.determined)
        if not todo:
            break
    prim = PrimitiveSet(base.method, dict(sorted(corpus.determined.items())))
    return VisvResult(prim, sorted(corpus.pair_ids[i] for i in removed), it,
                      [audit[k] for k in sorted(audit)], len(corpus.ip_pairs))


def write_vote_audit(verdicts: Iterable[Verdict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ip", "candidate", "pairs", "triples", "status"])
        from .core import int_to_ip

        for v in verdicts:
            for a in sorted(v.votes):
                p, t = v.votes[a]
                status = "determined" if v.asn == a else "undetermined" if v.asn is None else "rejected"
                w.writerow([int_to_ip(v.ip), a, p, t, status])


# ------------------------------------------------------------- consensus

def merge_primitive_sets(sets: Sequence[PrimitiveSet], method: str = "visv") -> MappingTable:
    if len(sets) < 2:
        raise ValueError("need at least two primitive sets")
    votes: dict[int, Counter] = defaultdict(Counter)
    for s in sets:
        for ip, a in s.mapping.items():
            votes[ip][a] += 1
    out = {}
    for ip in sorted(votes):
        cnt = votes[ip]
        if len(cnt) == 1:
            (a, n), = cnt.items()
            if n >= 2:
                out[ip] = a
    return MappingTable(method, out)


class EmptyOverlap(ValueError):
    pass


@dataclass
class Evaluation:
    right: int
    wrong: int
    unmap: int
    status: dict

    @property
    def ratio(self) -> float:
        return self.wrong / (self.right + self.wrong)


def evaluate_mapping(m: MappingTable, truth: MappingTable) -> Evaluation:
    status = {}
    for ip, t in truth.entries.items():
        if t is None or ip not in m.entries:
            continue
        a = m.entries[ip]
        status[ip] = "unmap" if a is None else ("right" if a == t else "wrong")
    c = Counter(status.values())
    if c["right"] + c["wrong"] == 0:
        raise EmptyOverlap(f"{m.method} and {truth.method} share no mapped IP")
    return Evaluation(c["right"], c["wrong"], c["unmap"], status)


class ErrorKind(enum.Enum):
    IXP = "IXP"
    SIBLING = "Sibling"
    NEIGHBOR = "Neighbor"
    UNKNOWN = "Unknown"


def categorize_mapping_error(ip: int, wrong: int, right: int, ixp: Optional[IxpDb],
                             reldb: RelDb) -> ErrorKind:
    if ixp is not None and (ixp.is_ixp_ip(ip) or ixp.is_ixp_asn(wrong) or ixp.is_ixp_asn(right)):
        return ErrorKind.IXP
    if reldb.same_org(wrong, right):
        return ErrorKind.SIBLING
    if reldb.link_kind(wrong, right) is not RelKind.NONE:
        return ErrorKind.NEIGHBOR
    return ErrorKind.UNKNOWN


def extract_intra_as_ground_truth(traces: Iterable, rib: RibTable, method: str = "intra") -> MappingTable:
    """Hops of traces that start and end inside the same AS belong to that
    AS. IPs claimed by two different ASes across traces are dropped."""
    from .ribstore import map_rib_match

    seen: dict[int, set] = defaultdict(set)
    for t in traces:
        dst = rib.candidates(t.dst, t.timestamp)
        origins = {e.origin for e in dst}
        if len(origins) != 1:
            continue
        src_as = map_rib_match(rib, t.src, t.timestamp)
        (origin,) = origins
        if src_as is None or src_as != origin:
            continue
        for h in t.hops:
            if h is not None:
                seen[h].add(origin)
    return MappingTable(method, {ip: next(iter(s)) for ip, s in sorted(seen.items()) if len(s) == 1})


def frequency_stats(pairs: Iterable, status: dict) -> dict[str, Optional[float]]:
    freq: Counter = Counter()
    for p in pairs:
        for ip in {h for h in p.d.hops if h is not None}:
            freq[ip] += 1
    groups: dict[str, list] = defaultdict(list)
    for ip, s in status.items():
        groups[s].append(freq.get(ip, 0))
    return {s: (sum(v) / len(v) if v else None) for s, v in sorted(groups.items())}
