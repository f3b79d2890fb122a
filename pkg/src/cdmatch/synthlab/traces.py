"""Data-plane forwarding and traceroute hop synthesis."""
from __future__ import annotations

import random
from typing import Optional

from ..core import Prefix
from ..ingest import RawTrace
from .routing import NO_ROUTE
from .topology import RouterMap, Topology


class Forwarder:
    """Hop-by-hop AS forwarding: each AS does LPM over the prefixes it holds
    a route for."""

    def __init__(self, topo: Topology, classes: dict, prefix_class: dict):
        self.topo = topo
        self.classes = classes
        self.prefix_class = prefix_class
        self.by_len: dict[int, dict[int, Prefix]] = {}
        for p in prefix_class:
            self.by_len.setdefault(p.length, {})[p.base] = p
        self.lens = sorted(self.by_len, reverse=True)
        self.nh_override: dict[tuple[int, Prefix], int] = {}  # (as, prefix) -> next hop
        self.class_override: dict[tuple[int, int], int] = {}  # (as, class) -> class used to forward

    def covering(self, dst: int) -> list[Prefix]:
        out = []
        for ln in self.lens:
            mask = (0xFFFFFFFF << (32 - ln)) & 0xFFFFFFFF if ln else 0
            p = self.by_len[ln].get(dst & mask)
            if p is not None:
                out.append(p)
        return out

    def route_prefix(self, a: int, dst: int) -> Optional[Prefix]:
        for p in self.covering(dst):
            if self.classes[self.prefix_class[p]].has_route(a):
                return p
        return None

    def next_hop(self, a: int, p: Prefix) -> int:
        nh = self.nh_override.get((a, p))
        if nh is not None:
            return nh
        cid = self.prefix_class[p]
        cid = self.class_override.get((a, cid), cid)
        return self.classes[cid].nh[a]

    def forward(self, src: int, dst: int) -> Optional[list[int]]:
        """AS sequence a packet to ``dst`` traverses, or None on a loop or
        black hole."""
        path = [src]
        seen = {src}
        a = src
        while True:
            p = self.route_prefix(a, dst)
            if p is None:
                return None
            nh = self.next_hop(a, p)
            if nh == NO_ROUTE:
                return None
            if nh == a:
                return path
            if nh in seen:
                return None
            path.append(nh)
            seen.add(nh)
            a = nh


def host_core(rm: RouterMap, a: int, dst: int) -> int:
    cores = rm.cores[a]
    return cores[(dst >> 2) % len(cores)]


def router_path(rm: RouterMap, as_seq: list[int], dst: int) -> list[tuple[int, object]]:
    """``(rid, inbound key)`` for every router the probe crosses; the first
    router is entered from its LAN."""
    out: list[tuple[int, object]] = []
    prev = None
    for t, a in enumerate(as_seq):
        if t == 0:
            cur = rm.cores[a][0]
            out.append((cur, "lan"))
        else:
            cur = rm.border[(a, as_seq[t - 1])]
            out.append((cur, prev))
            prev = cur
            cur_core = rm.routers[cur].core
            out.append((cur_core, cur))
            cur = cur_core
        prev = cur
        if t + 1 < len(as_seq):
            b = rm.border[(a, as_seq[t + 1])]
            tc = rm.routers[b].core
        else:
            b = None
            tc = host_core(rm, a, dst)
        if tc != cur:
            out.append((tc, cur))
            prev = cur = tc
        if b is not None:
            out.append((b, cur))
            prev = b
    return out


def simulate_trace(topo: Topology, rm: RouterMap, as_seq: list[int], dst: int, src_ip: int,
                   timestamp: int, vp: str, c_ases: set, reached: bool,
                   p_third_party: float, p_dst_silent: float, rng: random.Random) -> RawTrace:
    hops: list[tuple[int, ...]] = []
    for k, (rid, inbound) in enumerate(router_path(rm, as_seq, dst)):
        r = rm.routers[rid]
        if k > 0 and r.silent and r.owner in c_ases:
            hops.append(())
            continue
        if k > 0 and rng.random() < p_third_party:
            hops.append((r.primary(),))
        else:
            hops.append((r.ifaces[inbound],))
    if reached and rng.random() >= p_dst_silent:
        hops.append((dst,))
    return RawTrace(timestamp, src_ip, dst, tuple(hops), vp)
