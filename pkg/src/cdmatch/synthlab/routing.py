"""Policy routing over a synthetic topology.

A route class is the outcome of one origin announcing one prefix set:
per-AS next hop, path length and learned-from kind. Preference is
customer > peer > provider, then shortest path, then lowest next-hop ASN;
exports follow the usual valley-free rules.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Optional

from .topology import Topology

NO_ROUTE = -1
ORIGIN, CUSTOMER, PEER, PROVIDER = 0, 1, 2, 3


@dataclass
class RouteClass:
    origin: int
    nh: list  # AS index -> next hop index; itself for the origin; NO_ROUTE
    kind: list

    def has_route(self, i: int) -> bool:
        return self.nh[i] != NO_ROUTE

    def path(self, i: int) -> Optional[list[int]]:
        if self.nh[i] == NO_ROUTE:
            return None
        out = [i]
        while out[-1] != self.origin:
            nxt = self.nh[out[-1]]
            if nxt == NO_ROUTE or len(out) > len(self.nh):
                return None
            out.append(nxt)
        return out


def compute_class(topo: Topology, origin: int, blocked: Iterable[int] = (),
                  fake_providers: Iterable[int] = (), confine: Optional[set] = None,
                  no_export: Iterable[int] = ()) -> RouteClass:
    """``blocked`` ASes drop the announcement (route origin validation);
    ``fake_providers`` are ASes claiming the origin as a direct customer;
    ``confine`` limits which ASes may hold the route at all; ``no_export``
    ASes keep the route to themselves."""
    n = len(topo)
    asn = topo.asn
    blocked = set(blocked)
    quiet = set(no_export)
    nh = [NO_ROUTE] * n
    dist = [0] * n
    kind = [NO_ROUTE] * n

    def ok(x):
        return x not in blocked and (confine is None or x in confine)

    nh[origin] = origin
    kind[origin] = ORIGIN
    # customer routes climb provider links
    heap = []
    ups = list(topo.providers[origin]) + [p for p in fake_providers if p != origin]
    for p in ups:
        heapq.heappush(heap, (1, asn[origin], p, origin))
    while heap:
        d, _, x, via = heapq.heappop(heap)
        if nh[x] != NO_ROUTE or not ok(x):
            continue
        nh[x], dist[x], kind[x] = via, d, CUSTOMER
        if x in quiet:
            continue
        for p in topo.providers[x]:
            if nh[p] == NO_ROUTE:
                heapq.heappush(heap, (d + 1, asn[x], p, x))
    # peer routes: one lateral step from a customer/origin route
    best: dict[int, tuple] = {}
    for x in range(n):
        if kind[x] in (ORIGIN, CUSTOMER) and x not in quiet:
            for y in topo.peers[x]:
                if nh[y] == NO_ROUTE and ok(y):
                    cand = (dist[x] + 1, asn[x], x)
                    if y not in best or cand < best[y]:
                        best[y] = cand
    for y, (d, _, x) in best.items():
        nh[y], dist[y], kind[y] = x, d, PEER
    # provider routes descend customer links
    heap = []
    for x in range(n):
        if nh[x] != NO_ROUTE and x not in quiet:
            for c in topo.customers[x]:
                if nh[c] == NO_ROUTE:
                    heapq.heappush(heap, (dist[x] + 1, asn[x], c, x))
    while heap:
        d, _, x, via = heapq.heappop(heap)
        if nh[x] != NO_ROUTE or not ok(x):
            continue
        nh[x], dist[x], kind[x] = via, d, PROVIDER
        if x in quiet:
            continue
        for c in topo.customers[x]:
            if nh[c] == NO_ROUTE:
                heapq.heappush(heap, (d + 1, asn[x], c, x))
    return RouteClass(origin, nh, kind)


def is_valley_free(topo: Topology, path: list[int]) -> bool:
    """Uphill c2p links, at most one p2p, then downhill p2c links."""
    phase = 0  # 0 climbing, 1 after peak
    for a, b in zip(path, path[1:]):
        if b in topo.providers[a]:
            if phase:
                return False
        elif b in topo.peers[a]:
            if phase:
                return False
            phase = 1
        elif b in topo.customers[a]:
            phase = 1
        else:
            return False
    return True
