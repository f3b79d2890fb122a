"""Tiered AS graph, address plan and router-level layout of a synthetic world."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from ..core import IxpDb, Prefix, RelDb, RelKind

ASN_BASE = 1000
IXP_ASN_BASE = 30000
ADDR_BASE = 11 << 24
FABRIC_BASE = (200 << 24)


@dataclass
class ScenarioConfig:
    seed: int = 1
    n_tier1: int = 6
    n_tier2: int = 40
    n_stub: int = 150
    tier2_providers: tuple = (1, 3)
    stub_providers: tuple = (1, 2)
    tier2_peer_prob: float = 0.06
    stub_peers_mean: float = 0.3
    extra_prefixes: tuple = (0, 2)
    n_ixps: int = 2
    ixp_members: int = 8
    p_ixp_link: float = 0.6
    n_sibling_pairs: int = 5
    cores: tuple = (3, 2, 1)  # core routers per tier (stubs draw 1..this+1)
    p_silent: float = 0.05
    p_third_party: float = 0.02
    p_dst_silent: float = 0.5
    link_numbering: str = "provider"  # or "own"
    p_roa: float = 0.5
    n_vps: int = 10
    dsts_per_vp: Optional[int] = None  # None = every host of every prefix
    hosts_per_prefix: int = 1  # probe targets per prefix, shared by all VPs
    n_probe_ases: int = 10
    hidden_hijacks: int = 0
    bogus_links: int = 0
    aggregations: int = 0
    default_detours: int = 0
    detour_pair_rate: float = 0.0  # add detours until this share of pairs is affected
    detour_max_prefixes: int = 24
    base_error_rate: float = 0.05
    unmap_rate: float = 0.0
    error_mix: tuple = (0.718, 0.116, 0.094, 0.072)  # neighbor, sibling, IXP, unknown

    def validate(self) -> None:
        probs = [self.tier2_peer_prob, self.p_ixp_link, self.p_silent, self.p_third_party,
                 self.p_dst_silent, self.p_roa, self.base_error_rate, self.unmap_rate,
                 self.detour_pair_rate]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.n_tier1 < 1 or self.n_tier2 < 0 or self.n_stub < 0:
            raise ValueError("tier sizes must be positive")
        if self.n_vps < 1:
            raise ValueError("need at least one VP")
        if self.link_numbering not in ("provider", "own"):
            raise ValueError("link_numbering must be 'provider' or 'own'")
        if abs(sum(self.error_mix) - 1.0) > 1e-9:
            raise ValueError("error_mix must sum to 1")


@dataclass
class Ixp:
    asn: int
    prefix: Prefix
    members: list = field(default_factory=list)
    next_ip: int = 1


class Topology:
    """AS-level graph. Nodes are indices ``0..n-1``; ``asn[i]`` is the ASN."""

    def __init__(self):
        self.asn: list[int] = []
        self.tier: list[int] = []
        self.providers: list[list[int]] = []
        self.customers: list[list[int]] = []
        self.peers: list[list[int]] = []
        self.org: dict[int, str] = {}
        self.ixps: list[Ixp] = []
        self.ixp_of_link: dict[tuple[int, int], int] = {}
        self.index: dict[int, int] = {}

    def __len__(self):
        return len(self.asn)

    def add_as(self, tier: int) -> int:
        i = len(self.asn)
        a = ASN_BASE + i
        self.asn.append(a)
        self.tier.append(tier)
        self.providers.append([])
        self.customers.append([])
        self.peers.append([])
        self.index[a] = i
        return i

    def linked(self, i: int, j: int) -> bool:
        return j in self.providers[i] or j in self.customers[i] or j in self.peers[i]

    def add_p2c(self, p: int, c: int) -> None:
        if p == c or self.linked(p, c):
            return
        self.customers[p].append(c)
        self.providers[c].append(p)

    def add_p2p(self, a: int, b: int) -> None:
        if a == b or self.linked(a, b):
            return
        self.peers[a].append(b)
        self.peers[b].append(a)

    def neighbors(self, i: int) -> list[int]:
        return sorted(set(self.providers[i]) | set(self.customers[i]) | set(self.peers[i]))

    def rel(self, i: int, j: int) -> RelKind:
        if j in self.customers[i]:
            return RelKind.P2C
        if j in self.providers[i]:
            return RelKind.C2P
        if j in self.peers[i]:
            return RelKind.P2P
        return RelKind.NONE

    def links(self) -> list[tuple[int, int]]:
        out = set()
        for i in range(len(self)):
            for j in self.neighbors(i):
                out.add((min(i, j), max(i, j)))
        return sorted(out)

    def reldb(self) -> RelDb:
        db = RelDb()
        for i in range(len(self)):
            for c in self.customers[i]:
                db.add_link(self.asn[i], self.asn[c], RelKind.P2C)
            for p in self.peers[i]:
                if i < p:
                    db.add_link(self.asn[i], self.asn[p], RelKind.P2P)
        db.orgs.update(self.org)
        return db

    def ixpdb(self) -> IxpDb:
        return IxpDb({x.prefix for x in self.ixps}, {x.asn for x in self.ixps})


def build_topology(cfg: ScenarioConfig, rng: random.Random) -> Topology:
    topo = Topology()
    t1 = [topo.add_as(1) for _ in range(cfg.n_tier1)]
    t2 = [topo.add_as(2) for _ in range(cfg.n_tier2)]
    st = [topo.add_as(3) for _ in range(cfg.n_stub)]
    for k, a in enumerate(t1):
        for b in t1[k + 1:]:
            topo.add_p2p(a, b)
    for k, a in enumerate(t2):
        # earlier tier-2 ASes may also serve as providers, keeping the graph acyclic
        pool = t1 + t2[:k]
        n = rng.randint(*cfg.tier2_providers)
        for p in rng.sample(pool, min(n, len(pool))):
            if p in t1 or rng.random() < 0.5:
                topo.add_p2c(p, a)
        if not topo.providers[a]:
            topo.add_p2c(rng.choice(t1), a)
    for k, a in enumerate(t2):
        for b in t2[k + 1:]:
            if rng.random() < cfg.tier2_peer_prob:
                topo.add_p2p(a, b)
    upper = t2 if t2 else t1
    for a in st:
        n = rng.randint(*cfg.stub_providers)
        for p in rng.sample(upper, min(n, len(upper))):
            topo.add_p2c(p, a)
    for a in st:
        k = int(cfg.stub_peers_mean) + (rng.random() < cfg.stub_peers_mean % 1)
        for _ in range(k):
            b = rng.choice(st + t2)
            if b != a and not _in_cone(topo, a, b) and not _in_cone(topo, b, a):
                topo.add_p2p(a, b)
    # siblings: a provider-customer pair run by one organisation
    for i in range(len(topo)):
        topo.org[topo.asn[i]] = f"ORG-{topo.asn[i]}"
    cands = [(p, c) for c in t2 + st for p in topo.providers[c] if topo.tier[p] >= 2]
    rng.shuffle(cands)
    used: set = set()
    n_sib = 0
    for p, c in cands:
        if n_sib >= cfg.n_sibling_pairs:
            break
        if p in used or c in used:
            continue
        used.update((p, c))
        topo.org[topo.asn[c]] = topo.org[topo.asn[p]]
        n_sib += 1
    # IXPs: members peer across a shared fabric
    members_pool = t1 + t2 + st
    for k in range(cfg.n_ixps):
        ixp = Ixp(IXP_ASN_BASE + k, Prefix(FABRIC_BASE + (k << 8), 24))
        ixp.members = sorted(rng.sample(members_pool, min(cfg.ixp_members, len(members_pool))))
        topo.ixps.append(ixp)
        for x, a in enumerate(ixp.members):
            for b in ixp.members[x + 1:]:
                if topo.linked(a, b):
                    if b in topo.peers[a] and (min(a, b), max(a, b)) not in topo.ixp_of_link:
                        topo.ixp_of_link[(min(a, b), max(a, b))] = k
                    continue
                if rng.random() < cfg.p_ixp_link and not _in_cone(topo, a, b) and not _in_cone(topo, b, a):
                    topo.add_p2p(a, b)
                    topo.ixp_of_link[(min(a, b), max(a, b))] = k
    for i in range(len(topo)):
        topo.providers[i].sort()
        topo.customers[i].sort()
        topo.peers[i].sort()
    return topo


def _in_cone(topo: Topology, top: int, x: int) -> bool:
    """True when ``x`` is ``top`` or one of its (transitive) customers."""
    seen = {top}
    stack = [top]
    while stack:
        a = stack.pop()
        if a == x:
            return True
        for c in topo.customers[a]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return False


# --------------------------------------------------------------- addresses

@dataclass
class AddressPlan:
    prefixes: list  # per AS: announced prefixes (first is the main block)
    host_net: dict  # Prefix -> /24 where hosts of that prefix live
    spare_net: dict  # AS index -> /24 reserved in the main block (aggregation events)
    pool_next: list  # per AS: next free infrastructure address

    def alloc(self, i: int, n: int = 1, align: int = 1) -> int:
        base = self.pool_next[i]
        if base % align:
            base += align - base % align
        self.pool_next[i] = base + n
        main = self.prefixes[i][0]
        if base + n > main.base + main.size - 1024:
            raise RuntimeError(f"infrastructure pool exhausted for AS index {i}")
        return base


def build_address_plan(topo: Topology, cfg: ScenarioConfig, rng: random.Random) -> AddressPlan:
    lengths = {1: 16, 2: 18, 3: 20}
    cursor = ADDR_BASE
    prefixes = []
    host_net = {}
    spare = {}
    pool = []
    for i in range(len(topo)):
        ln = lengths[topo.tier[i]]
        size = 1 << (32 - ln)
        if cursor % size:
            cursor += size - cursor % size
        main = Prefix(cursor, ln)
        cursor += size
        ps = [main]
        host_net[main] = Prefix(main.base + main.size - 512, 24)
        spare[i] = Prefix(main.base + main.size - 256, 24)
        for _ in range(rng.randint(*cfg.extra_prefixes)):
            if cursor % 1024:
                cursor += 1024 - cursor % 1024
            p = Prefix(cursor, 22)
            cursor += 1024
            ps.append(p)
            host_net[p] = Prefix(p.base + 512, 24)
        prefixes.append(ps)
        pool.append(main.base + 1)
    return AddressPlan(prefixes, host_net, spare, pool)


# ----------------------------------------------------------------- routers

@dataclass
class Router:
    rid: int
    owner: int  # AS index
    ifaces: dict = field(default_factory=dict)  # neighbour rid (or "lan") -> ip
    core: Optional[int] = None  # for border routers: attached core
    silent: bool = False

    def primary(self) -> int:
        return next(iter(self.ifaces.values()))


class RouterMap:
    def __init__(self):
        self.routers: list[Router] = []
        self.cores: dict[int, list[int]] = {}
        self.border: dict[tuple[int, int], int] = {}  # (as, neighbour as) -> rid
        self.owner_of_ip: dict[int, int] = {}  # ip -> AS index

    def new(self, owner: int) -> Router:
        r = Router(len(self.routers), owner)
        self.routers.append(r)
        return r

    def set_iface(self, r: Router, key, ip: int) -> None:
        r.ifaces[key] = ip
        self.owner_of_ip[ip] = r.owner


def build_routers(topo: Topology, plan: AddressPlan, cfg: ScenarioConfig, rng: random.Random) -> RouterMap:
    rm = RouterMap()
    for i in range(len(topo)):
        top = cfg.cores[topo.tier[i] - 1]
        n = top if topo.tier[i] < 3 else rng.randint(1, top + 1)
        cores = [rm.new(i) for _ in range(n)]
        rm.cores[i] = [c.rid for c in cores]
        for c in cores:
            rm.set_iface(c, "lan", plan.alloc(i))
        for a in cores:
            for b in cores:
                if a is not b:
                    rm.set_iface(a, b.rid, plan.alloc(i))
    ixp_router: dict[tuple[int, int], int] = {}
    for i in range(len(topo)):
        for j in topo.neighbors(i):
            key = (min(i, j), max(i, j))
            k = topo.ixp_of_link.get(key)
            if k is not None and (i, k) in ixp_router:
                rm.border[(i, j)] = ixp_router[(i, k)]
                continue
            b = rm.new(i)
            b.core = rng.choice(rm.cores[i])
            b.silent = rng.random() < cfg.p_silent
            core = rm.routers[b.core]
            rm.set_iface(b, core.rid, plan.alloc(i))
            rm.set_iface(core, b.rid, plan.alloc(i))
            rm.border[(i, j)] = b.rid
            if k is not None:
                ixp_router[(i, k)] = b.rid
    for r in rm.routers:
        if r.core is None:
            r.silent = rng.random() < cfg.p_silent
    # inter-AS link addressing
    fabric_ip: dict[tuple[int, int], int] = {}
    for a, b in topo.links():
        ra, rb = rm.routers[rm.border[(a, b)]], rm.routers[rm.border[(b, a)]]
        k = topo.ixp_of_link.get((a, b))
        if k is not None:
            ixp = topo.ixps[k]
            for side, r in ((a, ra), (b, rb)):
                if (side, k) not in fabric_ip:
                    fabric_ip[(side, k)] = ixp.prefix.base + ixp.next_ip
                    ixp.next_ip += 1
            rm.set_iface(ra, rb.rid, fabric_ip[(a, k)])
            rm.set_iface(rb, ra.rid, fabric_ip[(b, k)])
            continue
        if cfg.link_numbering == "own":
            rm.set_iface(ra, rb.rid, plan.alloc(a))
            rm.set_iface(rb, ra.rid, plan.alloc(b))
            continue
        kind = topo.rel(a, b)
        if kind == RelKind.P2C:
            owner = a
        elif kind == RelKind.C2P:
            owner = b
        else:
            owner = a if topo.asn[a] < topo.asn[b] else b
        base = plan.alloc(owner, 4, 4)
        # the /30 comes from one side's space; each router keeps its own end
        ip_a, ip_b = (base + 1, base + 2) if owner == a else (base + 2, base + 1)
        rm.set_iface(ra, rb.rid, ip_a)
        rm.set_iface(rb, ra.rid, ip_b)
    return rm
