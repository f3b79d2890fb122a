"""Assemble a synthetic world: topology, routes, VPs, injected events,
traceroutes, and the ground-truth ledger."""
from __future__ import annotations

import csv
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..core import (IxpDb, Prefix, RelDb, Roa, RoaDb, ensure_dir, int_to_ip, write_ixpdb, write_reldb,
                    write_roadb)
from ..ingest import RawTrace, write_traces
from ..ribstore import MappingTable, RibEntry, RibTable, write_mapping, write_rib
from .routing import compute_class
from .topology import (AddressPlan, RouterMap, ScenarioConfig, Topology, build_address_plan,
                       build_routers, build_topology)
from .traces import Forwarder, simulate_trace

RIB_TIME = 1_672_531_200  # 2023-01-01T00:00:00Z
TRACE_TIME = RIB_TIME + 3600


@dataclass
class Vp:
    vp_id: str
    as_idx: int
    asn: int
    src_ip: int


@dataclass
class Event:
    kind: str
    params: dict


@dataclass
class PairTruth:
    vp: str
    dst: int
    c_path: Optional[tuple]
    fwd: Optional[tuple]  # forwarded ASN sequence
    real_mismatch: bool
    events: tuple = ()


@dataclass
class SynthWorld:
    cfg: ScenarioConfig
    topo: Topology
    plan: AddressPlan
    routers: RouterMap
    classes: dict
    prefix_class: dict
    origin_of: dict  # Prefix -> AS index announcing it
    host_owner: dict  # host /24 Prefix -> AS index owning the hosts
    vps: list
    ribs: dict  # vp_id -> list[RibEntry]
    traces: dict  # vp_id -> list[RawTrace]
    roa: RoaDb
    events: list
    truth: MappingTable
    base: MappingTable
    pair_truth: list
    injected_errors: dict = field(default_factory=dict)  # ip -> (wrong, right, kind)
    probes: list = field(default_factory=list)  # (probe_id, asn)
    rov: set = field(default_factory=set)

    # convenience views ------------------------------------------------
    def reldb(self) -> RelDb:
        return self.topo.reldb()

    def ixpdb(self) -> IxpDb:
        return self.topo.ixpdb()

    def rib_table(self, vp_id: str) -> RibTable:
        return RibTable(self.ribs[vp_id])

    def real_mismatch_share(self) -> float:
        n = len(self.pair_truth)
        return sum(p.real_mismatch for p in self.pair_truth) / n if n else 0.0


# ------------------------------------------------------------------ helpers

def _asns(topo, seq):
    return tuple(topo.asn[i] for i in seq)


def _host(p24: Prefix, k: int) -> int:
    return p24.base + 1 + (k % 250)


def generate_world(cfg: ScenarioConfig) -> SynthWorld:
    cfg.validate()
    rng = random.Random(cfg.seed)
    topo = build_topology(cfg, rng)
    plan = build_address_plan(topo, cfg, rng)
    rm = build_routers(topo, plan, cfg, rng)
    n = len(topo)

    classes: dict = {}
    prefix_class: dict = {}
    origin_of: dict = {}
    host_owner: dict = {}
    for i in range(n):
        classes[i] = compute_class(topo, i)
        for p in plan.prefixes[i]:
            prefix_class[p] = i
            origin_of[p] = i
            host_owner[plan.host_net[p]] = i
    fwd = Forwarder(topo, classes, prefix_class)

    # vantage points
    order = list(range(n))
    rng.shuffle(order)
    vp_as = sorted(order[:cfg.n_vps], key=lambda i: (topo.tier[i], i))
    vps = []
    for k, a in enumerate(vp_as):
        src = _host(plan.host_net[plan.prefixes[a][0]], 200 + k)
        vps.append(Vp(f"vp{k + 1:02d}", a, topo.asn[a], src))

    roa = RoaDb()
    roa_as = set()
    for i in range(n):
        if rng.random() < cfg.p_roa:
            roa_as.add(i)
            for p in plan.prefixes[i]:
                roa.add(Roa(p, p.length, topo.asn[i]))

    events: list[Event] = []
    rov: set = set()
    ev_rng = random.Random(f"{cfg.seed}:events")
    event_hosts: list[tuple[Prefix, int]] = []  # (host prefix, owner) added to every VP's targets

    # hidden hijacks ---------------------------------------------------
    # one VP AS deploys origin validation and hides every hijack from itself
    d_vp = ev_rng.choice(vps)
    d = d_vp.as_idx
    for _ in range(cfg.hidden_hijacks):
        for _try in range(400):
            v = ev_rng.randrange(n)
            h = ev_rng.randrange(n)
            if len({v, h, d}) < 3 or topo.org[topo.asn[v]] == topo.org[topo.asn[h]]:
                continue
            if topo.linked(v, h) or d in (v, h):
                continue
            f_p = plan.prefixes[v][0]
            f_s = plan.host_net[f_p]
            if f_s in prefix_class or any(e.kind == "HiddenHijack" and e.params["victim_idx"] == v for e in events):
                continue
            cls = compute_class(topo, h, blocked={d})
            if not classes[v].has_route(d):
                continue
            cid = f"hh{len(events)}"
            classes[cid] = cls
            prefix_class[f_s] = cid
            fwd.by_len.setdefault(f_s.length, {})[f_s.base] = f_s
            fwd.lens = sorted(fwd.by_len, reverse=True)
            seq = fwd.forward(d, _host(f_s, 7))
            others = [x for x in vps if x.as_idx != d and cls.has_route(x.as_idx)]
            cp = classes[v].path(d)
            if seq is None or seq[-1] != h or v in seq or not others or cp is None or h in cp:
                del classes[cid]
                del prefix_class[f_s]
                del fwd.by_len[f_s.length][f_s.base]
                continue
            rov.add(d)
            origin_of[f_s] = h
            event_hosts.append((f_s, h))
            if v not in roa_as:
                roa_as.add(v)
                for q in plan.prefixes[v]:
                    roa.add(Roa(q, q.length, topo.asn[v]))
            events.append(Event("HiddenHijack", {
                "victim_idx": v, "hijacker_idx": h, "rov_idx": d, "f_p": str(f_p), "f_s": str(f_s),
                "victim": topo.asn[v], "hijacker": topo.asn[h], "rov_vp": d_vp.vp_id}))
            break

    # bogus link interception -------------------------------------------
    for _ in range(cfg.bogus_links):
        for _try in range(200):
            v = ev_rng.randrange(n)
            m = ev_rng.randrange(n)
            if v == m or topo.linked(v, m) or topo.org[topo.asn[v]] == topo.org[topo.asn[m]]:
                continue
            p = plan.prefixes[v][0]
            if prefix_class[p] != v or plan.host_net[p] in prefix_class:
                continue
            cls = compute_class(topo, v, fake_providers=[m])
            cid = f"bogus{len(events)}"
            classes[cid] = cls
            prefix_class[p] = cid
            fwd.class_override[(m, cid)] = v
            hit = []
            dst = _host(plan.host_net[p], 3)
            for x in vps:
                cp = cls.path(x.as_idx)
                if cp is None or m not in cp or cp[cp.index(m) + 1] != v:
                    continue
                seq = fwd.forward(x.as_idx, dst)
                if seq is None or seq[-1] != v:
                    hit = []
                    break
                hit.append(x.vp_id)
            if not hit:
                prefix_class[p] = v
                del classes[cid]
                del fwd.class_override[(m, cid)]
                continue
            event_hosts.append((plan.host_net[p], v))
            events.append(Event("BogusLinkInterception", {
                "victim_idx": v, "attacker_idx": m, "prefix": str(p),
                "victim": topo.asn[v], "attacker": topo.asn[m], "vps": hit}))
            break

    # aggregation --------------------------------------------------------
    for _ in range(cfg.aggregations):
        for _try in range(200):
            b = ev_rng.randrange(n)
            if not topo.providers[b]:
                continue
            a = ev_rng.choice(topo.providers[b])
            f_b = plan.spare_net[a]
            if f_b in prefix_class:
                continue
            # a VP reaching the aggregate through the customer would see the
            # trace merely stop early, which no comparison can flag
            if any(b in (classes[a].path(x.as_idx) or ()) for x in vps if x.as_idx not in (a, b)):
                continue
            cls = compute_class(topo, b, confine={a, b}, no_export=[a])
            cid = f"agg{len(events)}"
            classes[cid] = cls
            prefix_class[f_b] = cid
            origin_of[f_b] = b
            host_owner[f_b] = b
            fwd.by_len.setdefault(f_b.length, {})[f_b.base] = f_b
            fwd.lens = sorted(fwd.by_len, reverse=True)
            event_hosts.append((f_b, b))
            events.append(Event("Aggregation", {
                "aggregator_idx": a, "customer_idx": b, "prefix": str(f_b),
                "aggregator": topo.asn[a], "customer": topo.asn[b]}))
            break

    # destinations per VP -------------------------------------------------
    announced = sorted((p for p in prefix_class if p in plan.host_net), key=lambda p: p.base)
    targets: dict[str, list[int]] = {}
    for x in vps:
        t_rng = random.Random(f"{cfg.seed}:targets:{x.vp_id}")
        if cfg.dsts_per_vp is None or cfg.dsts_per_vp >= len(announced) * cfg.hosts_per_prefix:
            picks = [(p, h) for p in announced for h in range(cfg.hosts_per_prefix)]
        else:
            picks = t_rng.sample([(p, h) for p in announced for h in range(cfg.hosts_per_prefix)],
                                 cfg.dsts_per_vp)
        dsts = sorted({_host(plan.host_net[p], h) for p, h in picks})
        dsts += [_host(f, 11) for f, _ in event_hosts]
        targets[x.vp_id] = dsts

    # forwarding + labels ------------------------------------------------
    sims = []
    for x in vps:
        for dst in targets[x.vp_id]:
            p = fwd.route_prefix(x.as_idx, dst)
            cp = None if p is None else classes[prefix_class[p]].path(x.as_idx)
            sims.append([x, dst, cp, fwd.forward(x.as_idx, dst)])
    by_link: dict[tuple[int, int], set] = {}

    def index(k, add=True):
        seq = sims[k][3]
        for a, b in zip(seq or (), (seq or ())[1:]):
            if add:
                by_link.setdefault((a, b), set()).add(k)
            else:
                by_link.get((a, b), set()).discard(k)

    for k in range(len(sims)):
        index(k)
    detour_sites: set = set()

    def add_detour() -> bool:
        """Make some AS ``a`` send traffic for a link neighbour ``b`` through a
        third AS ``c`` that also reaches ``b`` directly."""
        clean = [k for k, s_ in enumerate(sims) if s_[3] is not None and s_[2] == s_[3] and len(s_[3]) > 2]
        for _try in range(400):
            if not clean:
                return False
            seq = sims[ev_rng.choice(clean)][3]
            t = ev_rng.randrange(len(seq) - 1)
            a, b = seq[t], seq[t + 1]
            vias = [c for c in topo.neighbors(a) if c != b and topo.linked(c, b)
                    and not ({a, b, c} & detour_sites)]
            if not vias or a in detour_sites or b in detour_sites:
                continue
            c = ev_rng.choice(vias)
            scope = [p for p in announced if isinstance(prefix_class[p], int)
                     and classes[prefix_class[p]].nh[a] == b and classes[prefix_class[p]].nh[c] == b
                     and (a, p) not in fwd.nh_override]
            # partial default route: the link keeps carrying the other half
            cap = min(cfg.detour_max_prefixes, len(scope) // 2)
            if cap == 0:
                continue
            scope = sorted(ev_rng.sample(scope, cap), key=lambda q: q.base)
            for p in scope:
                fwd.nh_override[(a, p)] = c
            detour_sites.update((a, b, c))
            for k in sorted(by_link.get((a, b), ())):
                index(k, add=False)
                x, dst = sims[k][0], sims[k][1]
                sims[k][3] = fwd.forward(x.as_idx, dst)
                index(k)
            events.append(Event("DefaultRouteDetour", {
                "as_idx": a, "link_idx": b, "via_idx": c, "n_prefixes": len(scope),
                "as": topo.asn[a], "link": topo.asn[b], "via": topo.asn[c]}))
            return True
        return False

    for _ in range(cfg.default_detours):
        add_detour()
    if cfg.detour_pair_rate > 0 and sims:
        while True:
            bad = sum(1 for s_ in sims if s_[2] is not None and s_[3] is not None and s_[2] != s_[3])
            if bad / len(sims) >= cfg.detour_pair_rate or not add_detour():
                break

    # RIBs ---------------------------------------------------------------
    ribs: dict[str, list[RibEntry]] = {}
    for x in vps:
        entries = []
        for p in sorted(prefix_class, key=lambda q: (q.base, q.length)):
            path = classes[prefix_class[p]].path(x.as_idx)
            if path is not None:
                entries.append(RibEntry(p, _asns(topo, path), RIB_TIME))
        ribs[x.vp_id] = entries

    # traces ---------------------------------------------------------------
    traces: dict[str, list[RawTrace]] = {x.vp_id: [] for x in vps}
    pair_truth = []
    for x, dst, cp, seq in sims:
        if seq is None or cp is None:
            continue
        owner = _owner_of_host(dst, host_owner)
        reached = owner is not None and seq[-1] == owner
        t_rng = random.Random(f"{cfg.seed}:{x.vp_id}:{dst}")
        tr = simulate_trace(topo, rm, seq, dst, x.src_ip, TRACE_TIME + len(traces[x.vp_id]), x.vp_id,
                            set(cp), reached, cfg.p_third_party, cfg.p_dst_silent, t_rng)
        traces[x.vp_id].append(tr)
        real = list(cp) != list(seq)
        tags = _event_tags(events, cp, seq) if real else ()
        pair_truth.append(PairTruth(x.vp_id, dst, _asns(topo, cp), _asns(topo, seq), real, tags))

    # truth and noisy base mapping ---------------------------------------
    seen_ips = sorted({h[0] for ts in traces.values() for t in ts for h in t.hops if h})
    truth_entries = {}
    for ip in seen_ips:
        own = rm.owner_of_ip.get(ip)
        if own is None:
            own = _owner_of_host(ip, host_owner)
        truth_entries[ip] = topo.asn[own]
    truth = MappingTable("truth", truth_entries)
    base, injected = _noisy_mapping(truth, topo, cfg, rm)

    probe_rng = random.Random(f"{cfg.seed}:probes")
    probe_as = sorted(probe_rng.sample(range(n), min(cfg.n_probe_ases, n)))
    probes = [(f"probe{k + 1:03d}", topo.asn[a]) for k, a in enumerate(probe_as)]

    return SynthWorld(cfg, topo, plan, rm, classes, prefix_class, origin_of, host_owner, vps, ribs,
                      traces, roa, events, truth, base, pair_truth, injected, probes, rov)


def _event_tags(events, cp, seq) -> tuple:
    """Events whose footprint shows up where the forwarded path leaves the
    control-plane path."""
    links = set(zip(seq, seq[1:]))
    tags = []
    for k, e in enumerate(events):
        q = e.params
        if e.kind == "DefaultRouteDetour":
            hit = (q["as_idx"], q["via_idx"]) in links
        elif e.kind == "HiddenHijack":
            hit = seq[-1] == q["hijacker_idx"] and cp[-1] == q["victim_idx"]
        elif e.kind == "BogusLinkInterception":
            hit = (q["attacker_idx"], q["victim_idx"]) in set(zip(cp, cp[1:]))
        else:
            hit = seq[-1] == q["customer_idx"] and cp[-1] == q["aggregator_idx"]
        if hit:
            tags.append(f"{k}:{e.kind}")
    return tuple(tags)


def _owner_of_host(ip: int, host_owner: dict) -> Optional[int]:
    return host_owner.get(Prefix(ip & 0xFFFFFF00, 24))


def _noisy_mapping(truth: MappingTable, topo: Topology, cfg: ScenarioConfig, rm: RouterMap):
    rng = random.Random(f"{cfg.seed}:noise")
    ips = sorted(truth.entries)
    k = round(cfg.base_error_rate * len(ips))
    wrong_ips = sorted(rng.sample(ips, k))
    out = dict(truth.entries)
    injected = {}
    fabric = {}
    for x in topo.ixps:
        for ip, owner in rm.owner_of_ip.items():
            if x.prefix.covers(ip):
                fabric[ip] = x
    by_org: dict[str, list[int]] = {}
    for a, o in topo.org.items():
        by_org.setdefault(o, []).append(a)
    all_asns = topo.asn
    for ip in wrong_ips:
        right = truth.entries[ip]
        i = topo.index[right]
        nbrs = [topo.asn[j] for j in topo.neighbors(i)]
        sibs = [a for a in by_org[topo.org[right]] if a != right]
        r = rng.random()
        mix = cfg.error_mix
        wrong = None
        kind = None
        if r < mix[0] + mix[1] and r >= mix[0] and sibs:
            wrong, kind = rng.choice(sibs), "Sibling"
        elif r >= mix[0] + mix[1] and r < mix[0] + mix[1] + mix[2] and ip in fabric:
            members = [topo.asn[m] for m in fabric[ip].members if topo.asn[m] != right]
            if members:
                wrong, kind = rng.choice(members), "IXP"
        elif r >= mix[0] + mix[1] + mix[2]:
            excluded = set(nbrs) | set(sibs) | {right}
            for _ in range(50):
                cand = rng.choice(all_asns)
                if cand not in excluded:
                    wrong, kind = cand, "Unknown"
                    break
        if wrong is None:
            wrong, kind = rng.choice(nbrs), "Neighbor"
        out[ip] = wrong
        injected[ip] = (wrong, right, kind)
    if cfg.unmap_rate > 0:
        rest = [ip for ip in ips if ip not in injected]
        for ip in rng.sample(rest, round(cfg.unmap_rate * len(ips))):
            out[ip] = None
    return MappingTable("noisy", out), injected


# ------------------------------------------------------------------- files

def write_world(world: SynthWorld, out) -> dict:
    """Emit the world in the on-disk formats the pipeline reads; returns a
    name -> path map."""
    out = ensure_dir(out)
    ensure_dir(out / "ribs")
    ensure_dir(out / "traces")
    ensure_dir(out / "mappings")
    paths = {}
    for x in world.vps:
        write_rib(world.ribs[x.vp_id], out / "ribs" / f"{x.vp_id}.rib")
        write_traces(world.traces[x.vp_id], out / "traces" / f"{x.vp_id}.txt")
    paths["ribs"] = out / "ribs"
    paths["traces"] = out / "traces"
    write_reldb(world.reldb(), out / "rel.txt", out / "orgs.txt")
    paths["rel"], paths["orgs"] = out / "rel.txt", out / "orgs.txt"
    write_roadb(world.roa, out / "roa.txt")
    paths["roa"] = out / "roa.txt"
    write_ixpdb(world.ixpdb(), out / "ixp.txt")
    paths["ixp"] = out / "ixp.txt"
    write_mapping(world.truth, out / "truth_mapping.txt")
    paths["truth"] = out / "truth_mapping.txt"
    write_mapping(world.base, out / "mappings" / "noisy.txt")
    paths["noisy"] = out / "mappings" / "noisy.txt"
    with open(out / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["event_id", "kind", "params"])
        for k, e in enumerate(world.events):
            params = {a: b for a, b in e.params.items() if not a.endswith("_idx")}
            w.writerow([k, e.kind, json.dumps(params, sort_keys=True)])
    paths["events"] = out / "events.csv"
    with open(out / "pairs_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vp", "dst", "c_path", "forwarded", "real_mismatch", "events"])
        for p in world.pair_truth:
            w.writerow([p.vp, int_to_ip(p.dst), " ".join(map(str, p.c_path)), " ".join(map(str, p.fwd)),
                        int(p.real_mismatch), ";".join(p.events)])
    paths["pairs_truth"] = out / "pairs_truth.csv"
    with open(out / "injected_errors.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ip", "wrong", "right", "kind"])
        for ip in sorted(world.injected_errors):
            wrong, right, kind = world.injected_errors[ip]
            w.writerow([int_to_ip(ip), wrong, right, kind])
    paths["injected_errors"] = out / "injected_errors.csv"
    with open(out / "vps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vp_id", "asn", "src_ip"])
        for x in world.vps:
            w.writerow([x.vp_id, x.asn, int_to_ip(x.src_ip)])
    paths["vps"] = out / "vps.csv"
    with open(out / "probes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_id", "asn"])
        for pid, asn in world.probes:
            w.writerow([pid, asn])
    paths["probes"] = out / "probes.csv"
    cfg = asdict(world.cfg)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")
    paths["config"] = out / "config.json"
    return {k: str(v) for k, v in paths.items()}


def world_pairs(world: SynthWorld, vps: Optional[list] = None):
    """Cleanse and pair the world's traces per VP, as the pipeline would."""
    from ..ingest import cleanse_traces, pair_paths

    pairs = []
    for x in world.vps:
        if vps is not None and x.vp_id not in vps:
            continue
        clean, _ = cleanse_traces(world.traces[x.vp_id])
        got, _ = pair_paths(clean, world.rib_table(x.vp_id), start_id=len(pairs))
        pairs.extend(got)
    return pairs
