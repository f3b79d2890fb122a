"""Batch pipeline driver.

Every subcommand reads its inputs from flags (or from artifacts an earlier
stage left under ``--out``), writes its artifacts there and a
``<stage>_summary.json`` listing them with row counts.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional

from .core import FormatError, ensure_dir, load_ixpdb, load_reldb, load_roadb
from .ribstore import MappingTable, RibTable, load_mapping, write_mapping

STAGES = ("synth", "cleanse", "pair", "compare", "visv", "learn-train", "learn-correct",
          "analyze", "detect-hh", "detect-links", "report")

PRESETS = {
    "tiny": dict(n_tier1=4, n_tier2=16, n_stub=60, n_vps=6, n_ixps=1, ixp_members=6,
                 n_sibling_pairs=3, extra_prefixes=(1, 2), hidden_hijacks=1, bogus_links=1,
                 aggregations=1, detour_pair_rate=0.03),
    "small": dict(n_tier1=6, n_tier2=60, n_stub=240, n_vps=12, dsts_per_vp=800, n_ixps=3,
                  ixp_members=10, n_sibling_pairs=8, extra_prefixes=(1, 3), hidden_hijacks=2,
                  bogus_links=2, aggregations=1, detour_pair_rate=0.03),
    "medium": dict(n_tier1=10, n_tier2=150, n_stub=840, n_vps=20, dsts_per_vp=2500, n_ixps=5,
                   ixp_members=15, n_sibling_pairs=20, extra_prefixes=(1, 3), hidden_hijacks=2,
                   bogus_links=2, aggregations=2, detour_pair_rate=0.03),
}


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _files(specs, suffixes) -> list[Path]:
    out = []
    for s in specs or ():
        p = Path(s)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in suffixes))
        elif p.exists():
            out.append(p)
        else:
            raise ConfigError(f"no such file or directory: {s}")
    return out


def _mappings(args) -> list[MappingTable]:
    out = []
    for spec in args.mapping or ():
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--mapping expects name=path, got {spec!r}")
        if not Path(path).exists():
            raise ConfigError(f"no such mapping file: {path}")
        out.append(load_mapping(path, method=name))
    return out


def _ixp(args):
    return load_ixpdb(args.ixp) if args.ixp else None


def _reldb(args):
    if not args.rel:
        raise ConfigError("--rel is required for this stage")
    return load_reldb(args.rel, args.orgs)


def _ribs(args, ixp=None) -> dict[str, RibTable]:
    from .ingest import load_rib

    files = _files(args.rib, {".rib", ".txt"})
    if not files:
        raise ConfigError("--rib is required for this stage")
    return {f.stem: load_rib(f, ixp)[0] for f in files}


def _merged_rib(ribs: dict[str, RibTable]) -> RibTable:
    if len(ribs) == 1:
        return next(iter(ribs.values()))
    return RibTable(e for k in sorted(ribs) for e in ribs[k])


def _pairs(args):
    from .ingest import load_pairs

    path = Path(args.pairs) if args.pairs else Path(args.out) / "pairs.txt"
    if not path.exists():
        raise ConfigError(f"no pair file at {path}; run the pair stage first")
    return load_pairs(path)


def _stage_mapping(args, default_name: str) -> MappingTable:
    """The mapping a stage works under: the first --mapping, else the
    named table an earlier stage wrote."""
    ms = _mappings(args)
    if ms:
        return ms[0]
    path = Path(args.out) / "mappings" / f"{default_name}.txt"
    if not path.exists():
        raise ConfigError(f"no --mapping given and {path} does not exist")
    return load_mapping(path, method=default_name)


def _rows(path) -> Optional[int]:
    if Path(path).suffix not in (".csv", ".txt"):
        return None
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    if Path(path).suffix == ".csv":
        return max(0, len(lines) - 1)
    return len(lines)


def _summary(args, stage: str, artifacts: dict, stats: dict) -> dict:
    out = Path(args.out)
    doc = {
        "stage": stage,
        "artifacts": {k: {"path": os.path.relpath(v, out), "rows": _rows(v)}
                      for k, v in sorted(artifacts.items()) if Path(v).is_file()},
        "stats": stats,
    }
    with open(out / f"{stage.replace('-', '_')}_summary.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def _r(x, nd=6):
    return None if x is None else round(float(x), nd)


def mismatch_cdf(ratios) -> list[tuple[float, float]]:
    """Empirical CDF points over per-dataset mismatch ratios."""
    xs = sorted(r for r in ratios if r is not None)
    n = len(xs)
    return [(x, (k + 1) / n) for k, x in enumerate(xs)]


# ------------------------------------------------------------------ stages

def cmd_synth(args):
    from .synthlab import ScenarioConfig, generate_world, write_world

    kw = dict(PRESETS[args.preset])
    if args.vps is not None:
        kw["n_vps"] = args.vps
    if args.hidden_hijacks is not None:
        kw["hidden_hijacks"] = args.hidden_hijacks
    cfg = ScenarioConfig(seed=args.seed, **kw)
    cfg.validate()
    world = generate_world(cfg)
    paths = write_world(world, args.out)
    files = {k: v for k, v in paths.items() if Path(v).is_file()}
    stats = {"ases": len(world.topo), "vps": len(world.vps),
             "traces": sum(len(v) for v in world.traces.values()),
             "events": len(world.events), "injected_errors": len(world.injected_errors),
             "real_mismatch_share": _r(world.real_mismatch_share())}
    return _summary(args, "synth", files, stats)


def cmd_cleanse(args):
    from .ingest import cleanse_traces, load_rib, load_traces, write_traces

    ixp = _ixp(args)
    out = ensure_dir(Path(args.out) / "clean")
    arts, total = {}, None
    for f in _files(args.traces, {".txt", ".trace"}):
        kept, rep = cleanse_traces(load_traces(f))
        p = out / f"{f.stem}.txt"
        write_traces(kept, p)
        arts[f"clean/{f.stem}"] = p
        total = rep if total is None else total.merge(rep)
    bgp = {}
    for f in _files(args.rib, {".rib", ".txt"}):
        _, rep = load_rib(f, ixp)
        bgp[f.stem] = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
    stats = {"traces": {} if total is None else {k: getattr(total, k) for k in total.__dataclass_fields__},
             "bgp": bgp}
    return _summary(args, "cleanse", arts, stats)


def cmd_pair(args):
    from .ingest import cleanse_traces, discard_second_hop_bifurcation, load_traces, pair_paths, write_pairs

    ixp = _ixp(args)
    ribs = _ribs(args, ixp)
    tspec = args.traces or [str(Path(args.out) / "clean")]
    pairs, no_bgp = [], {}
    for f in _files(tspec, {".txt", ".trace"}):
        rib = ribs.get(f.stem)
        if rib is None:
            if len(ribs) != 1:
                raise ConfigError(f"no RIB named {f.stem} for trace file {f}")
            rib = next(iter(ribs.values()))
        clean, _ = cleanse_traces(load_traces(f))
        got, nb = pair_paths(clean, rib, start_id=len(pairs))
        pairs.extend(got)
        no_bgp[f.stem] = nb
    dropped = 0
    tables = _mappings(args)
    if tables:
        pairs, dropped = discard_second_hop_bifurcation(pairs, tables, ixp)
    p = ensure_dir(args.out) / "pairs.txt"
    write_pairs(pairs, p)
    return _summary(args, "pair", {"pairs": p},
                    {"pairs": len(pairs), "no_bgp": no_bgp, "second_hop_dropped": dropped})


def cmd_compare(args):
    from .compare import compare_corpus, write_compare_reports

    ixp = _ixp(args)
    pairs = _pairs(args)
    tables = _mappings(args)
    if not tables:
        raise ConfigError("compare needs at least one --mapping")
    by_vp: dict = {}
    for p in pairs:
        by_vp.setdefault(p.vp, []).append(p)
    reports = []
    for t in tables:
        for vp in sorted(by_vp):
            reports.append(compare_corpus(by_vp[vp], t, ixp, dataset=f"{t.method}/{vp}"))
    out = ensure_dir(args.out)
    p, h = out / "compare.csv", out / "compare_hist.csv"
    write_compare_reports(reports, p, h)
    stats = {}
    for t in tables:
        rs = [r for r in reports if r.dataset.startswith(t.method + "/")]
        tot = sum(r.total for r in rs)
        mm = sum(r.mismatched for r in rs)
        stats[t.method] = {"pairs": tot, "mismatched": mm, "ratio": _r(mm / tot) if tot else None}
    return _summary(args, "compare", {"compare": p, "compare_hist": h}, stats)


def cmd_visv(args):
    from .ribstore import build_rib_ixp_mapping, build_rib_mapping
    from .visv import merge_primitive_sets, visv_iterate, write_vote_audit

    ixp = _ixp(args)
    pairs = _pairs(args)
    tables = _mappings(args)
    if args.rib_bases:
        rib = _merged_rib(_ribs(args, ixp))
        ips = sorted({h for p in pairs for h in p.d.hops if h is not None})
        at = max((p.c.timestamp for p in pairs), default=0)
        tables.append(build_rib_mapping(rib, ips, at))
        if ixp is not None:
            tables.append(build_rib_ixp_mapping(rib, ixp, ips, at))
    if not tables:
        raise ConfigError("visv needs at least one base mapping")
    out = ensure_dir(Path(args.out) / "visv")
    arts, stats, prims = {}, {}, []
    for t in tables:
        res = visv_iterate(pairs, t, ixp, jobs=args.jobs)
        prims.append(res.primitive)
        p = out / f"{t.method}.txt"
        write_mapping(res.primitive.as_table(), p)
        a = out / f"{t.method}_votes.csv"
        write_vote_audit(res.verdicts, a)
        arts[f"primitive/{t.method}"], arts[f"votes/{t.method}"] = p, a
        stats[t.method] = {"iterations": res.iterations, "determined": len(res.primitive.mapping),
                           "coverage": _r(res.coverage), "removed_pairs": len(res.removed_pair_ids)}
    merged = merge_primitive_sets(prims) if len(prims) > 1 else prims[0].as_table().copy("visv")
    p = ensure_dir(Path(args.out) / "mappings") / "visv.txt"
    write_mapping(merged, p)
    arts["visv"] = p
    stats["merged"] = len(merged)
    return _summary(args, "visv", arts, stats)


def _trace_corpus(args, pairs, ixp):
    from .learncorrect import TraceCorpus

    rib = _merged_rib(_ribs(args, ixp))
    at = max((p.c.timestamp for p in pairs), default=0)
    return TraceCorpus([p.d for p in pairs], _reldb(args), rib, ixp, at)


def cmd_learn_train(args):
    from .learncorrect import evaluate, build_samples, train, write_samples

    ixp = _ixp(args)
    pairs = _pairs(args)
    tables = _mappings(args)
    if not tables:
        raise ConfigError("learn-train needs the base mapping as --mapping")
    base = tables[0]
    lpath = Path(args.labels) if args.labels else Path(args.out) / "mappings" / "visv.txt"
    if not lpath.exists():
        raise ConfigError(f"no label table at {lpath}; run visv or pass --labels")
    labels = load_mapping(lpath, method="labels")
    corpus = _trace_corpus(args, pairs, ixp)
    samples = build_samples(corpus, base, labels, jobs=args.jobs)
    scorer = train(samples.X, samples.y_wrong, seed=args.seed)
    out = ensure_dir(args.out)
    sp, mp_ = out / "samples.csv", out / "model.pkl"
    write_samples(samples, sp)
    scorer.save(mp_)
    m = evaluate(scorer, samples.X, samples.y_wrong)
    imp = out / "importances.csv"
    with open(imp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "importance"])
        for k, v in scorer.feature_importances().items():
            w.writerow([k, f"{v:.6f}"])
    stats = {"samples": len(samples.ips), "wrong": int(samples.y_wrong.sum()),
             "train_metrics": {k: _r(v) for k, v in m.as_dict().items()}}
    return _summary(args, "learn-train", {"samples": sp, "model": mp_, "importances": imp}, stats)


def cmd_learn_correct(args):
    from .learncorrect import CorrectionConfig, Scorer, run_correction, write_predictions, write_turn_log

    ixp = _ixp(args)
    pairs = _pairs(args)
    tables = _mappings(args)
    if not tables:
        raise ConfigError("learn-correct needs the base mapping as --mapping")
    base = tables[0]
    mpath = Path(args.model) if args.model else Path(args.out) / "model.pkl"
    if not mpath.exists():
        raise ConfigError(f"no model at {mpath}; run learn-train first")
    scorer = Scorer.load(mpath)
    corpus = _trace_corpus(args, pairs, ixp)
    cfg = CorrectionConfig(tie_threshold=args.tie_threshold, turn_floor=args.turn_floor)
    res = run_correction(corpus, base, scorer, cfg, jobs=args.jobs)
    out = ensure_dir(args.out)
    mp_ = ensure_dir(out / "mappings") / "corrected.txt"
    write_mapping(res.mapping, mp_)
    tl, pr = out / "turns.csv", out / "predictions.csv"
    write_turn_log(res, tl)
    ips = sorted(res.scores)
    write_predictions(ips, [res.mapping.entries[ip] for ip in ips], [res.scores[ip] for ip in ips], pr)
    stats = {"turns": len(res.turns), "corrected": len(res.corrected_ips),
             "newly_mapped": len(res.newly_mapped),
             "wrong_per_turn": [t.wrong for t in res.turns]}
    return _summary(args, "learn-correct", {"corrected": mp_, "turns": tl, "predictions": pr}, stats)


def _analysis(args, pairs, ixp):
    from .mismatch import analyze_pairs, rib_block_of

    m = _stage_mapping(args, "corrected")
    rib = _merged_rib(_ribs(args, ixp)) if args.rib else None
    an, cmps = analyze_pairs(pairs, m, ixp, rib_block_of(rib))
    return m, an, cmps


def cmd_analyze(args):
    from .mismatch import pattern_shares, write_analysis

    ixp = _ixp(args)
    pairs = _pairs(args)
    m, an, _ = _analysis(args, pairs, ixp)
    p = ensure_dir(args.out) / "analysis.csv"
    write_analysis(an, p)
    real = [a for a in an if a.real]
    stats = {"mapping": m.method, "pairs": len(an),
             "mismatched": sum(1 for a in an if a.label.value == "mismatch"),
             "real_mismatch": len(real),
             "patterns": {k: _r(v) for k, v in pattern_shares(an).items()}}
    return _summary(args, "analyze", {"analysis": p}, stats)


def cmd_detect_hh(args):
    from .mismatch import MissingRoaDb, detect_hidden_hijack, write_hh_report

    if not args.roa:
        raise MissingRoaDb("hidden-hijack detection needs ROA data (--roa)")
    ixp = _ixp(args)
    roa = load_roadb(args.roa)
    reldb = _reldb(args)
    ribs = _ribs(args, ixp)
    pairs = _pairs(args)
    _, an, cmps = _analysis(args, pairs, ixp)
    byid = {p.pair_id: p for p in pairs}
    real = [byid[a.pair_id] for a in an if a.real]
    cands, funnel = detect_hidden_hijack(real, cmps, ribs, roa, reldb)
    p = ensure_dir(args.out) / "hidden_hijacks.csv"
    write_hh_report(cands, p)
    return _summary(args, "detect-hh", {"hidden_hijacks": p},
                    {"funnel": funnel, "candidates": len(cands)})


def _load_probes(path) -> list[tuple[str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["probe_id"], int(r["asn"])) for r in csv.DictReader(fh)]


def cmd_detect_links(args):
    from .mismatch import (data_plane_links, detect_link_detour, emit_probe_plan, passive_filter,
                           real_segments, write_link_report, write_probe_plan)

    ixp = _ixp(args)
    pairs = _pairs(args)
    m, an, cmps = _analysis(args, pairs, ixp)
    links = detect_link_detour(real_segments(an, cmps))
    passive_filter(links, data_plane_links(pairs, m, ixp))
    probes = _load_probes(args.probes) if args.probes else []
    entries = [e for r in _ribs(args, ixp).values() for e in r] if args.rib else []
    rows = emit_probe_plan(links, probes, entries)
    out = ensure_dir(args.out)
    lp, pp = out / "links.csv", out / "probe_plan.csv"
    write_link_report(links, lp)
    write_probe_plan(rows, pp)
    counts = {}
    for ln in links:
        counts[ln.status.value] = counts.get(ln.status.value, 0) + 1
    return _summary(args, "detect-links", {"links": lp, "probe_plan": pp},
                    {"links": len(links), "status": dict(sorted(counts.items())), "probe_rows": len(rows)})


def cmd_report(args):
    from .visv import EmptyOverlap, evaluate_mapping

    out = ensure_dir(args.out)
    arts = {}
    # mismatch-ratio CDF per mapping
    ratios: dict[str, list] = {}
    cp = out / "compare.csv"
    if cp.exists():
        with open(cp, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                name = r["dataset"].split("/", 1)[0]
                if r["ratio"]:
                    ratios.setdefault(name, []).append(float(r["ratio"]))
    p = out / "mismatch_cdf.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mapping", "ratio", "cdf"])
        for name in sorted(ratios):
            for x, y in mismatch_cdf(ratios[name]):
                w.writerow([name, f"{x:.6f}", f"{y:.6f}"])
    arts["mismatch_cdf"] = p
    # error ratios against a reference table
    p = out / "error_ratios.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mapping", "right", "wrong", "unmap", "error_ratio"])
        if args.truth:
            truth = load_mapping(args.truth, method="truth")
            tables = _mappings(args)
            mdir = out / "mappings"
            if mdir.is_dir():
                tables += [load_mapping(q, method=q.stem) for q in sorted(mdir.glob("*.txt"))]
            for t in tables:
                try:
                    ev = evaluate_mapping(t, truth)
                except EmptyOverlap:
                    continue
                w.writerow([t.method, ev.right, ev.wrong, ev.unmap, f"{ev.ratio:.6f}"])
    arts["error_ratios"] = p
    # hidden-hijack funnel
    p = out / "hh_funnel.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "pairs"])
        sp = out / "detect_hh_summary.json"
        if sp.exists():
            funnel = json.loads(sp.read_text(encoding="utf-8"))["stats"]["funnel"]
            from .mismatch import HH_STAGES

            for k in HH_STAGES:
                w.writerow([k, funnel[k]])
    arts["hh_funnel"] = p
    return _summary(args, "report", arts, {"datasets": {k: len(v) for k, v in sorted(ratios.items())}})


COMMANDS = {
    "synth": cmd_synth, "cleanse": cmd_cleanse, "pair": cmd_pair, "compare": cmd_compare,
    "visv": cmd_visv, "learn-train": cmd_learn_train, "learn-correct": cmd_learn_correct,
    "analyze": cmd_analyze, "detect-hh": cmd_detect_hh, "detect-links": cmd_detect_links,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--rib", action="append", help="RIB file or directory (repeatable)")
    common.add_argument("--traces", action="append", help="trace file or directory (repeatable)")
    common.add_argument("--rel", help="AS relationship file")
    common.add_argument("--orgs", help="AS organization file")
    common.add_argument("--roa", help="ROA file")
    common.add_argument("--ixp", help="IXP prefix/ASN file")
    common.add_argument("--mapping", action="append", metavar="NAME=PATH",
                        help="IP-to-AS mapping table (repeatable)")
    common.add_argument("--pairs", help="pair file (default: OUT/pairs.txt)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--tie-threshold", type=float, default=0.1)
    common.add_argument("--turn-floor", type=int, default=None)

    ap = argparse.ArgumentParser(prog="cdmatch", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name == "synth":
            sp.add_argument("--preset", choices=sorted(PRESETS), default="small")
            sp.add_argument("--vps", type=int, default=None)
            sp.add_argument("--hidden-hijacks", type=int, default=None)
        elif name == "visv":
            sp.add_argument("--rib-bases", action="store_true",
                            help="also seed from RIB and RIB+IXP mappings built from --rib")
        elif name == "learn-train":
            sp.add_argument("--labels", help="label table (default: OUT/mappings/visv.txt)")
        elif name == "learn-correct":
            sp.add_argument("--model", help="model file (default: OUT/model.pkl)")
        elif name == "detect-links":
            sp.add_argument("--probes", help="probe inventory CSV (probe_id,asn)")
        elif name == "report":
            sp.add_argument("--truth", help="reference mapping for error ratios")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        doc = COMMANDS[args.command](args)
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(doc["stats"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
