"""Learn which IP-to-AS mappings are wrong from their path context, then
correct them turn by turn.

Each (IP, ASN) mapping is described by how the ASN sits among its IP-level
and AS-level neighbours across every trace the IP appears in. A tree
ensemble trained on VISV-labelled mappings scores the probability that a
mapping is right; mappings scored wrong are replaced by the best-scoring
candidate drawn from four ordered candidate groups.
"""
from __future__ import annotations

import csv
import enum
import multiprocessing as mp
import pickle
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier

from .core import IxpDb, RelDb, RelKind, int_to_ip
from .ribstore import IXP_WILDCARD, MappingTable, RibTable, map_rib_match, map_rib_plus_ixp

MODEL_VERSION = 1

RATE_FEATURES = (
    "prev_sameAS_rate",
    "succ_sameAS_rate",
    "succ_ip_uncertain_rate",
    "prev_asn_uncertain_rate",
    "succ_asn_uncertain_rate",
    "valley_normal_rate",
    "valley_abnormal_rate",
    "valley_seminormal_rate",
    "prev_asnrel_unknown_rate",
    "succ_asnrel_unknown_rate",
)
FEATURE_NAMES = ("bdr_rib_rel",) + tuple(f"{n}_{v}" for n in RATE_FEATURES for v in ("rel", "abs"))


class Valley(enum.Enum):
    VALLEY_FREE = "valley-free"
    PART_VALLEY_FREE = "part-valley-free"
    NON_VALLEY_FREE = "non-valley-free"


class SingleClassCorpus(ValueError):
    pass


class EmptyCandidates(ValueError):
    pass


# relationship of the mapping under test against the RIB+IXP mapping
RIB_SAME, RIB_PROVIDER, RIB_CUSTOMER, RIB_PEER, RIB_SIBLING, RIB_NONE, RIB_IXP, RIB_UNMAP = range(8)

_UP, _FLAT, _DOWN = RelKind.C2P, RelKind.P2P, RelKind.P2C


def classify_triple(reldb: RelDb, x: int, s: int, y: int) -> Valley:
    """Shape of the AS triple x -> s -> y. A sibling link never breaks the
    shape; an unknown link makes the triple non-valley-free."""
    a, b = reldb.lookup(x, s), reldb.lookup(s, y)
    if RelKind.SIBLING in (a, b):
        return Valley.VALLEY_FREE
    if RelKind.NONE in (a, b):
        return Valley.NON_VALLEY_FREE
    if a == _UP or b == _DOWN:
        return Valley.VALLEY_FREE
    # a is p2p or p2c, b is p2p or c2p
    if b == _FLAT:
        return Valley.PART_VALLEY_FREE
    return Valley.NON_VALLEY_FREE


def _links_known(reldb: RelDb, x: int, s: int, y: int) -> bool:
    return reldb.lookup(x, s) != RelKind.NONE and reldb.lookup(s, y) != RelKind.NONE


def rib_rel_code(reldb: RelDb, asn: int, rib_asn) -> int:
    if rib_asn == IXP_WILDCARD:
        return RIB_IXP
    if rib_asn is None:
        return RIB_UNMAP
    if rib_asn == asn:
        return RIB_SAME
    k = reldb.lookup(asn, rib_asn)
    return {RelKind.C2P: RIB_PROVIDER, RelKind.P2C: RIB_CUSTOMER, RelKind.P2P: RIB_PEER,
            RelKind.SIBLING: RIB_SIBLING}.get(k, RIB_NONE)


# ------------------------------------------------------------------ corpus

@dataclass
class FeatureVector:
    ip: int
    asn: int
    values: tuple

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]


@dataclass
class _Context:
    """Neighbourhood of one occurrence of an IP under a given mapping."""
    prev_ip: Optional[int]
    succ_ip: Optional[int]
    succ_ip_unc: bool
    prev_as: Optional[int]
    succ_as: Optional[int]
    prev_as_unc: bool
    succ_as_unc: bool


class TraceCorpus:
    """IP-level traces plus the registries features are computed from.

    Traces that stop short of the destination get an unresponsive hop and
    the destination appended so their last hop has a successor context.
    """

    def __init__(self, traces: Iterable, reldb: RelDb, rib: Optional[RibTable] = None,
                 ixp: Optional[IxpDb] = None, at: int = 0):
        self.reldb = reldb
        self.rib = rib
        self.ixp = ixp
        self.at = at
        self.paths: list[tuple] = []
        self.occ: dict[int, list[tuple[int, int]]] = {}
        appended: set = set()  # (path, position) of appended destinations
        for t in traces:
            hops = tuple(t.hops)
            if not t.reached and t.dst not in hops:
                hops = hops + (None, t.dst)
                appended.add((len(self.paths), len(hops) - 1))
            k = len(self.paths)
            self.paths.append(hops)
            for pos, ip in enumerate(hops):
                if ip is not None:
                    self.occ.setdefault(ip, []).append((k, pos))
        # destinations that only ever appear appended are context only
        self.context_only = {ip for ip, occ in self.occ.items() if all(o in appended for o in occ)}
        self.ips = sorted(ip for ip in self.occ if ip not in self.context_only)
        self._prefix: dict[int, object] = {}
        self._rib_ixp: dict[int, object] = {}
        self._sib: dict[int, list[int]] = {}

    def prefix_key(self, ip: int):
        key = self._prefix.get(ip)
        if key is None:
            p = self.rib.covering_prefix(ip) if self.rib is not None else None
            key = self._prefix[ip] = p if p is not None else ("/24", ip >> 8)
        return key

    def rib_ixp(self, ip: int):
        if ip not in self._rib_ixp:
            if self.rib is None:
                self._rib_ixp[ip] = None
            elif self.ixp is not None:
                self._rib_ixp[ip] = map_rib_plus_ixp(self.rib, self.ixp, ip, self.at)
            else:
                self._rib_ixp[ip] = map_rib_match(self.rib, ip, self.at)
        return self._rib_ixp[ip]

    def siblings(self, asn: int) -> list[int]:
        s = self._sib.get(asn)
        if s is None:
            s = self._sib[asn] = self.reldb.siblings(asn)
        return s

    def lookup_fn(self, cur: dict) -> Callable[[int], Optional[int]]:
        """Mapping lookup that falls back to RIB-match for appended
        destinations missing from the table."""
        ctx = self.context_only

        def get(ip):
            a = cur.get(ip)
            if a is None and ip in ctx and self.rib is not None:
                a = map_rib_match(self.rib, ip, self.at)
            return a
        return get

    def neighbours(self, ip: int) -> set[int]:
        out = set()
        for k, pos in self.occ.get(ip, ()):
            p_ = self.paths[k]
            for j in (pos - 1, pos + 1):
                if 0 <= j < len(p_) and p_[j] is not None:
                    out.add(p_[j])
        return out

    # -------------------------------------------------------------- context

    def contexts(self, ip: int, asn: int, get) -> list[_Context]:
        out = []
        for k, pos in self.occ.get(ip, ()):
            out.append(self._context(self.paths[k], pos, ip, asn, get))
        return out

    @staticmethod
    def _context(path, pos, ip, asn, get) -> _Context:
        def m(h):
            if h is None:
                return None
            return asn if h == ip else get(h)

        # IP level: nearest hop carrying a mapping on each side
        j = pos - 1
        while j >= 0 and m(path[j]) is None:
            j -= 1
        prev_ip = path[j] if j >= 0 else None
        j = pos + 1
        unc = False
        while j < len(path) and m(path[j]) is None:
            unc = True
            j += 1
        succ_ip = path[j] if j < len(path) else None
        # AS level: first different AS on each side, skipping the own run
        prev_as = None
        p_unc = False
        j = pos - 1
        while j >= 0:
            a = m(path[j])
            if a is None:
                p_unc = True
            elif a == asn:
                p_unc = False
            else:
                prev_as = a
                break
            j -= 1
        if prev_as is None:
            p_unc = False
        succ_as = None
        s_unc = False
        j = pos + 1
        while j < len(path):
            a = m(path[j])
            if a is None:
                s_unc = True
            elif a == asn:
                s_unc = False
            else:
                succ_as = a
                break
            j += 1
        if succ_as is None:
            s_unc = False
        return _Context(prev_ip, succ_ip, unc or succ_ip is None, prev_as, succ_as, p_unc, s_unc)


def _ratio(n, d) -> float:
    return n / d if d else 0.0


def extract_features(ip: int, asn: int, corpus: TraceCorpus, get) -> FeatureVector:
    """Features of mapping ``ip`` to ``asn`` with every other IP looked up
    through ``get``."""
    reldb = corpus.reldb
    ctxs = corpus.contexts(ip, asn, get)
    vals = {}
    vals["bdr_rib_rel"] = float(rib_rel_code(reldb, asn, corpus.rib_ixp(ip)))

    # same-AS neighbours; distinct patterns are neighbour prefixes
    for side in ("prev", "succ"):
        occ_n = occ_same = 0
        pref_all: set = set()
        pref_same: set = set()
        for c in ctxs:
            nb = c.prev_ip if side == "prev" else c.succ_ip
            if nb is None:
                continue
            key = corpus.prefix_key(nb)
            occ_n += 1
            pref_all.add(key)
            if get(nb) == asn:
                occ_same += 1
                pref_same.add(key)
        vals[f"{side}_sameAS_rate_rel"] = _ratio(len(pref_same), len(pref_all))
        vals[f"{side}_sameAS_rate_abs"] = _ratio(occ_same, occ_n)

    # successor IP uncertainty, patterns are successor prefixes
    keys_all: set = set()
    keys_unc: set = set()
    n_unc = 0
    for c in ctxs:
        key = corpus.prefix_key(c.succ_ip) if c.succ_ip is not None else None
        keys_all.add(key)
        if c.succ_ip_unc:
            n_unc += 1
            keys_unc.add(key)
    vals["succ_ip_uncertain_rate_rel"] = _ratio(len(keys_unc), len(keys_all))
    vals["succ_ip_uncertain_rate_abs"] = _ratio(n_unc, len(ctxs))

    # AS neighbours: uncertainty and unknown relationships
    for side in ("prev", "succ"):
        n = n_unc = n_unk = 0
        d_all: set = set()
        d_unc: set = set()
        d_unk: set = set()
        for c in ctxs:
            nb = c.prev_as if side == "prev" else c.succ_as
            if nb is None:
                continue
            u = c.prev_as_unc if side == "prev" else c.succ_as_unc
            unk = reldb.lookup(nb, asn) == RelKind.NONE
            n += 1
            d_all.add(nb)
            if u:
                n_unc += 1
                d_unc.add(nb)
            if unk:
                n_unk += 1
                d_unk.add(nb)
        vals[f"{side}_asn_uncertain_rate_rel"] = _ratio(len(d_unc), len(d_all))
        vals[f"{side}_asn_uncertain_rate_abs"] = _ratio(n_unc, n)
        vals[f"{side}_asnrel_unknown_rate_rel"] = _ratio(len(d_unk), len(d_all))
        vals[f"{side}_asnrel_unknown_rate_abs"] = _ratio(n_unk, n)

    # valley shape over triples whose links are both known
    occ_cnt: Counter = Counter()
    distinct: dict[tuple, Valley] = {}
    for c in ctxs:
        if c.prev_as is None or c.succ_as is None or c.prev_as == c.succ_as:
            continue
        t = (c.prev_as, c.succ_as)
        v = distinct.get(t)
        if v is None:
            if not _links_known(reldb, c.prev_as, asn, c.succ_as):
                continue
            v = distinct[t] = classify_triple(reldb, c.prev_as, asn, c.succ_as)
        occ_cnt[v] += 1
    dist_cnt = Counter(distinct.values())
    n_occ = sum(occ_cnt.values())
    for v, name in ((Valley.VALLEY_FREE, "valley_normal_rate"),
                    (Valley.NON_VALLEY_FREE, "valley_abnormal_rate"),
                    (Valley.PART_VALLEY_FREE, "valley_seminormal_rate")):
        vals[f"{name}_rel"] = _ratio(dist_cnt[v], len(distinct))
        vals[f"{name}_abs"] = _ratio(occ_cnt[v], n_occ)
    return FeatureVector(ip, asn, tuple(vals[n] for n in FEATURE_NAMES))


def as_triples(ip: int, asn: int, corpus: TraceCorpus, get) -> set[tuple[int, int]]:
    """Distinct (predecessor AS, successor AS) around the mapping."""
    out = set()
    for c in corpus.contexts(ip, asn, get):
        if c.prev_as is not None and c.succ_as is not None and c.prev_as != c.succ_as:
            out.add((c.prev_as, c.succ_as))
    return out


def valley_free_count(reldb: RelDb, asn: int, triples: Iterable[tuple[int, int]]) -> int:
    return sum(1 for x, y in triples if classify_triple(reldb, x, asn, y) is Valley.VALLEY_FREE)


# ------------------------------------------------------------------ scorer

@dataclass
class Scorer:
    """Probability that a mapping is right; wrong mappings are the
    positive class during training."""

    model: object
    seed: int
    schema: tuple = FEATURE_NAMES
    version: int = MODEL_VERSION

    def score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if len(X) == 0:
            return np.zeros(0)
        proba = self.model.predict_proba(X)
        col = list(self.model.classes_).index(1)
        return 1.0 - proba[:, col]

    def score_vectors(self, fvs: Sequence[FeatureVector]) -> list[float]:
        return [float(s) for s in self.score([f.values for f in fvs])]

    def feature_importances(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.schema, self.model.feature_importances_)}

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump({"version": self.version, "seed": self.seed, "schema": list(self.schema),
                         "model": self.model}, fh)

    @classmethod
    def load(cls, path) -> "Scorer":
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if blob.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {blob.get('version')}")
        if tuple(blob["schema"]) != FEATURE_NAMES:
            raise ValueError("model feature schema does not match this build")
        return cls(blob["model"], blob["seed"], tuple(blob["schema"]), blob["version"])


def train(X, y_wrong, seed: int = 0, n_estimators: int = 300, max_depth: int = 3,
          learning_rate: float = 0.1) -> Scorer:
    """``y_wrong[i]`` is True when sample i is a wrong mapping. Wrong samples
    are weighted by the right/wrong ratio."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y_wrong, dtype=int)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise SingleClassCorpus("training needs both right and wrong mappings")
    w = np.where(y == 1, neg / pos, 1.0)
    # row and feature subsampling keep the ensemble from leaning on a single
    # feature that happens to separate the training labels
    model = GradientBoostingClassifier(n_estimators=n_estimators, max_depth=max_depth,
                                       learning_rate=learning_rate, subsample=0.7,
                                       max_features=0.5, random_state=seed)
    model.fit(X, y, sample_weight=w)
    return Scorer(model, seed)


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _div(a, b) -> Optional[float]:
        return a / b if b else None

    @property
    def precision(self) -> Optional[float]:
        return self._div(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return self._div(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> Optional[float]:
        pr, rc = self.precision, self.recall
        if pr is None or rc is None or pr + rc == 0:
            return None
        return 2 * pr * rc / (pr + rc)

    @property
    def specificity(self) -> Optional[float]:
        return self._div(self.tn, self.tn + self.fp)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "specificity": self.specificity}


def confusion(pred_wrong: Sequence[bool], actual_wrong: Sequence[bool]) -> Metrics:
    tp = fp = tn = fn = 0
    for p, a in zip(pred_wrong, actual_wrong):
        if p and a:
            tp += 1
        elif p:
            fp += 1
        elif a:
            fn += 1
        else:
            tn += 1
    return Metrics(tp, fp, tn, fn)


def evaluate(scorer: Scorer, X, y_wrong) -> Metrics:
    s = scorer.score(X)
    return confusion([v <= 0.5 for v in s], [bool(v) for v in y_wrong])


# ------------------------------------------------------------------ samples

@dataclass
class SampleSet:
    ips: list
    asns: list
    X: np.ndarray
    y_wrong: np.ndarray


def build_samples(corpus: TraceCorpus, mapping: MappingTable, labels: MappingTable,
                  jobs: int = 1) -> SampleSet:
    """Features of the current mapping for every IP the label table covers;
    a mapping is wrong when it disagrees with the label."""
    get = corpus.lookup_fn(mapping.entries)
    ips, asns, y = [], [], []
    for ip in corpus.ips:
        a = mapping.entries.get(ip)
        t = labels.entries.get(ip)
        if a is None or t is None:
            continue
        ips.append(ip)
        asns.append(a)
        y.append(a != t)
    fvs = _features_many(corpus, list(zip(ips, asns)), get, jobs)
    X = np.array([f.values for f in fvs], dtype=float).reshape(len(fvs), len(FEATURE_NAMES))
    return SampleSet(ips, asns, X, np.array(y, dtype=bool))


def write_samples(samples: SampleSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ip", "asn", *FEATURE_NAMES, "status"])
        for ip, a, row, bad in zip(samples.ips, samples.asns, samples.X, samples.y_wrong):
            w.writerow([int_to_ip(ip), a, *(f"{v:.6f}" for v in row), "wrong" if bad else "right"])


def write_predictions(ips: Sequence[int], asns: Sequence[int], scores: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ip", "asn", "score", "predicted"])
        for ip, a, s in zip(ips, asns, scores):
            w.writerow([int_to_ip(ip), a, f"{s:.6f}", "right" if s > 0.5 else "wrong"])


# ------------------------------------------------------------------ parallel features

_FEAT_CTX: Optional[tuple] = None


def _feat_chunk(items):
    corpus, get = _FEAT_CTX
    return [extract_features(ip, a, corpus, get) for ip, a in items]


def _features_many(corpus: TraceCorpus, items: list, get, jobs: int = 1) -> list[FeatureVector]:
    global _FEAT_CTX
    if jobs <= 1 or len(items) < 500 or "fork" not in mp.get_all_start_methods():
        return [extract_features(ip, a, corpus, get) for ip, a in items]
    _FEAT_CTX = (corpus, get)
    try:
        n = jobs * 4
        chunks = [items[k::n] for k in range(n)]
        with mp.get_context("fork").Pool(jobs) as pool:
            parts = pool.map(_feat_chunk, chunks)
    finally:
        _FEAT_CTX = None
    # undo the strided split
    out: list = [None] * len(items)
    for k, part in enumerate(parts):
        for j, fv in enumerate(part):
            out[k + j * n] = fv
    return out


# ------------------------------------------------------------------ correction

@dataclass
class CorrectionConfig:
    tie_threshold: float = 0.1
    turn_floor: Optional[int] = None  # None = max(1, 0.1% of corpus IPs)
    decision: float = 0.5
    max_turns: int = 50
    map_unmapped: bool = True

    def __post_init__(self):
        if not 0.0 < self.tie_threshold < 1.0:
            raise ValueError("tie threshold must lie in (0, 1)")
        if self.turn_floor is not None and self.turn_floor < 1:
            raise ValueError("turn floor must be at least 1")

    def floor(self, n_ips: int) -> int:
        return self.turn_floor if self.turn_floor is not None else max(1, n_ips // 1000)


def collect_correction_candidates(ip: int, asn: Optional[int], corpus: TraceCorpus, get) -> list[set]:
    """Four ordered candidate groups: RIB+IXP result, AS-level neighbours in
    the traces, siblings/providers/customers of the current mapping, and
    ASes that would make every AS triple around the IP valley-free."""
    reldb = corpus.reldb
    g1: set = set()
    r = corpus.rib_ixp(ip)
    if isinstance(r, int) and r != IXP_WILDCARD:
        g1.add(r)
    g2: set = set()
    if asn is not None:
        ctxs = corpus.contexts(ip, asn, get)
    else:
        # an unmapped hop has no AS run of its own: use the nearest mapped
        # neighbours on each side
        ctxs = corpus.contexts(ip, -1, get)
    triples = set()
    for c in ctxs:
        for nb in (c.prev_as, c.succ_as):
            if nb is not None:
                g2.add(nb)
        if c.prev_as is not None and c.succ_as is not None and c.prev_as != c.succ_as:
            triples.add((c.prev_as, c.succ_as))
    g3: set = set()
    if asn is not None:
        g3.update(corpus.siblings(asn))
        g3.update(reldb.providers(asn))
        g3.update(reldb.customers(asn))
    g4: set = set()
    if triples:
        pool = None
        for x, y in sorted(triples):
            nb = set(reldb.neighbors(x)) | set(corpus.siblings(x)) | {x}
            nb &= set(reldb.neighbors(y)) | set(corpus.siblings(y)) | {y}
            pool = nb if pool is None else pool & nb
            if not pool:
                break
        for z in sorted(pool or ()):
            if all(z in (x, y) or classify_triple(reldb, x, z, y) is Valley.VALLEY_FREE
                   for x, y in triples):
                g4.add(z)
    groups = []
    seen: set = set() if asn is None else {asn}
    for g in (g1, g2, g3, g4):
        g = {a for a in g if a not in seen and a != -1}
        seen |= g
        groups.append(g)
    if not any(groups):
        raise EmptyCandidates(f"no correction candidates for {int_to_ip(ip)}")
    return groups


def select_candidate(scores: dict, groups: Sequence[set], tie_threshold: float,
                     valley_free: Optional[dict] = None) -> int:
    """Highest score wins unless others lie within ``tie_threshold`` of it;
    then the lowest group, most valley-free triples and lowest ASN decide."""
    if not scores:
        raise EmptyCandidates("nothing to select from")
    valley_free = valley_free or {}
    best = max(scores.values())
    band = [a for a, s in scores.items() if best - s < tie_threshold]

    def group_of(a):
        for k, g in enumerate(groups):
            if a in g:
                return k
        return len(groups)
    return min(band, key=lambda a: (group_of(a), -valley_free.get(a, 0), a))


class Priority(enum.IntEnum):
    RIGHT = 0
    HALF_CONCERNED = 1
    CONCERNED = 2


def _neighbour_status(path, pos, status):
    """Nearest hops on each side that carry a Right/Wrong status."""
    j = pos - 1
    while j >= 0 and status.get(path[j]) is None:
        j -= 1
    left = path[j] if j >= 0 else None
    j = pos + 1
    while j < len(path) and status.get(path[j]) is None:
        j += 1
    right = path[j] if j < len(path) else None
    return left, right


def priorities(paths: Sequence[Sequence], status: dict) -> dict:
    """``status`` maps IP -> True for a right mapping, False for wrong;
    IPs absent from it (unresponsive, unmapped) are skipped. A wrong IP with
    a right neighbour in some trace is half-concerned, otherwise concerned."""
    half = set()
    for path in paths:
        for pos, ip in enumerate(path):
            if status.get(ip) is False:
                left, right = _neighbour_status(path, pos, status)
                if status.get(left) is True or status.get(right) is True:
                    half.add(ip)
    out = {}
    for ip, ok in status.items():
        if ok:
            out[ip] = Priority.RIGHT
        else:
            out[ip] = Priority.HALF_CONCERNED if ip in half else Priority.CONCERNED
    return out


def occurrence_selected(q: int, left: int, right: int, weaker: Optional[bool] = None) -> bool:
    """Whether a wrong IP of priority ``q`` is corrected now given the
    priorities of its predecessor and successor (a missing neighbour counts
    as right).

    ``weaker`` settles the one configuration the case table leaves open, a
    lower-priority neighbour on one side and an equal one on the other: the
    IP goes first when it scores below its equal neighbour (None falls back
    to predecessor first).
    """
    if left < q and right < q:
        return True
    if left > q and right > q:
        return False
    if left == q and right == q:
        return False  # wait for the predecessor
    if right == q:
        if left > q:
            return True
        return weaker if weaker is not None else True
    if left == q:
        if right > q:
            return False
        return weaker if weaker is not None else False
    return False  # one lower, one higher: the higher neighbour goes first


def plan_turn(paths: Sequence[Sequence], status: dict, scores: Optional[dict] = None) -> set:
    """IPs to correct this turn: those selected in every trace they occur in."""
    prio = priorities(paths, status)
    ok: dict = {}
    for path in paths:
        for pos, ip in enumerate(path):
            if status.get(ip) is not False:
                continue
            if ok.get(ip) is False:
                continue
            left, right = _neighbour_status(path, pos, status)
            lq = prio[left] if left is not None else Priority.RIGHT
            rq = prio[right] if right is not None else Priority.RIGHT
            q = prio[ip]
            weaker = None
            if scores is not None and (lq == q) != (rq == q):
                other = left if lq == q else right
                mine, theirs = scores[ip], scores[other]
                # ties keep predecessor first
                weaker = mine < theirs or (mine == theirs and other == right)
            ok[ip] = occurrence_selected(q, lq, rq, weaker)
    return {ip for ip, v in ok.items() if v}


@dataclass
class TurnLog:
    turn: int
    wrong: int
    selected: int
    corrected: list = field(default_factory=list)  # (ip, old, new, score_old, score_new)


@dataclass
class CorrectionResult:
    mapping: MappingTable
    turns: list
    newly_mapped: list
    scores: dict

    @property
    def corrected_ips(self) -> set:
        return {c[0] for t in self.turns for c in t.corrected}


def _agreement(fv: FeatureVector) -> float:
    return fv["prev_sameAS_rate_abs"] + fv["succ_sameAS_rate_abs"]


def _best_candidate(ip, asn, corpus, get, scorer, cfg):
    """(candidate, score, neighbour agreement) of the selected candidate."""
    try:
        groups = collect_correction_candidates(ip, asn, corpus, get)
    except EmptyCandidates:
        return None
    cands = sorted(set().union(*groups))
    fvs = dict(zip(cands, (extract_features(ip, a, corpus, get) for a in cands)))
    sc = dict(zip(cands, scorer.score_vectors([fvs[a] for a in cands])))
    triples = as_triples(ip, asn if asn is not None else -1, corpus, get)
    vf = {a: valley_free_count(corpus.reldb, a, triples) for a in cands}
    pick = select_candidate(sc, groups, cfg.tie_threshold, vf)
    return pick, sc[pick], _agreement(fvs[pick])


def run_correction(corpus: TraceCorpus, base: MappingTable, scorer: Scorer,
                   cfg: Optional[CorrectionConfig] = None, jobs: int = 1) -> CorrectionResult:
    cfg = cfg or CorrectionConfig()
    cur = dict(base.entries)
    get = corpus.lookup_fn(cur)
    ips = [ip for ip in corpus.ips if cur.get(ip) is not None]
    fvs = _features_many(corpus, [(ip, cur[ip]) for ip in ips], get, jobs)
    scores = dict(zip(ips, scorer.score_vectors(fvs)))
    floor = cfg.floor(len(corpus.ips))
    turns: list[TurnLog] = []
    for turn in range(1, cfg.max_turns + 1):
        status = {ip: s > cfg.decision for ip, s in scores.items()}
        wrong = sum(1 for v in status.values() if not v)
        selected = sorted(plan_turn(corpus.paths, status, scores))
        log = TurnLog(turn, wrong, len(selected))
        changes = {}
        for ip in selected:
            got = _best_candidate(ip, cur[ip], corpus, get, scorer, cfg)
            if got is None:
                continue
            a, s, agree = got
            # conservative: the replacement must score higher and line up
            # with more of the IP's neighbours than the current mapping
            if s > scores[ip] and agree > _agreement(extract_features(ip, cur[ip], corpus, get)):
                changes[ip] = (a, s)
        for ip in sorted(changes):
            a, s = changes[ip]
            log.corrected.append((ip, cur[ip], a, scores[ip], s))
            cur[ip] = a
        turns.append(log)
        if changes:
            touched = set()
            for ip in changes:
                touched.add(ip)
                touched |= corpus.neighbours(ip)
            re = sorted(ip for ip in touched if cur.get(ip) is not None and ip in scores)
            fv2 = _features_many(corpus, [(ip, cur[ip]) for ip in re], get, jobs)
            scores.update(zip(re, scorer.score_vectors(fv2)))
        if len(changes) < floor:
            break
    newly = []
    if cfg.map_unmapped:
        for ip in corpus.ips:
            if cur.get(ip) is not None:
                continue
            got = _best_candidate(ip, None, corpus, get, scorer, cfg)
            if got is None:
                continue
            a, s, _ = got
            if s > cfg.decision:
                newly.append((ip, a, s))
        for ip, a, s in newly:
            cur[ip] = a
            scores[ip] = s
    out = MappingTable(f"{base.method}+learn", dict(sorted(cur.items())))
    return CorrectionResult(out, turns, newly, scores)


def write_turn_log(result: CorrectionResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["turn", "ip", "old_asn", "new_asn", "old_score", "new_score"])
        for t in result.turns:
            for ip, old, new, so, sn in t.corrected:
                w.writerow([t.turn, int_to_ip(ip), old, new, f"{so:.6f}", f"{sn:.6f}"])
        for ip, a, s in result.newly_mapped:
            w.writerow(["unmap", int_to_ip(ip), "-", a, "", f"{s:.6f}"])
