import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, precision_score, recall_score

from cdmatch.core import Prefix, RelDb, RelKind
from cdmatch.ingest import CleanTrace
from cdmatch.learncorrect import (FEATURE_NAMES, CorrectionConfig, EmptyCandidates, Metrics, Scorer,
                                  SingleClassCorpus, TraceCorpus, Valley, build_samples, classify_triple,
                                  collect_correction_candidates, confusion, evaluate, extract_features,
                                  plan_turn, run_correction, select_candidate, train)
from cdmatch.ribstore import MappingTable, RibEntry, RibTable
from cdmatch.synthlab import ScenarioConfig, generate_world
from cdmatch.synthlab.world import RIB_TIME, world_pairs


def tr(*hops, reached=True, dst=None):
    dst = dst if dst is not None else (hops[-1] if hops and hops[-1] is not None else 999)
    return CleanTrace(0, 0, dst, tuple(hops), reached)


def rel(*links, orgs=None):
    db = RelDb(orgs=dict(orgs or {}))
    for a, b, k in links:
        db.add_link(a, b, k)
    return db


P2C, P2P = RelKind.P2C, RelKind.P2P


# ------------------------------------------------------------- triples

def test_classify_triple_shapes():
    db = rel((2, 1, P2C), (2, 3, P2C), (1, 4, P2P), (4, 5, P2P), (6, 7, P2C), (8, 7, P2C))
    assert classify_triple(db, 1, 2, 3) is Valley.VALLEY_FREE  # up then down
    assert classify_triple(db, 1, 4, 5) is Valley.PART_VALLEY_FREE  # two flat links
    assert classify_triple(db, 6, 7, 8) is Valley.NON_VALLEY_FREE  # down then up


def test_classify_down_then_flat_is_partial():
    db = rel((1, 2, P2C), (2, 3, P2P))
    assert classify_triple(db, 1, 2, 3) is Valley.PART_VALLEY_FREE


# ------------------------------------------------------------- features

S = 50


def test_same_as_neighbours():
    m = {1: S, 2: S, 3: S}
    c = TraceCorpus([tr(1, 2, 3)], RelDb())
    fv = extract_features(2, S, c, c.lookup_fn(m))
    assert fv["prev_sameAS_rate_abs"] == fv["succ_sameAS_rate_abs"] == 1
    assert fv["prev_sameAS_rate_rel"] == fv["succ_sameAS_rate_rel"] == 1


def _valley_fixture():
    # four distinct AS triples around ip 100: two up-down, two down-up
    db = rel((S, 1, P2C), (S, 2, P2C), (S, 3, P2C), (S, 4, P2C),
             (5, S, P2C), (6, S, P2C), (7, S, P2C), (8, S, P2C))
    m = {100: S}
    traces = []
    for k, (x, y) in enumerate([(1, 2), (3, 4), (1, 2), (1, 2), (5, 6), (7, 8)]):
        xi, yi = 10 + 2 * k, 11 + 2 * k
        m[xi], m[yi] = x, y
        traces.append(tr(xi, 100, yi))
    return TraceCorpus(traces, db), m


def test_valley_rates_relative_and_absolute():
    c, m = _valley_fixture()
    fv = extract_features(100, S, c, c.lookup_fn(m))
    assert fv["valley_normal_rate_rel"] == 0.5
    assert fv["valley_abnormal_rate_rel"] == 0.5
    assert fv["valley_normal_rate_abs"] == pytest.approx(4 / 6)


def test_all_valley_free():
    db = rel((S, 1, P2C), (S, 2, P2C))
    c = TraceCorpus([tr(10, 100, 11)], db)
    fv = extract_features(100, S, c, c.lookup_fn({10: 1, 100: S, 11: 2}))
    assert (fv["valley_normal_rate_rel"], fv["valley_abnormal_rate_rel"], fv["valley_seminormal_rate_rel"]) == (1, 0, 0)


def test_unreached_trace_gets_destination_context():
    c = TraceCorpus([tr(1, 2, reached=False, dst=9)], RelDb())
    assert c.paths[0] == (1, 2, None, 9)
    assert 9 not in c.ips
    fv = extract_features(2, S, c, c.lookup_fn({1: S, 2: S, 9: S}))
    assert fv["succ_ip_uncertain_rate_abs"] == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_rates_bounded_and_valley_rates_sum_to_one(seed):
    rng = random.Random(seed)
    asns = list(range(1, 8))
    db = RelDb()
    for a, b in itertools.combinations(asns, 2):
        if rng.random() < 0.5:
            db.add_link(a, b, rng.choice([P2C, P2P]))
    ips = list(range(100, 112))
    m = {ip: rng.choice(asns + [None]) for ip in ips}
    traces = [tr(*[rng.choice(ips + [None]) for _ in range(rng.randint(2, 7))], reached=rng.random() < 0.5,
                 dst=rng.choice(ips)) for _ in range(12)]
    c = TraceCorpus(traces, db)
    get = c.lookup_fn(m)
    for ip in c.ips:
        fv = extract_features(ip, rng.choice(asns), c, get)
        assert len(fv.values) == len(FEATURE_NAMES)
        assert all(0 <= v <= 1 for v in fv.values[1:])
        for var in ("rel", "abs"):
            s = sum(fv[f"valley_{n}_rate_{var}"] for n in ("normal", "abnormal", "seminormal"))
            assert s == pytest.approx(1) or s == 0


# --------------------------------------------------------------- metrics

def test_metric_examples():
    m = Metrics(tp=84, fp=6, tn=994, fn=16)
    assert m.precision == pytest.approx(84 / 90)
    assert m.recall == pytest.approx(0.84)
    perfect = Metrics(10, 0, 90, 0)
    assert perfect.precision == perfect.recall == perfect.f1 == perfect.specificity == 1
    silent = confusion([False] * 100, [True] * 5 + [False] * 95)
    assert silent.recall == 0 and silent.specificity == 1 and silent.precision is None


CONFUSIONS = [(tp, fp, tn, fn) for tp in (0, 1, 7) for fp in (0, 2, 5) for tn in (0, 3, 11) for fn in (0, 4)][:50]


@pytest.mark.parametrize("tp,fp,tn,fn", CONFUSIONS)
def test_metrics_match_reference(tp, fp, tn, fn):
    pred = [True] * tp + [True] * fp + [False] * tn + [False] * fn
    act = [True] * tp + [False] * fp + [False] * tn + [True] * fn
    m = confusion(pred, act)
    assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
    if not pred:
        return
    if tp + fp:
        assert m.precision == pytest.approx(precision_score(act, pred, zero_division=0))
    else:
        assert m.precision is None
    if tp + fn:
        assert m.recall == pytest.approx(recall_score(act, pred, zero_division=0))
    else:
        assert m.recall is None
    if m.f1 is not None:
        assert m.f1 == pytest.approx(f1_score(act, pred, zero_division=0))
    if tn + fp:
        assert m.specificity == pytest.approx(tn / (tn + fp))
    else:
        assert m.specificity is None


# ----------------------------------------------------------------- train

def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, len(FEATURE_NAMES)))
    y = X[:, 5] < 0.2
    X[y, 5] -= 0.05
    return X, y


def test_separable_training_is_perfect():
    X, y = _separable()
    m = evaluate(train(X, y, seed=1), X, y)
    assert m.f1 == 1.0


def test_single_class_rejected():
    X, _ = _separable()
    with pytest.raises(SingleClassCorpus):
        train(X, np.zeros(len(X), dtype=bool))


def test_scorer_round_trip_and_determinism(tmp_path):
    X, y = _separable()
    a = train(X, y, seed=3)
    b = train(X, y, seed=3)
    assert np.array_equal(a.score(X), b.score(X))
    a.save(tmp_path / "m.pkl")
    c = Scorer.load(tmp_path / "m.pkl")
    assert np.array_equal(a.score(X), c.score(X))
    assert set(c.feature_importances()) == set(FEATURE_NAMES)


# ------------------------------------------------------------ candidates

def test_candidate_groups():
    X_, Y_, Z, P, A = 1, 2, 3, 4, 5
    db = rel((X_, Z, P2C), (Z, Y_, P2C), (P, S, P2C))
    rib = RibTable([RibEntry(Prefix(100 << 8, 24), (9, A), 0)])
    ip = (100 << 8) + 1
    c = TraceCorpus([tr(10, ip, 11)], db, rib)
    groups = collect_correction_candidates(ip, S, c, c.lookup_fn({10: X_, ip: S, 11: Y_}))
    assert groups[0] == {A}
    assert groups[1] == {X_, Y_}
    assert groups[2] == {P}
    assert Z in groups[3]


def test_no_candidates():
    c = TraceCorpus([tr(10)], RelDb())
    with pytest.raises(EmptyCandidates):
        collect_correction_candidates(10, S, c, c.lookup_fn({10: S}))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_valley_free_group_matches_enumeration(seed):
    rng = random.Random(seed)
    asns = list(range(1, 9))
    orgs = {a: rng.choice("abcdefgh") for a in asns if rng.random() < 0.3}
    db = RelDb(orgs=orgs)
    for a, b in itertools.combinations(asns, 2):
        if rng.random() < 0.4:
            db.add_link(a, b, rng.choice([P2C, P2P]))
    x, s, y = rng.sample(asns, 3)
    c = TraceCorpus([tr(10, 11, 12)], db)
    groups = collect_correction_candidates(11, s, c, c.lookup_fn({10: x, 11: s, 12: y}))
    earlier = set().union(*groups[:3]) | {s}
    want = {z for z in asns if z not in (x, y)
            and db.lookup(x, z) is not RelKind.NONE and db.lookup(z, y) is not RelKind.NONE
            and classify_triple(db, x, z, y) is Valley.VALLEY_FREE} - earlier
    assert groups[3] == want


def test_select_candidate_examples():
    assert select_candidate({1: 0.9, 2: 0.6}, [{1, 2}], 0.1) == 1
    assert select_candidate({1: 0.85, 2: 0.80}, [{2}, {1}], 0.1) == 2
    assert select_candidate({1: 0.85, 2: 0.80}, [{1, 2}], 0.1, {1: 0, 2: 3}) == 2
    assert select_candidate({1: 0.85, 2: 0.85}, [{1, 2}], 0.1) == 1


@given(st.dictionaries(st.integers(1, 20), st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 10**6))
def test_select_candidate_ignores_order(scores, seed):
    rng = random.Random(seed)
    cands = list(scores)
    groups = [set(), set(), set(), set()]
    for a in cands:
        groups[rng.randrange(4)].add(a)
    vf = {a: rng.randint(0, 3) for a in cands}
    pick = select_candidate(scores, groups, 0.1, vf)
    rng.shuffle(cands)
    shuffled = {a: scores[a] for a in cands}
    assert select_candidate(shuffled, [set(g) for g in groups], 0.1, dict(reversed(list(vf.items())))) == pick


def test_config_validation():
    with pytest.raises(ValueError):
        CorrectionConfig(tie_threshold=0)
    with pytest.raises(ValueError):
        CorrectionConfig(turn_floor=0)
    assert CorrectionConfig().floor(100000) == 100


# -------------------------------------------------------------- planning

R1, R2, W, W0, W1, W2, W3 = 1, 2, 10, 11, 12, 13, 14


def test_wrong_between_rights_selected():
    assert plan_turn([[R1, W, R2]], {R1: True, W: False, R2: True}) == {W}


def test_concerned_chain_corrects_predecessor_first():
    assert plan_turn([[W1, W2, W3]], {W1: False, W2: False, W3: False}) == {W1}


def test_deferred_in_one_path_blocks_selection():
    st_ = {R1: True, R2: True, W: False, W0: False}
    assert plan_turn([[R1, W, R2], [W0, W]], st_) == {W0}


def test_unknown_hops_are_transparent():
    assert plan_turn([[R1, None, W, 77, R2]], {R1: True, W: False, R2: True}) == {W}


# ------------------------------------------------------------- correction

class _AlwaysRight:
    classes_ = np.array([0, 1])
    feature_importances_ = np.zeros(len(FEATURE_NAMES))

    def predict_proba(self, X):
        return np.tile([1.0, 0.0], (len(X), 1))


def test_nothing_wrong_means_nothing_changes():
    c = TraceCorpus([tr(1, 2, 3), tr(4, 2, 5)], RelDb())
    base = MappingTable("m", {1: 7, 2: 7, 3: 8, 4: 9, 5: 8})
    res = run_correction(c, base, Scorer(_AlwaysRight(), 0), CorrectionConfig(map_unmapped=False))
    assert res.mapping.entries == base.entries
    assert res.corrected_ips == set()


@pytest.fixture(scope="module")
def world_run():
    w = generate_world(ScenarioConfig(seed=2))
    pairs = world_pairs(w)
    rib = RibTable(e for v in w.ribs.values() for e in v)
    corpus = TraceCorpus([p.d for p in pairs], w.reldb(), rib, w.ixpdb(), RIB_TIME)
    samples = build_samples(corpus, w.base, w.truth)
    scorer = train(samples.X, samples.y_wrong, seed=0)
    return w, corpus, scorer, run_correction(corpus, w.base, scorer)


def test_only_low_scored_mappings_change(world_run):
    _, _, _, res = world_run
    changes = [c for t in res.turns for c in t.corrected]
    assert changes
    assert all(old_score <= 0.5 for _, _, _, old_score, _ in changes)


def test_correction_reduces_errors(world_run):
    from cdmatch.visv import evaluate_mapping

    w, _, _, res = world_run
    before = evaluate_mapping(w.base, w.truth)
    after = evaluate_mapping(res.mapping, w.truth)
    assert after.wrong < before.wrong / 2


def test_turn_log_consistent_and_terminates(world_run):
    _, corpus, _, res = world_run
    last = {}
    for t in res.turns:
        ips = [c[0] for c in t.corrected]
        assert len(ips) == len(set(ips))
        for ip, old, new, _, _ in t.corrected:
            assert old != new
            last[ip] = new
    assert all(res.mapping.get(ip) == a for ip, a in last.items())
    cfg = CorrectionConfig()
    assert len(res.turns) == cfg.max_turns or len(res.turns[-1].corrected) < cfg.floor(len(corpus.ips))
