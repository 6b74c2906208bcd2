import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pfpdecomp.core import MuapTemplateSet, Recording, SpikeTrain
from pfpdecomp.evaluation import (
    CSV_COLUMNS,
    align_lag,
    count_coincidences,
    decomposability,
    evaluate,
    match_pairs,
    mean_discharge_rate,
    pair_counts,
    rates,
    write_metrics_csv,
)


def _random_train(rng, mu_id, n=10000, rate=0.005):
    t = np.flatnonzero(rng.random(n) < rate)
    return SpikeTrain(mu_id, t)


def test_align_lag_recovers_shift(rng):
    a = _random_train(rng, 0)
    b = SpikeTrain(1, a.firing_samples + 7)
    assert align_lag(a, b, 58, 2) == 7
    assert count_coincidences(a.firing_samples + 7, b.firing_samples, 0) == a.n_spikes
    assert align_lag(a, SpikeTrain(2, a.firing_samples), 58, 2) == 0


def test_align_lag_empty_train():
    assert align_lag(SpikeTrain(0, []), SpikeTrain(1, [5]), 10, 1) == 0


def test_coincidences_of_unrelated_trains_near_chance(rng):
    tol, n = 2, 100000
    counts, expected = [], []
    for _ in range(40):
        a, b = _random_train(rng, 0, n, 0.004), _random_train(rng, 1, n, 0.004)
        counts.append(count_coincidences(a.firing_samples, b.firing_samples, tol))
        # each a spike finds a b spike in its (2 tol + 1)-sample window with this probability
        expected.append(a.n_spikes * (1 - (1 - 0.004) ** (2 * tol + 1)))
    assert np.mean(counts) == pytest.approx(np.mean(expected), rel=0.1)


def _brute_coincidences(a, b, tol):
    # maximum bipartite matching on the interval graph via exhaustive augmenting paths
    match_b = {}

    def augment(i, seen):
        for j, y in enumerate(b):
            if abs(a[i] - y) <= tol and j not in seen:
                seen.add(j)
                if j not in match_b or augment(match_b[j], seen):
                    match_b[j] = i
                    return True
        return False

    return sum(augment(i, set()) for i in range(len(a)))


@given(st.lists(st.integers(0, 60), max_size=15, unique=True), st.lists(st.integers(0, 60), max_size=15, unique=True),
       st.integers(0, 3))
def test_count_coincidences_is_maximum_matching(a, b, tol):
    a, b = sorted(a), sorted(b)
    assert count_coincidences(np.array(a), np.array(b), tol) == _brute_coincidences(a, b, tol)


def test_rates_example():
    mr, fdr, fnr = rates(90, 110, 100)
    assert mr == pytest.approx(180 / 210)
    assert fdr == pytest.approx(20 / 110)
    assert fnr == pytest.approx(0.1)
    assert rates(100, 100, 100) == (1.0, 0.0, 0.0)


def test_empty_online_train_rule():
    ref = SpikeTrain(0, np.arange(100) * 100)
    m = match_pairs([SpikeTrain(5, [])], [ref], 2, 58, mr_floor=0.0)
    assert m.pairs == []  # zero common spikes never form a pair
    mr, fdr, fnr = rates(0, 0, 100)
    assert (mr, fdr, fnr) == (0.0, 0.0, 1.0)


def test_rate_identities_on_random_triples():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        no, nr = rng.integers(0, 500, 2)
        nc = int(rng.integers(0, min(no, nr) + 1))
        mr, fdr, fnr = rates(nc, int(no), int(nr))
        if no + nr:
            assert round(mr * (no + nr)) == 2 * nc
        if no:
            assert round(fdr * no) == no - nc
        if nr:
            assert round(fnr * nr) == nr - nc


def test_identical_sets_pair_perfectly(rng):
    trains = [_random_train(rng, j) for j in range(4)]
    spurious = _random_train(rng, 99)
    m = evaluate(trains + [spurious], trains, 2048.0)
    assert m.n_matched == 4
    assert all(p.mr == 1.0 and p.online_id == p.reference_id for p in m.pairs)
    assert m.unmatched_online == [99]
    assert m.mr == 1.0 and m.fdr == 0.0 and m.fnr == 0.0


def _noisy_copy(rng, train, mu_id):
    t = train.firing_samples
    t = t[rng.random(t.size) > rng.uniform(0, 0.4)]
    extra = rng.integers(0, 10000, int(rng.integers(0, 10)))
    t = np.unique(np.concatenate([t + rng.integers(-1, 2, t.size), extra]))
    return SpikeTrain(mu_id, t[t >= 0])


def _optimal_assignment(online, reference, tol, max_lag, floor):
    table = {(o.mu_id, r.mu_id): pair_counts(o, r, tol, max_lag).mr for o in online for r in reference}
    best, best_set = -1.0, None
    choices = [o.mu_id for o in online] + [None] * len(reference)
    for perm in itertools.permutations(choices, len(reference)):
        picked = [o for o in perm if o is not None]
        if len(picked) != len(set(picked)):
            continue
        pairs = {(o, r.mu_id) for o, r in zip(perm, reference) if o is not None and table[(o, r.mu_id)] >= floor}
        total = sum(table[p] for p in pairs)
        if total > best + 1e-12:
            best, best_set = total, pairs
    return best_set


@given(st.integers(0, 100000), st.integers(1, 5), st.integers(1, 5))
def test_pairing_matches_exhaustive_assignment(seed, n_ref, n_on):
    rng = np.random.default_rng(seed)
    reference = [_random_train(rng, j) for j in range(n_ref)]
    online = []
    for i in range(n_on):
        src = reference[int(rng.integers(n_ref))]
        online.append(_noisy_copy(rng, src, 100 + i) if rng.random() < 0.8 else _random_train(rng, 100 + i))
    m = match_pairs(online, reference, 2, 20)
    got = {(p.online_id, p.reference_id) for p in m.pairs}
    assert got == _optimal_assignment(online, reference, 2, 20, 0.3)


def test_metrics_symmetric_in_roles(rng):
    ref = [_random_train(rng, j) for j in range(3)]
    on = [_noisy_copy(rng, r, 10 + r.mu_id) for r in ref]
    a = evaluate(on, ref, 2048.0)
    b = evaluate(ref, on, 2048.0)
    assert a.mr == pytest.approx(b.mr)
    assert a.fdr == pytest.approx(b.fnr)
    assert a.fnr == pytest.approx(b.fdr)


def test_mean_discharge_rate():
    assert mean_discharge_rate(SpikeTrain(0, [0, 200, 400, 800]), 2000.0) == pytest.approx((10 + 10 + 5) / 3)
    assert mean_discharge_rate(SpikeTrain(0, [5]), 2000.0) is None


def _rec(rms):
    m = len(rms)
    x = np.zeros((m, 1000), dtype=np.float32)
    x[:, ::2] = np.asarray(rms, dtype=np.float32)[:, None] * np.sqrt(2)
    return Recording.from_array(x, 2000.0, (1, m))


def test_di_single_mu():
    w = np.zeros((1, 2, 10))
    w[0, 0, 0] = 5.0
    rep = decomposability(MuapTemplateSet([0], w), _rec([1.0, 1.0]))
    assert rep.di[0, 0] == pytest.approx(5.0, rel=1e-6)
    assert rep.di[0, 1] == 0.0


def test_di_identical_muaps_give_zero():
    w = np.ones((2, 1, 10))
    rep = decomposability(MuapTemplateSet([0, 1], w), _rec([1.0]))
    assert rep.di.tolist() == [[0.0], [0.0]]


def test_cdi_is_channel_norm():
    w = np.zeros((1, 4, 4))
    w[0, 0, 0], w[0, 1, 0] = 3.0, 4.0
    rep = decomposability(MuapTemplateSet([7], w), _rec([1.0, 1.0, 1.0, 0.0]))
    assert rep.cdi[0] == pytest.approx(5.0, rel=1e-6)
    assert rep.skipped_channels == [3]
    assert np.isnan(rep.di[0, 3])


def test_metrics_csv(tmp_path, rng):
    ref = [_random_train(rng, j) for j in range(3)]
    m = evaluate([_noisy_copy(rng, r, r.mu_id) for r in ref], ref, 2048.0)
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, m, {0: 1.5, 1: 2.0, 2: 3.0})
    rows = list(csv.reader(open(p)))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == m.n_matched + 2
    assert rows[-1][0] == "summary"
    assert float(rows[-1][6]) == pytest.approx(m.mr, rel=1e-5)
