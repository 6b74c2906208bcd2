import numpy as np
import pytest
from hypothesis import given, strategies as st

from pfpdecomp.core import SpikeTrain
from pfpdecomp.evaluation import count_coincidences, evaluate
from pfpdecomp.preprocess import extend_array
from pfpdecomp.online import (
    OnlineConfig,
    StitchState,
    VectorBank,
    bank_from_result,
    batch_decode,
    curate_banks,
    curate_entries,
    kmeans_1d,
    kmeans_threshold,
    process_window,
    run_stream,
    stitch,
    successive_multithreshold_otsu,
)


@pytest.fixture(scope="module")
def raw_bank(clean_decomposition):
    return bank_from_result(clean_decomposition)


@pytest.fixture(scope="module")
def bank(raw_bank, clean_segment):
    return curate_banks([raw_bank], [clean_segment[0]])


# ---------------------------------------------------------------------------
# bank curation

def test_quality_rule_is_conjunctive(raw_bank, clean_segment):
    rec = clean_segment[0]
    amp = raw_bank.cov_amp.copy()
    isi = raw_bank.cov_isi.copy()
    amp[0], isi[0] = 0.35, 0.45
    amp[1], isi[1] = 0.35, 0.2
    ext = extend_array(rec.samples[rec.usable], raw_bank.k)
    kept, counts = curate_entries(raw_bank.vectors, amp, isi, ext, 48, rec.sample_rate, raw_bank.k)
    assert 0 not in kept and 1 in kept
    assert counts["quality"] == 1
    kept_or, counts_or = curate_entries(raw_bank.vectors, amp, isi, ext, 48, rec.sample_rate, raw_bank.k, rule="or")
    assert 1 not in kept_or and counts_or["quality"] >= 2


def test_same_segment_twice_gives_one_vector_per_mu(raw_bank, bank, clean_segment):
    rec = clean_segment[0]
    twice = curate_banks([raw_bank, raw_bank], [rec, rec])
    assert twice.n_vectors == bank.n_vectors
    assert np.array_equal(twice.vectors, bank.vectors)
    assert twice.mu_ids.tolist() == list(range(twice.n_vectors))


def test_curation_never_grows_and_is_idempotent(raw_bank, bank, clean_segment):
    assert bank.n_vectors <= raw_bank.n_vectors
    again = curate_banks([bank], [clean_segment[0]])
    assert np.array_equal(again.vectors, bank.vectors)


def test_curation_rejects_empty(raw_bank, clean_segment):
    empty = VectorBank(np.zeros((0, raw_bank.vectors.shape[1])), [], [], [], raw_bank.k, 48, raw_bank.sample_rate)
    with pytest.raises(ValueError, match="empty bank"):
        curate_banks([empty], [clean_segment[0]])
    bad = VectorBank(raw_bank.vectors, raw_bank.mu_ids, np.full(raw_bank.n_vectors, 0.5),
                     np.full(raw_bank.n_vectors, 0.5), raw_bank.k, 48, raw_bank.sample_rate)
    with pytest.raises(ValueError, match="quality"):
        curate_banks([bad], [clean_segment[0]])


def test_bank_roundtrip_and_compatibility(bank, tmp_path):
    p = tmp_path / "b.mubk"
    bank.save(p)
    b2 = VectorBank.load(p)
    assert np.array_equal(b2.vectors, bank.vectors)
    assert b2.k == bank.k and b2.length == bank.length and b2.sample_rate == bank.sample_rate
    with pytest.raises(ValueError, match="extension factor"):
        bank.check_compatible(bank.n_channels, bank.sample_rate, k=bank.k + 1)
    with pytest.raises(ValueError, match="sample rate"):
        bank.check_compatible(bank.n_channels, 1000.0)
    with pytest.raises(ValueError, match="channel"):
        bank.check_compatible(bank.n_channels - 1, bank.sample_rate)


def test_config_validation():
    with pytest.raises(ValueError):
        OnlineConfig(increment_s=2.0)
    with pytest.raises(ValueError):
        OnlineConfig(selector="median")


# ---------------------------------------------------------------------------
# threshold selectors

def _periodic_source(rng, n=2000, period=200, jitter=0.03):
    s = 0.05 * rng.standard_normal(n)
    times = np.arange(50, n - 50, period) + rng.integers(-5, 6, size=len(range(50, n - 50, period)))
    s[times] = 1.0 + jitter * rng.standard_normal(times.size)
    return s, times


def _sweep_oracle(source, length, thresholds):
    """Score every threshold by brute force: refractory peaks above it and their CoVs."""
    e = np.maximum(source, 0) ** 2
    out = []
    for thr in thresholds:
        idx = [i for i in range(1, e.size - 1) if e[i] > e[i - 1] and e[i] >= e[i + 1] and e[i] > thr]
        idx.sort(key=lambda i: (-e[i], i))
        kept = []
        for i in idx:
            if all(abs(i - k) > length for k in kept):
                kept.append(i)
        kept.sort()
        if len(kept) < 3:
            out.append((np.inf, kept))
            continue
        a = np.sqrt(e[kept])
        isi = np.diff(kept).astype(float)
        out.append((a.std() / a.mean() + isi.std() / isi.mean(), kept))
    return out


def test_multithreshold_drops_artifact_and_noise(rng):
    s, times = _periodic_source(rng)
    s[1150] = 1.8  # artifact midway between two firings
    train, sweep = successive_multithreshold_otsu(s, 48)
    assert sweep.chosen >= 0
    oracle = _sweep_oracle(s, 48, sweep.thresholds)
    scores = np.array([o[0] for o in oracle])
    assert np.allclose(np.where(np.isfinite(scores), scores, 0), np.where(np.isfinite(sweep.scores), sweep.scores, 0))
    best = int(np.argmin(scores))
    assert train.firing_samples.tolist() == oracle[best][1]
    # every periodic firing kept, nothing from the noise floor
    assert set(times.tolist()) <= set(train.firing_samples.tolist())
    assert np.all(np.abs(s[train.firing_samples]) > 0.5)


def test_multithreshold_fixed_point_on_clean_source(rng):
    s, times = _periodic_source(rng, jitter=0.0)
    s[s < 0.5] = 0.0
    train, sweep = successive_multithreshold_otsu(s, 48)
    assert train.firing_samples.tolist() == sorted(times.tolist())


@given(st.integers(0, 10_000))
def test_multithreshold_chooses_argmin(seed):
    r = np.random.default_rng(seed)
    s = r.standard_normal(800) * r.uniform(0.05, 0.5)
    s[r.choice(800, 12, replace=False)] += r.uniform(0.5, 3.0, 12)
    train, sweep = successive_multithreshold_otsu(s, 20, max_candidates=16)
    assert sweep.thresholds.size <= 16
    if sweep.chosen >= 0:
        assert sweep.scores[sweep.chosen] == np.min(sweep.scores)
        assert np.all(np.diff(train.firing_samples) > 20)


def test_multithreshold_constant_source_is_empty():
    train, _ = successive_multithreshold_otsu(np.ones(500), 48)
    assert train.n_spikes == 0


def test_kmeans_bimodal_peaks():
    s = np.zeros(3100)
    pos = np.arange(50, 3050, 100)
    s[pos[:20]] = 1.0
    s[pos[20:]] = 10.0
    train = kmeans_threshold(s, 48)
    assert train.firing_samples.tolist() == pos[20:].tolist()


def _two_means_oracle(v):
    v = np.sort(v)
    best = None
    for cut in range(1, v.size):
        a, b = v[:cut], v[cut:]
        cost = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
        if best is None or cost < best[0] - 1e-12:
            best = (cost, a.mean(), b.mean())
    return best


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=12))
def test_kmeans_matches_exhaustive_partition(values):
    v = np.array(values)
    if np.ptp(v) < 1e-6:
        return
    centres, labels = kmeans_1d(v, 2)
    cost = sum(((v[labels == j] - centres[j]) ** 2).sum() for j in range(2))
    assert cost == pytest.approx(_two_means_oracle(v)[0], rel=1e-9, abs=1e-9)


def test_kmeans_constant_source_is_empty():
    assert kmeans_threshold(np.ones(100), 48).n_spikes == 0


# ---------------------------------------------------------------------------
# windows, stitching and streaming

def test_zero_window_gives_empty_trains(bank):
    trains, latency = process_window(np.zeros((bank.n_channels, 2000)), bank, OnlineConfig())
    assert all(t.n_spikes == 0 for t in trains)
    assert latency >= 0


def test_window_channel_mismatch(bank):
    with pytest.raises(ValueError, match="channel"):
        process_window(np.zeros((bank.n_channels + 1, 2000)), bank, OnlineConfig())


def test_window_spikes_match_ground_truth(bank, scenario):
    rec, truth = scenario.segment(200)
    off, w = 4000, 2000
    x = rec.samples[rec.usable].astype(np.float64)
    trains, _ = process_window(x[:, off:off + w], bank, OnlineConfig(), x[:, off - bank.k + 1:off])
    ref = [SpikeTrain(t.mu_id, t.firing_samples[(t.firing_samples >= off) & (t.firing_samples < off + w)] - off)
           for t in truth.trains]
    ref = [t for t in ref if t.n_spikes]
    m = evaluate(trains, ref, rec.sample_rate, 1.0, 58)
    assert len(m.pairs) >= 0.8 * bank.n_vectors
    assert m.mr >= 0.95


def test_window_latency_under_increment(bank, clean_segment):
    rec = clean_segment[0]
    rng = np.random.default_rng(0)
    big = VectorBank(rng.standard_normal((20, bank.vectors.shape[1])), np.arange(20), np.zeros(20), np.zeros(20),
                     bank.k, bank.length, bank.sample_rate)
    x = rec.samples[rec.usable].astype(np.float64)
    lat = [process_window(x[:, o:o + 2000], big, OnlineConfig())[1] for o in range(0, 8000, 2000)]
    assert max(lat) < 0.2


def _state(window=2000, increment=400, guard=48):
    return StitchState(window=window, increment=increment, guard=guard, refractory=guard)


def test_stitch_emits_overlap_event_once():
    st_ = _state()
    a = stitch(st_, [SpikeTrain(0, [1900])], 0)
    b = stitch(st_, [SpikeTrain(0, [1500])], 400)  # the same event seen by the next window
    assert a[0] == [1900] and b[0] == []
    assert st_.emitted[0] == [1900]


def test_stitch_dedups_jittered_boundary_spike():
    st_ = _state()
    stitch(st_, [SpikeTrain(0, [1950])], 0)
    out = stitch(st_, [SpikeTrain(0, [1552])], 400)  # 1952 in stream time, inside the new region
    assert out[0] == []


def test_stitch_rejects_out_of_order():
    st_ = _state()
    stitch(st_, [SpikeTrain(0, [])], 0)
    with pytest.raises(ValueError, match="out of order"):
        stitch(st_, [SpikeTrain(0, [])], 800)


@given(st.lists(st.lists(st.integers(0, 1999), max_size=12, unique=True), min_size=1, max_size=8))
def test_stitch_output_increasing_and_refractory(windows):
    st_ = _state()
    for i, spikes in enumerate(windows):
        t = np.array(sorted(spikes), dtype=np.int64)
        stitch(st_, [SpikeTrain(3, t)], 400 * i, final=i == len(windows) - 1)
    out = np.array(st_.emitted.get(3, []))
    assert np.all(np.diff(out) > 48)


def test_stream_matches_batch(bank, scenario):
    rec, _ = scenario.segment(201)
    cfg = OnlineConfig()
    streamed = run_stream(rec, bank, cfg)
    batch = batch_decode(rec, bank, cfg)
    assert streamed.offsets.size == 21
    for s, b in zip(streamed.trains, batch):
        fs = s.firing_samples[s.firing_samples >= bank.k]
        fb = b.firing_samples[b.firing_samples >= bank.k]
        assert fs.size == fb.size
        assert count_coincidences(fs, fb, 1) == fs.size


def test_stream_is_deterministic_and_realtime(bank, scenario):
    rec, _ = scenario.segment(202)
    a, b = run_stream(rec, bank), run_stream(rec, bank)
    for x, y in zip(a.trains, b.trains):
        assert np.array_equal(x.firing_samples, y.firing_samples)
    assert a.latencies.size == a.offsets.size
    assert a.realtime and a.latency_mean < 0.2
    assert a.latency_sd >= 0


def test_stream_accuracy_no_noise(bank, scenario):
    mrs = []
    for seg in range(210, 214):
        rec, truth = scenario.segment(seg)
        m = evaluate(run_stream(rec, bank).trains, truth.trains, rec.sample_rate, 1.0, 58)
        mrs.append(m.mr)
    assert np.mean(mrs) >= 0.95


def test_short_recording_gives_no_windows(bank, scenario):
    rec, _ = scenario.segment(203, ramp_s=0.2, hold_s=0.3)
    res = run_stream(rec, bank)
    assert res.offsets.size == 0 and all(t.n_spikes == 0 for t in res.trains)
    assert not res.realtime
