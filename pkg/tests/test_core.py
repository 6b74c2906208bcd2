import numpy as np
import pytest
from hypothesis import given, strategies as st

from pfpdecomp.core import (MuapTemplateSet, Recording, SpikeTrain, amp_stats, binary_to_spikes, isi_stats,
                            reconstruct, spikes_to_binary)


def test_binary_definition():
    assert spikes_to_binary(SpikeTrain(0, [2, 5]), 8).tolist() == [0, 0, 1, 0, 0, 1, 0, 0]
    assert spikes_to_binary(SpikeTrain(0, []), 4).tolist() == [0, 0, 0, 0]


def test_binary_out_of_range_names_index():
    with pytest.raises(IndexError, match="9"):
        spikes_to_binary(SpikeTrain(0, [1, 9]), 9)


def test_binary_round_trip_random(rng):
    fs = np.sort(rng.choice(5000, 50, replace=False))
    b = spikes_to_binary(SpikeTrain(3, fs), 5000)
    assert b.sum() == 50
    back = binary_to_spikes(b, 3)
    assert np.array_equal(back.firing_samples, fs)
    assert np.array_equal(spikes_to_binary(back, 5000), b)


def test_train_rejects_unsorted():
    with pytest.raises(ValueError):
        SpikeTrain(0, [5, 3])
    with pytest.raises(ValueError):
        SpikeTrain(0, [-1, 3])


def test_isi_periodic():
    s = isi_stats(SpikeTrain(0, np.arange(0, 10000, 250)), 2000.0)  # 8 Hz over 5 s
    assert s.firing_rate == pytest.approx(8.0)
    assert s.cov_isi == pytest.approx(0.0, abs=1e-12)


def test_isi_two_spikes():
    s = isi_stats(SpikeTrain(0, [0, 1000]), 2000.0)
    assert s.firing_rate == pytest.approx(2.0)
    assert s.cov_isi is None
    assert isi_stats(SpikeTrain(0, [7]), 2000.0).firing_rate is None


def test_isi_jitter_cov(rng):
    # Gaussian ISI jitter with SD 0.2 x mean
    isi = np.round(250 * (1 + 0.2 * rng.standard_normal(400))).astype(int)
    s = isi_stats(SpikeTrain(0, np.cumsum(isi)), 2000.0)
    assert s.cov_isi == pytest.approx(0.2, abs=0.05)


def test_isi_population_sd():
    t = np.array([0, 100, 300, 600])
    isi = np.diff(t)
    assert isi_stats(SpikeTrain(0, t), 1.0).cov_isi == pytest.approx(np.sqrt(np.mean((isi - isi.mean()) ** 2)) / isi.mean())


def test_amp_stats():
    assert amp_stats([1, 1, 1, 1]).cov_amp == 0.0
    assert amp_stats([1, 3]).cov_amp is None
    assert amp_stats([-1, -1, 1]).cov_amp is None  # non-positive mean


def test_amp_monte_carlo(rng):
    assert amp_stats(rng.normal(10, 2, 1000)).cov_amp == pytest.approx(0.2, abs=0.02)


@given(st.lists(st.integers(1, 400), min_size=3, max_size=40), st.integers(0, 10**6))
def test_isi_offset_invariant(isis, offset):
    t = np.cumsum(isis)
    a = isi_stats(SpikeTrain(0, t), 2000.0)
    b = isi_stats(SpikeTrain(0, t + offset), 2000.0)
    assert a.firing_rate == pytest.approx(b.firing_rate)
    assert a.cov_isi == pytest.approx(b.cov_isi)


@given(st.lists(st.floats(0.1, 100), min_size=3, max_size=30), st.floats(1e-3, 1e3))
def test_amp_scale_invariant(a, c):
    assert amp_stats(np.array(a) * c).cov_amp == pytest.approx(amp_stats(a).cov_amp, rel=1e-9, abs=1e-12)


def test_recording_invariants():
    x = np.zeros((4, 10))
    with pytest.raises(ValueError):
        Recording(x, 2000.0, np.ones(4, bool), (3, 1))
    with pytest.raises(ValueError):
        Recording(x, 2000.0, np.zeros(4, bool), (2, 2))
    with pytest.raises(ValueError):
        Recording(x, 0.0, np.ones(4, bool), (2, 2))
    rec = Recording(x, 2000.0, np.ones(4, bool), (2, 2))
    assert rec.samples.dtype == np.float32
    with pytest.raises(ValueError):
        rec.samples[0, 0] = 1.0


def test_reconstruct_single_impulse(rng):
    w = rng.standard_normal((1, 3, 5))
    out = reconstruct(MuapTemplateSet([7], w), [SpikeTrain(7, [4])], 20)
    assert np.array_equal(out[:, 4:9], w[0])
    assert not out[:, :4].any() and not out[:, 9:].any()
