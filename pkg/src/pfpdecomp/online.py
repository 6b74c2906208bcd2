"""Two-stage online decomposition.

Prework: offline decompositions of a few segments are pooled into a bank of composite
separation vectors (whitening folded in). Online: every window of the stream is
extended, multiplied by the bank and thresholded per MU; overlapping windows are
stitched into continuous spike trains.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .apfp import DecompositionResult, find_duplicate, greedy_refractory, local_peaks, otsu_threshold, \
    spike_energy, threshold_source
from .core import Recording, SpikeTrain
from .io import read_bank_arrays, write_bank_arrays
from .preprocess import extend_array


@dataclass(frozen=True)
class VectorBank:
    """Composite separation vectors applied directly to the delay-extended raw signal.

    Row ``j`` of ``vectors`` yields MU ``mu_ids[j]``; its length is (usable channels) * k.
    ``cov_amp`` / ``cov_isi`` are the prework statistics (NaN when undefined).
    """

    vectors: np.ndarray
    mu_ids: np.ndarray
    cov_amp: np.ndarray
    cov_isi: np.ndarray
    k: int
    length: int
    sample_rate: float

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if v.shape[0] != len(self.mu_ids):
            raise ValueError("one MU id per vector is required")
        if v.shape[1] % self.k:
            raise ValueError(f"vector length {v.shape[1]} is not a multiple of k={self.k}")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "mu_ids", np.asarray(self.mu_ids, dtype=np.int64))
        object.__setattr__(self, "cov_amp", np.asarray(self.cov_amp, dtype=np.float64))
        object.__setattr__(self, "cov_isi", np.asarray(self.cov_isi, dtype=np.float64))

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_channels(self) -> int:
        return self.vectors.shape[1] // self.k

    def save(self, path) -> None:
        write_bank_arrays(path, self.vectors, self.mu_ids, self.cov_amp, self.cov_isi,
                          self.sample_rate, self.k, self.length)

    @classmethod
    def load(cls, path) -> VectorBank:
        d = read_bank_arrays(path)
        return cls(d["vectors"], d["mu_ids"], d["cov_amp"], d["cov_isi"], d["k"], d["length"], d["sample_rate"])

    def check_compatible(self, n_channels: int, sample_rate: float, k: int | None = None) -> None:
        if sample_rate != self.sample_rate:
            raise ValueError(f"sample rate mismatch: stream {sample_rate} Hz, bank {self.sample_rate} Hz")
        if k is not None and k != self.k:
            raise ValueError(f"extension factor mismatch: requested K={k}, bank K={self.k}")
        if n_channels != self.n_channels:
            raise ValueError(f"channel mismatch: stream has {n_channels} usable channels, bank expects "
                             f"{self.n_channels}")


@dataclass(frozen=True)
class OnlineConfig:
    window_s: float = 1.0
    increment_s: float = 0.2
    max_candidate_thresholds: int = 64
    min_spikes_per_window: int = 2
    match_tolerance_ms: float = 1.0
    selector: str = "otsu-multi"
    min_peak: float = 0.3
    max_step: float | None = 0.8

    def __post_init__(self):
        if not 0 < self.increment_s <= self.window_s:
            raise ValueError("need 0 < increment_s <= window_s")
        if self.selector not in ("otsu-multi", "otsu", "kmeans"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.max_candidate_thresholds < 1:
            raise ValueError("max_candidate_thresholds must be >= 1")


# ---------------------------------------------------------------------------
# bank curation

def _low_quality(cov_amp, cov_isi, rule: str) -> np.ndarray:
    amp_bad = np.nan_to_num(cov_amp, nan=np.inf) > 0.3
    isi_bad = np.nan_to_num(cov_isi, nan=np.inf) > 0.4
    if rule == "and":
        return amp_bad & isi_bad
    if rule == "or":
        return amp_bad | isi_bad
    raise ValueError(f"quality rule must be 'and' or 'or', got {rule!r}")


def curate_entries(vectors: np.ndarray, cov_amp, cov_isi, ext: np.ndarray, length: int, sample_rate: float,
                   k: int, rule: str = "and", tol_ms: float = 1.0):
    """Indices of vectors that survive the quality and duplicate rules, plus drop counts.

    ``ext`` is the extended signal the duplicate rule is evaluated on. Among duplicates
    the vector with the lower CoV_amp + CoV_isi is kept.
    """
    cov_amp = np.asarray(cov_amp, dtype=np.float64)
    cov_isi = np.asarray(cov_isi, dtype=np.float64)
    counts = {"quality": 0, "duplicate": 0}
    bad = _low_quality(cov_amp, cov_isi, rule)
    counts["quality"] = int(bad.sum())
    score = np.nan_to_num(cov_amp + cov_isi, nan=np.inf)
    order = [i for i in np.lexsort((np.arange(len(score)), score)) if not bad[i]]
    tol = int(round(tol_ms * 1e-3 * sample_rate))
    kept, kept_trains = [], []
    for i in order:
        train, _, _ = threshold_source(vectors[i] @ ext, length, i)
        if find_duplicate(train, kept_trains, tol, k + length) is not None:
            counts["duplicate"] += 1
            continue
        kept.append(int(i))
        kept_trains.append(train)
    return sorted(kept), counts


def concatenated_extension(recordings: Sequence[Recording], channels, k: int) -> np.ndarray:
    return np.concatenate([extend_array(r.samples[channels], k) for r in recordings], axis=1)


def bank_from_result(result: DecompositionResult) -> VectorBank:
    """All accepted MUs of one decomposition as an uncurated bank (ids = APFP MU ids)."""
    mus = result.mus
    d = len(result.channels) * result.k
    return VectorBank(np.array([m.vector for m in mus]).reshape(len(mus), d), [m.mu_id for m in mus],
                      [m.stats.cov_amp for m in mus], [m.stats.cov_isi for m in mus],
                      result.k, result.length, result.sample_rate)


def curate_banks(banks: Sequence[VectorBank], recordings: Sequence[Recording], rule: str = "and",
                 tol_ms: float = 1.0, channels=None) -> VectorBank:
    """Pool several uncurated banks into one curated bank.

    ``recordings`` are the prework segments (same order as ``banks``); the duplicate
    rule runs on their concatenation. Vectors are renumbered 0..N-1.
    """
    if not banks:
        raise ValueError("bank curation needs at least one prework bank")
    if len(banks) != len(recordings):
        raise ValueError("one recording per prework bank is required")
    b0 = banks[0]
    for b in banks[1:]:
        if (b.k, b.length, b.sample_rate, b.n_channels) != (b0.k, b0.length, b0.sample_rate, b0.n_channels):
            raise ValueError("prework banks differ in K, L, sample rate or channel count")
    channels = recordings[0].usable if channels is None else np.asarray(channels)
    for r in recordings:
        b0.check_compatible(len(channels), r.sample_rate)
    vectors = np.concatenate([b.vectors for b in banks if b.n_vectors]) if any(b.n_vectors for b in banks) \
        else np.zeros((0, b0.vectors.shape[1]))
    if vectors.shape[0] == 0:
        raise ValueError("empty bank: prework produced no MUs")
    cov_amp = np.concatenate([b.cov_amp for b in banks])
    cov_isi = np.concatenate([b.cov_isi for b in banks])
    ext = concatenated_extension(recordings, channels, b0.k)
    kept, counts = curate_entries(vectors, cov_amp, cov_isi, ext, b0.length, b0.sample_rate, b0.k, rule, tol_ms)
    if not kept:
        raise ValueError(f"empty bank after curation: {counts['quality']} dropped for quality, "
                         f"{counts['duplicate']} as duplicates")
    return VectorBank(vectors[kept], np.arange(len(kept)), cov_amp[kept], cov_isi[kept],
                      b0.k, b0.length, b0.sample_rate)


def curate_bank(results: Sequence[DecompositionResult], recordings: Sequence[Recording], rule: str = "and",
                tol_ms: float = 1.0) -> VectorBank:
    """:func:`curate_banks` applied to decomposition results."""
    if not results:
        raise ValueError("curate_bank needs at least one decomposition result")
    r0 = results[0]
    for r in results[1:]:
        if not np.array_equal(r.channels, r0.channels):
            raise ValueError("prework results differ in their channel set")
    if not any(r.mus for r in results):
        raise ValueError("empty bank: prework produced no MUs")
    banks = [bank_from_result(r) for r in results]
    return curate_banks(banks, recordings, rule, tol_ms, channels=r0.channels)


# ---------------------------------------------------------------------------
# spike extraction per window

def _cov(v: np.ndarray) -> float:
    m = v.mean()
    return float(v.std() / m) if m > 0 else np.inf


@dataclass(frozen=True)
class ThresholdSweep:
    """Candidate thresholds (on the squared scale) and their CoV_amp + CoV_isi scores."""

    thresholds: np.ndarray
    scores: np.ndarray  # inf where a candidate has fewer than 3 spikes
    chosen: int  # index into thresholds, -1 when the initial Otsu train was kept by default


def successive_multithreshold_otsu(source: np.ndarray, length: int, max_candidates: int = 64,
                                   min_peak: float = 0.0, max_step: float | None = None,
                                   mu_id: int = 0) -> tuple[SpikeTrain, ThresholdSweep]:
    """Spike train minimising CoV_amp + CoV_isi over a ladder of thresholds.

    The ladder starts at the Otsu threshold of the one-sided squared source and adds the
    midpoints between consecutive ranked peak energies. Peaks whose amplitude is below
    ``min_peak`` are never counted, and with ``max_step`` the ladder stops at that
    amplitude.
    """
    e = spike_energy(np.asarray(source, dtype=np.float64))
    empty = SpikeTrain(mu_id, [])
    if not e.max() > e.min():
        return empty, ThresholdSweep(np.zeros(0), np.zeros(0), -1)
    thr0 = max(otsu_threshold(e), min_peak**2)
    peaks = local_peaks(e, thr0)
    kept = greedy_refractory(peaks, e[peaks], length)
    if kept.size == 0:
        return empty, ThresholdSweep(np.array([thr0]), np.array([np.inf]), -1)
    heights = e[kept]
    ranked = np.sort(heights)
    cands = np.concatenate([[thr0], (ranked[:-1] + ranked[1:]) / 2])
    cands = np.unique(cands)
    if max_step is not None:
        cands = cands[(cands <= max_step**2) | (cands == thr0)]
    if cands.size > max_candidates:
        cands = cands[np.unique(np.round(np.linspace(0, cands.size - 1, max_candidates)).astype(int))]
    scores = np.full(cands.size, np.inf)
    for i, c in enumerate(cands):
        sel = heights > c
        if sel.sum() < 3:
            continue
        t = kept[sel]
        scores[i] = _cov(np.sqrt(heights[sel])) + _cov(np.diff(t).astype(np.float64))
    if not np.isfinite(scores).any():
        return SpikeTrain(mu_id, kept), ThresholdSweep(cands, scores, -1)
    best = int(np.argmin(scores))  # first minimum, i.e. the lowest threshold among ties
    return SpikeTrain(mu_id, kept[heights > cands[best]]), ThresholdSweep(cands, scores, best)


def _two_means(v: np.ndarray):
    # the optimal 2-means partition of sorted 1-D data is a split point; scan them all
    order = np.argsort(v, kind="stable")
    x = v[order]
    n = x.size
    c1 = np.cumsum(x)[:-1]
    c2 = np.cumsum(x * x)[:-1]
    m = np.arange(1, n)
    t1, t2 = x.sum(), (x * x).sum()
    cost = (c2 - c1**2 / m) + ((t2 - c2) - (t1 - c1) ** 2 / (n - m))
    cut = int(np.argmin(cost)) + 1
    centres = np.array([x[:cut].mean(), x[cut:].mean()])
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n) >= cut).astype(np.int64)
    return centres, labels


def kmeans_1d(values: np.ndarray, k: int = 2, tol: float = 1e-9, max_iter: int = 1000):
    """1-D k-means. Returns (centres, labels).

    ``k = 2`` is solved exactly over the sorted split points, since Lloyd iterations
    seeded at min and max can stall in a local optimum. Other ``k`` run Lloyd's algorithm
    with centres seeded evenly from min to max.
    """
    v = np.asarray(values, dtype=np.float64)
    if k == 2 and v.size >= 2:
        return _two_means(v)
    centres = np.linspace(v.min(), v.max(), k)
    labels = np.zeros(v.size, dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(np.abs(v[:, None] - centres[None, :]), axis=1)
        new = np.array([v[labels == j].mean() if np.any(labels == j) else centres[j] for j in range(k)])
        moved = np.max(np.abs(new - centres))
        centres = new
        if moved <= tol:
            break
    labels = np.argmin(np.abs(v[:, None] - centres[None, :]), axis=1)
    return centres, labels


def kmeans_threshold(source: np.ndarray, length: int, min_peak: float = 0.0, mu_id: int = 0) -> SpikeTrain:
    """Baseline selector: 2-means on the squared peak energies, keep the high group."""
    e = spike_energy(np.asarray(source, dtype=np.float64))
    if not e.max() > e.min():
        return SpikeTrain(mu_id, [])
    peaks = local_peaks(e, min_peak**2 if min_peak > 0 else 0.0)
    if peaks.size < 2:
        return SpikeTrain(mu_id, peaks)
    centres, labels = kmeans_1d(e[peaks], 2)
    hi = peaks[labels == int(np.argmax(centres))]
    return SpikeTrain(mu_id, greedy_refractory(hi, e[hi], length))


def _select(source: np.ndarray, length: int, config: OnlineConfig, mu_id: int) -> SpikeTrain:
    if config.selector == "kmeans":
        return kmeans_threshold(source, length, config.min_peak, mu_id)
    if config.selector == "otsu":
        train, amps, _ = threshold_source(source, length, mu_id)
        return SpikeTrain(mu_id, train.firing_samples[amps >= config.min_peak])
    return successive_multithreshold_otsu(source, length, config.max_candidate_thresholds, config.min_peak,
                                          config.max_step, mu_id)[0]


def select_spikes(source: np.ndarray, length: int, config: OnlineConfig, mu_id: int = 0) -> SpikeTrain:
    """Window-local train of one bank source; fewer than ``min_spikes_per_window`` spikes count as none."""
    train = _select(source, length, config, mu_id)
    if train.n_spikes < config.min_spikes_per_window:
        return SpikeTrain(mu_id, [])
    return train


def window_sources(samples: np.ndarray, bank: VectorBank, history: np.ndarray | None = None) -> np.ndarray:
    """Bank sources (N, W) for one window of usable-channel samples."""
    if samples.shape[0] != bank.n_channels:
        raise ValueError(f"channel mismatch: window has {samples.shape[0]} channels, bank expects "
                         f"{bank.n_channels}")
    return bank.vectors @ extend_array(samples, bank.k, history)


def process_window(samples: np.ndarray, bank: VectorBank, config: OnlineConfig,
                   history: np.ndarray | None = None) -> tuple[list[SpikeTrain], float]:
    """Window-local spike trains for every bank vector, and the wall-clock seconds spent."""
    t0 = time.perf_counter()
    src = window_sources(samples, bank, history)
    trains = [select_spikes(src[j], bank.length, config, int(bank.mu_ids[j])) for j in range(bank.n_vectors)]
    return trains, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# stitching

@dataclass
class StitchState:
    """Running state of the window stitcher.

    ``clock`` is the stream offset the next window must start at; ``emitted`` holds the
    spikes already released per MU.
    """

    window: int
    increment: int
    guard: int
    refractory: int
    clock: int = 0
    last: dict = field(default_factory=dict)
    emitted: dict = field(default_factory=dict)


def stitch(state: StitchState, trains: Sequence[SpikeTrain], offset: int, final: bool = False) -> dict:
    """Release the spikes of one window that fall in its newest region.

    A window starting at ``offset`` owns stream samples
    ``[offset + window - increment - guard, offset + window - guard)`` (the first
    window owns everything before that, the final one everything after). A spike closer
    than the refractory spacing to the last released spike of the same MU is dropped.
    Returns ``{mu_id: newly emitted stream samples}``.
    """
    if offset != state.clock:
        raise ValueError(f"window at offset {offset} arrived out of order (expected {state.clock})")
    end = offset + state.window
    lo = 0 if offset == 0 else end - state.increment - state.guard
    hi = end if final else end - state.guard
    out = {}
    for tr in trains:
        t = tr.firing_samples + offset
        t = t[(t >= lo) & (t < hi)]
        last = state.last.get(tr.mu_id, -np.iinfo(np.int64).max // 2)
        new = []
        for s in t:
            if s - last > state.refractory:
                new.append(int(s))
                last = s
        state.last[tr.mu_id] = last
        state.emitted.setdefault(tr.mu_id, []).extend(new)
        out[tr.mu_id] = new
    state.clock = offset + state.increment
    return out


@dataclass
class StreamResult:
    trains: list
    latencies: np.ndarray  # seconds per window
    offsets: np.ndarray
    increment_s: float

    @property
    def latency_mean(self) -> float:
        return float(self.latencies.mean()) if self.latencies.size else float("nan")

    @property
    def latency_sd(self) -> float:
        return float(self.latencies.std()) if self.latencies.size else float("nan")

    @property
    def latency_max(self) -> float:
        return float(self.latencies.max()) if self.latencies.size else float("nan")

    @property
    def realtime(self) -> bool:
        return bool(self.latencies.size) and self.latency_max < self.increment_s


def _geometry(config: OnlineConfig, fs: float):
    w = int(round(config.window_s * fs))
    inc = int(round(config.increment_s * fs))
    return w, inc


def _windows(n_samples: int, w: int, inc: int) -> np.ndarray:
    if n_samples < w:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_samples - w + 1, inc)


def _state(bank: VectorBank, config: OnlineConfig) -> StitchState:
    w, inc = _geometry(config, bank.sample_rate)
    return StitchState(window=w, increment=inc, guard=bank.length, refractory=bank.length)


def _collect(state: StitchState, bank: VectorBank) -> list[SpikeTrain]:
    return [SpikeTrain(int(mu), state.emitted.get(int(mu), [])) for mu in bank.mu_ids]


def run_stream(recording: Recording, bank: VectorBank, config: OnlineConfig = OnlineConfig(),
               realtime: bool = False, channels=None) -> StreamResult:
    """Feed ``recording`` window by window through the bank.

    With ``realtime`` the loop waits until each window's last sample would have been
    acquired at the native rate. A trailing partial window is dropped.
    """
    channels = recording.usable if channels is None else np.asarray(channels)
    bank.check_compatible(len(channels), recording.sample_rate)
    x = recording.samples[channels].astype(np.float64)
    fs = recording.sample_rate
    w, inc = _geometry(config, fs)
    state = _state(bank, config)
    offsets = _windows(x.shape[1], w, inc)
    lat = np.zeros(offsets.size)
    hist_len = bank.k - 1
    start = time.perf_counter()
    for i, off in enumerate(offsets):
        if realtime:
            delay = (off + w) / fs - (time.perf_counter() - start)
            if delay > 0:
                time.sleep(delay)
        history = x[:, max(0, off - hist_len):off]
        if history.shape[1] < hist_len:
            history = np.pad(history, ((0, 0), (hist_len - history.shape[1], 0)))
        trains, lat[i] = process_window(x[:, off:off + w], bank, config, history)
        stitch(state, trains, int(off), final=i == offsets.size - 1)
    return StreamResult(_collect(state, bank), lat, offsets, config.increment_s)


def batch_decode(recording: Recording, bank: VectorBank, config: OnlineConfig = OnlineConfig(),
                 channels=None) -> list[SpikeTrain]:
    """Reference for the stream: bank sources computed once on the whole signal, then
    cut into the same windows, thresholded and stitched."""
    channels = recording.usable if channels is None else np.asarray(channels)
    bank.check_compatible(len(channels), recording.sample_rate)
    src = bank.vectors @ extend_array(recording.samples[channels], bank.k)
    w, inc = _geometry(config, recording.sample_rate)
    state = _state(bank, config)
    offsets = _windows(src.shape[1], w, inc)
    for i, off in enumerate(offsets):
        trains = [select_spikes(src[j, off:off + w], bank.length, config, int(bank.mu_ids[j]))
                  for j in range(bank.n_vectors)]
        stitch(state, trains, int(off), final=i == offsets.size - 1)
    return _collect(state, bank)
