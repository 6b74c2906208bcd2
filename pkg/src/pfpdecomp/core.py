"""Shared domain types and spike-train statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Recording:
    """Multi-channel surface EMG recording.

    Parameters
    ----------
    samples: np.ndarray
        Signal with shape (n_channels, n_samples), stored as float32.
    sample_rate: float
        Sampling frequency in Hz.
    channel_mask: np.ndarray
        Boolean mask with shape (n_channels,), True for usable channels.
    grid_shape: tuple[int, int]
        (rows, cols) of the electrode array; rows * cols == n_channels.
    repaired: np.ndarray
        Boolean mask of channels filled by interpolation. Repaired channels stay
        out of the separation but take part in MUAP estimation.
    """

    samples: np.ndarray
    sample_rate: float
    channel_mask: np.ndarray
    grid_shape: tuple[int, int]
    repaired: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {samples.shape}")
        n_ch, n_t = samples.shape
        mask = np.asarray(self.channel_mask, dtype=bool)
        rows, cols = (int(v) for v in self.grid_shape)
        if rows * cols != n_ch:
            raise ValueError(f"grid {rows}x{cols} does not match {n_ch} channels")
        if mask.shape != (n_ch,):
            raise ValueError(f"channel_mask has shape {mask.shape}, expected ({n_ch},)")
        if not mask.any():
            raise ValueError("every channel is masked out")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if n_t < 1:
            raise ValueError("recording has no samples")
        repaired = np.zeros(n_ch, dtype=bool) if self.repaired is None else np.asarray(self.repaired, dtype=bool)
        samples.setflags(write=False)
        mask.setflags(write=False)
        repaired.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channel_mask", mask)
        object.__setattr__(self, "repaired", repaired)
        object.__setattr__(self, "grid_shape", (rows, cols))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def usable(self) -> np.ndarray:
        """Indices of channels that enter the separation stage."""
        return np.flatnonzero(self.channel_mask & ~self.repaired)

    def with_samples(self, samples: np.ndarray) -> Recording:
        return Recording(samples, self.sample_rate, self.channel_mask, self.grid_shape, self.repaired)

    @classmethod
    def from_array(cls, samples: np.ndarray, sample_rate: float, grid_shape=None) -> Recording:
        samples = np.atleast_2d(samples)
        if grid_shape is None:
            grid_shape = (samples.shape[0], 1)
        return cls(samples, sample_rate, np.ones(samples.shape[0], dtype=bool), grid_shape)


@dataclass(frozen=True)
class SpikeTrain:
    """Firing times of one motor unit as strictly increasing sample indices."""

    mu_id: int
    firing_samples: np.ndarray

    def __post_init__(self):
        fs = np.asarray(self.firing_samples, dtype=np.int64).ravel()
        if fs.size and (fs[0] < 0 or np.any(np.diff(fs) <= 0)):
            raise ValueError(f"firing samples of MU {self.mu_id} must be non-negative and strictly increasing")
        fs.setflags(write=False)
        object.__setattr__(self, "firing_samples", fs)
        object.__setattr__(self, "mu_id", int(self.mu_id))

    def __len__(self) -> int:
        return self.firing_samples.size

    @property
    def n_spikes(self) -> int:
        return self.firing_samples.size

    def shifted(self, lag: int, length: int | None = None) -> SpikeTrain:
        """Return the train moved by ``lag`` samples, dropping spikes that leave [0, length)."""
        fs = self.firing_samples + int(lag)
        keep = fs >= 0
        if length is not None:
            keep &= fs < length
        return SpikeTrain(self.mu_id, fs[keep])

    def satisfies_refractory(self, min_separation: int) -> bool:
        """True when consecutive firings are more than ``min_separation`` samples apart."""
        return bool(np.all(np.diff(self.firing_samples) > min_separation))


@dataclass(frozen=True)
class SpikeStats:
    """Firing statistics; a ``None`` field means the statistic is undefined."""

    n_spikes: int
    firing_rate: float | None = None
    cov_isi: float | None = None
    cov_amp: float | None = None

    @property
    def defined(self) -> bool:
        return self.firing_rate is not None and self.cov_isi is not None and self.cov_amp is not None


def spikes_to_binary(train: SpikeTrain, length: int) -> np.ndarray:
    """0-1 impulse sequence of ``length`` samples with ones at the firing samples."""
    fs = train.firing_samples
    if fs.size and fs[-1] >= length:
        raise IndexError(f"firing sample {int(fs[-1])} out of range for length {length}")
    out = np.zeros(length, dtype=np.uint8)
    out[fs] = 1
    return out


def binary_to_spikes(binary: np.ndarray, mu_id: int = 0) -> SpikeTrain:
    return SpikeTrain(mu_id, np.flatnonzero(np.asarray(binary)))


def _cov(values: np.ndarray) -> float | None:
    mean = float(np.mean(values))
    if mean <= 0:
        return None
    # population standard deviation
    return float(np.std(values) / mean)


def isi_stats(train: SpikeTrain, sample_rate: float) -> SpikeStats:
    """Mean firing rate over the active span and the ISI coefficient of variation.

    ``firing_rate`` needs two spikes and ``cov_isi`` three; otherwise they are ``None``.
    """
    fs = train.firing_samples
    n = fs.size
    rate = None
    cov = None
    if n >= 2:
        span = (fs[-1] - fs[0]) / sample_rate
        rate = (n - 1) / span
    if n >= 3:
        cov = _cov(np.diff(fs).astype(np.float64))
    return SpikeStats(n_spikes=n, firing_rate=rate, cov_isi=cov)


def amp_stats(amplitudes: Sequence[float]) -> SpikeStats:
    """Coefficient of variation of spike amplitudes (needs >= 3 values and a positive mean)."""
    a = np.asarray(amplitudes, dtype=np.float64).ravel()
    cov = _cov(a) if a.size >= 3 else None
    return SpikeStats(n_spikes=a.size, cov_amp=cov)


def spike_stats(train: SpikeTrain, amplitudes: Sequence[float], sample_rate: float) -> SpikeStats:
    """Combined rate, ISI and amplitude statistics."""
    isi = isi_stats(train, sample_rate)
    amp = amp_stats(amplitudes)
    return SpikeStats(n_spikes=isi.n_spikes, firing_rate=isi.firing_rate, cov_isi=isi.cov_isi, cov_amp=amp.cov_amp)


@dataclass(frozen=True)
class MuapTemplateSet:
    """Per-MU, per-channel action potential waveforms.

    ``waveforms`` has shape (n_mus, n_channels, L); row ``j`` belongs to ``mu_ids[j]``.
    """

    mu_ids: np.ndarray
    waveforms: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.mu_ids, dtype=np.int64).ravel()
        w = np.asarray(self.waveforms, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] != ids.size:
            raise ValueError(f"waveforms must have shape (n_mus, M, L) with n_mus={ids.size}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("template waveforms must be finite")
        ids.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "mu_ids", ids)
        object.__setattr__(self, "waveforms", w)

    @property
    def length(self) -> int:
        return self.waveforms.shape[2]

    def __len__(self) -> int:
        return self.mu_ids.size

    def get(self, mu_id: int) -> np.ndarray:
        idx = np.flatnonzero(self.mu_ids == mu_id)
        if idx.size == 0:
            raise KeyError(mu_id)
        return self.waveforms[idx[0]]

    def subset(self, mu_ids) -> MuapTemplateSet:
        mu_ids = list(mu_ids)
        waveforms = np.zeros((len(mu_ids),) + self.waveforms.shape[1:])
        for j, mu in enumerate(mu_ids):
            waveforms[j] = self.get(mu)
        return MuapTemplateSet(np.asarray(mu_ids, dtype=np.int64), waveforms)


def reconstruct(templates: MuapTemplateSet, trains: Sequence[SpikeTrain], n_samples: int) -> np.ndarray:
    """Noise-free convolutive mixture (float64) of ``trains`` with their templates.

    A firing at sample ``t`` places the MUAP on samples ``t .. t+L-1``; the tail past
    ``n_samples`` is cut.
    """
    ids = {int(m) for m in templates.mu_ids}
    missing = [tr.mu_id for tr in trains if tr.mu_id not in ids]
    if missing:
        raise ValueError(f"no template for MU ids {missing}")
    m, length = templates.waveforms.shape[1:]
    out = np.zeros((m, n_samples + length))
    for tr in trains:
        if tr.n_spikes == 0:
            continue
        if tr.firing_samples[-1] >= n_samples:
            raise ValueError(f"MU {tr.mu_id} fires at {int(tr.firing_samples[-1])} beyond {n_samples} samples")
        wave = templates.get(tr.mu_id)
        for s in tr.firing_samples:
            out[:, s:s + length] += wave
    return out[:, :n_samples]
