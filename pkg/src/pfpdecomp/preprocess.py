"""Filtering, channel repair, delay extension and whitening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import Recording


@dataclass(frozen=True)
class FilterSpec:
    bp_low: float = 20.0
    bp_high: float = 500.0
    bp_order: int = 10
    notch_hz: float = 50.0
    notch_q: float = 30.0
    bandpass_enabled: bool = True
    notch_enabled: bool = True

    def validate(self, sample_rate: float) -> None:
        nyq = sample_rate / 2
        if self.bandpass_enabled and not 0 < self.bp_low < self.bp_high < nyq:
            raise ValueError(f"band-pass {self.bp_low}-{self.bp_high} Hz invalid for sample rate {sample_rate} Hz")
        if self.notch_enabled and not 0 < self.notch_hz < nyq:
            raise ValueError(f"notch at {self.notch_hz} Hz invalid for sample rate {sample_rate} Hz")


def _design(spec: FilterSpec, fs: float) -> np.ndarray | None:
    sections = []
    if spec.bandpass_enabled:
        # butter() doubles the order for band-pass designs
        sos = signal.butter(spec.bp_order // 2, [spec.bp_low, spec.bp_high], btype="bandpass", output="sos", fs=fs)
        sections.append(sos)
    if spec.notch_enabled:
        b, a = signal.iirnotch(spec.notch_hz, spec.notch_q, fs=fs)
        sections.append(signal.tf2sos(b, a))
    if not sections:
        return None
    sos = np.vstack(sections)
    poles = np.concatenate([np.roots(s[3:]) for s in sos])
    if np.any(np.abs(poles) >= 1):
        raise ValueError("filter design is unstable at this sample rate")
    return sos


def apply_filters(rec: Recording, spec: FilterSpec) -> Recording:
    """Zero-phase band-pass then notch on every unmasked channel."""
    spec.validate(rec.sample_rate)
    sos = _design(spec, rec.sample_rate)
    if sos is None:
        return rec
    out = rec.samples.astype(np.float64)
    idx = np.flatnonzero(rec.channel_mask)
    padlen = min(3 * (2 * sos.shape[0] + 1), rec.n_samples - 1)
    out[idx] = signal.sosfiltfilt(sos, out[idx], axis=1, padlen=padlen)
    return rec.with_samples(out)


def repair_channels(rec: Recording) -> Recording:
    """Replace masked channels by the mean of their unmasked 4-neighbours.

    Repaired channels are flagged; they stay out of the separation stage.
    """
    bad = np.flatnonzero(~rec.channel_mask)
    if bad.size == 0:
        return rec
    rows, cols = rec.grid_shape
    good = rec.channel_mask
    out = rec.samples.astype(np.float64)
    for ch in bad:
        r, c = divmod(int(ch), cols)
        nb = [rr * cols + cc for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
              if 0 <= rr < rows and 0 <= cc < cols and good[rr * cols + cc]]
        if not nb:
            raise ValueError(f"channel {int(ch)} has no unmasked neighbour to interpolate from")
        out[ch] = out[nb].mean(axis=0)
    repaired = rec.repaired | ~rec.channel_mask
    return Recording(out, rec.sample_rate, np.ones(rec.n_channels, dtype=bool), rec.grid_shape, repaired)


def suggest_bad_channels(rec: Recording, factor: float = 5.0) -> np.ndarray:
    """Channels whose RMS exceeds ``factor`` times the median channel RMS (advisory only)."""
    rms = np.sqrt(np.mean(rec.samples.astype(np.float64) ** 2, axis=1))
    med = np.median(rms[rec.channel_mask])
    return np.flatnonzero(rec.channel_mask & (rms > factor * med))


@dataclass(frozen=True)
class ExtendedSignal:
    """Delay-extended observations; row ``i*K + k`` is source channel ``channels[i]`` delayed by ``k``."""

    data: np.ndarray
    k: int
    channels: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


def extend_array(x: np.ndarray, k: int, history: np.ndarray | None = None) -> np.ndarray:
    """Stack ``k`` delayed copies of every row of ``x``.

    ``history`` holds the ``k - 1`` samples preceding ``x`` (zeros when omitted).
    """
    if k < 1:
        raise ValueError(f"extension factor must be >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    m, t = x.shape
    if history is None:
        history = np.zeros((m, k - 1))
    history = np.asarray(history, dtype=np.float64)
    if history.shape[1] < k - 1:
        raise ValueError(f"history needs {k - 1} samples, got {history.shape[1]}")
    padded = np.concatenate([history[:, history.shape[1] - (k - 1):], x], axis=1)
    out = np.empty((m, k, t))
    for d in range(k):
        out[:, d, :] = padded[:, k - 1 - d:k - 1 - d + t]
    return out.reshape(m * k, t)


def extend(rec: Recording, k: int, channels: np.ndarray | None = None) -> ExtendedSignal:
    """Extend the usable channels of ``rec`` by ``k`` delays (zero-padded start)."""
    if k < 1:
        raise ValueError(f"extension factor must be >= 1, got {k}")
    channels = rec.usable if channels is None else np.asarray(channels)
    return ExtendedSignal(extend_array(rec.samples[channels], k), k, channels)


@dataclass(frozen=True)
class WhiteningTransform:
    """``z = matrix @ (x_ext - mean)`` has identity covariance on the fitting data."""

    matrix: np.ndarray
    mean: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, ext: np.ndarray) -> np.ndarray:
        return self.matrix @ (ext - self.mean[:, None])

    def fold(self, w: np.ndarray) -> np.ndarray:
        """Map whitened-space separation vectors (rows) to extended-raw space."""
        return np.atleast_2d(w) @ self.matrix


def fit_whitening(ext: ExtendedSignal | np.ndarray, rel_cutoff: float = 1e-6) -> WhiteningTransform:
    """Eigen-whitening of the sample covariance; near-null directions are discarded."""
    x = ext.data if isinstance(ext, ExtendedSignal) else np.asarray(ext, dtype=np.float64)
    if x.shape[1] < 2:
        raise ValueError("whitening needs at least 2 samples")
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / x.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise ValueError("input has zero variance")
    keep = evals > rel_cutoff * evals[-1]
    evals, evecs = evals[keep], evecs[:, keep]
    q = (evecs / np.sqrt(evals)).T
    # one refinement pass pins the fitted covariance to identity for ill-conditioned inputs
    z = q @ xc
    c2 = z @ z.T / x.shape[1]
    e2, v2 = np.linalg.eigh(c2)
    q = (v2 / np.sqrt(e2)) @ v2.T @ q if np.all(e2 > 0) else q
    return WhiteningTransform(q, mean)
