"""Accuracy of a decomposition against a reference: MR/FDR/FNR, MDR, CoV and DI/CDI."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import MuapTemplateSet, Recording, SpikeTrain, isi_stats


def _pair_sweep(a: np.ndarray, b: np.ndarray, tol: int) -> tuple[int, int]:
    i = j = n = err = 0
    na, nb = len(a), len(b)
    while i < na and j < nb:
        d = int(a[i]) - int(b[j])
        if abs(d) <= tol:
            n += 1
            err += abs(d)
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return n, err


def count_coincidences(a: np.ndarray, b: np.ndarray, tol: int) -> int:
    """Size of the largest one-to-one pairing of ``a`` and ``b`` spikes within ``tol`` samples."""
    return _pair_sweep(a, b, tol)[0]


def _coincidence_profile(a: np.ndarray, b: np.ndarray, max_lag: int, tol: int) -> np.ndarray:
    """Per-lag count of ``a`` spikes with some ``b`` spike within ``tol`` after shifting ``a`` by the lag."""
    width = max_lag + tol
    lo = np.searchsorted(b, a - width)
    hi = np.searchsorted(b, a + width, side="right")
    hist = np.zeros(2 * width + 1, dtype=np.int64)
    for i in range(a.size):
        if hi[i] > lo[i]:
            hist[b[lo[i]:hi[i]] - a[i] + width] += 1
    return np.convolve(hist, np.ones(2 * tol + 1, dtype=np.int64), mode="valid")


def align_lag(a: SpikeTrain, b: SpikeTrain, max_lag: int, tol: int) -> int:
    """Lag (``b`` ~ ``a`` + lag) in [-max_lag, max_lag] maximising coincidences.

    Ties go to the smallest summed timing error of the paired spikes, then to the
    smallest |lag|.
    """
    fa, fb = a.firing_samples, b.firing_samples
    if fa.size == 0 or fb.size == 0:
        return 0
    profile = _coincidence_profile(fa, fb, max_lag, tol)
    lags = np.arange(-max_lag, max_lag + 1)
    best = profile.max()
    cands = lags[profile == best]
    if best == 0:
        return 0
    # exact one-to-one counts for the shortlisted lags
    sweep = np.array([_pair_sweep(fa + lag, fb, tol) for lag in cands])
    keep = sweep[:, 0] == sweep[:, 0].max()
    cands, err = cands[keep], sweep[keep, 1]
    order = np.lexsort((cands, np.abs(cands), err))
    return int(cands[order[0]])


@dataclass(frozen=True)
class PairMatch:
    online_id: int
    reference_id: int
    n_common: int
    n_online: int
    n_reference: int
    lag: int

    def __post_init__(self):
        if self.n_common > min(self.n_online, self.n_reference):
            raise ValueError("n_common cannot exceed either train's spike count")

    @property
    def mr(self) -> float:
        total = self.n_online + self.n_reference
        return 2 * self.n_common / total if total else 0.0


@dataclass(frozen=True)
class MatchResult:
    pairs: list
    unmatched_online: list
    unmatched_reference: list
    max_lag: int = 0
    tol: int = 0
    online: dict = field(default_factory=dict, repr=False)
    reference: dict = field(default_factory=dict, repr=False)


def pair_counts(o: SpikeTrain, r: SpikeTrain, tol: int, max_lag: int) -> PairMatch:
    lag = align_lag(o, r, max_lag, tol)
    common = count_coincidences(o.firing_samples + lag, r.firing_samples, tol)
    return PairMatch(o.mu_id, r.mu_id, common, o.n_spikes, r.n_spikes, lag)


def match_pairs(online: Sequence[SpikeTrain], reference: Sequence[SpikeTrain], tol: int, max_lag: int,
                mr_floor: float = 0.3) -> MatchResult:
    """Pair online and reference MUs greedily by descending MR, each MU used once."""
    table = [pair_counts(o, r, tol, max_lag) for o in online for r in reference]
    table.sort(key=lambda p: (-p.mr, p.online_id, p.reference_id))
    used_o, used_r, pairs = set(), set(), []
    for p in table:
        if p.mr < mr_floor or p.n_common == 0:
            break
        if p.online_id in used_o or p.reference_id in used_r:
            continue
        pairs.append(p)
        used_o.add(p.online_id)
        used_r.add(p.reference_id)
    pairs.sort(key=lambda p: p.reference_id)
    return MatchResult(
        pairs=pairs,
        unmatched_online=[o.mu_id for o in online if o.mu_id not in used_o],
        unmatched_reference=[r.mu_id for r in reference if r.mu_id not in used_r],
        max_lag=max_lag,
        tol=tol,
        online={o.mu_id: o for o in online},
        reference={r.mu_id: r for r in reference},
    )


def rates(n_common: int, n_online: int, n_reference: int) -> tuple[float, float, float]:
    """(MR, FDR, FNR). FDR is 0 for an empty online train, FNR is 0 for an empty reference."""
    total = n_online + n_reference
    mr = 2 * n_common / total if total else 0.0
    fdr = (n_online - n_common) / n_online if n_online else 0.0
    fnr = (n_reference - n_common) / n_reference if n_reference else 0.0
    return mr, fdr, fnr


def mean_discharge_rate(train: SpikeTrain, sample_rate: float) -> float | None:
    """Mean of the instantaneous discharge rates (sample_rate / ISI)."""
    if train.n_spikes < 2:
        return None
    return float(np.mean(sample_rate / np.diff(train.firing_samples)))


@dataclass(frozen=True)
class PairMetrics:
    online_id: int
    reference_id: int
    lag: int
    n_common: int
    n_online: int
    n_reference: int
    mr: float
    fdr: float
    fnr: float
    mdr_online: float | None
    mdr_reference: float | None
    cov_online: float | None
    cov_reference: float | None

    def __post_init__(self):
        # exact integer identities
        assert math.isclose(self.mr * (self.n_online + self.n_reference), 2 * self.n_common, abs_tol=1e-9)
        assert math.isclose(self.fnr * self.n_reference, self.n_reference - self.n_common, abs_tol=1e-9) \
            or self.n_reference == 0
        assert math.isclose(self.fdr * self.n_online, self.n_online - self.n_common, abs_tol=1e-9) \
            or self.n_online == 0


@dataclass(frozen=True)
class MatchMetrics:
    pairs: list
    mr: float
    fdr: float
    fnr: float
    mdr_online: float
    mdr_reference: float
    cov_online: float
    cov_reference: float
    n_matched: int
    unmatched_online: list
    unmatched_reference: list
    fdr_rule_applied: bool = False


def _nanmean(values) -> float:
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def compute_metrics(match: MatchResult, sample_rate: float) -> MatchMetrics:
    """Per-pair MR/FDR/FNR, MDR and CoV_isi, averaged over matched pairs."""
    out = []
    empty_online = False
    for p in match.pairs:
        mr, fdr, fnr = rates(p.n_common, p.n_online, p.n_reference)
        empty_online |= p.n_online == 0
        o = match.online.get(p.online_id)
        r = match.reference.get(p.reference_id)
        out.append(PairMetrics(
            p.online_id, p.reference_id, p.lag, p.n_common, p.n_online, p.n_reference, mr, fdr, fnr,
            mean_discharge_rate(o, sample_rate) if o is not None else None,
            mean_discharge_rate(r, sample_rate) if r is not None else None,
            isi_stats(o, sample_rate).cov_isi if o is not None else None,
            isi_stats(r, sample_rate).cov_isi if r is not None else None,
        ))
    return MatchMetrics(
        pairs=out,
        mr=_nanmean(p.mr for p in out),
        fdr=_nanmean(p.fdr for p in out),
        fnr=_nanmean(p.fnr for p in out),
        mdr_online=_nanmean(p.mdr_online for p in out),
        mdr_reference=_nanmean(p.mdr_reference for p in out),
        cov_online=_nanmean(p.cov_online for p in out),
        cov_reference=_nanmean(p.cov_reference for p in out),
        n_matched=len(out),
        unmatched_online=list(match.unmatched_online),
        unmatched_reference=list(match.unmatched_reference),
        fdr_rule_applied=empty_online,
    )


def evaluate(online: Sequence[SpikeTrain], reference: Sequence[SpikeTrain], sample_rate: float,
             tol_ms: float = 1.0, max_lag: int = 58, mr_floor: float = 0.3) -> MatchMetrics:
    """Match then score, with the tolerance given in milliseconds."""
    tol = int(round(tol_ms * 1e-3 * sample_rate))
    return compute_metrics(match_pairs(online, reference, tol, max_lag, mr_floor), sample_rate)


@dataclass(frozen=True)
class DiReport:
    mu_ids: np.ndarray
    di: np.ndarray  # (n_mus, n_channels); NaN on skipped channels
    cdi: np.ndarray
    skipped_channels: list


def decomposability(templates: MuapTemplateSet, recording: Recording) -> DiReport:
    """Per-channel decomposability index and its Euclidean-norm composite."""
    w = templates.waveforms
    n, m, _ = w.shape
    if n < 1:
        raise ValueError("at least one MU is required")
    if m != recording.n_channels:
        raise ValueError(f"templates have {m} channels, recording has {recording.n_channels}")
    rms = np.sqrt(np.mean(recording.samples.astype(np.float64) ** 2, axis=1))
    norms = np.linalg.norm(w, axis=2)  # (n, m)
    num = norms.copy()
    if n > 1:
        diff = np.linalg.norm(w[:, None] - w[None, :], axis=3)  # (n, n, m)
        diff[np.arange(n), np.arange(n)] = np.inf
        num = np.minimum(num, diff.min(axis=1))
    skipped = [int(i) for i in np.flatnonzero(rms <= 0)]
    di = np.full((n, m), np.nan)
    ok = rms > 0
    di[:, ok] = num[:, ok] / rms[ok]
    cdi = np.sqrt(np.nansum(di**2, axis=1))
    return DiReport(templates.mu_ids.copy(), di, cdi, skipped)


CSV_COLUMNS = ["online_id", "reference_id", "lag", "n_common", "n_online", "n_reference", "mr", "fdr", "fnr",
               "mdr_online", "mdr_reference", "cov_online", "cov_reference", "cdi"]


def write_metrics_csv(path, metrics: MatchMetrics, cdi: dict | None = None) -> None:
    """One row per matched MU plus a ``summary`` row; columns in ``CSV_COLUMNS`` order."""
    cdi = cdi or {}

    def fmt(v):
        if v is None or (isinstance(v, float) and not np.isfinite(v)):
            return ""
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_COLUMNS)
        for p in metrics.pairs:
            wr.writerow([fmt(v) for v in (p.online_id, p.reference_id, p.lag, p.n_common, p.n_online,
                                          p.n_reference, p.mr, p.fdr, p.fnr, p.mdr_online, p.mdr_reference,
                                          p.cov_online, p.cov_reference, cdi.get(p.reference_id))])
        wr.writerow(["summary", metrics.n_matched, "", sum(p.n_common for p in metrics.pairs),
                     sum(p.n_online for p in metrics.pairs), sum(p.n_reference for p in metrics.pairs)]
                    + [fmt(v) for v in (metrics.mr, metrics.fdr, metrics.fnr, metrics.mdr_online,
                                        metrics.mdr_reference, metrics.cov_online, metrics.cov_reference)]
                    + [fmt(_nanmean(cdi.get(p.reference_id) for p in metrics.pairs)) if cdi else ""])
