"""Offline progressive FastICA peel-off decomposition.

Each round whitens the current residual, extracts FastICA sources, turns them into
spike trains (Otsu threshold, refractory peak picking, valley-seeking clustering),
refines every train with constrained FastICA on the original extended signal, keeps
the reliable ones, re-estimates the MUAPs of everything accepted so far and peels
them off the original recording to form the next residual.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import linalg, sparse
from scipy.spatial.distance import cdist

from .core import MuapTemplateSet, Recording, SpikeStats, SpikeTrain, isi_stats, reconstruct, spike_stats
from .evaluation import align_lag, count_coincidences
from .preprocess import WhiteningTransform, extend_array, fit_whitening

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """No FastICA restart converged."""


# ---------------------------------------------------------------------------
# FastICA

def _logcosh(y):
    t = np.tanh(y)
    return t, 1.0 - t * t


def _cube(y):
    return y**3, 3.0 * y * y


def _logcosh_G(y):
    a = np.abs(y)
    return a + np.log1p(np.exp(-2 * a)) - np.log(2.0)


def _cube_G(y):
    return y**4 / 4.0


_CONTRASTS = {"logcosh": (_logcosh, _logcosh_G), "cube": (_cube, _cube_G)}


def gaussian_baseline(contrast: str, n_nodes: int = 80) -> float:
    """E{G(v)} for a standard normal v by Gauss-Hermite quadrature."""
    x, wts = hermegauss(n_nodes)
    return float(np.sum(wts * _CONTRASTS[contrast][1](x)) / np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class FastIcaConfig:
    contrast: str = "logcosh"
    max_iterations: int = 100
    convergence_tol: float = 1e-6
    max_sources_per_round: int = 30
    restarts: int = 3

    def __post_init__(self):
        if self.contrast not in _CONTRASTS:
            raise ValueError(f"unknown contrast {self.contrast!r}; choose from {sorted(_CONTRASTS)}")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.max_iterations < 1 or self.restarts < 1 or self.max_sources_per_round < 1:
            raise ValueError("iteration, restart and source counts must be >= 1")

    @property
    def baseline(self) -> float:
        return gaussian_baseline(self.contrast)

    def nonlinearity(self, y):
        return _CONTRASTS[self.contrast][0](y)

    def negentropy(self, y: np.ndarray) -> np.ndarray:
        """J_G for each row of ``y``."""
        return (_CONTRASTS[self.contrast][1](y).mean(axis=-1) - self.baseline) ** 2


def _deflate(w: np.ndarray, basis: np.ndarray | None) -> np.ndarray:
    if basis is not None and basis.shape[1]:
        w = w - basis @ (basis.T @ w)
    return w


def fastica_one_source(z: np.ndarray, config: FastIcaConfig, basis: np.ndarray | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """One unit-norm separation vector by the fixed-point iteration with deflation.

    Parameters
    ----------
    z : whitened data, shape (d, T).
    basis : orthonormal columns (d, m) the result must stay orthogonal to.

    All restarts run side by side as columns of one matrix; the converged restart with
    the largest negentropy wins. Raises ``ConvergenceError`` if none converged.
    """
    rng = np.random.default_rng() if rng is None else rng
    d, t = z.shape
    w = _deflate(rng.standard_normal((d, config.restarts)), basis)
    w /= np.linalg.norm(w, axis=0)
    done = np.zeros(config.restarts, dtype=bool)
    for _ in range(config.max_iterations):
        act = np.flatnonzero(~done)
        wa = w[:, act]
        y = wa.T.astype(z.dtype) @ z
        g, dg = config.nonlinearity(y)
        w_new = (z @ g.T).astype(np.float64) / t - wa * dg.mean(axis=1, dtype=np.float64)
        w_new = _deflate(w_new, basis)
        w_new /= np.linalg.norm(w_new, axis=0)
        step = np.abs(1.0 - np.abs(np.sum(w_new * wa, axis=0)))
        w[:, act] = w_new
        done[act] = step < config.convergence_tol
        if done.all():
            break
    if not done.any():
        raise ConvergenceError(f"no restart converged in {config.max_iterations} iterations")
    cand = np.flatnonzero(done)
    score = config.negentropy(w[:, cand].T @ z)
    return w[:, cand[np.argmax(score)]].copy()


# ---------------------------------------------------------------------------
# thresholding and spike detection

def _between_class_variance(counts: np.ndarray, sums: np.ndarray) -> np.ndarray:
    """Between-class variance for every split of the histogram after bin ``i`` (i = 0..bins-2)."""
    n = counts.sum()
    c0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    c1 = n - c0
    s1 = sums.sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = c0 * c1 * (s0 / c0 - s1 / c1) ** 2 / (n * n)
    return np.where((c0 > 0) & (c1 > 0), var, -np.inf)


def otsu_threshold(values, bins: int = 256) -> float:
    """Bin edge that maximises the between-class variance; values below it form class 0.

    Class means use the actual values, not bin centres. Ties go to the lowest maximum;
    a run of adjacent tied edges (empty bins between two classes) counts as one maximum
    and its middle edge is returned.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise ValueError("Otsu threshold needs at least two distinct values")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    var = _between_class_variance(counts, sums)
    first = int(np.argmax(var))
    last = first
    while last + 1 < var.size and var[last + 1] == var[first]:
        last += 1
    return float(edges[(first + last) // 2 + 1])


def spike_energy(source: np.ndarray) -> np.ndarray:
    """One-sided square: positive lobes squared, negative lobes set to zero."""
    return np.maximum(source, 0.0) ** 2


def local_peaks(energy: np.ndarray, threshold: float) -> np.ndarray:
    """Indices of local maxima of ``energy`` strictly above ``threshold``."""
    e = np.asarray(energy)
    if e.size < 1:
        return np.zeros(0, dtype=np.int64)
    left = np.concatenate([[-np.inf], e[:-1]])
    right = np.concatenate([e[1:], [-np.inf]])
    return np.flatnonzero((e > left) & (e >= right) & (e > threshold))


def greedy_refractory(times: np.ndarray, heights: np.ndarray, min_separation: int) -> np.ndarray:
    """Keep peaks in descending height order unless one already kept lies within ``min_separation``.

    Returns the kept times in increasing order. Ties in height go to the earlier peak.
    """
    order = np.lexsort((times, -heights))
    kept: list[int] = []
    for i in order:
        t = int(times[i])
        pos = bisect.bisect_left(kept, t)
        if pos > 0 and t - kept[pos - 1] <= min_separation:
            continue
        if pos < len(kept) and kept[pos] - t <= min_separation:
            continue
        kept.insert(pos, t)
    return np.asarray(kept, dtype=np.int64)


def detect_spikes(source: np.ndarray, threshold: float, min_separation: int,
                  mu_id: int = 0) -> tuple[SpikeTrain, np.ndarray]:
    """Refractory-spaced local maxima of ``source**2`` above ``threshold``.

    Returns the train and the absolute source amplitude at each spike.
    """
    if min_separation < 1:
        raise ValueError("min_separation must be >= 1")
    s = np.asarray(source, dtype=np.float64)
    e = s * s
    peaks = local_peaks(e, threshold)
    kept = greedy_refractory(peaks, e[peaks], min_separation)
    return SpikeTrain(mu_id, kept), np.abs(s[kept])


def orient(w: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip the sign so the source has non-negative skewness."""
    if np.mean(y**3) < 0:
        return -w, -y
    return w, y


def threshold_source(source: np.ndarray, min_separation: int, mu_id: int = 0):
    """Otsu on the one-sided squared source, then refractory detection."""
    e = spike_energy(source)
    if not e.max() > e.min():
        return SpikeTrain(mu_id, []), np.zeros(0), np.inf
    thr = otsu_threshold(e)
    train, amps = detect_spikes(np.sqrt(e), thr, min_separation, mu_id)
    return train, amps, thr


# ---------------------------------------------------------------------------
# valley-seeking clustering

def valley_cluster(features: np.ndarray, valley_ratio: float = 0.5, min_size: int = 3) -> np.ndarray:
    """Cluster labels (0..c-1) by kNN density mode seeking.

    Every point links to the densest of its k nearest neighbours (itself included);
    the link chains end at density modes. Modes whose basins touch without a density
    valley (the densest crossing kNN edge keeps at least ``valley_ratio`` of the smaller
    mode density) are merged, and clusters below ``min_size`` points are absorbed by the
    cluster with the nearest centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    k = min(5, n - 1)
    dist = cdist(x, x)
    order = np.argsort(dist, axis=1, kind="stable")
    nbrs = order[:, 1:k + 1]
    kdist = np.take_along_axis(dist, nbrs, axis=1).mean(axis=1)
    scale = kdist.max()
    if scale == 0:
        return np.zeros(n, dtype=np.int64)
    density = 1.0 / (kdist + 1e-12 * scale)
    hood = np.column_stack([np.arange(n), nbrs])
    parent = hood[np.arange(n), np.argmax(density[hood], axis=1)]
    root = parent.copy()
    for _ in range(n):
        nxt = parent[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    labels = root.copy()

    # merge basins that meet without a valley
    def find(a):
        while labels_map[a] != a:
            labels_map[a] = labels_map[labels_map[a]]
            a = labels_map[a]
        return a

    labels_map = {int(r): int(r) for r in np.unique(root)}
    edges = []
    for i in range(n):
        for j in nbrs[i]:
            if root[i] != root[j]:
                edges.append((min(density[i], density[j]), int(root[i]), int(root[j])))
    edges.sort(reverse=True)
    for dens, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb and dens >= valley_ratio * min(density[ra], density[rb]):
            # keep the denser mode as representative
            if density[ra] < density[rb]:
                ra, rb = rb, ra
            labels_map[rb] = ra
    labels = np.array([find(int(r)) for r in root])

    # absorb small clusters, smallest first
    while True:
        uniq, counts = np.unique(labels, return_counts=True)
        if uniq.size < 2 or counts.min() >= min_size:
            break
        small = uniq[np.argmin(counts)]
        others = uniq[uniq != small]
        centre = x[labels == small].mean(axis=0)
        cents = np.array([x[labels == o].mean(axis=0) for o in others])
        labels[labels == small] = others[np.argmin(np.linalg.norm(cents - centre, axis=1))]
    _, out = np.unique(labels, return_inverse=True)
    return out.astype(np.int64)


def snippets(x: np.ndarray, times: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Flattened windows ``x[:, t+offset : t+offset+length]``, zero-padded at the borders."""
    m, t_total = x.shape
    pad = np.pad(x, ((0, 0), (length + abs(offset), length + abs(offset))))
    base = length + abs(offset) + offset
    out = np.empty((len(times), m * length))
    for i, t in enumerate(times):
        out[i] = pad[:, base + t:base + t + length].ravel()
    return out


# ---------------------------------------------------------------------------
# constrained FastICA

@dataclass(frozen=True)
class ConstrainedConfig:
    closeness: float = 0.95  # lower bound on the cosine between w and the reference direction
    step: float = 0.5  # multiplier update rate
    max_iterations: int = 100
    refine_iterations: int = 10  # spike-triggered re-estimation passes after convergence (0 = off)
    convergence_tol: float = 1e-6


def constrained_fastica(z: np.ndarray, reference: SpikeTrain, fastica: FastIcaConfig, min_separation: int,
                        config: ConstrainedConfig = ConstrainedConfig()):
    """FastICA steered toward a reference spike train.

    The reference direction ``c = E{z r}`` (``r`` the binary reference) seeds the
    iteration. Each fixed-point step is followed by a Lagrangian pull ``w += mu c/|c|``
    whose multiplier grows while ``w . c/|c|`` stays below ``config.closeness``.

    Returns ``(w, source, corrected_train, xi)`` where ``xi`` is the Pearson correlation
    between the source and the corrected train. Raises ``ConvergenceError`` on divergence.
    """
    if reference.n_spikes == 0:
        raise ValueError("reference train is empty")
    d, t = z.shape
    fs = reference.firing_samples
    fs = fs[fs < t]
    c = z[:, fs].sum(axis=1) / t
    nc = np.linalg.norm(c)
    if not nc > 0:
        raise ConvergenceError("reference direction is zero")
    c_hat = c / nc
    w = c_hat.copy()
    mu = 0.0
    for _ in range(config.max_iterations):
        y = w @ z
        g, dg = fastica.nonlinearity(y)
        w_new = (z @ g) / t - dg.mean() * w
        if w_new @ c_hat < 0:
            w_new = -w_new
        w_new /= np.linalg.norm(w_new)
        w_new = w_new + mu * c_hat
        nrm = np.linalg.norm(w_new)
        if not np.isfinite(nrm) or nrm == 0:
            raise ConvergenceError("constrained iteration diverged")
        w_new /= nrm
        mu = max(0.0, mu + config.step * (config.closeness - w_new @ c_hat))
        step = abs(1.0 - abs(w_new @ w))
        w = w_new
        if step < config.convergence_tol:
            break
    y = w @ z
    if np.mean(y**3) < 0 and w @ c_hat < 0:
        w, y = -w, -y
    train, _, _ = threshold_source(y, min_separation, reference.mu_id)
    w, y, train = refine_train(z, w, y, train, min_separation, config.refine_iterations)
    xi = pearson_with_train(y, train)
    return w, y, train, xi


def refine_train(z: np.ndarray, w: np.ndarray, y: np.ndarray, train: SpikeTrain, min_separation: int,
                 iterations: int):
    """Re-aim ``w`` at the mean of ``z`` over the detected spikes while CoV_isi keeps falling.

    Returns the last ``(w, source, train)`` that improved the ISI regularity.
    """
    cov = isi_stats(train, 1.0).cov_isi
    for _ in range(iterations):
        if cov is None:
            break
        c = z[:, train.firing_samples].mean(axis=1)
        w_new = c / np.linalg.norm(c)
        y_new = w_new @ z
        t_new, _, _ = threshold_source(y_new, min_separation, train.mu_id)
        c_new = isi_stats(t_new, 1.0).cov_isi
        if c_new is None or not c_new < cov:
            break
        w, y, train, cov = w_new, y_new, t_new, c_new
    return w, y, train


def pearson_with_train(source: np.ndarray, train: SpikeTrain) -> float:
    r = np.zeros(source.size)
    r[train.firing_samples[train.firing_samples < source.size]] = 1.0
    if train.n_spikes == 0 or r.std() == 0 or source.std() == 0:
        return 0.0
    return float(np.corrcoef(source, r)[0, 1])


# ---------------------------------------------------------------------------
# reliability

@dataclass(frozen=True)
class ReliabilityThresholds:
    xi_min: float = 0.5
    cov_amp_max: float = 0.3
    cov_isi_max: float = 0.4
    fr_min: float = 4.0
    fr_max: float = 35.0
    second_pass: bool = False
    relax: float = 1.1


@dataclass
class CandidateMu:
    w: np.ndarray
    source: np.ndarray
    train: SpikeTrain
    stats: SpikeStats
    xi: float
    amplitudes: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        n = np.linalg.norm(self.w)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"separation vector must have unit norm, got {n}")

    @property
    def quality(self) -> float:
        """CoV_amp + CoV_isi (lower is better)."""
        return self.stats.cov_amp + self.stats.cov_isi


def _check(stats: SpikeStats, xi: float, th: ReliabilityThresholds, scale: float) -> list[str]:
    reasons = []
    if xi < th.xi_min / scale:
        reasons.append("xi")
    if stats.cov_amp > th.cov_amp_max * scale:
        reasons.append("cov_amp")
    if stats.cov_isi > th.cov_isi_max * scale:
        reasons.append("cov_isi")
    if not th.fr_min / scale <= stats.firing_rate <= th.fr_max * scale:
        reasons.append("rate")
    return reasons


def assess_reliability(candidate: CandidateMu, thresholds: ReliabilityThresholds = ReliabilityThresholds()):
    """Return ``(accepted, reasons)``; reasons name each failed gate."""
    st = candidate.stats
    if not st.defined:
        missing = [n for n in ("firing_rate", "cov_isi", "cov_amp") if getattr(st, n) is None]
        return False, [f"undefined:{n}" for n in missing]
    reasons = _check(st, candidate.xi, thresholds, 1.0)
    if reasons and thresholds.second_pass and not _check(st, candidate.xi, thresholds, thresholds.relax):
        return True, []
    return not reasons, reasons


# ---------------------------------------------------------------------------
# MUAP estimation and peel-off

def _design(trains, n_samples: int, length: int) -> sparse.csc_matrix:
    rows, cols = [], []
    for j, tr in enumerate(trains):
        for tau in range(length):
            r = tr.firing_samples + tau
            r = r[r < n_samples]
            rows.append(r)
            cols.append(np.full(r.size, j * length + tau))
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    return sparse.csc_matrix((np.ones(rows.size), (rows, cols)), shape=(n_samples, len(trains) * length))


def fit_muaps(samples: np.ndarray, trains, length: int) -> tuple[np.ndarray, bool]:
    """Joint least-squares MUAPs for every row of ``samples``.

    Returns ``(waveforms (n_mus, M, L), regularized)``. The normal equations share one
    Gram matrix across channels; if it is singular a ridge of 1e-8 times its trace is
    added and ``regularized`` is True.
    """
    if length < 1:
        raise ValueError("template length must be >= 1")
    if any(tr.n_spikes == 0 for tr in trains):
        raise ValueError("every train needs at least one spike")
    x = np.asarray(samples, dtype=np.float64)
    m, t = x.shape
    n = len(trains)
    if n == 0:
        return np.zeros((0, m, length)), False
    design = _design(trains, t, length)
    gram = (design.T @ design).toarray()
    rhs = np.asarray(design.T @ x.T)
    regularized = False
    try:
        cf = linalg.cho_factor(gram)
        diag = np.abs(np.diag(cf[0]))
        if diag.min() ** 2 < 1e-10 * gram.diagonal().max():
            raise linalg.LinAlgError("near-singular")
    except linalg.LinAlgError:
        regularized = True
        lam = 1e-8 * np.trace(gram)
        cf = linalg.cho_factor(gram + lam * np.eye(gram.shape[0]))
    sol = linalg.cho_solve(cf, rhs)  # (n*L, M)
    return sol.reshape(n, length, m).transpose(0, 2, 1), regularized


def estimate_muaps(recording: Recording, trains, length: int) -> MuapTemplateSet:
    """Least-squares templates on all unmasked channels (repaired ones included).

    Masked channels get zero templates.
    """
    wave, regularized = fit_muaps(recording.samples[recording.channel_mask], trains, length)
    if regularized:
        log.warning("MUAP normal equations were singular; ridge fallback used")
    full = np.zeros((len(trains), recording.n_channels, length))
    full[:, recording.channel_mask] = wave
    return MuapTemplateSet([tr.mu_id for tr in trains], full)


def peel_off(recording: Recording, templates: MuapTemplateSet, trains) -> Recording:
    """Recording minus the reconstruction of ``trains`` with ``templates``."""
    if len(trains) == 0:
        return recording
    rec = reconstruct(templates, trains, recording.n_samples)
    return recording.with_samples(recording.samples.astype(np.float64) - rec)


def onset_lag(samples: np.ndarray, train: SpikeTrain, k: int, length: int) -> int:
    """Shift from source time to MUAP onset (always <= 0).

    A source peak lags the MUAP onset by up to ``k + length - 1`` samples. The onset is
    placed so that the ``length``-sample window is centred on the centroid of the
    spike-triggered average energy above its median (background) level.
    """
    span = k + length - 1
    sta = snippets(samples, train.firing_samples, span + length, offset=-span)
    sta = sta.mean(axis=0).reshape(samples.shape[0], span + length)
    energy = (sta**2).sum(axis=0)
    excess = np.maximum(energy - np.median(energy), 0.0)
    if not excess.max() > 0:
        return 0
    excess[excess < 0.1 * excess.max()] = 0.0
    centroid = np.sum(np.arange(excess.size) * excess) / excess.sum()
    return int(np.clip(round(centroid) - length // 2, 0, span)) - span


# ---------------------------------------------------------------------------
# the decomposition loop

@dataclass(frozen=True)
class ApfpConfig:
    k: int = 10
    length: int = 48
    max_rounds: int = 10
    fastica: FastIcaConfig = FastIcaConfig()
    constrained: ConstrainedConfig = ConstrainedConfig()
    reliability: ReliabilityThresholds = ReliabilityThresholds()
    duplicate_tol_ms: float = 1.0
    duplicate_fraction: float = 0.5
    patience: int | None = None  # end a round after this many sources in a row add nothing


@dataclass(frozen=True)
class AcceptedMu:
    """One reliable MU.

    ``source_train`` is in source time (what the composite vector sees); ``train`` is
    shifted by ``onset_lag`` to the MUAP onset and is the train used for templates.
    """

    mu_id: int
    w: np.ndarray
    vector: np.ndarray
    source: np.ndarray
    source_train: SpikeTrain
    train: SpikeTrain
    onset_lag: int
    stats: SpikeStats
    xi: float


@dataclass
class RoundLog:
    round: int
    n_sources: int = 0
    accepted: list = field(default_factory=list)
    replaced: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (source index, reasons)
    residual_energy: float = float("nan")

    def lines(self) -> list[str]:
        out = [f"round {self.round}: {self.n_sources} sources, accepted {self.accepted}, "
               f"replaced {self.replaced}, residual energy {self.residual_energy:.6g}"]
        out += [f"  source {i}: rejected ({', '.join(r)})" for i, r in self.rejected]
        return out


@dataclass
class DecompositionResult:
    mus: list
    templates: MuapTemplateSet
    residual: Recording
    whitening: WhiteningTransform
    channels: np.ndarray
    k: int
    length: int
    sample_rate: float
    log: list

    @property
    def trains(self) -> list[SpikeTrain]:
        return [mu.train for mu in self.mus]

    @property
    def vectors(self) -> np.ndarray:
        d = self.whitening.matrix.shape[1]
        return np.array([mu.vector for mu in self.mus]).reshape(len(self.mus), d)

    def log_text(self) -> str:
        return "\n".join(line for r in self.log for line in r.lines()) + "\n"


def _is_duplicate(a: SpikeTrain, b: SpikeTrain, tol: int, max_lag: int, fraction: float) -> bool:
    small = min(a.n_spikes, b.n_spikes)
    if small == 0:
        return False
    lag = align_lag(a, b, max_lag, tol)
    return count_coincidences(a.firing_samples + lag, b.firing_samples, tol) > fraction * small


def find_duplicate(train: SpikeTrain, others, tol: int, max_lag: int, fraction: float = 0.5) -> int | None:
    """Index of the first train in ``others`` sharing more than ``fraction`` of the smaller one's spikes."""
    for i, o in enumerate(others):
        if _is_duplicate(train, o, tol, max_lag, fraction):
            return i
    return None


def _candidate_from(w, z, fs, xi, train) -> tuple[CandidateMu, np.ndarray]:
    y = w @ z
    amps = np.abs(y[train.firing_samples])
    stats = spike_stats(train, amps, fs)
    return CandidateMu(w, y, train, stats, xi, amps), amps


def run_apfp(recording: Recording, config: ApfpConfig = ApfpConfig(), seed: int = 0) -> DecompositionResult:
    """Progressive FastICA peel-off on a preprocessed recording."""
    k, length, fs = config.k, config.length, recording.sample_rate
    channels = recording.usable
    tol = int(round(config.duplicate_tol_ms * 1e-3 * fs))
    max_lag = k + length
    original = recording.samples.astype(np.float64)
    x_ext = extend_array(original[channels], k)
    whitening = fit_whitening(x_ext)
    z_orig = whitening.apply(x_ext)

    mus: list[AcceptedMu] = []
    rounds: list[RoundLog] = []
    templates = MuapTemplateSet(np.zeros(0), np.zeros((0, recording.n_channels, length)))
    residual = recording
    next_id = 0
    barren = 0  # consecutive rounds without a new MU
    for rnd in range(config.max_rounds):
        rl = RoundLog(rnd)
        rounds.append(rl)
        rng = np.random.default_rng([seed, rnd])
        res_ext = extend_array(residual.samples[channels], k)
        try:
            z = fit_whitening(res_ext).apply(res_ext).astype(np.float32)
        except ValueError as exc:
            rl.rejected.append((-1, [f"whitening: {exc}"]))
            break
        del res_ext
        basis = np.zeros((z.shape[0], 0))
        new_this_round = False
        exhausted = False
        idle = 0
        for si in range(config.fastica.max_sources_per_round):
            if basis.shape[1] >= z.shape[0] or (config.patience and idle >= config.patience):
                break
            idle += 1
            try:
                w = fastica_one_source(z, config.fastica, basis, rng)
            except ConvergenceError:
                rl.rejected.append((si, ["no convergence"]))
                exhausted = True
                break
            basis = np.column_stack([basis, w])
            rl.n_sources += 1
            w, y = orient(w, w @ z)
            train, _, _ = threshold_source(y, length)
            if train.n_spikes < 3:
                rl.rejected.append((si, ["too few spikes"]))
                continue
            # keep the cluster with the largest mean source amplitude
            labels = valley_cluster(snippets(residual.samples[channels], train.firing_samples, length,
                                             offset=-(length // 2)))
            amps = y[train.firing_samples]
            best = max(np.unique(labels), key=lambda lab: amps[labels == lab].mean())
            ref = SpikeTrain(next_id, train.firing_samples[labels == best])
            if find_duplicate(ref, [m.source_train for m in mus], tol, max_lag, config.duplicate_fraction) \
                    is not None and len(ref) >= 3:
                # already peeled in an earlier round, no need to refine
                rl.rejected.append((si, ["duplicate"]))
                continue
            try:
                wc, yc, corrected, xi = constrained_fastica(z_orig, ref, config.fastica, length, config.constrained)
            except ConvergenceError as exc:
                rl.rejected.append((si, [str(exc)]))
                continue
            cand, c_amps = _candidate_from(wc, z_orig, fs, xi, corrected)
            ok, reasons = assess_reliability(cand, config.reliability)
            if not ok:
                rl.rejected.append((si, reasons))
                continue
            dup = find_duplicate(corrected, [m.source_train for m in mus], tol, max_lag, config.duplicate_fraction)
            if dup is not None:
                old = mus[dup]
                if cand.quality < old.stats.cov_amp + old.stats.cov_isi:
                    mus[dup] = _accept(old.mu_id, cand, c_amps, whitening, x_ext, original, k, length)
                    rl.replaced.append(old.mu_id)
                    idle = 0
                else:
                    rl.rejected.append((si, ["duplicate"]))
                continue
            mus.append(_accept(next_id, cand, c_amps, whitening, x_ext, original, k, length))
            rl.accepted.append(next_id)
            next_id += 1
            new_this_round = True
            idle = 0
        del z
        if mus:
            templates = estimate_muaps(recording, [m.train for m in mus], length)
            residual = peel_off(recording, templates, [m.train for m in mus])
        rl.residual_energy = float(np.sum(residual.samples.astype(np.float64) ** 2))
        log.info("%s", rl.lines()[0])
        # a round cut short by non-convergence gets one retry with fresh initial vectors
        barren = 0 if new_this_round else barren + 1
        if barren and (not exhausted or barren >= 2):
            break
    return DecompositionResult(mus, templates, residual, whitening, channels, k, length, fs, rounds)


def _accept(mu_id, cand: CandidateMu, amps, whitening, x_ext, original, k, length) -> AcceptedMu:
    scale = float(np.mean(amps))
    vector = whitening.fold(cand.w)[0] / scale
    source = vector @ x_ext
    src_train = SpikeTrain(mu_id, cand.train.firing_samples)
    lag = onset_lag(original, src_train, k, length)
    return AcceptedMu(mu_id, cand.w, vector, source, src_train, src_train.shifted(lag, original.shape[1]),
                      lag, cand.stats, cand.xi)
