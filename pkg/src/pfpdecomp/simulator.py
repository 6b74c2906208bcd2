"""HD-SEMG simulation with known motor unit activity.

The motoneuron pool follows the exponential recruitment organisation of Fuglevand et
al.; MUAPs come from propagating tripoles (generation at the end-plate, extinction at
the tendons) seen through a homogeneous medium with an inverse-square falloff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MuapTemplateSet, Recording, SpikeTrain, reconstruct

# active MU count at the default plateau for the default pool size
_ACTIVE_AT_PLATEAU = 33
_DEFAULT_N_MUS = 120


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters. Lengths in mm, diameters in um, rates in Hz."""

    n_mus: int = 120
    muscle_radius: float = 8.0
    fat_skin_thickness: float = 2.5
    mean_total_fibers: float = 70000.0
    fiber_number_spread: float = 0.5
    half_fiber_length: tuple[float, float] = (40.0, 4.0)
    mean_fiber_diameter: tuple[float, float] = (55.0, 10.0)
    intra_mu_diameter_sd: float = 1.0
    endplate_center_spread: float = 8.0
    endplate_jitter: float = 2.0
    grid: tuple[int, int] = (8, 8)
    inter_electrode: float = 4.0
    sample_rate: float = 2000.0
    template_length: int = 48
    base_rate: float = 8.0
    peak_rate: float = 35.0
    max_excitation: float = 0.03
    recruitment_range: float = 30.0
    fiber_count_range: float = 100.0
    isi_cv: float = 0.2
    conduction_velocity: float = 4.0
    cv_per_um: float = 0.05
    fibers_per_mu: int = 24
    oversample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_mus < 1:
            raise ValueError("n_mus must be >= 1")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("grid dimensions must be >= 1")
        if not 0 < self.max_excitation <= 1:
            raise ValueError("max_excitation must be in (0, 1]")
        if self.template_length < 1:
            raise ValueError("template_length must be >= 1")


@dataclass(frozen=True)
class MotorUnitPool:
    """Per-MU anatomy. Fiber-level arrays hold the representative fibers of each MU."""

    recruitment_threshold: np.ndarray
    fiber_count: np.ndarray
    territory_center: np.ndarray
    territory_radius: np.ndarray
    mean_diameter: np.ndarray
    endplate_center: np.ndarray
    fiber_xy: list = field(repr=False)
    fiber_diameters: list = field(repr=False)
    endplate_positions: list = field(repr=False)
    half_lengths: list = field(repr=False)
    total_fibers: int = 0

    @property
    def n_mus(self) -> int:
        return self.recruitment_threshold.size


@dataclass(frozen=True)
class GroundTruth:
    trains: list
    templates: MuapTemplateSet
    active_mu_ids: list


def _mu_rng(seed: int, stream: int, j: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, j])


def _clipnorm(rng: np.random.Generator, mean: float, sd: float, size=None, width: float = 2.0):
    """Gaussian draws clipped to mean +/- width*sd."""
    return np.clip(rng.normal(mean, sd, size), mean - width * sd, mean + width * sd)


def recruitment_thresholds(config: SimConfig) -> np.ndarray:
    """Exponentially distributed thresholds, calibrated on the plateau.

    ``RTE(i) = c * RR**(i/n)``; ``c`` puts the plateau between the thresholds of the
    last active MU and the next one, so exactly round(33/120 * n) MUs are recruited.
    """
    n = config.n_mus
    n_active = max(1, int(round(_ACTIVE_AT_PLATEAU * n / _DEFAULT_N_MUS)))
    rr = config.recruitment_range
    i = np.arange(1, n + 1)
    c = config.max_excitation / rr ** ((n_active + 0.5) / n)
    return c * rr ** (i / n)


def trapezoid_excitation(plateau: float, ramp_s: float, hold_s: float, sample_rate: float) -> np.ndarray:
    """Linear ramp from 0 to ``plateau`` over ``ramp_s`` seconds, then a hold."""
    if ramp_s <= 0 or hold_s <= 0:
        raise ValueError("ramp and hold durations must be positive")
    if not 0 < plateau <= 1:
        raise ValueError("plateau must be in (0, 1]")
    n_ramp = int(round(ramp_s * sample_rate))
    n_hold = int(round(hold_s * sample_rate))
    ramp = plateau * np.arange(n_ramp) / n_ramp
    return np.concatenate([ramp, np.full(n_hold, float(plateau))])


def build_pool(config: SimConfig, seed: int | None = None, max_attempts: int = 1000) -> MotorUnitPool:
    """Draw the MU pool. Deterministic given the seed; every MU has its own RNG stream."""
    seed = config.seed if seed is None else seed
    n = config.n_mus
    rng = np.random.default_rng([int(seed), 0])
    spread = config.fiber_number_spread
    total = int(round(rng.uniform((1 - spread) * config.mean_total_fibers,
                                  (1 + spread) * config.mean_total_fibers)))
    weights = np.exp(np.log(config.fiber_count_range) * np.arange(1, n + 1) / n)
    counts = np.maximum(1, np.floor(total * weights / weights.sum())).astype(np.int64)
    counts[-1] += total - counts.sum()
    if counts[-1] < 1:
        raise ValueError("fiber allocation infeasible for this pool size")

    radius = config.muscle_radius
    muscle_area = np.pi * radius**2
    terr_radius = np.sqrt(counts / total * muscle_area / np.pi)

    centers = np.zeros((n, 2))
    mean_diam = np.zeros(n)
    ep_center = np.zeros(n)
    fiber_xy, fiber_diam, ep_pos, half_len = [], [], [], []
    d_mean, d_sd = config.mean_fiber_diameter
    l_mean, l_sd = config.half_fiber_length
    for j in range(n):
        r = _mu_rng(seed, 0, j + 1)
        r_terr = min(terr_radius[j], radius)
        if r_terr >= radius:
            c = np.zeros(2)  # the territory fills the whole muscle
        else:
            for _ in range(max_attempts):
                c = rng_disc(r, radius)
                if np.hypot(*c) + r_terr <= radius:
                    break
            else:
                raise ValueError(f"could not place territory of MU {j} inside the muscle")
        centers[j] = c
        mean_diam[j] = _clipnorm(r, d_mean, d_sd)
        ep_center[j] = r.uniform(-config.endplate_center_spread, config.endplate_center_spread)
        f = int(min(config.fibers_per_mu, counts[j]))
        fiber_xy.append(c + r_terr * np.array([rng_disc(r, 1.0) for _ in range(f)]))
        fiber_diam.append(mean_diam[j] + _clipnorm(r, 0.0, config.intra_mu_diameter_sd, f))
        ep_pos.append(ep_center[j] + r.uniform(-config.endplate_jitter, config.endplate_jitter, f))
        half_len.append(_clipnorm(r, l_mean, l_sd, f))

    return MotorUnitPool(
        recruitment_threshold=recruitment_thresholds(config),
        fiber_count=counts,
        territory_center=centers,
        territory_radius=terr_radius,
        mean_diameter=mean_diam,
        endplate_center=ep_center,
        fiber_xy=fiber_xy,
        fiber_diameters=fiber_diam,
        endplate_positions=ep_pos,
        half_lengths=half_len,
        total_fibers=total,
    )


def rng_disc(rng: np.random.Generator, radius: float) -> np.ndarray:
    """Uniform point in a disc."""
    r = radius * np.sqrt(rng.uniform())
    theta = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(theta), r * np.sin(theta)])


def firing_rate(excitation, threshold: float, config: SimConfig):
    """Linear rate coding from ``base_rate`` at threshold up to ``peak_rate`` at full excitation."""
    gain = (config.peak_rate - config.base_rate) / (1.0 - threshold)
    rate = config.base_rate + gain * (np.asarray(excitation) - threshold)
    return np.minimum(rate, config.peak_rate)


def sample_firings(pool: MotorUnitPool, excitation: np.ndarray, config: SimConfig,
                   seed: int | None = None) -> list[SpikeTrain]:
    """Discharge times of every MU in the pool (empty trains for silent MUs)."""
    seed = config.seed if seed is None else seed
    excitation = np.asarray(excitation, dtype=np.float64)
    if excitation.size == 0:
        raise ValueError("excitation profile is empty")
    fs = config.sample_rate
    n_t = excitation.size
    min_isi = config.template_length + 1
    trains = []
    for j, thr in enumerate(pool.recruitment_threshold):
        rng = _mu_rng(seed, 1, j + 1)
        above = excitation >= thr
        firings = []
        if above.any():
            t = int(np.argmax(above))
            mean_isi = fs / firing_rate(excitation[t], thr, config)
            t = t + int(rng.uniform() * mean_isi)
            while t < n_t:
                if excitation[t] >= thr:
                    firings.append(t)
                    mean_isi = fs / firing_rate(excitation[t], thr, config)
                    isi = mean_isi * (1.0 + _clipnorm(rng, 0.0, config.isi_cv))
                    t += max(min_isi, int(round(isi)))
                else:
                    nxt = np.flatnonzero(above[t:])
                    if nxt.size == 0:
                        break
                    t += int(nxt[0])
        trains.append(SpikeTrain(j, np.asarray(firings, dtype=np.int64)))
    return trains


_POLE_OFFSETS = np.array([0.0, 2.0, 6.0])  # mm behind the leading pole
_POLE_WEIGHTS = np.array([1.0, -2.0, 1.0])


def electrode_positions(config: SimConfig) -> np.ndarray:
    """(M, 3) electrode coordinates (x across fibers, y height, z along fibers)."""
    rows, cols = config.grid
    d = config.inter_electrode
    x = (np.arange(rows) - (rows - 1) / 2) * d
    z = (np.arange(cols) - (cols - 1) / 2) * d
    xx, zz = np.meshgrid(x, z, indexing="ij")
    y = np.full(xx.size, config.muscle_radius + config.fat_skin_thickness)
    return np.column_stack([xx.ravel(), y, zz.ravel()])


def _mu_template(pool: MotorUnitPool, j: int, config: SimConfig, electrodes: np.ndarray) -> np.ndarray:
    os_ = config.oversample
    t = (np.arange(config.template_length * os_) + 0.5) / (config.sample_rate * os_)  # s
    xy = pool.fiber_xy[j]
    diam = pool.fiber_diameters[j]
    z0 = pool.endplate_positions[j]
    half = pool.half_lengths[j]
    cv = config.conduction_velocity + config.cv_per_um * (diam - config.mean_fiber_diameter[0])  # m/s == mm/ms
    travelled = cv[:, None] * t[None, :] * 1e3  # (F, Tf) mm
    # pole displacement from the end-plate, clamped at the tendon (extinction)
    disp = np.clip(travelled[:, :, None] - _POLE_OFFSETS[None, None, :], 0.0, half[:, None, None])  # (F, Tf, P)
    weight = (diam / config.mean_fiber_diameter[0]) ** 2 * pool.fiber_count[j] / len(diam)
    ex, ey, ez = electrodes[:, 0], electrodes[:, 1], electrodes[:, 2]
    lateral = (ex[None, :] - xy[:, 0:1]) ** 2 + (ey[None, :] - xy[:, 1:2]) ** 2  # (F, M)
    out = np.zeros((electrodes.shape[0], t.size))
    for sign in (1.0, -1.0):
        zp = z0[:, None, None] + sign * disp  # (F, Tf, P)
        dz2 = (ez[None, None, None, :] - zp[..., None]) ** 2  # (F, Tf, P, M)
        phi = (_POLE_WEIGHTS[None, None, :, None] / (lateral[:, None, None, :] + dz2)).sum(axis=2)
        out += np.einsum("f,ftm->mt", weight, phi)
    return out.reshape(out.shape[0], config.template_length, os_).mean(axis=2)


def synth_templates(pool: MotorUnitPool, config: SimConfig) -> MuapTemplateSet:
    """MUAP of every MU on every electrode, ``template_length`` samples from the firing."""
    electrodes = electrode_positions(config)
    waves = np.stack([_mu_template(pool, j, config, electrodes) for j in range(pool.n_mus)])
    return MuapTemplateSet(np.arange(pool.n_mus), waves)


def render(templates: MuapTemplateSet, trains: list[SpikeTrain], n_samples: int, sample_rate: float,
           grid_shape: tuple[int, int], snr_db: float | None = None, seed: int = 0) -> Recording:
    """Convolutive mixture of the trains with their templates, plus optional white noise.

    The noise variance is set from the pooled power of the clean signal so that
    ``10*log10(P_signal / P_noise) == snr_db`` in expectation.
    """
    clean = reconstruct(templates, trains, n_samples)
    if snr_db is not None:
        rng = np.random.default_rng([int(seed), 2])
        power = float(np.mean(clean**2))
        sigma = np.sqrt(power / 10 ** (snr_db / 10))
        clean = clean + rng.normal(0.0, sigma, clean.shape)
    m = clean.shape[0]
    return Recording(clean.astype(np.float32), sample_rate, np.ones(m, dtype=bool), grid_shape)


@dataclass
class Scenario:
    """A simulated muscle whose repetitions share the pool and the templates."""

    config: SimConfig
    pool: MotorUnitPool
    templates: MuapTemplateSet
    seed: int = 0

    @classmethod
    def build(cls, config: SimConfig | None = None, seed: int | None = None) -> Scenario:
        config = config or SimConfig()
        seed = config.seed if seed is None else seed
        pool = build_pool(config, seed)
        return cls(config, pool, synth_templates(pool, config), int(seed))

    def segment_seed(self, segment: int) -> int:
        """Firing/noise seed of repetition ``segment``, distinct across scenarios."""
        return int(np.random.SeedSequence([self.seed, int(segment)]).generate_state(1, np.uint64)[0])

    def segment(self, segment: int, snr_db: float | None = None, ramp_s: float = 2.0,
                hold_s: float = 3.0) -> tuple[Recording, GroundTruth]:
        """Repetition ``segment``: a trapezoidal contraction with fresh firings (and noise)."""
        cfg = self.config
        seed = self.segment_seed(segment)
        exc = trapezoid_excitation(cfg.max_excitation, ramp_s, hold_s, cfg.sample_rate)
        trains = sample_firings(self.pool, exc, cfg, seed)
        active = [tr for tr in trains if tr.n_spikes]
        rec = render(self.templates, active, exc.size, cfg.sample_rate, cfg.grid, snr_db, seed)
        truth = GroundTruth(active, self.templates, [tr.mu_id for tr in active])
        return rec, truth
