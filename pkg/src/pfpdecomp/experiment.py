"""Seeded desk-scale experiments: prework, bank, streamed test segments, scoring.

One *condition* is a scenario seed and a noise level. Its prework segment is decomposed
offline, the bank is curated from it, and a few fresh segments of the same scenario are
streamed through the bank and scored against ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .apfp import ApfpConfig, run_apfp
from .evaluation import MatchMetrics, evaluate
from .online import OnlineConfig, VectorBank, batch_decode, curate_bank, run_stream
from .simulator import Scenario, SimConfig

NOISE_LEVELS = (None, 30.0, 20.0, 10.0)


def noise_label(snr_db) -> str:
    return "none" if snr_db is None else f"{snr_db:g}dB"


@dataclass(frozen=True)
class ExperimentConfig:
    n_test_segments: int = 5
    prework_segment: int = 100  # segment seeds are offsets into the scenario's repetition space
    test_segment: int = 200
    tol_ms: float = 1.0
    max_lag: int = 58
    offline_on_test: bool = False  # also decompose every test segment offline


@dataclass
class ConditionResult:
    seed: int
    snr_db: float | None
    n_bank: int
    prework_metrics: MatchMetrics
    online: dict = field(default_factory=dict)  # selector -> list[MatchMetrics], one per test segment
    offline: list = field(default_factory=list)  # MatchMetrics of offline runs on the test segments
    latencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prework_seconds: float = 0.0

    def mean(self, selector: str, attr: str) -> float:
        return float(np.nanmean([getattr(m, attr) for m in self.online[selector]]))

    def offline_mean(self, attr: str) -> float:
        ms = self.offline or [self.prework_metrics]
        return float(np.nanmean([getattr(m, attr) for m in ms]))


def prework(scenario: Scenario, snr_db, apfp: ApfpConfig, exp: ExperimentConfig, seed: int):
    rec, truth = scenario.segment(exp.prework_segment, snr_db)
    t0 = time.perf_counter()
    res = run_apfp(rec, apfp, seed=seed)
    elapsed = time.perf_counter() - t0
    bank = curate_bank([res], [rec])
    m = evaluate(res.trains, truth.trains, rec.sample_rate, exp.tol_ms, exp.max_lag)
    return bank, m, elapsed


def run_condition(seed: int, snr_db=None, selectors=("otsu-multi",), sim: SimConfig | None = None,
                  apfp: ApfpConfig = ApfpConfig(), online: OnlineConfig = OnlineConfig(),
                  exp: ExperimentConfig = ExperimentConfig(), stream_selector: str | None = "otsu-multi"
                  ) -> ConditionResult:
    """Score each selector on ``exp.n_test_segments`` fresh segments.

    ``stream_selector`` is fed through :func:`run_stream` (latencies recorded), the
    others through :func:`batch_decode`, which gives identical spikes up to ±1 sample.
    """
    scenario = Scenario.build(sim or SimConfig(), seed=seed)
    bank, pm, secs = prework(scenario, snr_db, apfp, exp, seed)
    out = ConditionResult(seed, snr_db, bank.n_vectors, pm, {s: [] for s in selectors}, prework_seconds=secs)
    lat = []
    for i in range(exp.n_test_segments):
        rec, truth = scenario.segment(exp.test_segment + i, snr_db)
        for sel in selectors:
            cfg = replace(online, selector=sel)
            if sel == stream_selector:
                sr = run_stream(rec, bank, cfg)
                trains = sr.trains
                lat.append(sr.latencies)
            else:
                trains = batch_decode(rec, bank, cfg)
            out.online[sel].append(evaluate(trains, truth.trains, rec.sample_rate, exp.tol_ms, exp.max_lag))
        if exp.offline_on_test:
            res = run_apfp(rec, apfp, seed=seed)
            out.offline.append(evaluate(res.trains, truth.trains, rec.sample_rate, exp.tol_ms, exp.max_lag))
    out.latencies = np.concatenate(lat) if lat else np.zeros(0)
    return out


def stream_bank(bank: VectorBank, scenario: Scenario, snr_db, online: OnlineConfig, exp: ExperimentConfig):
    """Stream the test segments of ``scenario`` through an existing bank."""
    for i in range(exp.n_test_segments):
        rec, truth = scenario.segment(exp.test_segment + i, snr_db)
        yield rec, truth, run_stream(rec, bank, online)
