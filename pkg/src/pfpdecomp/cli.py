"""Command-line front end: simulate, decompose-offline, bank build, stream, evaluate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (unreadable or
malformed input, incompatible files), 3 real-time budget violated (``stream
--enforce-realtime``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from types import SimpleNamespace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .apfp import run_apfp
from .core import MuapTemplateSet
from .evaluation import decomposability, evaluate, match_pairs, write_metrics_csv
from .experiment import ConditionResult, noise_label, run_condition
from .io import FormatError, read_recording, read_spike_trains, read_templates, write_recording, \
    write_spike_trains, write_templates
from .online import VectorBank, bank_from_result, curate_banks, run_stream
from .preprocess import apply_filters, repair_channels
from .simulator import Scenario

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REALTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted config keys")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent work items")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--dump-config", action="store_true", help="print the effective config as JSON and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pfpdecomp", description="Progressive FastICA peel-off decomposition of HD-SEMG.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulated recordings + ground truth over a noise x repetition grid")
    _common(p)

    p = sub.add_parser("decompose-offline", help="APFP on one recording")
    p.add_argument("recording")
    p.add_argument("--max-rounds", type=int)
    _common(p)

    p = sub.add_parser("bank", help="separation-vector bank tools")
    bsub = p.add_subparsers(dest="bank_command", required=True, parser_class=_Parser)
    b = bsub.add_parser("build", help="curate prework vectors into one bank")
    b.add_argument("--vectors", action="append", required=True, help="uncurated .mubk from decompose-offline")
    b.add_argument("--recording", action="append", required=True, help="matching prework recording")
    b.add_argument("--name", default="bank.mubk")
    _common(b)

    p = sub.add_parser("stream", help="stream recordings through a bank")
    p.add_argument("recordings", nargs="+")
    p.add_argument("--bank", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--realtime", action="store_true", help="pace windows at the acquisition rate")
    mode.add_argument("--offline-replay", action="store_true", help="process windows as fast as possible (default)")
    p.add_argument("--enforce-realtime", action="store_true", help="exit 3 when a window misses the budget")
    p.add_argument("--k", type=int, help="expected extension factor; must match the bank")
    _common(p)

    p = sub.add_parser("evaluate", help="score online trains against reference trains")
    p.add_argument("online")
    p.add_argument("reference")
    p.add_argument("--recording", help="recording for DI/CDI (needs --templates)")
    p.add_argument("--templates", help="reference MUAP templates for DI/CDI")
    p.add_argument("--emit-svg", action="store_true")
    _common(p)

    p = sub.add_parser("report", help="seeded noise-level and selector comparison with figures")
    p.add_argument("--seeds", type=int, nargs="+", default=[1])
    p.add_argument("--selectors", nargs="+", default=["otsu-multi", "kmeans"])
    _common(p)
    return ap


def resolve_config(args) -> cfgmod.PipelineConfig:
    conf = cfgmod.load(args.config) if args.config else cfgmod.PipelineConfig()
    updates = dict(cfgmod.parse_assignment(s) for s in args.set)
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "max_rounds", None) is not None:
        updates["apfp.max_rounds"] = args.max_rounds
    return cfgmod.override(conf, updates) if updates else conf


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{path}: no such file")
    if not os.access(p, os.R_OK):
        raise DataError(f"{path}: not readable")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"{path}: cannot create output directory ({e.strerror})") from None
    if not os.access(p, os.W_OK):
        raise DataError(f"{path}: output directory is not writable")
    return p


def _load_recording(path):
    try:
        return read_recording(path)
    except (FormatError, ValueError) as e:
        raise DataError(str(e)) from None


def _load_trains(path):
    try:
        return read_spike_trains(path)
    except (FormatError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(conf: cfgmod.PipelineConfig, out: Path) -> dict:
    grid = conf.grid
    scenario = Scenario.build(conf.sim, seed=conf.seed)
    sim = conf.sim
    tpl_path = out / "templates.muap"
    write_templates(tpl_path, scenario.templates.waveforms, scenario.templates.mu_ids, sim.sample_rate, sim.grid)
    manifest = {"scenario_seed": conf.seed, "templates": tpl_path.name, "segments": []}
    for rep in range(grid.repetitions):
        for snr in grid.noise_levels:
            rec, truth = scenario.segment(rep, snr, grid.ramp_s, grid.hold_s)
            stem = f"seg_{noise_label(snr)}_r{rep:02d}"
            write_recording(out / f"{stem}.semg", rec)
            write_spike_trains(out / f"{stem}_truth.spk", truth.trains, rec.sample_rate)
            manifest["segments"].append({"recording": f"{stem}.semg", "truth": f"{stem}_truth.spk",
                                         "noise_db": snr, "repetition": rep,
                                         "segment_seed": scenario.segment_seed(rep)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_decompose_offline(conf: cfgmod.PipelineConfig, recording_path, out: Path) -> int:
    rec = _load_recording(recording_path)
    if conf.preprocess:
        try:
            rec = repair_channels(apply_filters(rec, conf.filter))
        except ValueError as e:
            raise DataError(f"{recording_path}: {e}") from None
    res = run_apfp(rec, conf.apfp, seed=conf.seed)
    write_spike_trains(out / "trains.spk", res.trains, rec.sample_rate)
    write_templates(out / "templates.muap", res.templates.waveforms, res.templates.mu_ids, rec.sample_rate,
                    rec.grid_shape)
    (out / "log.txt").write_text(res.log_text())
    if res.mus:
        bank_from_result(res).save(out / "vectors.mubk")
    else:
        print("warning: no MU was accepted; vectors.mubk not written", file=sys.stderr)
    return len(res.mus)


def cmd_bank_build(conf: cfgmod.PipelineConfig, vector_paths, recording_paths, out_path: Path) -> VectorBank:
    if len(vector_paths) != len(recording_paths):
        raise UsageError("give one --recording per --vectors")
    try:
        banks = [VectorBank.load(p) for p in vector_paths]
    except (FormatError, ValueError) as e:
        raise DataError(str(e)) from None
    recs = [_load_recording(p) for p in recording_paths]
    try:
        bank = curate_banks(banks, recs, conf.curation_rule, conf.eval.tol_ms)
    except ValueError as e:
        raise DataError(str(e)) from None
    bank.save(out_path)
    return bank


def cmd_stream(conf: cfgmod.PipelineConfig, recording_paths, bank_path, out: Path, realtime: bool = False,
               k: int | None = None) -> tuple[bool, list]:
    try:
        bank = VectorBank.load(bank_path)
    except (FormatError, ValueError) as e:
        raise DataError(str(e)) from None
    recs = [_load_recording(p) for p in recording_paths]
    for path, rec in zip(recording_paths, recs):
        try:
            bank.check_compatible(len(rec.usable), rec.sample_rate, k)
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None
    results = []
    for path, rec in zip(recording_paths, recs):
        sr = run_stream(rec, bank, conf.online, realtime=realtime)
        write_spike_trains(out / f"{Path(path).stem}_online.spk", sr.trains, rec.sample_rate)
        results.append((Path(path).name, sr))
    ok = all(sr.realtime for _, sr in results)
    with open(out / "latency.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["recording", "window", "offset_samples", "latency_ms"])
        for name, sr in results:
            for i, (off, lat) in enumerate(zip(sr.offsets, sr.latencies)):
                wr.writerow([name, i, int(off), f"{lat * 1e3:.4f}"])
    lat = np.concatenate([sr.latencies for _, sr in results]) if results else np.zeros(0)
    summary = {
        "windows": int(lat.size),
        "latency_mean_ms": float(lat.mean() * 1e3) if lat.size else None,
        "latency_sd_ms": float(lat.std() * 1e3) if lat.size else None,
        "latency_max_ms": float(lat.max() * 1e3) if lat.size else None,
        "budget_ms": conf.online.increment_s * 1e3,
        "realtime": "pass" if ok else "fail",
    }
    (out / "stream_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return ok, results


def cmd_evaluate(conf: cfgmod.PipelineConfig, online_path, reference_path, out: Path, recording_path=None,
                 templates_path=None, emit_svg: bool = False):
    online, fs_o = _load_trains(online_path)
    reference, fs_r = _load_trains(reference_path)
    if fs_o != fs_r:
        raise DataError(f"sample rates differ: {online_path} {fs_o} Hz, {reference_path} {fs_r} Hz")
    ev = conf.eval
    tol = int(round(ev.tol_ms * 1e-3 * fs_r))
    match = match_pairs(online, reference, tol, ev.max_lag, ev.mr_floor)
    metrics = evaluate(online, reference, fs_r, ev.tol_ms, ev.max_lag, ev.mr_floor)
    cdi = None
    if recording_path or templates_path:
        if not (recording_path and templates_path):
            raise UsageError("DI/CDI needs both --recording and --templates")
        rec = _load_recording(recording_path)
        try:
            w, ids, _, _ = read_templates(templates_path)
        except FormatError as e:
            raise DataError(str(e)) from None
        try:
            # DI is relative to the other MUs present in the reference
            templates = MuapTemplateSet(ids, w).subset([t.mu_id for t in reference])
            di = decomposability(templates, rec)
        except (KeyError, ValueError) as e:
            raise DataError(str(e)) from None
        cdi = {int(i): float(c) for i, c in zip(di.mu_ids, di.cdi)}
    write_metrics_csv(out / "metrics.csv", metrics, cdi)
    if emit_svg:
        from . import plotting
        plotting.raster(out / "raster.svg", match, fs_r)
        plotting.rate_bars(out / "rates.svg", {"all": metrics})
        if cdi is not None:
            plotting.mr_vs_cdi(out / "mr_vs_cdi.svg", metrics, cdi)
    return metrics


def _condition(args):
    seed, snr, selectors, conf = args
    return run_condition(seed, snr, selectors, conf.sim, conf.apfp, conf.online, conf.report)


REPORT_COLUMNS = ["seed", "noise", "selector", "n_bank", "n_matched", "mr", "fdr", "fnr",
                  "offline_mr", "latency_mean_ms", "latency_max_ms"]


def cmd_report(conf: cfgmod.PipelineConfig, seeds, selectors, out: Path, jobs: int = 1) -> list[ConditionResult]:
    work = [(s, snr, tuple(selectors), conf) for s in seeds for snr in conf.grid.noise_levels]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_condition, work))
    else:
        results = [_condition(w) for w in work]
    rows = []
    for r in results:
        for sel in selectors:
            rows.append([r.seed, noise_label(r.snr_db), sel, r.n_bank,
                         f"{r.mean(sel, 'n_matched'):.6g}", f"{r.mean(sel, 'mr'):.6g}", f"{r.mean(sel, 'fdr'):.6g}",
                         f"{r.mean(sel, 'fnr'):.6g}", f"{r.offline_mean('mr'):.6g}",
                         f"{r.latencies.mean() * 1e3:.4f}" if r.latencies.size else "",
                         f"{r.latencies.max() * 1e3:.4f}" if r.latencies.size else ""])
    with open(out / "report.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(REPORT_COLUMNS)
        wr.writerows(rows)
    from . import plotting
    for sel in selectors:
        groups = {}
        for snr in conf.grid.noise_levels:
            ms = [m for r in results if r.snr_db == snr for m in r.online[sel]]
            groups[noise_label(snr)] = _pooled(ms)
        plotting.rate_bars(out / f"rates_{sel}.svg", groups)
    return results


def _pooled(metrics) -> SimpleNamespace:
    return SimpleNamespace(**{a: float(np.nanmean([getattr(m, a) for m in metrics])) if metrics else float("nan")
                              for a in ("mr", "fdr", "fnr")})


# ---------------------------------------------------------------------------

def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a parse error
        return int(e.code or 0)
    try:
        conf = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(conf.dumps())
            return EXIT_OK
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        # validate every path before any stage runs
        cmd = args.command
        if cmd == "decompose-offline":
            _need_file(args.recording)
        elif cmd == "bank":
            for p in args.vectors + args.recording:
                _need_file(p)
        elif cmd == "stream":
            _need_file(args.bank)
            for p in args.recordings:
                _need_file(p)
        elif cmd == "evaluate":
            for p in (args.online, args.reference, args.recording, args.templates):
                if p:
                    _need_file(p)
        out = _out_dir(args.out)

        if cmd == "simulate":
            m = cmd_simulate(conf, out)
            print(f"wrote {len(m['segments'])} segments to {out}")
        elif cmd == "decompose-offline":
            n = cmd_decompose_offline(conf, args.recording, out)
            print(f"accepted {n} MUs")
        elif cmd == "bank":
            bank = cmd_bank_build(conf, args.vectors, args.recording, out / args.name)
            print(f"bank with {bank.n_vectors} vectors written to {out / args.name}")
        elif cmd == "stream":
            t0 = time.perf_counter()
            ok, results = cmd_stream(conf, args.recordings, args.bank, out, realtime=args.realtime, k=args.k)
            print(f"streamed {len(results)} recording(s) in {time.perf_counter() - t0:.2f} s; "
                  f"real-time budget {'met' if ok else 'VIOLATED'}")
            if args.enforce_realtime and not ok:
                return EXIT_REALTIME
        elif cmd == "evaluate":
            m = cmd_evaluate(conf, args.online, args.reference, out, args.recording, args.templates,
                             args.emit_svg)
            print(f"matched {m.n_matched} MUs: MR {m.mr:.4f} FDR {m.fdr:.4f} FNR {m.fnr:.4f}")
        elif cmd == "report":
            cmd_report(conf, args.seeds, args.selectors, out, args.jobs)
            print(f"report written to {out / 'report.csv'}")
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
