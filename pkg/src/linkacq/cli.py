"""Command-line front end: design, acquire, sweep, bench, calibrate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cache import CacheError, bank_key, preamble_grid_key, read_cache, write_cache
from .dictionary import GramMatrix, build_template_bank, gram_matrix
from .harness import (_write_csv, build_experiment, calibrate_threshold,
                      complexity_report, detected_components, emit_results,
                      load_config, run_experiment, run_trial, trial_seed,
                      write_manifest)
from .samplers import kl_optimal_B, kl_report, random_B, with_noise_model
from .waveforms import default_preamble_set


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--trials", type=int, default=None,
                        help="override trial count")
    parser.add_argument("--receivers", default=None,
                        help="comma-separated receiver names to keep")
    parser.add_argument("--snr", default=None,
                        help="comma-separated SNR list in dB")


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config)
    if args.trials is not None:
        cfg = replace(cfg, trials=args.trials)
    if args.snr is not None:
        cfg = replace(cfg, snr_db=tuple(float(s) for s in args.snr.split(",")))
    if args.receivers is not None:
        keep = [s.strip() for s in args.receivers.split(",")]
        chosen = tuple(r for r in cfg.receivers if r.name in keep)
        missing = set(keep) - {r.name for r in chosen}
        if missing:
            raise SystemExit(f"unknown receiver names: {sorted(missing)}")
        cfg = replace(cfg, receivers=chosen)
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_design(args) -> int:
    """Build (or load from cache) the Gram spectrum and sampler banks."""
    cfg = _load(args)
    out = _outdir(args)
    grid = cfg.grid()
    preambles = default_preamble_set(cfg.n_users, cfg.register_degree,
                                     cfg.pulse_shape())
    templates = build_template_bank(preambles, grid)
    gkey = preamble_grid_key(preambles, grid)
    gpath = out / "gram.lacq"
    gram = None
    if gpath.exists():
        try:
            _, arrays = read_cache(gpath, expected_key=gkey)
            gram = GramMatrix(eigvals=arrays["eigvals"].real.astype(float),
                              eigvecs=arrays["eigvecs"])
            print(f"gram: loaded cache {gpath}")
        except CacheError as exc:
            print(f"gram: stale cache ({exc}); rebuilding")
    if gram is None:
        gram = gram_matrix(templates, dense=grid.size <= 600)
        write_cache(gpath, gkey, {
            "eigvals": gram.eigvals.astype(np.complex64),
            "eigvecs": gram.eigvecs.astype(np.complex64),
        })
        print(f"gram: computed and cached {gpath} (rank {gram.rank()})")

    rows = []
    for spec in cfg.receivers:
        if spec.kind != "csa" or spec.bank == "identity":
            continue
        bkey = bank_key(gkey, spec.n_samplers, spec.bank, spec.bank_seed)
        bpath = out / f"bank_{spec.name}.lacq"
        if spec.bank == "kl-optimal":
            bank = kl_optimal_B(gram, spec.n_samplers)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(spec.bank_seed, spawn_key=(0xB,)))
            bank = random_B(spec.bank, spec.n_samplers, grid.size, rng)
            bank = with_noise_model(bank, templates=templates)
        write_cache(bpath, bkey, {"matrix": bank.matrix.astype(np.complex64)})
        rep = kl_report(bank, gram)
        rows.append([spec.name, rep.kind, rep.n_samplers, rep.avg_kl,
                     rep.spark_bound, rep.spark_tag, int(rep.rank_truncated)])
        print(f"bank {spec.name}: kind={rep.kind} P={rep.n_samplers} "
              f"avg_kl={rep.avg_kl:.4f} spark>={rep.spark_bound} ({rep.spark_tag})")
    _write_csv(out / "kl_report.csv",
               ["name", "kind", "n_samplers", "avg_kl", "spark_bound",
                "spark_tag", "rank_truncated"], rows)
    write_manifest(out / "run_manifest.json", cfg, args.seed, command="design",
                   gram_key=gkey)
    return 0


def cmd_acquire(args) -> int:
    """One signal stream, verbose per-shift statistics and the decision."""
    cfg = _load(args)
    out = _outdir(args)
    n_cal = cfg.trials if args.trials is not None else max(cfg.trials, 100)
    snr = cfg.snr_db[0]
    assets = build_experiment(cfg)
    print(f"calibrating on {n_cal} noise trials at {snr} dB "
          f"(target P_f {cfg.target_pf}) ...")
    noise = [run_trial(assets, snr, trial_seed(args.seed, 0, n_cal + t), False)
             for t in range(n_cal)]
    thresholds = {}
    for spec in cfg.receivers:
        thr, extrap = calibrate_threshold(noise, spec.name, cfg.target_pf)
        thresholds[spec.name] = thr
        print(f"  {spec.name}: threshold {thr:.4f}"
              + (" (extrapolated)" if extrap else ""))
    rec = run_trial(assets, snr, np.random.SeedSequence(args.seed,
                                                        spawn_key=(1, 0)), True)
    print(f"truth: active={[int(u) for u in rec.channel.active]} "
          f"t0={rec.channel.t0:.3f}")
    names = [r.name for r in cfg.receivers]
    print("shift  " + "  ".join(f"{n:>12s}" for n in names))
    n_eval = len(rec.receivers[names[0]].trace)
    rows = []
    for s in range(n_eval):
        vals = [rec.receivers[n].trace[s] for n in names]
        marks = ["*" if v >= thresholds[n] else " " for v, n in zip(vals, names)]
        print(f"{s:5d}  " + "  ".join(f"{v:11.4f}{m}" for v, m in zip(vals, marks)))
        for n, v in zip(names, vals):
            rows.append([n, s, float(v), int(v >= thresholds[n])])
    _write_csv(out / "trace.csv", ["receiver", "shift", "statistic", "above"],
               rows)
    decisions = {}
    for n in names:
        det, best, users, cells = detected_components(
            rec, n, thresholds[n], cfg.effective_horizon, assets)
        decisions[n] = {"detected": det, "best_shift": best,
                        "users": list(users),
                        "cells": {str(u): [[k, q, abs(a)] for (k, q, a) in cs]
                                  for u, cs in cells.items()}}
        print(f"{n}: detected={det} shift={best} users={list(users)}")
    write_manifest(out / "run_manifest.json", cfg, args.seed, command="acquire",
                   thresholds=thresholds, decisions=decisions)
    return 0


def cmd_sweep(args) -> int:
    """Monte Carlo sweep over the configured SNR points and receivers."""
    cfg = _load(args)
    out = _outdir(args)
    result = run_experiment(cfg, master_seed=args.seed, workers=args.workers)
    paths = emit_results(result, out)
    for row in result.metrics.rows:
        rt = "" if row.rmse_tau is None else f" rmse_tau={row.rmse_tau:.4f}"
        print(f"{row.receiver} @ {row.snr_db} dB: pd={row.pd:.3f} "
              f"ident={row.identification:.3f}{rt}")
    print("wrote:", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_bench(args) -> int:
    """Operation-count comparison across preamble lengths and budgets."""
    cfg = _load(args)
    out = _outdir(args)
    degrees = tuple(int(d) for d in args.degrees.split(","))
    budgets = tuple(int(b) for b in args.budgets.split(","))
    rows = complexity_report(cfg, degrees=degrees, budgets=budgets,
                             seed=args.seed)
    header = list(rows[0].keys())
    _write_csv(out / "bench.csv", header, [[r[k] for k in header] for r in rows])
    for r in rows:
        print(f"{r['receiver']} M={r['preamble_length']} P={r['n_samplers']}: "
              f"measured={r['measured_ops']} formula={r['formula_ops']} "
              f"ratio={r['ratio']:.3f}")
    write_manifest(out / "run_manifest.json", cfg, args.seed, command="bench")
    return 0


def cmd_calibrate(args) -> int:
    """Noise-only threshold calibration per receiver and SNR."""
    cfg = _load(args)
    out = _outdir(args)
    assets = build_experiment(cfg)
    rows = []
    for si, snr in enumerate(cfg.snr_db):
        noise = [run_trial(assets, snr,
                           trial_seed(args.seed, si, cfg.trials + t), False)
                 for t in range(cfg.trials)]
        for spec in cfg.receivers:
            thr, extrap = calibrate_threshold(noise, spec.name, cfg.target_pf)
            rows.append([spec.name, snr, thr, int(extrap), cfg.trials,
                         cfg.target_pf])
            print(f"{spec.name} @ {snr} dB: threshold {thr:.4f}"
                  + (" (extrapolated)" if extrap else ""))
    _write_csv(out / "thresholds.csv",
               ["receiver", "snr_db", "threshold", "extrapolated", "n_trials",
                "target_pf"], rows)
    write_manifest(out / "run_manifest.json", cfg, args.seed,
                   command="calibrate")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="linkacq",
        description="Sequential multiuser link acquisition simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="build and cache Gram spectrum and banks")
    _common(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("acquire", help="single stream with per-shift trace")
    _common(p)
    p.set_defaults(func=cmd_acquire)

    p = sub.add_parser("sweep", help="Monte Carlo metric sweep")
    _common(p)
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes (fork)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="operation-count comparison")
    _common(p)
    p.add_argument("--degrees", default="8,10",
                   help="comma-separated shift-register degrees")
    p.add_argument("--budgets", default="60,100",
                   help="comma-separated sample budgets P")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="noise-only threshold calibration")
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, CacheError, FileNotFoundError) as e:
        print(f"linkacq: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
