"""Monte Carlo experiment harness: trials, calibration, metrics, bench, CSV.

An experiment draws interleaved signal and noise trials (equal counts, one
stream each), evaluates every configured receiver on the same streams, and
stores per-shift statistics plus compact per-shift solver outputs.  The
sequential decision (first trigger, look-ahead argmax) is applied after the
fact, which lets one batch of trials serve threshold calibration, ROC
sweeps, identification, and RMSE at any operating point.

Per-trial randomness comes from a splittable seed tree keyed by the master
seed and the trial index, so results are reproducible and order-independent
under any worker-pool schedule.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from ._version import __version__
from .dictionary import (GridConfig, GramMatrix, TemplateBank,
                         build_template_bank, gram_matrix,
                         ground_truth_link_vector, triplet_from_index)
from .receivers import (DEFAULT_EPS_SQ, ExtractionPolicy, SparseEstimate,
                        WhitenedDictionary, _llr, _select_users,
                        build_whitened_dictionary, omp_solve_batch)
from .samplers import identity_B, kl_optimal_B, random_B, with_noise_model
from .waveforms import (ChannelRealization, PulseShape, Scenario,
                        all_windows, default_preamble_set, sample_channel,
                        synthesize_received)

__all__ = [
    "ReceiverSpec",
    "ExperimentConfig",
    "ExperimentAssets",
    "TrialRecord",
    "ReceiverTrace",
    "MetricsRow",
    "MetricsTable",
    "ExperimentResult",
    "load_config",
    "config_to_dict",
    "build_experiment",
    "noise_var_for_snr",
    "run_trial",
    "run_experiment",
    "gate_trace",
    "trial_statistics",
    "calibrate_threshold",
    "roc_curve",
    "pd_at_pf",
    "detected_components",
    "identification_rate",
    "rmse",
    "csa_ops_per_shift",
    "mf_ops_per_shift",
    "measure_receiver_ops",
    "complexity_report",
    "emit_results",
    "parse_metrics",
    "write_manifest",
]


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

_BANK_KINDS = ("kl-optimal", "gaussian", "bernoulli", "partial-dft", "identity")


@dataclass(frozen=True)
class ReceiverSpec:
    """One receiver under test: kind, sampler bank, and sample budget P."""

    name: str
    kind: str                 # csa | dsa | mf
    bank: str = ""            # bank kind for csa; ignored for dsa (identity) and mf
    n_samplers: int = 0       # P; 0 means "grid size" (dsa) or unused (mf)
    bank_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("csa", "dsa", "mf"):
            raise ValueError(f"receiver kind {self.kind!r} not one of csa|dsa|mf")
        if self.kind == "csa":
            if self.bank not in _BANK_KINDS:
                raise ValueError(f"csa receiver needs a valid bank kind, got {self.bank!r}")
            if self.bank != "identity" and self.n_samplers < 1:
                raise ValueError("csa receiver needs n_samplers >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Scenario geometry, trial plan, and receiver roster.

    Frequencies are in cycles of 1/T: doppler_step_cycles c means
    dw = c * 2*pi / chip_duration.  The channel Doppler spread is
    doppler_half * dw on each side, matching the grid exactly.
    """

    # scenario / waveforms
    n_users: int = 10
    n_active: int = 4
    paths_per_user: int = 2
    register_degree: int = 8
    chip_duration: float = 1.0
    oversampling: int = 2
    pulse: str = "rectangular"
    rolloff: float = 0.25
    truncation_chips: int = 0
    # grid
    doppler_half: int = 5
    doppler_step_cycles: float = 0.5e-3
    n_delays: int = 24
    delay_step_chips: float = 0.5
    shift_cells: int = 16
    delay_spread_chips: float = 4.0
    # experiment
    trials: int = 100
    snr_db: tuple[float, ...] = (-8.0,)
    target_pf: float = 0.1
    horizon: int | None = None        # None: ceil(M*T / D)
    eval_shifts: int | None = None    # None: floor(M*T / D) + 5
    knowledge: str = "partial"        # unknown | partial | known
    rho_fraction: float = 1.0 / 3.0
    use_noise_prior: bool = True      # OMP stops at the sigma^2 energy floor
    receivers: tuple[ReceiverSpec, ...] = ()

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if len(self.snr_db) == 0:
            raise ValueError("SNR list must be non-empty")
        if self.knowledge not in ("unknown", "partial", "known"):
            raise ValueError(f"knowledge {self.knowledge!r} not one of unknown|partial|known")
        names = [r.name for r in self.receivers]
        if len(set(names)) != len(names):
            raise ValueError("receiver names must be unique")

    @property
    def preamble_length(self) -> int:
        return 2 ** self.register_degree - 1

    @property
    def delay_step(self) -> float:
        return self.delay_step_chips * self.chip_duration

    @property
    def doppler_step(self) -> float:
        return self.doppler_step_cycles * 2.0 * np.pi / self.chip_duration

    @property
    def shift_duration(self) -> float:
        return self.shift_cells * self.delay_step

    @property
    def auto_horizon(self) -> int:
        """Look-ahead N0 = ceil(T_observe / D) with T_observe = M*T."""
        return int(np.ceil(self.preamble_length * self.chip_duration
                           / self.shift_duration))

    @property
    def effective_horizon(self) -> int:
        return self.horizon if self.horizon is not None else self.auto_horizon

    @property
    def effective_eval_shifts(self) -> int:
        if self.eval_shifts is not None:
            return self.eval_shifts
        return int(np.floor(self.preamble_length * self.chip_duration
                            / self.shift_duration)) + 5

    def grid(self) -> GridConfig:
        return GridConfig(
            n_users=self.n_users,
            doppler_half=self.doppler_half,
            n_delays=self.n_delays,
            delay_step=self.delay_step,
            doppler_step=self.doppler_step,
            shift_cells=self.shift_cells,
            delay_spread=self.delay_spread_chips * self.chip_duration,
        )

    def pulse_shape(self) -> PulseShape:
        return PulseShape(kind=self.pulse, chip_duration=self.chip_duration,
                          truncation_chips=self.truncation_chips,
                          oversampling=self.oversampling, rolloff=self.rolloff)


_SCENARIO_KEYS = ("n_users", "n_active", "paths_per_user", "register_degree",
                  "chip_duration", "oversampling", "pulse", "rolloff",
                  "truncation_chips", "doppler_half", "doppler_step_cycles",
                  "n_delays", "delay_step_chips", "shift_cells",
                  "delay_spread_chips")
_EXPERIMENT_KEYS = ("trials", "snr_db", "target_pf", "horizon", "eval_shifts",
                    "knowledge", "rho_fraction", "use_noise_prior")


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a TOML file."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    kw = {}
    for key, val in raw.get("scenario", {}).items():
        if key not in _SCENARIO_KEYS:
            raise ValueError(f"unknown [scenario] key {key!r}")
        kw[key] = val
    for key, val in raw.get("experiment", {}).items():
        if key not in _EXPERIMENT_KEYS:
            raise ValueError(f"unknown [experiment] key {key!r}")
        kw[key] = tuple(val) if key == "snr_db" else val
    specs = []
    for entry in raw.get("receivers", []):
        specs.append(ReceiverSpec(name=entry["name"], kind=entry["kind"],
                                  bank=entry.get("bank", ""),
                                  n_samplers=int(entry.get("n_samplers", 0)),
                                  bank_seed=int(entry.get("bank_seed", 0))))
    kw["receivers"] = tuple(specs)
    return ExperimentConfig(**kw)


def config_to_dict(config: ExperimentConfig) -> dict:
    """JSON-friendly echo of the configuration (for run manifests)."""
    out = {k: getattr(config, k) for k in _SCENARIO_KEYS}
    for k in _EXPERIMENT_KEYS:
        out[k] = getattr(config, k)
    out["snr_db"] = list(config.snr_db)
    out["receivers"] = [
        {"name": r.name, "kind": r.kind, "bank": r.bank,
         "n_samplers": r.n_samplers, "bank_seed": r.bank_seed}
        for r in config.receivers
    ]
    return out


# --------------------------------------------------------------------------
# Experiment assembly
# --------------------------------------------------------------------------

@dataclass
class ExperimentAssets:
    """Everything derived from a config that trials share read-only."""

    config: ExperimentConfig
    grid: GridConfig
    preambles: tuple
    templates: TemplateBank
    gram: GramMatrix | None
    wdicts: dict            # receiver name -> WhitenedDictionary (None for mf)

    @property
    def template_energy(self) -> float:
        p = self.templates.preambles[0]
        return float(self.templates.sample_period * np.sum(np.abs(p.samples) ** 2))

    @property
    def n_eval(self) -> int:
        return self.config.effective_eval_shifts

    @property
    def stream_samples(self) -> int:
        return (self.n_eval - 1) * self.templates.shift_samples \
            + self.templates.window_samples

    def policy(self, channel: ChannelRealization | None = None) -> ExtractionPolicy:
        cfg = self.config
        if cfg.knowledge == "known":
            active = tuple(channel.active) if channel is not None \
                else tuple(range(1, cfg.n_active + 1))
            return ExtractionPolicy(mode="known", paths_per_user=cfg.paths_per_user,
                                    active=active, rho_fraction=cfg.rho_fraction)
        return ExtractionPolicy(mode=cfg.knowledge, paths_per_user=cfg.paths_per_user,
                                n_active=cfg.n_active, rho_fraction=cfg.rho_fraction)

    def support_cap(self) -> int:
        cfg = self.config
        n = cfg.n_users if cfg.knowledge == "unknown" else cfg.n_active
        return n * cfg.paths_per_user


def build_experiment(config: ExperimentConfig) -> ExperimentAssets:
    """Build preambles, templates, the Gram spectrum (if needed), and banks."""
    grid = config.grid()
    pulse = config.pulse_shape()
    preambles = default_preamble_set(config.n_users, config.register_degree, pulse)
    templates = build_template_bank(preambles, grid)
    need_spectrum = any(
        r.kind == "dsa" or (r.kind == "csa" and r.bank in ("kl-optimal", "identity"))
        for r in config.receivers
    )
    gram = None
    if need_spectrum:
        gram = gram_matrix(templates, dense=grid.size <= 600)
    wdicts = {}
    for spec in config.receivers:
        if spec.kind == "mf":
            wdicts[spec.name] = None
            continue
        if spec.kind == "dsa" or spec.bank == "identity":
            bank = identity_B(grid.size)
        elif spec.bank == "kl-optimal":
            bank = kl_optimal_B(gram, spec.n_samplers)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(spec.bank_seed, spawn_key=(0xB,)))
            bank = random_B(spec.bank, spec.n_samplers, grid.size, rng)
            bank = with_noise_model(bank, templates=templates)
        wdicts[spec.name] = build_whitened_dictionary(bank, templates, gram)
    return ExperimentAssets(config=config, grid=grid, preambles=preambles,
                            templates=templates, gram=gram, wdicts=wdicts)


def noise_var_for_snr(assets: ExperimentAssets, snr_db: float) -> float:
    """sigma^2 such that template energy / window noise energy = SNR.

    Both energies in Ts-weighted units: the template carries ||phi||^2 (= M
    for unit-modulus chips) and a W-sample window collects W * sigma^2.
    """
    snr = 10.0 ** (snr_db / 10.0)
    return assets.template_energy / (assets.templates.window_samples * snr)


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------

@dataclass
class ReceiverTrace:
    """Per-receiver per-trial record: statistic trace + per-shift outputs."""

    trace: np.ndarray                      # (n_eval,)
    indices: tuple | None = None           # csa/dsa: per-shift linear indices
    amplitudes: tuple | None = None        # csa/dsa: per-shift complex amps
    cell_index: np.ndarray | None = None   # mf: (n_eval, I, R) flat (k,q) index
    cell_value: np.ndarray | None = None   # mf: (n_eval, I, R) complex
    runtime: float = 0.0


@dataclass
class TrialRecord:
    """Ground truth and every receiver's outputs for one synthetic stream."""

    index: int
    signal_present: bool
    snr_db: float
    channel: ChannelRealization | None
    receivers: dict

    def __post_init__(self):
        if self.signal_present != (self.channel is not None):
            raise ValueError("ground truth must be present iff signal_present")


def trial_seed(master_seed: int, snr_index: int, trial_index: int) -> np.random.SeedSequence:
    """Splittable per-trial seed: independent of execution order."""
    return np.random.SeedSequence(master_seed, spawn_key=(snr_index, trial_index))


def run_trial(assets: ExperimentAssets, snr_db: float, seed,
              signal_present: bool) -> TrialRecord:
    """Synthesize one stream and evaluate every configured receiver on it."""
    cfg = assets.config
    rng = np.random.default_rng(seed)
    sigma2 = noise_var_for_snr(assets, snr_db)
    channel = None
    if signal_present:
        scen = Scenario(n_users=cfg.n_users, n_active=cfg.n_active,
                        paths_per_user=cfg.paths_per_user,
                        chip_duration=cfg.chip_duration,
                        preamble_length=cfg.preamble_length,
                        delay_spread=cfg.delay_spread_chips * cfg.chip_duration,
                        doppler_max=cfg.doppler_half * cfg.doppler_step,
                        noise_var=sigma2)
        channel = sample_channel(rng, scen)
    stream = synthesize_received(assets.preambles, channel, rng,
                                 n_samples=assets.stream_samples,
                                 window_samples=assets.templates.window_samples,
                                 shift_samples=assets.templates.shift_samples,
                                 noise_var=sigma2)
    wins = all_windows(stream, assets.n_eval)
    Ts = assets.templates.sample_period
    cap = assets.support_cap()
    prior = sigma2 if cfg.use_noise_prior else None
    out = {}
    for spec in cfg.receivers:
        t0 = time.perf_counter()
        if spec.kind == "mf":
            out[spec.name] = _mf_trial(wins, assets, Ts)
        else:
            out[spec.name] = _csa_trial(wins, assets.wdicts[spec.name], Ts,
                                        cap, prior)
        out[spec.name].runtime = time.perf_counter() - t0
    idx = seed.spawn_key[-1] if isinstance(seed, np.random.SeedSequence) else -1
    return TrialRecord(index=int(idx), signal_present=signal_present,
                       snr_db=snr_db, channel=channel, receivers=out)


def _csa_trial(wins: np.ndarray, wdict: WhitenedDictionary, Ts: float,
               cap: int, noise_prior: float | None) -> ReceiverTrace:
    C = Ts * (wins @ np.conj(wdict.kernels))          # (n_eval, P)
    CW = wdict.bank.whitener @ C.T                    # (r, n_eval)
    eps_sq = (wdict.whitened.shape[0] * noise_prior
              if noise_prior is not None else DEFAULT_EPS_SQ)
    ests = omp_solve_batch(CW, wdict, max_support=cap, eps_sq=eps_sq)
    P = wdict.n_samplers
    trace = np.array([_llr(e.energy, e.residual_norm ** 2, P) for e in ests])
    return ReceiverTrace(
        trace=trace,
        indices=tuple(np.asarray(e.indices, dtype=np.int32) for e in ests),
        amplitudes=tuple(e.amplitudes for e in ests),
    )


def _mf_trial(wins: np.ndarray, assets: ExperimentAssets, Ts: float) -> ReceiverTrace:
    grid = assets.grid
    R = assets.config.paths_per_user
    Z = Ts * (wins @ np.conj(assets.templates.matrix))   # (n_eval, G)
    n_eval = Z.shape[0]
    kq = grid.n_doppler * grid.n_delays
    Z3 = Z.reshape(n_eval, grid.n_users, kq)
    mag = np.abs(Z3)
    trace = mag.reshape(n_eval, -1).max(axis=1)
    keep = min(R, kq)
    part = np.argpartition(mag, kq - keep, axis=2)[:, :, kq - keep:]
    part = np.sort(part, axis=2)                      # lowest index first on ties
    vals = np.take_along_axis(mag, part, axis=2)
    order = np.argsort(-vals, axis=2, kind="stable")
    part = np.take_along_axis(part, order, axis=2)
    cvals = np.take_along_axis(Z3, part, axis=2)
    return ReceiverTrace(trace=trace, cell_index=part.astype(np.int32),
                         cell_value=cvals)


# --------------------------------------------------------------------------
# Decisions and metrics
# --------------------------------------------------------------------------

def gate_trace(trace: np.ndarray, threshold: float,
               horizon: int) -> tuple[bool, int | None, int | None]:
    """Sequential decision on a recorded statistic trace.

    Returns (detected, first trigger N_eta, argmax shift over the horizon
    window [N_eta, N_eta + horizon] truncated to the trace end).
    """
    hits = np.nonzero(np.asarray(trace) >= threshold)[0]
    if hits.size == 0:
        return False, None, None
    first = int(hits[0])
    window = np.asarray(trace[first:first + horizon + 1])
    return True, first, first + int(np.argmax(window))


def trial_statistics(records, receiver: str) -> np.ndarray:
    """Per-trial detection statistic: the maximum of the trace."""
    return np.array([float(np.max(r.receivers[receiver].trace)) for r in records])


def calibrate_threshold(noise_records, receiver: str,
                        target_pf: float) -> tuple[float, bool]:
    """Empirical threshold: the (1 - P_f) quantile of noise-trial maxima.

    Returns (threshold, extrapolated).  target_pf = 0 cannot be certified
    empirically; the threshold is placed just above the largest observed
    statistic and flagged.
    """
    noise_records = [r for r in noise_records if not r.signal_present]
    if len(noise_records) < 100:
        raise ValueError(
            f"calibration needs >= 100 noise-only trials, got {len(noise_records)}")
    stats = trial_statistics(noise_records, receiver)
    if not 0.0 <= target_pf <= 1.0:
        raise ValueError("target_pf must lie in [0, 1]")
    if target_pf == 0.0:
        return float(np.nextafter(stats.max(), np.inf)), True
    if target_pf == 1.0:
        return float(stats.min()), False
    return float(np.quantile(stats, 1.0 - target_pf, method="higher")), False


def roc_curve(signal_stats: np.ndarray, noise_stats: np.ndarray) -> np.ndarray:
    """Empirical ROC: (P_f, P_d) swept over every observed statistic.

    Endpoints (0,0) and (1,1) are always included and the curve is reduced
    to its isotonic envelope: one point per P_f (the best P_d), with P_d
    nondecreasing in P_f.
    """
    signal_stats = np.sort(np.asarray(signal_stats, dtype=float))
    noise_stats = np.sort(np.asarray(noise_stats, dtype=float))
    thresholds = np.unique(np.concatenate([signal_stats, noise_stats]))
    n_s, n_n = len(signal_stats), len(noise_stats)
    pd = 1.0 - np.searchsorted(signal_stats, thresholds, side="left") / n_s
    pf = 1.0 - np.searchsorted(noise_stats, thresholds, side="left") / n_n
    pts = np.vstack([[0.0, 0.0], np.column_stack([pf, pd]), [1.0, 1.0]])
    pts = np.unique(pts, axis=0)                     # sorted by (P_f, P_d)
    pf_u = np.unique(pts[:, 0])
    right = np.searchsorted(pts[:, 0], pf_u, side="right") - 1
    pd_env = np.maximum.accumulate(pts[right, 1])
    return np.column_stack([pf_u, pd_env])


def pd_at_pf(curve: np.ndarray, pf: float) -> float:
    """Largest attainable P_d among operating points with P_f <= pf."""
    ok = curve[curve[:, 0] <= pf + 1e-12]
    return float(ok[:, 1].max()) if len(ok) else 0.0


def _csa_components(data: ReceiverTrace, shift: int, policy: ExtractionPolicy,
                    grid: GridConfig):
    per_user: dict[int, list] = {}
    for j, amp in zip(data.indices[shift], data.amplitudes[shift]):
        i, k, q = triplet_from_index(int(j), grid)
        per_user.setdefault(i, []).append((k, q, complex(amp)))
    return _select_users(per_user, policy, grid)


def _mf_components(data: ReceiverTrace, shift: int, policy: ExtractionPolicy,
                   grid: GridConfig, user_threshold: float):
    per_user: dict[int, list] = {}
    for ui in range(grid.n_users):
        cells = []
        for r in range(data.cell_index.shape[2]):
            flat = int(data.cell_index[shift, ui, r])
            amp = complex(data.cell_value[shift, ui, r])
            cells.append((flat // grid.n_delays - grid.doppler_half,
                          flat % grid.n_delays, amp))
        per_user[ui + 1] = cells
    if policy.mode == "unknown":
        users = tuple(sorted(u for u, cs in per_user.items()
                             if max(abs(a) for (_k, _q, a) in cs) >= user_threshold))
        return users, {u: tuple(per_user[u][:policy.paths_per_user]) for u in users}
    return _select_users(per_user, policy, grid, presorted=True)


def detected_components(record: TrialRecord, receiver: str, threshold: float,
                        horizon: int, assets: ExperimentAssets):
    """Apply the sequential decision and extraction to a stored trial.

    Returns (detected, best shift, user tuple, cells dict).
    """
    data = record.receivers[receiver]
    detected, _first, best = gate_trace(data.trace, threshold, horizon)
    if not detected:
        return False, None, (), {}
    policy = assets.policy(record.channel)
    if data.cell_index is not None:
        users, cells = _mf_components(data, best, policy, assets.grid, threshold)
    else:
        users, cells = _csa_components(data, best, policy, assets.grid)
    return True, best, users, cells


def identification_rate(records, receiver: str, threshold: float, horizon: int,
                        assets: ExperimentAssets) -> float:
    """P(detected user set == true active set) over signal trials."""
    hits, total = 0, 0
    for rec in records:
        if not rec.signal_present:
            continue
        total += 1
        _det, _best, users, _cells = detected_components(
            rec, receiver, threshold, horizon, assets)
        if tuple(sorted(users)) == tuple(sorted(rec.channel.active)):
            hits += 1
    if total == 0:
        raise ValueError("no signal trials to score")
    return hits / total


def rmse(records, receiver: str, threshold: float, horizon: int,
         assets: ExperimentAssets) -> tuple[float | None, float | None, int]:
    """Pooled delay/Doppler RMSE over correctly identified users.

    Per trial, users in the intersection of the detected and true sets
    contribute pairs: true paths and estimated cells are each sorted by
    delay and associated in order (surplus on either side is dropped).
    Estimates are mapped to absolute delays t = best_shift*D + q*dt before
    differencing.  Users whose paths collide on one grid cell at the
    declared shift are excluded.  Returns (rmse_tau, rmse_omega, n_pairs);
    None metrics when no pair survives.
    """
    grid = assets.grid
    sq_tau, sq_om = [], []
    for rec in records:
        if not rec.signal_present:
            continue
        det, best, users, cells = detected_components(
            rec, receiver, threshold, horizon, assets)
        if not det:
            continue
        ch = rec.channel
        _alpha, info = ground_truth_link_vector(ch, grid, best)
        collided = {u for (u, _k, _q) in info.collisions}
        for a, user in enumerate(ch.active):
            if user not in users or user in collided:
                continue
            true_pairs = sorted(zip(ch.delays[a], ch.dopplers[a]))
            est_pairs = sorted(
                (best * grid.shift_d + q * grid.delay_step, k * grid.doppler_step)
                for (k, q, _amp) in cells.get(user, ()))
            for (t_true, w_true), (t_est, w_est) in zip(true_pairs, est_pairs):
                sq_tau.append((t_true - t_est) ** 2)
                sq_om.append((w_true - w_est) ** 2)
    if not sq_tau:
        return None, None, 0
    return (float(np.sqrt(np.mean(sq_tau))), float(np.sqrt(np.mean(sq_om))),
            len(sq_tau))


# --------------------------------------------------------------------------
# Experiment driver
# --------------------------------------------------------------------------

@dataclass
class MetricsRow:
    receiver: str
    snr_db: float
    threshold: float
    extrapolated: bool
    pf_target: float
    pd: float
    identification: float | None
    rmse_tau: float | None
    rmse_omega: float | None
    mean_runtime: float
    ops_per_shift: int


@dataclass
class MetricsTable:
    rows: list
    roc: dict           # (receiver, snr_db) -> (n, 2) array


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    master_seed: int
    records: dict       # snr_db -> list[TrialRecord]
    metrics: MetricsTable
    thresholds: dict    # (receiver, snr_db) -> float


_WORKER_ASSETS: ExperimentAssets | None = None


def _init_worker(config: ExperimentConfig):
    global _WORKER_ASSETS
    _WORKER_ASSETS = build_experiment(config)


def _worker_trial(args):
    master_seed, snr_index, trial_index, snr_db, signal = args
    seed = trial_seed(master_seed, snr_index, trial_index)
    return run_trial(_WORKER_ASSETS, snr_db, seed, signal)


def run_experiment(config: ExperimentConfig, master_seed: int,
                   workers: int = 1,
                   assets: ExperimentAssets | None = None) -> ExperimentResult:
    """Run the full trial plan and assemble the metrics table.

    Per SNR point, `trials` signal and `trials` noise streams share the
    receiver roster; thresholds are calibrated on the noise half at the
    configured target P_f.
    """
    if assets is None:
        assets = build_experiment(config)
    records: dict[float, list] = {}
    for si, snr in enumerate(config.snr_db):
        plan = [(master_seed, si, t, snr, t < config.trials)
                for t in range(2 * config.trials)]
        if workers > 1:
            import multiprocessing
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                     initializer=_init_worker,
                                     initargs=(config,)) as pool:
                recs = list(pool.map(_worker_trial, plan, chunksize=8))
        else:
            recs = [run_trial(assets, snr, trial_seed(master_seed, si, t), sig)
                    for (_m, _si, t, _snr, sig) in plan]
        records[snr] = recs

    horizon = config.effective_horizon
    rows, roc, thresholds = [], {}, {}
    for snr, recs in records.items():
        signal_recs = [r for r in recs if r.signal_present]
        noise_recs = [r for r in recs if not r.signal_present]
        for spec in config.receivers:
            thr, extrap = calibrate_threshold(noise_recs, spec.name,
                                              config.target_pf)
            s_stats = trial_statistics(signal_recs, spec.name)
            n_stats = trial_statistics(noise_recs, spec.name)
            curve = roc_curve(s_stats, n_stats)
            pd_cal = float(np.mean(s_stats >= thr))
            ident = identification_rate(recs, spec.name, thr, horizon, assets)
            r_tau, r_om, _n = rmse(recs, spec.name, thr, horizon, assets)
            runtime = float(np.mean([r.receivers[spec.name].runtime for r in recs]))
            rows.append(MetricsRow(
                receiver=spec.name, snr_db=snr, threshold=thr,
                extrapolated=extrap, pf_target=config.target_pf, pd=pd_cal,
                identification=ident, rmse_tau=r_tau, rmse_omega=r_om,
                mean_runtime=runtime, ops_per_shift=_formula_ops(spec, assets)))
            roc[(spec.name, snr)] = curve
            thresholds[(spec.name, snr)] = thr
    return ExperimentResult(config=config, master_seed=master_seed,
                            records=records,
                            metrics=MetricsTable(rows=rows, roc=roc),
                            thresholds=thresholds)


def _formula_ops(spec: ReceiverSpec, assets: ExperimentAssets) -> int:
    M = assets.config.preamble_length
    G = assets.grid.size
    if spec.kind == "mf":
        return mf_ops_per_shift(M, G)
    P = G if (spec.kind == "dsa" or spec.bank == "identity") else spec.n_samplers
    return csa_ops_per_shift(M, P, G)


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------

def csa_ops_per_shift(M: int, P: int, G: int) -> int:
    """Closed-form per-window digital cost of the compressive receiver."""
    return M * P + G + P ** 3


def mf_ops_per_shift(M: int, G: int) -> int:
    """Closed-form per-window digital cost of the exhaustive MF."""
    return M * G


def measure_receiver_ops(assets: ExperimentAssets, wdict: WhitenedDictionary,
                         window: np.ndarray, s_max: int) -> dict:
    """Instrumented multiply-accumulate tally of one window's processing.

    Counts the operations the receiver performs at run time: front-end
    kernel correlations, whitening, initial dictionary correlation, and per
    OMP iteration the correlation update against materialized Gram columns
    plus the Cholesky refit.  Dictionary precomputation (kernels, whitened
    dictionary, its Gram) is amortized across the acquisition session and
    not charged to the window, matching the per-shift accounting of the
    closed forms.  The MF tally is the plain template correlation.
    """
    Ts = assets.templates.sample_period
    Aw = wdict.whitened
    r, G = Aw.shape
    W = assets.templates.window_samples
    P = wdict.n_samplers
    counts = {"front": P * W, "whiten": r * P, "corr": G * r,
              "omp_update": 0, "refit": 0}

    Gw = Aw.conj().T @ Aw                       # amortized, not counted
    c = Ts * (wdict.kernels.conj().T @ window)
    cw = wdict.bank.whitener @ c
    z0 = Aw.conj().T @ cw
    z = z0.copy()
    support: list[int] = []
    for _ in range(s_max):
        mag = np.abs(z)
        if support:
            mag[support] = -1.0
        support.append(int(np.argmax(mag)))
        j = len(support)
        Gs = Gw[np.ix_(support, support)]
        try:
            beta = cho_solve(cho_factor(Gs, lower=False, check_finite=False),
                             z0[support], check_finite=False)
        except LinAlgError:
            support.pop()
            break
        counts["refit"] += j ** 3 // 3 + 2 * j ** 2 + j
        z = z0 - Gw[:, support] @ beta
        counts["omp_update"] += G * j
    counts["total"] = sum(counts.values())
    return counts


def complexity_report(config: ExperimentConfig,
                      degrees: tuple[int, ...] = (8, 10),
                      budgets: tuple[int, ...] = (60, 100),
                      seed: int = 0) -> list[dict]:
    """Measured-vs-formula operation counts over a preamble/budget sweep.

    For each (preamble degree, P): builds the full grid geometry at that
    length, a Gaussian bank of P rows, drives the compressive receiver on a
    signal-bearing window to the sparsity cap, and tallies multiplies; the
    MF cost is W*G.  Rows carry the measured/formula ratio and the
    CMS-to-MF crossover ratios.
    """
    rows = []
    for degree in degrees:
        cfg = replace(config, register_degree=degree, receivers=())
        grid = cfg.grid()
        preambles = default_preamble_set(cfg.n_users, degree, cfg.pulse_shape())
        templates = build_template_bank(preambles, grid)
        assets = ExperimentAssets(config=cfg, grid=grid, preambles=preambles,
                                  templates=templates, gram=None, wdicts={})
        M = cfg.preamble_length
        G = grid.size
        W = templates.window_samples
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(degree,)))
        sigma2 = noise_var_for_snr(assets, 10.0)
        scen = Scenario(n_users=cfg.n_users, n_active=cfg.n_active,
                        paths_per_user=cfg.paths_per_user,
                        chip_duration=cfg.chip_duration, preamble_length=M,
                        delay_spread=cfg.delay_spread_chips * cfg.chip_duration,
                        doppler_max=cfg.doppler_half * cfg.doppler_step,
                        noise_var=sigma2)
        channel = sample_channel(rng, scen)
        stream = synthesize_received(preambles, channel, rng,
                                     n_samples=assets.stream_samples,
                                     window_samples=W,
                                     shift_samples=templates.shift_samples)
        ell = int(np.floor(channel.t0 / grid.shift_d))
        window = all_windows(stream, assets.n_eval)[ell]
        s_max = cfg.n_active * cfg.paths_per_user
        mf_measured = W * G
        for P in budgets:
            bank = with_noise_model(random_B("gaussian", P, G, rng),
                                    templates=templates)
            wdict = build_whitened_dictionary(bank, templates)
            counts = measure_receiver_ops(assets, wdict, window, s_max)
            formula = csa_ops_per_shift(M, P, G)
            mf_formula = mf_ops_per_shift(M, G)
            rows.append({
                "receiver": "csa", "preamble_length": M, "n_samplers": P,
                "grid_size": G, "window_samples": W,
                "measured_ops": counts["total"], "formula_ops": formula,
                "ratio": counts["total"] / formula,
                "front": counts["front"], "whiten": counts["whiten"],
                "corr": counts["corr"], "omp_update": counts["omp_update"],
                "refit": counts["refit"],
                "crossover_measured": counts["total"] / mf_measured,
                "crossover_formula": formula / mf_formula,
            })
        rows.append({
            "receiver": "mf", "preamble_length": M, "n_samplers": 0,
            "grid_size": G, "window_samples": W,
            "measured_ops": mf_measured, "formula_ops": mf_ops_per_shift(M, G),
            "ratio": mf_measured / mf_ops_per_shift(M, G),
            "front": mf_measured, "whiten": 0, "corr": 0, "omp_update": 0,
            "refit": 0, "crossover_measured": 1.0, "crossover_formula": 1.0,
        })
    return rows


# --------------------------------------------------------------------------
# Emission
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


_METRICS_HEADER = ["receiver", "snr_db", "threshold", "extrapolated",
                   "pf_target", "pd", "identification", "rmse_tau",
                   "rmse_omega", "mean_runtime", "ops_per_shift"]


def emit_results(result: ExperimentResult, out_dir) -> dict:
    """Write metrics, ROC, identification, RMSE, and bank-comparison CSVs.

    Returns the mapping of logical name to written path.  Files are UTF-8
    with LF line endings; the run manifest is JSON.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    rows = [[getattr(r, k) for k in _METRICS_HEADER] for r in result.metrics.rows]
    paths["metrics"] = out / "metrics.csv"
    _write_csv(paths["metrics"], _METRICS_HEADER, rows)

    roc_rows = []
    for (name, snr), curve in result.metrics.roc.items():
        for pf, pd in curve:
            roc_rows.append([name, snr, float(pf), float(pd)])
    paths["roc"] = out / "roc.csv"
    _write_csv(paths["roc"], ["receiver", "snr_db", "pf", "pd"], roc_rows)

    paths["uid"] = out / "uid.csv"
    _write_csv(paths["uid"], ["receiver", "snr_db", "rate"],
               [[r.receiver, r.snr_db, r.identification]
                for r in result.metrics.rows])

    paths["rmse"] = out / "rmse.csv"
    _write_csv(paths["rmse"], ["receiver", "snr_db", "rmse_tau", "rmse_omega"],
               [[r.receiver, r.snr_db, r.rmse_tau, r.rmse_omega]
                for r in result.metrics.rows])

    paths["kl-compare"] = out / "kl_compare.csv"
    _write_csv(paths["kl-compare"], ["receiver", "snr_db", "pd"],
               [[r.receiver, r.snr_db, r.pd] for r in result.metrics.rows])

    paths["manifest"] = out / "run_manifest.json"
    write_manifest(paths["manifest"], result.config, result.master_seed,
                   thresholds={f"{k[0]}@{k[1]}": v
                               for k, v in result.thresholds.items()})
    return paths


def parse_metrics(path) -> list[MetricsRow]:
    """Read back a metrics.csv written by emit_results."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(MetricsRow(
                receiver=rec["receiver"],
                snr_db=float(rec["snr_db"]),
                threshold=float(rec["threshold"]),
                extrapolated=bool(int(rec["extrapolated"])),
                pf_target=float(rec["pf_target"]),
                pd=float(rec["pd"]),
                identification=float(rec["identification"]) if rec["identification"] else None,
                rmse_tau=float(rec["rmse_tau"]) if rec["rmse_tau"] else None,
                rmse_omega=float(rec["rmse_omega"]) if rec["rmse_omega"] else None,
                mean_runtime=float(rec["mean_runtime"]),
                ops_per_shift=int(rec["ops_per_shift"]),
            ))
    return rows


def write_manifest(path, config: ExperimentConfig, master_seed: int,
                   **extra) -> None:
    manifest = {
        "format": "linkacq-run",
        "version": __version__,
        "master_seed": int(master_seed),
        "argv": sys.argv,
        "python": sys.version,
        "config": config_to_dict(config),
    }
    manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
