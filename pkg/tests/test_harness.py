import dataclasses
import json

import numpy as np
import pytest

from linkacq.dictionary import linear_index
from linkacq.harness import (ExperimentConfig, ReceiverSpec, ReceiverTrace,
                             TrialRecord, build_experiment,
                             calibrate_threshold, complexity_report,
                             config_to_dict, csa_ops_per_shift, emit_results,
                             gate_trace, identification_rate, load_config,
                             measure_receiver_ops, mf_ops_per_shift,
                             noise_var_for_snr, parse_metrics, pd_at_pf,
                             rmse, roc_curve, run_experiment, run_trial,
                             trial_seed, trial_statistics)
from linkacq.waveforms import ChannelRealization

TOY_DOPPLER_STEP = 2.5e-2 * 2.0 * np.pi


@pytest.fixture(scope="module")
def toy_assets(toy_config):
    return build_experiment(toy_config)


@pytest.fixture(scope="module")
def toy_result(toy_config, toy_assets):
    return run_experiment(toy_config, master_seed=1, assets=toy_assets)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def test_receiver_spec_validation():
    ReceiverSpec(name="a", kind="mf")
    ReceiverSpec(name="b", kind="dsa")
    ReceiverSpec(name="c", kind="csa", bank="identity")
    with pytest.raises(ValueError):
        ReceiverSpec(name="x", kind="smoother")
    with pytest.raises(ValueError):
        ReceiverSpec(name="x", kind="csa", bank="cosine", n_samplers=4)
    with pytest.raises(ValueError):
        ReceiverSpec(name="x", kind="csa", bank="gaussian", n_samplers=0)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(snr_db=())
    with pytest.raises(ValueError):
        ExperimentConfig(knowledge="psychic")
    with pytest.raises(ValueError):
        ExperimentConfig(receivers=(ReceiverSpec(name="a", kind="mf"),
                                    ReceiverSpec(name="a", kind="dsa")))


def test_config_derived_quantities(toy_config):
    full = ExperimentConfig()
    assert full.preamble_length == 255
    assert full.shift_duration == 8.0
    assert full.auto_horizon == 32            # ceil(255 / 8)
    assert full.effective_eval_shifts == 36   # floor(255 / 8) + 5
    assert np.isclose(full.doppler_step, 0.5e-3 * 2 * np.pi)
    assert toy_config.preamble_length == 31
    assert toy_config.shift_duration == 1.0
    assert toy_config.effective_horizon == 31
    assert toy_config.effective_eval_shifts == 36
    grid = toy_config.grid()
    assert grid.size == 45
    assert np.isclose(grid.doppler_step, TOY_DOPPLER_STEP)


TOY_TOML = """\
[scenario]
n_users = 3
n_active = 2
paths_per_user = 1
register_degree = 5
chip_duration = 1.0
oversampling = 2
doppler_half = 1
doppler_step_cycles = 2.5e-2
n_delays = 5
delay_step_chips = 0.5
shift_cells = 2
delay_spread_chips = 1.0

[experiment]
trials = 100
snr_db = [10.0]
target_pf = 0.1
knowledge = "partial"

[[receivers]]
name = "csa-kl"
kind = "csa"
bank = "kl-optimal"
n_samplers = 20

[[receivers]]
name = "dsa"
kind = "dsa"

[[receivers]]
name = "mf"
kind = "mf"
"""


def test_config_toml_round_trip(tmp_path, toy_config):
    path = tmp_path / "toy.toml"
    path.write_text(TOY_TOML, encoding="utf-8")
    assert load_config(path) == toy_config

    bad = tmp_path / "bad.toml"
    bad.write_text("[scenario]\nnusers = 3\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_config(bad)
    bad.write_text("[experiment]\nalpha = 1\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_config(bad)


def test_config_to_dict_is_json_ready(toy_config):
    echo = config_to_dict(toy_config)
    text = json.dumps(echo)
    back = json.loads(text)
    assert back["snr_db"] == [10.0]
    assert back["receivers"][0]["name"] == "csa-kl"
    assert back["n_users"] == 3


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------

def test_noise_variance_convention(toy_assets):
    # template energy / (window samples * sigma^2) = linear SNR
    E = toy_assets.template_energy
    W = toy_assets.templates.window_samples
    assert E == pytest.approx(31.0)
    assert W == 66
    assert noise_var_for_snr(toy_assets, 0.0) == pytest.approx(E / W)
    assert noise_var_for_snr(toy_assets, 10.0) == pytest.approx(E / (10 * W))
    assert noise_var_for_snr(toy_assets, -10.0) == pytest.approx(10 * E / W)


def test_trial_seed_is_splittable():
    a = np.random.default_rng(trial_seed(1, 0, 0)).standard_normal(4)
    b = np.random.default_rng(trial_seed(1, 0, 1)).standard_normal(4)
    c = np.random.default_rng(trial_seed(1, 1, 0)).standard_normal(4)
    d = np.random.default_rng(trial_seed(2, 0, 0)).standard_normal(4)
    again = np.random.default_rng(trial_seed(1, 0, 0)).standard_normal(4)
    assert np.array_equal(a, again)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_run_trial_structure_and_determinism(toy_assets, toy_config):
    rec1 = run_trial(toy_assets, 10.0, trial_seed(1, 0, 3), True)
    rec2 = run_trial(toy_assets, 10.0, trial_seed(1, 0, 3), True)
    assert rec1.index == 3 and rec1.signal_present
    assert rec1.channel is not None
    assert len(rec1.channel.active) == toy_config.n_active
    assert set(rec1.receivers) == {"csa-kl", "dsa", "mf"}
    for name in rec1.receivers:
        t1, t2 = rec1.receivers[name], rec2.receivers[name]
        assert t1.trace.shape == (toy_assets.n_eval,)
        assert np.array_equal(t1.trace, t2.trace)
    assert np.array_equal(rec1.channel.gains, rec2.channel.gains)

    noise = run_trial(toy_assets, 10.0, trial_seed(1, 0, 150), False)
    assert noise.channel is None and not noise.signal_present

    with pytest.raises(ValueError):
        TrialRecord(index=0, signal_present=True, snr_db=0.0, channel=None,
                    receivers={})


def test_gate_trace_cases():
    assert gate_trace(np.array([1.0, 2.0, 3.0]), 5.0, 2) == (False, None, None)
    det, first, best = gate_trace(np.array([0.0, 5.0, 3.0, 9.0, 2.0]), 4.0, 2)
    assert (det, first, best) == (True, 1, 3)
    # ties resolve to the earliest shift in the horizon window
    det, first, best = gate_trace(np.array([0.0, 7.0, 7.0]), 5.0, 2)
    assert (det, first, best) == (True, 1, 1)
    # horizon clipped at the end of the trace
    det, first, best = gate_trace(np.array([0.0, 0.0, 6.0]), 5.0, 10)
    assert (det, first, best) == (True, 2, 2)


# --------------------------------------------------------------------------
# Calibration / ROC
# --------------------------------------------------------------------------

def _noise_record(i, stat):
    return TrialRecord(index=i, signal_present=False, snr_db=0.0, channel=None,
                       receivers={"r": ReceiverTrace(
                           trace=np.array([stat / 2.0, float(stat)]))})


def _signal_record_stub(i, stat):
    ch = ChannelRealization(active=(1,), gains=np.array([[1.0 + 0j]]),
                            delays=np.array([[0.0]]),
                            dopplers=np.array([[0.0]]), noise_var=1.0)
    return TrialRecord(index=i, signal_present=True, snr_db=0.0, channel=ch,
                       receivers={"r": ReceiverTrace(trace=np.array([stat]))})


def test_calibration_quantile_semantics():
    records = [_noise_record(i, v) for i, v in enumerate(range(1, 201))]
    # signal trials in the pool must be ignored by calibration
    records += [_signal_record_stub(300 + i, 1e9) for i in range(50)]
    thr, extrapolated = calibrate_threshold(records, "r", 0.1)
    assert thr == 181.0 and not extrapolated
    stats = trial_statistics([r for r in records if not r.signal_present], "r")
    assert np.mean(stats >= thr) == pytest.approx(0.1)

    thr0, flag0 = calibrate_threshold(records, "r", 0.0)
    assert flag0 and thr0 > 200.0 and np.mean(stats >= thr0) == 0.0
    thr1, flag1 = calibrate_threshold(records, "r", 1.0)
    assert not flag1 and thr1 == 1.0 and np.mean(stats >= thr1) == 1.0


def test_calibration_guards():
    few = [_noise_record(i, i) for i in range(99)]
    with pytest.raises(ValueError):
        calibrate_threshold(few, "r", 0.1)
    records = [_noise_record(i, i) for i in range(120)]
    with pytest.raises(ValueError):
        calibrate_threshold(records, "r", -0.1)
    with pytest.raises(ValueError):
        calibrate_threshold(records, "r", 1.5)


def test_roc_envelope_crafted():
    curve = roc_curve(np.array([3.0, 5.0, 7.0]), np.array([2.0, 4.0, 6.0]))
    want = np.array([[0.0, 1 / 3], [1 / 3, 2 / 3], [2 / 3, 1.0], [1.0, 1.0]])
    assert np.allclose(curve, want)
    assert pd_at_pf(curve, 0.0) == pytest.approx(1 / 3)
    assert pd_at_pf(curve, 0.4) == pytest.approx(2 / 3)
    assert pd_at_pf(curve, 1.0) == 1.0


def test_roc_envelope_properties():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        curve = roc_curve(rng.standard_normal(80) + 0.5,
                          rng.standard_normal(80))
        assert curve[0, 0] == 0.0
        assert np.all(np.diff(curve[:, 0]) > 0)       # unique, sorted P_f
        assert np.all(np.diff(curve[:, 1]) >= 0)      # isotonic P_d
        assert curve[-1, 0] == 1.0 and curve[-1, 1] == 1.0
        assert np.all((curve >= 0) & (curve <= 1))


# --------------------------------------------------------------------------
# Extraction metrics on crafted records
# --------------------------------------------------------------------------

def _csa_record(channel, cells_by_shift, n_eval, grid, hot_shift,
                name="csa-kl"):
    trace = np.zeros(n_eval)
    trace[hot_shift] = 10.0
    indices, amplitudes = [], []
    for n in range(n_eval):
        cells = cells_by_shift.get(n, [])
        indices.append(np.array([linear_index(i, k, q, grid)
                                 for (i, k, q, _a) in cells], dtype=np.int32))
        amplitudes.append(np.array([a for (_i, _k, _q, a) in cells],
                                   dtype=complex))
    return TrialRecord(index=0, signal_present=True, snr_db=10.0,
                       channel=channel,
                       receivers={name: ReceiverTrace(
                           trace=trace, indices=tuple(indices),
                           amplitudes=tuple(amplitudes))})


def test_rmse_measures_quantization_error(toy_assets, toy_grid):
    dw = toy_grid.doppler_step
    ch = ChannelRealization(active=(2,), gains=np.array([[1.0 + 0j]]),
                            delays=np.array([[2.3]]),
                            dopplers=np.array([[0.9 * dw]]), noise_var=0.1)
    # estimate lands in the correct cell at shift 1: q=3, k=1
    rec = _csa_record(ch, {1: [(2, 1, 3, 0.9 + 0j)]}, 5, toy_grid,
                      hot_shift=1)
    r_tau, r_om, n = rmse([rec], "csa-kl", threshold=5.0, horizon=2,
                          assets=toy_assets)
    assert n == 1
    assert r_tau == pytest.approx(abs(2.3 - (1.0 + 3 * 0.5)), abs=1e-12)
    assert r_om == pytest.approx(0.1 * dw, abs=1e-12)


def test_rmse_excludes_colliding_paths(toy_assets, toy_grid):
    dw = toy_grid.doppler_step
    ch = ChannelRealization(active=(2,), gains=np.array([[1.0 + 0j, 0.5 + 0j]]),
                            delays=np.array([[2.3, 2.4]]),
                            dopplers=np.array([[0.9 * dw, 0.9 * dw]]),
                            noise_var=0.1)
    rec = _csa_record(ch, {1: [(2, 1, 3, 1.0 + 0j)]}, 5, toy_grid,
                      hot_shift=1)
    assert rmse([rec], "csa-kl", 5.0, 2, toy_assets) == (None, None, 0)


def test_rmse_requires_detection(toy_assets, toy_grid):
    ch = ChannelRealization(active=(1,), gains=np.array([[1.0 + 0j]]),
                            delays=np.array([[2.0]]),
                            dopplers=np.array([[0.0]]), noise_var=0.1)
    rec = _csa_record(ch, {1: [(1, 0, 2, 1.0 + 0j)]}, 5, toy_grid,
                      hot_shift=1)
    assert rmse([rec], "csa-kl", threshold=1e6, horizon=2,
                assets=toy_assets) == (None, None, 0)


def test_identification_rate_crafted(toy_assets, toy_grid):
    hit_ch = ChannelRealization(
        active=(1, 2), gains=np.array([[1.0 + 0j], [1.0 + 0j]]),
        delays=np.array([[2.3], [2.0]]), dopplers=np.array([[0.0], [0.0]]),
        noise_var=0.1)
    hit = _csa_record(hit_ch, {1: [(1, 0, 3, 1.0 + 0j), (2, 0, 2, 0.9 + 0j)]},
                      5, toy_grid, hot_shift=1)
    miss_ch = ChannelRealization(
        active=(1, 3), gains=np.array([[1.0 + 0j], [1.0 + 0j]]),
        delays=np.array([[2.3], [2.0]]), dopplers=np.array([[0.0], [0.0]]),
        noise_var=0.1)
    miss = _csa_record(miss_ch, {1: [(1, 0, 3, 1.0 + 0j), (2, 0, 2, 0.9 + 0j)]},
                       5, toy_grid, hot_shift=1)
    assert identification_rate([hit], "csa-kl", 5.0, 2, toy_assets) == 1.0
    assert identification_rate([hit, miss], "csa-kl", 5.0, 2,
                               toy_assets) == 0.5
    with pytest.raises(ValueError):
        identification_rate([], "csa-kl", 5.0, 2, toy_assets)


# --------------------------------------------------------------------------
# End-to-end toy experiment
# --------------------------------------------------------------------------

def test_experiment_metrics_are_sane(toy_result, toy_config):
    rows = toy_result.metrics.rows
    assert {r.receiver for r in rows} == {"csa-kl", "dsa", "mf"}
    assert len(rows) == 3
    omega_max = toy_config.doppler_half * toy_config.doppler_step
    for row in rows:
        assert row.snr_db == 10.0
        assert 0.0 <= row.pd <= 1.0
        assert 0.0 <= row.identification <= 1.0
        assert not row.extrapolated
        assert row.mean_runtime > 0.0
        assert row.rmse_tau is not None and row.rmse_tau <= 5 * 0.5
        assert row.rmse_omega is not None and row.rmse_omega <= 2 * omega_max
    # at 10 dB on the toy everything detects essentially always
    by_name = {r.receiver: r for r in rows}
    assert by_name["csa-kl"].pd >= 0.9
    assert by_name["mf"].pd >= 0.9
    assert by_name["csa-kl"].ops_per_shift == csa_ops_per_shift(31, 20, 45)
    assert by_name["dsa"].ops_per_shift == csa_ops_per_shift(31, 45, 45)
    assert by_name["mf"].ops_per_shift == mf_ops_per_shift(31, 45)


def test_experiment_record_plan(toy_result, toy_config):
    recs = toy_result.records[10.0]
    assert len(recs) == 2 * toy_config.trials
    assert all(r.signal_present == (r.index < toy_config.trials) for r in recs)
    assert [r.index for r in recs] == list(range(2 * toy_config.trials))


def test_experiment_roc_and_thresholds(toy_result):
    for key, curve in toy_result.metrics.roc.items():
        assert key[1] == 10.0
        assert np.all(np.diff(curve[:, 0]) > 0)
        assert np.all(np.diff(curve[:, 1]) >= 0)
        assert curve[-1, 0] == 1.0 and curve[-1, 1] == 1.0
        # the calibrated operating point cannot beat the ROC envelope
        row = [r for r in toy_result.metrics.rows if r.receiver == key[0]][0]
        assert row.pd <= pd_at_pf(curve, row.pf_target) + 1e-12
    assert set(toy_result.thresholds) == {(n, 10.0)
                                          for n in ("csa-kl", "dsa", "mf")}


def test_worker_pool_matches_sequential(toy_result, toy_config):
    parallel = run_experiment(toy_config, master_seed=1, workers=2)
    assert parallel.thresholds == toy_result.thresholds
    for a, b in zip(toy_result.metrics.rows, parallel.metrics.rows):
        a_dict = dataclasses.asdict(a)
        b_dict = dataclasses.asdict(b)
        a_dict.pop("mean_runtime"), b_dict.pop("mean_runtime")
        assert a_dict == b_dict
    for k in (0, 57, 150):
        seq_rec = toy_result.records[10.0][k]
        par_rec = parallel.records[10.0][k]
        for name in ("csa-kl", "dsa", "mf"):
            assert np.array_equal(seq_rec.receivers[name].trace,
                                  par_rec.receivers[name].trace)


# --------------------------------------------------------------------------
# Emission
# --------------------------------------------------------------------------

def test_emit_and_parse_round_trip(toy_result, tmp_path):
    paths = emit_results(toy_result, tmp_path / "out")
    for key in ("metrics", "roc", "uid", "rmse", "kl-compare", "manifest"):
        assert paths[key].exists()
    back = parse_metrics(paths["metrics"])
    assert back == toy_result.metrics.rows
    # UTF-8, LF-only
    for key in ("metrics", "roc", "uid", "rmse"):
        raw = paths[key].read_bytes()
        assert b"\r" not in raw and raw.decode("utf-8")
    manifest = json.loads(paths["manifest"].read_text(encoding="utf-8"))
    assert manifest["format"] == "linkacq-run"
    assert manifest["master_seed"] == 1
    assert manifest["config"]["n_users"] == 3
    assert "thresholds" in manifest and "version" in manifest


def test_emit_handles_empty_metrics(toy_result, tmp_path):
    import dataclasses as dc
    empty = dc.replace(toy_result,
                       metrics=type(toy_result.metrics)(rows=[], roc={}),
                       thresholds={})
    paths = emit_results(empty, tmp_path / "empty")
    text = paths["metrics"].read_text(encoding="utf-8")
    assert text.splitlines() == [",".join(
        ["receiver", "snr_db", "threshold", "extrapolated", "pf_target",
         "pd", "identification", "rmse_tau", "rmse_omega", "mean_runtime",
         "ops_per_shift"])]
    assert parse_metrics(paths["metrics"]) == []


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------

def test_measure_receiver_ops_counts(toy_assets):
    wdict = toy_assets.wdicts["csa-kl"]
    rng = np.random.default_rng(0)
    window = rng.standard_normal(66) + 1j * rng.standard_normal(66)
    counts = measure_receiver_ops(toy_assets, wdict, window, s_max=2)
    W, P, G = 66, 20, 45
    r = wdict.whitened.shape[0]
    assert counts["front"] == P * W
    assert counts["whiten"] == r * P
    assert counts["corr"] == G * r
    assert counts["omp_update"] == G * 1 + G * 2
    assert counts["refit"] == sum(j ** 3 // 3 + 2 * j ** 2 + j
                                  for j in (1, 2))
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")


def test_complexity_report_toy_scale(toy_config):
    rows = complexity_report(toy_config, degrees=(5, 6), budgets=(8, 12),
                             seed=0)
    csa = [r for r in rows if r["receiver"] == "csa"]
    mf = [r for r in rows if r["receiver"] == "mf"]
    assert len(csa) == 4 and len(mf) == 2
    for row in csa:
        assert row["measured_ops"] > 0 and row["formula_ops"] > 0
        assert 1 / 8 <= row["ratio"] <= 8
        assert row["crossover_measured"] == pytest.approx(
            row["measured_ops"] / (row["window_samples"] * row["grid_size"]))
    for row in mf:
        assert row["measured_ops"] == row["window_samples"] * row["grid_size"]
    # compression wins against MF and the margin grows with preamble length
    short = [r for r in csa if r["preamble_length"] == 31 and
             r["n_samplers"] == 8][0]
    long = [r for r in csa if r["preamble_length"] == 63 and
            r["n_samplers"] == 8][0]
    assert long["crossover_formula"] < short["crossover_formula"]
