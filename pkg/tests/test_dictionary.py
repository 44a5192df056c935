import numpy as np
import pytest

from linkacq.dictionary import (GridConfig, build_template_bank, cross_gram,
                                cross_gram_columns, gram_matrix,
                                ground_truth_link_vector, linear_index,
                                phase_rotation, reference_shift,
                                shift_link_vector, triplet_from_index,
                                ambiguity, LinkVector)
from linkacq.waveforms import ChannelRealization, synthesize_received


def test_grid_geometry(toy_grid):
    assert toy_grid.size == 45
    assert toy_grid.n_doppler == 3
    assert toy_grid.shift_d == 1.0
    assert list(toy_grid.doppler_indices()) == [-1, 0, 1]


def test_grid_coverage_validation():
    # |Q| * dtau must cover one shift plus the delay spread
    with pytest.raises(ValueError):
        GridConfig(n_users=2, doppler_half=1, n_delays=3, delay_step=0.5,
                   doppler_step=0.1, shift_cells=2, delay_spread=1.0)


def test_index_bijection(toy_grid):
    seen = set()
    for i in range(1, 4):
        for k in (-1, 0, 1):
            for q in range(5):
                j = linear_index(i, k, q, toy_grid)
                assert 0 <= j < toy_grid.size
                assert triplet_from_index(j, toy_grid) == (i, k, q)
                seen.add(j)
    assert len(seen) == toy_grid.size
    with pytest.raises(ValueError):
        linear_index(0, 0, 0, toy_grid)
    with pytest.raises(ValueError):
        linear_index(1, 2, 0, toy_grid)


def test_template_bank_shape(toy_templates, toy_grid):
    W = 31 * 2 + (5 - 1) * 1
    assert toy_templates.matrix.shape == (W, toy_grid.size)
    assert toy_templates.window_samples == W
    assert toy_templates.delay_samples == 1
    assert toy_templates.shift_samples == 2


def test_template_column_construction(toy_templates, toy_preambles, toy_grid):
    # column (i, k, q) holds the delayed preamble with a Doppler ramp
    Ts = toy_templates.sample_period
    W = toy_templates.window_samples
    d = toy_templates.delay_samples
    for (i, k, q) in [(1, 0, 0), (2, 1, 3), (3, -1, 4)]:
        j = linear_index(i, k, q, toy_grid)
        col = toy_templates.matrix[:, j]
        expect = np.zeros(W, dtype=complex)
        samples = toy_preambles[i - 1].samples
        expect[q * d: q * d + len(samples)] = samples
        expect *= np.exp(1j * k * toy_grid.doppler_step * np.arange(W) * Ts)
        assert np.allclose(col, expect, atol=1e-12)


def test_gram_matches_direct_inner_products(toy_templates, toy_gram):
    Ts = toy_templates.sample_period
    Phi = toy_templates.matrix
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.integers(0, Phi.shape[1], size=2)
        direct = Ts * np.vdot(Phi[:, a], Phi[:, b])
        assert np.isclose(toy_gram.matrix[a, b], direct, atol=1e-10)
    # diagonal equals the preamble energy
    assert np.allclose(np.diag(toy_gram.matrix).real, 31.0, rtol=1e-9)


def test_gram_hermitian_psd(toy_gram):
    M = toy_gram.matrix
    assert np.allclose(M, M.conj().T, atol=1e-10)
    assert toy_gram.eigvals[0] >= toy_gram.eigvals[-1]
    assert toy_gram.eigvals[-1] > -1e-8
    assert np.all(np.diff(toy_gram.eigvals) <= 1e-9)


def test_gram_spectrum_dense_vs_economy(toy_templates, toy_gram):
    lean = gram_matrix(toy_templates, dense=False)
    assert lean.matrix is None
    assert np.allclose(lean.eigvals, toy_gram.eigvals, rtol=1e-9, atol=1e-9)
    # independent oracle: spectrum of the dense Gram via eigh
    evals = np.linalg.eigvalsh(toy_gram.matrix)[::-1]
    assert np.allclose(evals, toy_gram.eigvals, rtol=1e-8, atol=1e-7)
    assert toy_gram.rank() == toy_gram.size


def test_ambiguity_matches_cross_gram(toy_templates, toy_grid):
    # factored form: entry of M_phiphi[lag] via the ambiguity function
    dw = toy_grid.doppler_step
    D = toy_grid.shift_d
    for lag in (0, 1, 2):
        X = cross_gram(toy_templates, lag)
        rng = np.random.default_rng(lag)
        for _ in range(10):
            row = int(rng.integers(0, toy_grid.size))
            col = int(rng.integers(0, toy_grid.size))
            ir, kr, qr = triplet_from_index(row, toy_grid)
            ic, kc, qc = triplet_from_index(col, toy_grid)
            dt = (qc - qr) * toy_grid.delay_step - lag * D
            amb = ambiguity(ir, ic, kc - kr, dt, toy_templates)
            phase = np.exp(1j * kc * dw * lag * D) \
                * np.exp(1j * (kc - kr) * dw * qr * toy_grid.delay_step)
            assert np.isclose(X[row, col], phase * amb, atol=1e-9)


def _on_grid_channel(toy_grid, cells, gains):
    # cells: (user, k, q) at reference shift ell=0
    users = sorted({u for u, _k, _q in cells})
    by_user = {u: [(k, q) for (uu, k, q) in cells if uu == u] for u in users}
    R = max(len(v) for v in by_user.values())
    g = np.zeros((len(users), R), dtype=complex)
    t = np.zeros((len(users), R))
    w = np.zeros((len(users), R))
    for a, u in enumerate(users):
        for r, (k, q) in enumerate(by_user[u]):
            g[a, r] = gains[(u, k, q)]
            t[a, r] = q * toy_grid.delay_step
            w[a, r] = k * toy_grid.doppler_step
    return ChannelRealization(active=tuple(users), gains=g, delays=t,
                              dopplers=w, noise_var=0.0)


def test_projection_equals_algebraic_routes(toy_preambles, toy_templates,
                                            toy_grid, toy_gram):
    # noiseless on-grid signal: Ts*Phi^H y[n] = M_phiphi[n-ell] Gamma[ell]
    # alpha[ell] = M Gamma[n] alpha[n]
    Ts = toy_templates.sample_period
    cells = [(1, 0, 2), (2, 1, 3)]
    gains = {(1, 0, 2): 0.8 - 0.3j, (2, 1, 3): -0.5 + 0.9j}
    ch = _on_grid_channel(toy_grid, cells, gains)
    stream = synthesize_received(toy_preambles, ch, np.random.default_rng(0),
                                 n_samples=140,
                                 window_samples=toy_templates.window_samples,
                                 shift_samples=toy_templates.shift_samples)
    alpha, info = ground_truth_link_vector(ch, toy_grid, ell=0)
    assert not info.collisions and not info.clipped
    a0 = alpha.to_dense()
    g0 = phase_rotation(0, toy_grid)
    from linkacq.waveforms import all_windows
    wins = all_windows(stream, 2)
    for n in (0, 1):
        direct = Ts * (toy_templates.matrix.conj().T @ wins[n])
        route1 = cross_gram(toy_templates, n) @ (g0 * a0)
        an = shift_link_vector(alpha, n).to_dense()
        gn = phase_rotation(n, toy_grid)
        route2 = toy_gram.matrix @ (gn * an)
        scale = np.linalg.norm(direct)
        assert np.linalg.norm(direct - route1) <= 1e-8 * scale
        assert np.linalg.norm(direct - route2) <= 1e-8 * scale


def test_cross_gram_columns_match_dense(toy_templates, toy_grid):
    X = cross_gram(toy_templates, 1)
    idx = [0, 7, 31, 44]
    cols = cross_gram_columns(toy_templates, 1, idx)
    assert np.allclose(cols, X[:, idx], atol=1e-10)


def test_shift_link_vector_drops_offgrid(toy_grid):
    lv = LinkVector(grid=toy_grid, entries={(1, 0, 1): 1.0 + 0j,
                                            (2, 1, 4): 2.0 + 0j})
    shifted = shift_link_vector(lv, 1)   # q -> q - 2
    assert shifted.entries == {(2, 1, 2): 2.0 + 0j}
    assert shift_link_vector(lv, 3).entries == {}


def test_ground_truth_collision_and_clip(toy_grid):
    # two paths of one user round to the same cell -> summed + flagged
    ch = ChannelRealization(
        active=(1,), gains=np.array([[1.0 + 0j, 2.0 + 0j]]),
        delays=np.array([[1.0, 1.1]]), dopplers=np.array([[0.0, 0.0]]),
        noise_var=0.0)
    lv, info = ground_truth_link_vector(ch, toy_grid, ell=0)
    assert info.collisions == ((1, 0, 2),)
    assert lv.entries[(1, 0, 2)] == 3.0 + 0j

    far = ChannelRealization(
        active=(2,), gains=np.array([[1.0 + 0j]]),
        delays=np.array([[9.7]]), dopplers=np.array([[0.0]]), noise_var=0.0)
    _lv2, info2 = ground_truth_link_vector(far, toy_grid, ell=0)
    assert info2.clipped == ((2, 0, 4),)


def test_reference_shift_places_first_path_in_cell(toy_grid):
    rng = np.random.default_rng(3)
    for _ in range(50):
        t0 = rng.uniform(0, 20)
        ch = ChannelRealization(
            active=(1,), gains=np.array([[1.0 + 0j]]),
            delays=np.array([[t0]]), dopplers=np.array([[0.0]]),
            noise_var=0.0)
        ell = reference_shift(ch, toy_grid)
        tau = t0 - ell * toy_grid.shift_d
        assert 0 <= tau < toy_grid.shift_d
