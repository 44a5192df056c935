"""Delay-Doppler template bank and link-vector algebra.

The search grid covers triplets (i, k, q): user i in 1..I, Doppler index
k in {-K..K} (offset k*dw), delay index q in {0..|Q|-1} (offset q*dt).
A template is the user's preamble delayed by q*dt and modulated by
exp(1j*k*dw*t), sampled over one receiver window of W samples.  Windows
hop by D = N*dt seconds.

The central objects are the template matrix Phi (W x G, one column per
triplet), the Gram matrix M = Ts * Phi^H Phi of template inner products,
its lagged variants (cross-correlations at window hops), and the diagonal
phase rotation Gamma[n] that relates the sparse coefficient vector seen at
window n to the one at the reference window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .waveforms import ChannelRealization, Preamble

__all__ = [
    "GridConfig",
    "TemplateBank",
    "GramMatrix",
    "LinkVector",
    "GridQuantization",
    "linear_index",
    "triplet_from_index",
    "build_template_bank",
    "ambiguity",
    "gram_matrix",
    "cross_gram",
    "cross_gram_columns",
    "phase_rotation",
    "shift_link_vector",
    "ground_truth_link_vector",
    "reference_shift",
]


# --------------------------------------------------------------------------
# Grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    """Discretized (user, Doppler, delay) search space.

    delay_spread is the physical multipath spread the grid must cover; the
    coverage invariant |Q|*dt >= D + delay_spread is validated here.
    """

    n_users: int
    doppler_half: int          # K; Doppler indices run -K..K
    n_delays: int              # |Q|
    delay_step: float          # dt (s)
    doppler_step: float        # dw (rad/s)
    shift_cells: int           # N; window hop D = N*dt
    delay_spread: float = 0.0  # tau~_max covered by the grid

    def __post_init__(self):
        if self.n_users < 1 or self.doppler_half < 0 or self.n_delays < 1:
            raise ValueError("grid dimensions must be positive")
        if self.shift_cells < 1:
            raise ValueError("shift_cells (N) must be a positive integer")
        cover = self.n_delays * self.delay_step
        need = self.shift_d + self.delay_spread
        if cover < need - 1e-9:
            raise ValueError(
                f"delay grid covers {cover:.6g}s but composite spread needs {need:.6g}s"
            )

    @property
    def n_doppler(self) -> int:
        return 2 * self.doppler_half + 1

    @property
    def shift_d(self) -> float:
        """Window hop D in seconds."""
        return self.shift_cells * self.delay_step

    @property
    def size(self) -> int:
        """Total number of grid triplets G."""
        return self.n_users * self.n_doppler * self.n_delays

    def doppler_indices(self) -> np.ndarray:
        return np.arange(-self.doppler_half, self.doppler_half + 1)


def linear_index(i: int, k: int, q: int, grid: GridConfig) -> int:
    """Flatten triplet (i, k, q) to [0, G): (i-1)|K||Q| + (k+K)|Q| + q."""
    if not 1 <= i <= grid.n_users:
        raise ValueError(f"user {i} outside 1..{grid.n_users}")
    if not -grid.doppler_half <= k <= grid.doppler_half:
        raise ValueError(f"doppler index {k} outside +-{grid.doppler_half}")
    if not 0 <= q < grid.n_delays:
        raise ValueError(f"delay index {q} outside 0..{grid.n_delays - 1}")
    return ((i - 1) * grid.n_doppler + (k + grid.doppler_half)) * grid.n_delays + q


def triplet_from_index(j: int, grid: GridConfig) -> tuple[int, int, int]:
    """Inverse of linear_index."""
    if not 0 <= j < grid.size:
        raise ValueError(f"index {j} outside [0, {grid.size})")
    q = j % grid.n_delays
    rest = j // grid.n_delays
    k = rest % grid.n_doppler - grid.doppler_half
    i = rest // grid.n_doppler + 1
    return i, k, q


# --------------------------------------------------------------------------
# Template bank
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TemplateBank:
    """Sampled templates, one column per (i, k, q) in linear_index order."""

    grid: GridConfig
    matrix: np.ndarray          # (W, G) complex
    sample_period: float        # Ts
    preambles: tuple[Preamble, ...] = ()

    @property
    def window_samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def delay_samples(self) -> int:
        """Delay grid step in samples, d = dt/Ts."""
        return int(round(self.grid.delay_step / self.sample_period))

    @property
    def shift_samples(self) -> int:
        """Window hop in samples, Ns = D/Ts."""
        return self.grid.shift_cells * self.delay_samples


def _template_matrix(preambles, grid: GridConfig, window: int,
                     sample_offset: int = 0) -> np.ndarray:
    """Stack templates over a window, with columns shifted by sample_offset.

    Column (i,k,q) holds phi_i[w + sample_offset - q*d] * exp(1j*k*dw*(w +
    sample_offset)*Ts) for w = 0..window-1; offset 0 gives the bank itself,
    offset lag*Ns gives the lag-D cross-correlation partner.
    """
    Ts = preambles[0].sample_period
    d = grid.delay_step / Ts
    if abs(d - round(d)) > 1e-9:
        raise ValueError(f"delay step {grid.delay_step} is not a multiple of Ts={Ts}")
    d = int(round(d))
    La = len(preambles[0].samples)
    for p in preambles:
        if len(p.samples) != La:
            raise ValueError("all preambles in a bank must have equal length")
    ks = grid.doppler_indices()
    w = np.arange(window) + sample_offset
    phases = np.exp(1j * grid.doppler_step * Ts * np.outer(w, ks))  # (W, |K|)
    out = np.empty((window, grid.size), dtype=complex)
    for ui, p in enumerate(preambles[:grid.n_users]):
        delayed = np.zeros((window, grid.n_delays), dtype=complex)
        for q in range(grid.n_delays):
            # support of phi in window coordinates: w + offset - q*d in [0, La)
            lo = q * d - sample_offset
            hi = lo + La
            wlo, whi = max(lo, 0), min(hi, window)
            if wlo < whi:
                delayed[wlo:whi, q] = p.samples[wlo - lo:whi - lo]
        block = phases[:, :, None] * delayed[:, None, :]   # (W, |K|, |Q|)
        base = ui * grid.n_doppler * grid.n_delays
        out[:, base:base + grid.n_doppler * grid.n_delays] = \
            block.reshape(window, grid.n_doppler * grid.n_delays)
    return out


def build_template_bank(preambles, grid: GridConfig) -> TemplateBank:
    """Build the W x G template matrix for one preamble set and grid.

    W = preamble length + (|Q|-1)*d samples, the smallest window containing
    every delayed template in full.
    """
    if len(preambles) < grid.n_users:
        raise ValueError(f"grid wants {grid.n_users} users, got {len(preambles)} preambles")
    Ts = preambles[0].sample_period
    d = int(round(grid.delay_step / Ts))
    W = len(preambles[0].samples) + (grid.n_delays - 1) * d
    mat = _template_matrix(preambles, grid, W, sample_offset=0)
    return TemplateBank(grid=grid, matrix=mat, sample_period=Ts,
                        preambles=tuple(preambles[:grid.n_users]))


def ambiguity(i_row: int, i_col: int, k_diff: int, dt: float, bank: TemplateBank) -> complex:
    """Discrete delay-Doppler ambiguity between two preambles.

    Ts * sum_m phi_{i_row}*(m Ts) phi_{i_col}(m Ts - dt) exp(1j*k_diff*dw*m*Ts),
    with dt restricted to the sample grid.
    """
    Ts = bank.sample_period
    shift = dt / Ts
    if abs(shift - round(shift)) > 1e-9:
        raise ValueError(f"dt={dt} is not on the Ts={Ts} sample grid")
    shift = int(round(shift))
    a = bank.preambles[i_row - 1].samples
    b = bank.preambles[i_col - 1].samples
    # overlap of supports: m in [0, La) and m - shift in [0, Lb)
    lo = max(0, shift)
    hi = min(len(a), len(b) + shift)
    if lo >= hi:
        return 0.0 + 0.0j
    m = np.arange(lo, hi)
    val = np.sum(np.conj(a[lo:hi]) * b[lo - shift:hi - shift]
                 * np.exp(1j * k_diff * bank.grid.doppler_step * m * Ts))
    return complex(Ts * val)


# --------------------------------------------------------------------------
# Gram matrix and lagged cross-correlations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GramMatrix:
    """Template Gram matrix M with cached eigendecomposition.

    eigvals are sorted descending; eigvecs columns match.  The dense matrix
    is optional: at full scale only the spectrum is needed (rank <= W), and
    it is computed from an economy SVD of sqrt(Ts)*Phi instead of a G x G
    eigendecomposition.
    """

    eigvals: np.ndarray
    eigvecs: np.ndarray
    matrix: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.eigvecs.shape[0]

    def rank(self, rel_tol: float = 1e-10) -> int:
        """Numerical rank with eigenvalues below rel_tol * max treated as zero."""
        if len(self.eigvals) == 0 or self.eigvals[0] <= 0:
            return 0
        return int(np.sum(self.eigvals > rel_tol * self.eigvals[0]))


def gram_matrix(bank: TemplateBank, dense: bool = True) -> GramMatrix:
    """M = Ts * Phi^H Phi, plus its spectrum.

    The spectrum comes from an SVD of sqrt(Ts)*Phi (singular values squared),
    which is exact for the PSD Gram and far cheaper than eigh at scale.
    """
    scaled = np.sqrt(bank.sample_period) * bank.matrix
    _, s, vh = np.linalg.svd(scaled, full_matrices=False)
    eigvals = s ** 2
    eigvecs = vh.conj().T
    mat = None
    if dense:
        mat = bank.sample_period * (bank.matrix.conj().T @ bank.matrix)
    return GramMatrix(eigvals=eigvals, eigvecs=eigvecs, matrix=mat)


def cross_gram(bank: TemplateBank, lag: int) -> np.ndarray:
    """Lag-D template cross-correlation matrix M_phiphi[lag].

    Entry (row j', col j) is the Ts-weighted inner product of template j'
    with template j's waveform advanced by lag windows (lag*Ns samples),
    evaluated over the bank window.  lag 0 reproduces the Gram matrix.
    """
    shifted = _template_matrix(bank.preambles, bank.grid, bank.window_samples,
                               sample_offset=lag * bank.shift_samples)
    return bank.sample_period * (bank.matrix.conj().T @ shifted)


def cross_gram_columns(bank: TemplateBank, lag: int, indices) -> np.ndarray:
    """Selected columns of cross_gram(bank, lag) without the full G x G build."""
    indices = np.asarray(indices, dtype=int)
    Ts = bank.sample_period
    grid = bank.grid
    d = bank.delay_samples
    W = bank.window_samples
    offset = lag * bank.shift_samples
    cols = np.zeros((W, len(indices)), dtype=complex)
    w = np.arange(W) + offset
    for c, j in enumerate(indices):
        i, k, q = triplet_from_index(int(j), grid)
        arr = bank.preambles[i - 1].samples
        lo = q * d - offset
        hi = lo + len(arr)
        wlo, whi = max(lo, 0), min(hi, W)
        if wlo < whi:
            cols[wlo:whi, c] = arr[wlo - lo:whi - lo] * \
                np.exp(1j * k * grid.doppler_step * Ts * w[wlo:whi])
    return Ts * (bank.matrix.conj().T @ cols)


def phase_rotation(n: int, grid: GridConfig) -> np.ndarray:
    """Diagonal of the unitary Gamma[n]: exp(1j*k*dw*n*D) at triplet (i,k,q).

    Kronecker structure I_I (x) E[n] (x) I_|Q| with E[n] the Doppler block.
    """
    e = np.exp(1j * grid.doppler_indices() * grid.doppler_step * n * grid.shift_d)
    return np.kron(np.ones(grid.n_users), np.kron(e, np.ones(grid.n_delays)))


# --------------------------------------------------------------------------
# Link vectors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkVector:
    """Sparse complex vector over grid triplets (i, k, q)."""

    grid: GridConfig
    entries: dict

    @property
    def support(self) -> tuple:
        return tuple(sorted(self.entries, key=lambda t: linear_index(*t, self.grid)))

    def to_dense(self) -> np.ndarray:
        v = np.zeros(self.grid.size, dtype=complex)
        for (i, k, q), a in self.entries.items():
            v[linear_index(i, k, q, self.grid)] = a
        return v

    @classmethod
    def from_dense(cls, vec: np.ndarray, grid: GridConfig, tol: float = 0.0) -> "LinkVector":
        entries = {}
        for j in np.nonzero(np.abs(vec) > tol)[0]:
            entries[triplet_from_index(int(j), grid)] = complex(vec[j])
        return cls(grid=grid, entries=entries)


def shift_link_vector(alpha: LinkVector, shift: int, grid: GridConfig | None = None) -> LinkVector:
    """Re-reference a link vector by `shift` windows: q -> q - shift*N.

    Triplets whose delay cell leaves the grid are dropped (the component is
    no longer representable at the new reference window).
    """
    grid = alpha.grid if grid is None else grid
    moved = {}
    for (i, k, q), a in alpha.entries.items():
        qn = q - shift * grid.shift_cells
        if 0 <= qn < grid.n_delays:
            moved[(i, k, qn)] = a
    return LinkVector(grid=grid, entries=moved)


@dataclass(frozen=True)
class GridQuantization:
    """How a channel realization mapped onto the grid."""

    cells: tuple            # ((user, r, k, q), ...) one per path
    collisions: tuple = ()  # triplets where two paths landed on one cell
    clipped: tuple = ()     # triplets clipped to the delay-grid edge


def reference_shift(channel: ChannelRealization, grid: GridConfig) -> int:
    """Reference window index ell = floor(t0 / D)."""
    return int(np.floor(channel.t0 / grid.shift_d))


def ground_truth_link_vector(channel: ChannelRealization, grid: GridConfig,
                             ell: int) -> tuple[LinkVector, GridQuantization]:
    """Quantize a channel onto the grid at reference window ell.

    alpha_{i,k,q} = h at k = round(omega/dw), q = round((t - ell*D)/dt).
    Two paths on one cell are summed and reported as a collision; a delay
    that rounds just past the last cell is clipped to the edge and flagged.
    """
    entries: dict = {}
    cells = []
    collisions = []
    clipped = []
    for a, user in enumerate(channel.active):
        for r in range(channel.n_paths):
            k = int(round(channel.dopplers[a, r] / grid.doppler_step))
            k = min(max(k, -grid.doppler_half), grid.doppler_half)
            tau = channel.delays[a, r] - ell * grid.shift_d
            q = int(round(tau / grid.delay_step))
            if q < 0 or q >= grid.n_delays:
                q = min(max(q, 0), grid.n_delays - 1)
                clipped.append((user, k, q))
            key = (user, k, q)
            if key in entries:
                collisions.append(key)
                entries[key] += complex(channel.gains[a, r])
            else:
                entries[key] = complex(channel.gains[a, r])
            cells.append((user, r, k, q))
    return (
        LinkVector(grid=grid, entries=entries),
        GridQuantization(cells=tuple(cells), collisions=tuple(collisions),
                         clipped=tuple(clipped)),
    )
