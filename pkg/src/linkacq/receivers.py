"""Acquisition receivers: compressive (C-SA), direct (D-SA), and matched filter.

The compressive receiver front-end projects each W-sample window onto P
analog kernels (columns of Phi B^H), solves a sparsity-regularized least
squares problem by orthogonal matching pursuit in whitened coordinates,
and feeds the residual-ratio statistic

    log eta[n] = P * (log ||c||^2_{R^-1} - log ||c - B M beta||^2_{R^-1})

to a sequential threshold test: the first window n with log eta >= log eta0
opens a look-ahead horizon of N0 further windows, and the acquisition is
declared at the shift with the maximum statistic inside that horizon.

The D-SA receiver is the same machinery with B = identity; the MF receiver
thresholds the raw magnitude of the exhaustive template correlations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dictionary import GridConfig, TemplateBank, GramMatrix, triplet_from_index
from .samplers import RANK_RTOL, SamplerBank, with_noise_model
from .waveforms import SampleStream, stream_window

__all__ = [
    "CmsObservation",
    "SparseEstimate",
    "AcquisitionResult",
    "WhitenedDictionary",
    "ExtractionPolicy",
    "build_whitened_dictionary",
    "cms_sample",
    "mf_sample",
    "omp_solve",
    "omp_solve_batch",
    "extract_components",
    "extract_from_magnitudes",
    "likelihood_ratio",
    "sequential_acquire",
    "mf_acquire",
]

RESIDUAL_FLOOR = 1e-300
DEFAULT_EPS_SQ = 1e-12


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CmsObservation:
    """One window's compressive samples c[n] plus the whitened copy."""

    shift: int
    samples: np.ndarray     # (P,)
    whitened: np.ndarray    # (r,)
    bank: SamplerBank

    def __post_init__(self):
        if self.samples.shape != (self.bank.n_samplers,):
            raise ValueError("observation length does not match the bank's P")

    @property
    def energy(self) -> float:
        """Whitened energy ||c||^2_{R^-1}."""
        return float(np.sum(np.abs(self.whitened) ** 2))


@dataclass(frozen=True)
class SparseEstimate:
    """OMP output: sparse modified link vector and residual bookkeeping."""

    indices: tuple[int, ...]          # linear grid indices, selection order
    amplitudes: np.ndarray            # matching complex amplitudes
    support: tuple                    # triplets (i, k, q), selection order
    residual_norm: float              # whitened residual of the final fit
    residual_history: tuple[float, ...]   # ||c_w||, then one entry per iteration
    iterations: int
    noise_var_estimate: float         # residual_norm^2 / P
    energy: float                     # ||c_w||^2
    flags: tuple[str, ...] = ()

    def to_dense(self, grid_size: int) -> np.ndarray:
        beta = np.zeros(grid_size, dtype=complex)
        beta[list(self.indices)] = self.amplitudes
        return beta


@dataclass(frozen=True)
class AcquisitionResult:
    """Outcome of a sequential acquisition run."""

    receiver: str                     # csa | dsa | mf
    grid: GridConfig
    detected: bool
    first_trigger: int | None         # N_eta, first shift passing the test
    best_shift: int | None            # shift of the maximum statistic
    users: tuple[int, ...]
    cells: dict                       # user -> ((k, q, amplitude), ...)
    stat_trace: tuple[float, ...]     # per-shift decision statistic
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.detected and not (self.first_trigger <= self.best_shift):
            raise ValueError("best shift precedes the first trigger")

    def delay_estimates(self, user: int) -> tuple[float, ...]:
        """Delays q*dt of the user's cells, relative to the best shift."""
        return tuple(q * self.grid.delay_step for (_k, q, _a) in self.cells.get(user, ()))

    def doppler_estimates(self, user: int) -> tuple[float, ...]:
        return tuple(k * self.grid.doppler_step for (k, _q, _a) in self.cells.get(user, ()))


@dataclass(frozen=True)
class ExtractionPolicy:
    """How the detected user set is formed from a sparse estimate.

    mode "unknown": users whose strongest cell energy reaches rho_fraction
    of the global maximum (idle when the estimate is empty); "partial":
    exactly n_active users, strongest first, padded with the lowest unused
    indices; "known": the given active set verbatim.
    """

    mode: str = "unknown"             # unknown | partial | known
    paths_per_user: int = 2           # R, cells kept per user
    n_active: int | None = None
    active: tuple[int, ...] = ()
    rho_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if self.mode not in ("unknown", "partial", "known"):
            raise ValueError(f"unknown extraction mode {self.mode!r}")
        if self.mode == "partial" and not self.n_active:
            raise ValueError("partial mode needs n_active")
        if self.mode == "known" and not self.active:
            raise ValueError("known mode needs the active user set")

    def support_cap(self, grid: GridConfig) -> int:
        """Sparsity budget |I|*R: active-user count times paths per user."""
        if self.mode == "known":
            n = len(self.active)
        elif self.mode == "partial":
            n = self.n_active
        else:
            n = grid.n_users
        return n * self.paths_per_user


@dataclass(frozen=True)
class WhitenedDictionary:
    """Precomputed operators for one (bank, template set) pair.

    kernels holds the analog sampling kernels Phi B^H (W x P); whitened is
    F B M (r x G), the dictionary OMP correlates against.
    """

    bank: SamplerBank
    grid: GridConfig
    kernels: np.ndarray
    whitened: np.ndarray
    sample_period: float

    @property
    def n_samplers(self) -> int:
        return self.bank.n_samplers

    @property
    def size(self) -> int:
        return self.whitened.shape[1]


def build_whitened_dictionary(bank: SamplerBank, templates: TemplateBank,
                              gram: GramMatrix | None = None) -> WhitenedDictionary:
    """Assemble front-end kernels and the whitened OMP dictionary.

    The identity bank reuses the Gram spectrum (F M = Lambda^{1/2} U^H) so
    the dense G x G Gram is never formed at scale.
    """
    if bank.kind == "identity":
        if gram is None:
            raise ValueError("identity bank needs the Gram matrix for whitening")
        r = gram.rank(RANK_RTOL)
        F = (gram.eigvecs[:, :r] / np.sqrt(gram.eigvals[:r])).conj().T
        Aw = (gram.eigvecs[:, :r] * np.sqrt(gram.eigvals[:r])).conj().T
        bank = SamplerBank(kind="identity", matrix=bank.matrix,
                           noise_gram=bank.noise_gram, whitener=F, rank=r,
                           gram_product=bank.gram_product)
        return WhitenedDictionary(bank=bank, grid=templates.grid,
                                  kernels=templates.matrix, whitened=Aw,
                                  sample_period=templates.sample_period)
    if bank.whitener is None or bank.gram_product is None:
        bank = with_noise_model(bank, gram=gram, templates=templates)
    kernels = templates.matrix @ bank.matrix.conj().T
    Aw = bank.whitener @ bank.gram_product
    return WhitenedDictionary(bank=bank, grid=templates.grid, kernels=kernels,
                              whitened=Aw, sample_period=templates.sample_period)


# --------------------------------------------------------------------------
# Front ends
# --------------------------------------------------------------------------

def cms_sample(window: np.ndarray, wdict: WhitenedDictionary,
               shift: int = 0) -> CmsObservation:
    """Project one window onto the P sampling kernels: c_p = Ts <psi_p, y>."""
    if window.shape != (wdict.kernels.shape[0],):
        raise ValueError(
            f"window has {window.shape[0]} samples, kernels expect {wdict.kernels.shape[0]}"
        )
    c = wdict.sample_period * (wdict.kernels.conj().T @ window)
    return CmsObservation(shift=shift, samples=c,
                          whitened=wdict.bank.whitener @ c, bank=wdict.bank)


def mf_sample(window: np.ndarray, templates: TemplateBank) -> np.ndarray:
    """Exhaustive matched-filter output array, shape (I*|K|, |Q|).

    Entry (i, k, q) is the Ts-weighted correlation of the window with
    template (i, k, q); flattening recovers the identity-bank CMS samples.
    """
    grid = templates.grid
    z = templates.sample_period * (templates.matrix.conj().T @ window)
    return z.reshape(grid.n_users * grid.n_doppler, grid.n_delays)


# --------------------------------------------------------------------------
# OMP in whitened coordinates
# --------------------------------------------------------------------------

def omp_solve_batch(whitened_obs: np.ndarray, wdict: WhitenedDictionary,
                    max_support: int | None = None,
                    eps_sq: float = DEFAULT_EPS_SQ) -> list[SparseEstimate]:
    """Run OMP on each column of an (r, n_obs) whitened observation block.

    All columns advance in lockstep so each iteration costs a single
    G x r x n_obs correlation product; per-column supports, least-squares
    fits, and stopping are independent.  Selection is the plain magnitude
    argmax of the whitened correlation, ties to the lowest linear index;
    a rank-deficient selected sub-dictionary drops the newest atom, stops
    that column, and flags the estimate.
    """
    Aw = wdict.whitened
    r, G = Aw.shape
    C = np.atleast_2d(np.asarray(whitened_obs))
    if C.shape[0] != r:
        raise ValueError(f"whitened observations have length {C.shape[0]}, expected {r}")
    n_obs = C.shape[1]
    cap = min(max_support if max_support is not None else r, r, G)
    P = wdict.n_samplers

    Z0 = Aw.conj().T @ C                      # (G, n_obs) initial correlations
    Z = Z0.copy()
    E0 = np.sum(np.abs(C) ** 2, axis=0).real
    res2 = E0.copy()
    col_norm2 = np.sum(np.abs(Aw) ** 2, axis=0).real

    supports: list[list[int]] = [[] for _ in range(n_obs)]
    grams = [np.zeros((0, 0), dtype=complex) for _ in range(n_obs)]
    betas: list[np.ndarray] = [np.zeros(0, dtype=complex) for _ in range(n_obs)]
    history = [[float(np.sqrt(E0[b]))] for b in range(n_obs)]
    flags: list[list[str]] = [[] for _ in range(n_obs)]
    stopped = res2 < eps_sq

    while True:
        live = np.nonzero(~stopped)[0]
        live = [b for b in live if len(supports[b]) < cap]
        if not live:
            break
        fit = np.zeros((r, len(live)), dtype=complex)
        for c_i, b in enumerate(live):
            mag = np.abs(Z[:, b])
            if supports[b]:
                mag[supports[b]] = -1.0
            j = int(np.argmax(mag))
            S = supports[b]
            g_old = grams[b]
            g_new = np.empty((len(S) + 1, len(S) + 1), dtype=complex)
            g_new[:len(S), :len(S)] = g_old
            if S:
                cross = Aw[:, S].conj().T @ Aw[:, j]
                g_new[:len(S), -1] = cross
                g_new[-1, :len(S)] = cross.conj()
            g_new[-1, -1] = col_norm2[j]
            S.append(j)
            try:
                factor = cho_factor(g_new, lower=False, check_finite=False)
                beta = cho_solve(factor, Z0[S, b], check_finite=False)
            except np.linalg.LinAlgError:
                S.pop()
                flags[b].append("rank-deficient")
                stopped[b] = True
                continue
            grams[b] = g_new
            betas[b] = beta
            new_res = max(float(E0[b] - np.real(np.vdot(Z0[S, b], beta))), 0.0)
            res2[b] = min(new_res, res2[b])
            history[b].append(float(np.sqrt(res2[b])))
            fit[:, c_i] = Aw[:, S] @ beta
            if res2[b] < eps_sq:
                stopped[b] = True
        Z[:, live] = Z0[:, live] - Aw.conj().T @ fit

    grid = wdict.grid
    out = []
    for b in range(n_obs):
        S = supports[b]
        out.append(SparseEstimate(
            indices=tuple(S),
            amplitudes=np.asarray(betas[b], dtype=complex),
            support=tuple(triplet_from_index(j, grid) for j in S),
            residual_norm=float(np.sqrt(res2[b])),
            residual_history=tuple(history[b]),
            iterations=len(S),
            noise_var_estimate=float(res2[b] / P),
            energy=float(E0[b]),
            flags=tuple(flags[b]) + (("residual-floor",) if res2[b] < RESIDUAL_FLOOR
                                     and E0[b] > 0 else ()),
        ))
    return out


def omp_solve(obs: CmsObservation, wdict: WhitenedDictionary,
              max_support: int | None = None,
              eps_sq: float | None = None,
              noise_prior: float | None = None) -> SparseEstimate:
    """Sparse fit of one observation; see omp_solve_batch for the algorithm.

    With a noise-variance prior the stopping level is eps^2 = P * sigma^2,
    the expected whitened residual energy floor (the whitened dimension
    equals P except for the rank-deficient identity bank, where the floor
    scales with the rank instead); otherwise a tiny default leaves the
    iteration cap in charge.
    """
    if eps_sq is None:
        eps_sq = (wdict.whitened.shape[0] * noise_prior
                  if noise_prior is not None else DEFAULT_EPS_SQ)
    return omp_solve_batch(obs.whitened[:, None], wdict,
                           max_support=max_support, eps_sq=eps_sq)[0]


def likelihood_ratio(obs: CmsObservation, estimate: SparseEstimate) -> float:
    """Sequential test statistic log eta = P (log ||c_w||^2 - log ||res_w||^2).

    A zero observation gives 0 by convention; an exact fit saturates at the
    residual floor (the estimate carries a "residual-floor" flag).
    """
    return _llr(estimate.energy, estimate.residual_norm ** 2, obs.bank.n_samplers)


def _llr(energy: float, residual_sq: float, n_samplers: int) -> float:
    if energy <= RESIDUAL_FLOOR:
        return 0.0
    return n_samplers * (np.log(max(energy, RESIDUAL_FLOOR))
                         - np.log(max(residual_sq, RESIDUAL_FLOOR)))


# --------------------------------------------------------------------------
# Component extraction
# --------------------------------------------------------------------------

def extract_components(estimate: SparseEstimate, policy: ExtractionPolicy,
                       grid: GridConfig) -> tuple[tuple[int, ...], dict]:
    """Detected user set and the per-user strongest (k, q) cells."""
    per_user: dict[int, list] = {}
    for (i, k, q), amp in zip(estimate.support, estimate.amplitudes):
        per_user.setdefault(i, []).append((k, q, complex(amp)))
    return _select_users(per_user, policy, grid)


def extract_from_magnitudes(array: np.ndarray, policy: ExtractionPolicy,
                            grid: GridConfig,
                            user_threshold: float | None = None) -> tuple[tuple[int, ...], dict]:
    """Extraction on a dense MF output array of shape (I*|K|, |Q|).

    In unknown mode a user is declared when its strongest output reaches
    user_threshold (the detection threshold itself, by default).
    """
    blocks = array.reshape(grid.n_users, grid.n_doppler, grid.n_delays)
    per_user: dict[int, list] = {}
    for ui in range(grid.n_users):
        block = np.abs(blocks[ui])
        if not np.any(block > 0):
            continue
        cells = []
        for flat in np.argsort(-block.ravel(), kind="stable")[:max(policy.paths_per_user, 1)]:
            ki, qi = np.unravel_index(int(flat), block.shape)
            cells.append((int(ki) - grid.doppler_half, int(qi),
                          complex(blocks[ui, ki, qi])))
        per_user[ui + 1] = cells
    if policy.mode == "unknown":
        strongest = {u: max(abs(a) for (_k, _q, a) in cs) for u, cs in per_user.items()}
        if user_threshold is None:
            gmax = max(strongest.values(), default=0.0)
            user_threshold = np.sqrt(policy.rho_fraction) * gmax
        users = tuple(sorted(u for u, s in strongest.items() if s >= user_threshold))
        return users, {u: tuple(per_user[u]) for u in users}
    return _select_users({u: cs for u, cs in per_user.items()}, policy, grid,
                         presorted=True)


def _select_users(per_user: dict, policy: ExtractionPolicy, grid: GridConfig,
                  presorted: bool = False) -> tuple[tuple[int, ...], dict]:
    def cell_key(cell):
        k, q, a = cell
        return (-abs(a) ** 2, (k + grid.doppler_half) * grid.n_delays + q)

    ranked = {}
    for u, cells in per_user.items():
        ranked[u] = tuple(sorted(cells, key=cell_key)[:policy.paths_per_user])
    peak = {u: (abs(cells[0][2]) ** 2 if cells else 0.0) for u, cells in ranked.items()}

    if policy.mode == "known":
        users = tuple(sorted(policy.active))
    elif policy.mode == "partial":
        if policy.n_active > grid.n_users:
            raise ValueError(
                f"partial mode wants {policy.n_active} users, grid has {grid.n_users}"
            )
        order = sorted(peak, key=lambda u: (-peak[u], u))[:policy.n_active]
        fill = (u for u in range(1, grid.n_users + 1) if u not in order)
        while len(order) < policy.n_active:
            order.append(next(fill))
        users = tuple(sorted(order))
    else:
        gmax = max(peak.values(), default=0.0)
        if gmax <= 0.0:
            return (), {}
        users = tuple(sorted(u for u, p in peak.items()
                             if p >= policy.rho_fraction * gmax))
    return users, {u: ranked.get(u, ()) for u in users}


# --------------------------------------------------------------------------
# Sequential acquisition
# --------------------------------------------------------------------------

def sequential_acquire(stream: SampleStream, wdict: WhitenedDictionary,
                       log_threshold: float, horizon: int,
                       policy: ExtractionPolicy,
                       max_support: int | None = None,
                       eps_sq: float | None = None,
                       noise_prior: float | None = None) -> AcquisitionResult:
    """Sequential SR-LRT acquisition over the stream's windows.

    Shifts are tested in order; the first one whose log-likelihood ratio
    reaches log_threshold opens the look-ahead horizon, and the declared
    shift is the argmax of the statistic over [N_eta, N_eta + horizon]
    (earliest on ties).  Component extraction runs on the estimate at the
    declared shift.  A stream that ends before the horizon completes
    yields a result flagged "horizon-truncated".

    max_support defaults to the policy's |I|*R sparsity budget.
    """
    if eps_sq is None:
        eps_sq = (wdict.whitened.shape[0] * noise_prior
                  if noise_prior is not None else DEFAULT_EPS_SQ)
    if max_support is None:
        max_support = policy.support_cap(wdict.grid)
    receiver = "dsa" if wdict.bank.kind == "identity" else "csa"
    trace: list[float] = []
    estimates: list[SparseEstimate] = []
    first = None
    flags: list[str] = []
    n = 0
    while n < stream.n_shifts:
        obs = cms_sample(stream_window(stream, n), wdict, shift=n)
        est = omp_solve_batch(obs.whitened[:, None], wdict,
                              max_support=max_support, eps_sq=eps_sq)[0]
        trace.append(_llr(est.energy, est.residual_norm ** 2, wdict.n_samplers))
        estimates.append(est)
        if first is None and trace[-1] >= log_threshold:
            first = n
        if first is not None and n >= first + horizon:
            break
        n += 1
    if first is None:
        return AcquisitionResult(receiver=receiver, grid=wdict.grid,
                                 detected=False, first_trigger=None,
                                 best_shift=None, users=(), cells={},
                                 stat_trace=tuple(trace), flags=tuple(flags))
    if len(trace) < first + horizon + 1:
        flags.append("horizon-truncated")
    window = np.asarray(trace[first:first + horizon + 1])
    best = first + int(np.argmax(window))
    users, cells = extract_components(estimates[best], policy, wdict.grid)
    flags.extend(estimates[best].flags)
    return AcquisitionResult(receiver=receiver, grid=wdict.grid, detected=True,
                             first_trigger=first, best_shift=best, users=users,
                             cells=cells, stat_trace=tuple(trace),
                             flags=tuple(flags))


def mf_acquire(stream: SampleStream, templates: TemplateBank,
               threshold: float, horizon: int,
               policy: ExtractionPolicy) -> AcquisitionResult:
    """Matched-filter acquisition: threshold the maximum correlation magnitude.

    Same gating as sequential_acquire; the declared shift is where the
    global maximum output lands inside the horizon, and each detected
    user keeps its R strongest (k, q) cells of that shift's output array.
    """
    grid = templates.grid
    trace: list[float] = []
    arrays: list[np.ndarray] = []
    first = None
    flags: list[str] = []
    n = 0
    while n < stream.n_shifts:
        C = mf_sample(stream_window(stream, n), templates)
        trace.append(float(np.max(np.abs(C))))
        arrays.append(C)
        if first is None and trace[-1] >= threshold:
            first = n
        if first is not None and n >= first + horizon:
            break
        n += 1
    if first is None:
        return AcquisitionResult(receiver="mf", grid=grid, detected=False,
                                 first_trigger=None, best_shift=None, users=(),
                                 cells={}, stat_trace=tuple(trace),
                                 flags=tuple(flags))
    if len(trace) < first + horizon + 1:
        flags.append("horizon-truncated")
    window = np.asarray(trace[first:first + horizon + 1])
    best = first + int(np.argmax(window))
    users, cells = extract_from_magnitudes(arrays[best], policy, grid,
                                           user_threshold=threshold
                                           if policy.mode == "unknown" else None)
    return AcquisitionResult(receiver="mf", grid=grid, detected=True,
                             first_trigger=first, best_shift=best, users=users,
                             cells=cells, stat_trace=tuple(trace),
                             flags=tuple(flags))
