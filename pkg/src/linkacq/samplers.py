"""Compressive sampler design and evaluation.

A sampler bank is a P x G matrix B applied to the G template projections
z = Ts * Phi^H y, so the P observed samples are c = B z (equivalently the
output of P analog kernels Psi = Phi B^H).  Filtered noise has covariance
sigma^2 * R with R = B M B^H, where M is the template Gram matrix.

The design objective is the average Kullback-Leibler distance between the
observation distributions of random sparse hypotheses, which reduces to the
trace of G(B) = M^H B^H (B M B^H)^+ B M.  The optimal bank for a budget of
P samples is Sigma_P^{-1/2} U_P^H built from the top-P eigenpairs of M; it
whitens the filtered noise exactly and attains sum of the top-P eigenvalues.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .dictionary import GramMatrix, TemplateBank

__all__ = [
    "SamplerBank",
    "KlReport",
    "SparkBound",
    "kl_optimal_B",
    "random_B",
    "identity_B",
    "with_noise_model",
    "noise_cov",
    "avg_kl",
    "pairwise_kl",
    "kl_operator",
    "kl_report",
    "spark_lower_bound",
]

# Eigenvalues below RANK_RTOL * largest count as zero when ranking Gram and
# noise matrices; template Grams of long correlated preambles are
# near-singular, so a fixed relative threshold keeps ranks stable.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class SamplerBank:
    """A P x G sampler with optional attached noise model.

    noise_gram is R = B M B^H, whitener is F with F R F^H = I on the
    retained rank (rows of F span the range of R).  Banks built without a
    Gram matrix in hand carry None until with_noise_model attaches them.
    """

    kind: str                            # kl-optimal | gaussian | bernoulli | partial-dft | identity
    matrix: np.ndarray                   # (P, G)
    noise_gram: np.ndarray | None = None     # (P, P)
    whitener: np.ndarray | None = None       # (r, P)
    rank: int | None = None                  # retained rank r of R
    gram_product: np.ndarray | None = None   # B @ M, (P, G), kept when cheap

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("sampler matrix must be 2-D (P x G)")
        if self.kind == "identity":
            P, G = self.matrix.shape
            if P != G or not np.array_equal(self.matrix, np.eye(G)):
                raise ValueError("identity kind requires B = I_G")

    @property
    def n_samplers(self) -> int:
        return self.matrix.shape[0]

    @property
    def grid_size(self) -> int:
        return self.matrix.shape[1]

    @property
    def rank_deficient(self) -> bool:
        return self.rank is not None and self.rank < self.n_samplers


@dataclass(frozen=True)
class KlReport:
    """Design summary for a sampler bank."""

    kind: str
    n_samplers: int
    avg_kl: float                 # at signal_var/noise_var = 1
    eigenvalues: np.ndarray       # Gram eigenvalues retained by the design
    spark_bound: int              # spark lower bound of the retained block
    spark_tag: str                # exact | bound
    rank_truncated: bool = False  # pseudo-inverse engaged in avg_kl

    def __post_init__(self):
        total = float(np.sum(self.eigenvalues))
        if not -1e-9 <= self.avg_kl <= total * (1 + 1e-6) + 1e-9:
            raise ValueError(
                f"average KL {self.avg_kl} outside [0, total eigenvalue mass {total}]"
            )


# --------------------------------------------------------------------------
# Whitening
# --------------------------------------------------------------------------

def _whitener_from_gram(R: np.ndarray) -> tuple[np.ndarray, int]:
    """F with F R F^H = I_r from a Hermitian eigendecomposition of R."""
    vals, vecs = np.linalg.eigh((R + R.conj().T) / 2)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    if vals.size == 0 or vals[0] <= 0:
        return np.zeros((0, R.shape[0]), dtype=complex), 0
    r = int(np.sum(vals > RANK_RTOL * vals[0]))
    F = (vecs[:, :r] / np.sqrt(vals[:r])).conj().T
    return F, r


def noise_cov(bank: SamplerBank, gram: GramMatrix,
              templates: TemplateBank | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Filtered-noise Gram R = B M B^H and a rank-truncated whitening factor.

    With templates supplied, R is formed as Ts * (Phi B^H)^H (Phi B^H),
    which never materializes the G x G Gram and is exactly Hermitian PSD.
    """
    B = bank.matrix
    if templates is not None:
        Y = templates.matrix @ B.conj().T
        R = templates.sample_period * (Y.conj().T @ Y)
    else:
        if gram.matrix is None:
            raise ValueError("need a dense Gram matrix or a template bank")
        R = B @ gram.matrix @ B.conj().T
    F, _ = _whitener_from_gram(R)
    return R, F


def with_noise_model(bank: SamplerBank, gram: GramMatrix | None = None,
                     templates: TemplateBank | None = None) -> SamplerBank:
    """Return a copy of the bank with R, whitener, rank (and B M) attached.

    identity banks reuse the Gram's own spectrum (R = M exactly); other
    kinds go through the generic Hermitian factorization.
    """
    if bank.noise_gram is not None and bank.whitener is not None:
        return bank
    if bank.kind == "identity":
        if gram is None:
            raise ValueError("identity bank needs the Gram matrix itself")
        r = gram.rank(RANK_RTOL)
        F = (gram.eigvecs[:, :r] / np.sqrt(gram.eigvals[:r])).conj().T
        R = gram.matrix
        if R is None:
            raise ValueError("identity bank needs a dense Gram matrix")
        return replace(bank, noise_gram=R, whitener=F, rank=r,
                       gram_product=R)
    B = bank.matrix
    if templates is not None:
        Y = templates.matrix @ B.conj().T                         # (W, P)
        R = templates.sample_period * (Y.conj().T @ Y)
        A = templates.sample_period * (Y.conj().T @ templates.matrix)  # B M
    else:
        if gram is None or gram.matrix is None:
            raise ValueError("need a dense Gram matrix or a template bank")
        A = B @ gram.matrix
        R = A @ B.conj().T
        R = (R + R.conj().T) / 2
    F, r = _whitener_from_gram(R)
    return replace(bank, noise_gram=R, whitener=F, rank=r, gram_product=A)


# --------------------------------------------------------------------------
# Bank constructors
# --------------------------------------------------------------------------

def _degenerate_block(eigvals: np.ndarray, P: int, rtol: float = 1e-8) -> tuple[int, int]:
    """Index range [lo, hi) of eigenvalues equal to eigvals[P-1] within rtol."""
    pivot = eigvals[P - 1]
    scale = max(abs(eigvals[0]), 1.0)
    lo = P - 1
    while lo > 0 and abs(eigvals[lo - 1] - pivot) <= rtol * scale:
        lo -= 1
    hi = P
    while hi < len(eigvals) and abs(eigvals[hi] - pivot) <= rtol * scale:
        hi += 1
    return lo, hi


def kl_optimal_B(gram: GramMatrix, P: int,
                 rng: np.random.Generator | None = None) -> SamplerBank:
    """Average-KL-optimal P x G sampler: B = Sigma_P^{-1/2} U_P^H.

    U_P holds the P principal eigenvectors of M and Sigma_P the
    eigenvalues, so the filtered noise is white (R = I) and the attained
    average KL equals the sum of the top-P eigenvalues.

    When the P-th eigenvalue sits inside a degenerate block the principal
    subspace cut is not unique; among 16 random rotations of the block the
    candidate with the best spark lower bound of the retained eigenvector
    rows is kept (blocks wider than 32 are left in the basis eigh returns,
    where any choice attains the same objective).
    """
    r = gram.rank(RANK_RTOL)
    if not 1 <= P <= r:
        raise ValueError(f"sampler budget P={P} exceeds Gram rank {r}")
    vals = gram.eigvals[:P].copy()
    U = gram.eigvecs[:, :P].copy()
    lo, hi = _degenerate_block(gram.eigvals, P, rtol=1e-8)
    if hi > P and hi - lo <= 32:
        rng = np.random.default_rng(0) if rng is None else rng
        block = gram.eigvecs[:, lo:hi]
        width = hi - lo
        keep = P - lo
        best = None
        for _ in range(16):
            Z = rng.standard_normal((width, width)) + 1j * rng.standard_normal((width, width))
            Q, _ = np.linalg.qr(Z)
            cand = block @ Q[:, :keep]
            rows = np.concatenate([gram.eigvecs[:, :lo], cand], axis=1).conj().T
            score = spark_lower_bound(rows).value
            if best is None or score > best[0]:
                best = (score, cand)
        U[:, lo:P] = best[1]
    B = (U / np.sqrt(vals)).conj().T
    P_ = B.shape[0]
    return SamplerBank(kind="kl-optimal", matrix=B, noise_gram=np.eye(P_),
                       whitener=np.eye(P_), rank=P_,
                       gram_product=(U * np.sqrt(vals)).conj().T)


def random_B(kind: str, P: int, G: int, rng: np.random.Generator) -> SamplerBank:
    """Random baseline bank: gaussian, bernoulli, or partial-dft rows.

    gaussian entries are i.i.d. CN(0, 1/P); bernoulli entries are exactly
    +-1/sqrt(P); partial-dft takes P distinct rows of the unitary G-point
    DFT (unit-norm rows).  The noise model is attached later, when a Gram
    matrix is available.
    """
    if not 1 <= P <= G:
        raise ValueError(f"need 1 <= P <= G, got P={P}, G={G}")
    if kind == "gaussian":
        B = (rng.standard_normal((P, G)) + 1j * rng.standard_normal((P, G))) \
            / np.sqrt(2 * P)
    elif kind == "bernoulli":
        B = rng.choice([-1.0, 1.0], size=(P, G)) / np.sqrt(P) + 0j
    elif kind == "partial-dft":
        rows = rng.choice(G, size=P, replace=False)
        g = np.arange(G)
        B = np.exp(-2j * np.pi * np.outer(rows, g) / G) / np.sqrt(G)
    else:
        raise ValueError(f"unknown random bank kind {kind!r}")
    return SamplerBank(kind=kind, matrix=B)


def identity_B(G: int) -> SamplerBank:
    """The trivial P = G bank (direct template projections, no compression)."""
    return SamplerBank(kind="identity", matrix=np.eye(G, dtype=complex))


# --------------------------------------------------------------------------
# KL functionals
# --------------------------------------------------------------------------

def _whitened_product(bank: SamplerBank, gram: GramMatrix) -> np.ndarray:
    """F B M, the whitened measurement of a dense link vector."""
    b = bank if bank.whitener is not None else with_noise_model(bank, gram)
    A = b.gram_product
    if A is None:
        if gram.matrix is None:
            raise ValueError("need a dense Gram matrix to evaluate B M")
        A = b.matrix @ gram.matrix
    return b.whitener @ A


def avg_kl(bank: SamplerBank, gram: GramMatrix,
           signal_var: float = 1.0, noise_var: float = 1.0) -> float:
    """Average KL distance (signal_var/noise_var) * Tr[M B^H (B M B^H)^+ B M].

    A rank-deficient noise Gram falls back to the pseudo-inverse through the
    rank-truncated whitener; banks carry that in their rank field.
    """
    if signal_var == 0.0:
        return 0.0
    Aw = _whitened_product(bank, gram)
    return float(signal_var / noise_var * np.sum(np.abs(Aw) ** 2))


def pairwise_kl(bank: SamplerBank, gram: GramMatrix,
                beta1: np.ndarray, beta2: np.ndarray,
                noise_var: float = 1.0) -> float:
    """KL distance between the Gaussian observation laws of two hypotheses.

    Equal-covariance complex Gaussians: (b1-b2)^H G(B) (b1-b2) / sigma^2.
    """
    b = bank if bank.whitener is not None else with_noise_model(bank, gram)
    delta = np.asarray(beta1) - np.asarray(beta2)
    A = b.gram_product
    if A is None:
        if gram.matrix is None:
            raise ValueError("need a dense Gram matrix to evaluate B M")
        A = b.matrix @ gram.matrix
    w = b.whitener @ (A @ delta)
    return float(np.sum(np.abs(w) ** 2) / noise_var)


def kl_operator(bank: SamplerBank, gram: GramMatrix) -> np.ndarray:
    """Dense G x G operator G(B) = M^H B^H (B M B^H)^+ B M (small grids only)."""
    Aw = _whitened_product(bank, gram)
    return Aw.conj().T @ Aw


def kl_report(bank: SamplerBank, gram: GramMatrix) -> KlReport:
    """Summarize a bank's design quality (KL value at signal/noise ratio 1)."""
    b = bank if bank.whitener is not None else with_noise_model(bank, gram)
    value = avg_kl(b, gram)
    if b.kind == "kl-optimal":
        eig = gram.eigvals[:b.n_samplers]
        block = gram.eigvecs[:, :b.n_samplers].conj().T
    else:
        eig = gram.eigvals[:gram.rank(RANK_RTOL)]
        block = b.matrix
    sb = spark_lower_bound(block)
    return KlReport(kind=b.kind, n_samplers=b.n_samplers, avg_kl=value,
                    eigenvalues=np.asarray(eig, dtype=float),
                    spark_bound=sb.value, spark_tag=sb.tag,
                    rank_truncated=bool(b.rank_deficient))


# --------------------------------------------------------------------------
# Spark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SparkBound:
    value: int
    tag: str          # "exact" | "bound"
    full: bool = False  # no dependent subset exists: spark = n_cols + 1


_SPARK_EXACT_COLS = 12


def spark_lower_bound(A: np.ndarray) -> SparkBound:
    """Spark (smallest number of linearly dependent columns) or a lower bound.

    Exact combinatorial search over column subsets when the matrix has at
    most 12 columns; otherwise the mutual-coherence bound ceil(1 + 1/mu),
    certified but usually loose.
    """
    A = np.asarray(A)
    n_rows, n_cols = A.shape
    norms = np.linalg.norm(A, axis=0)
    scale = norms.max() if n_cols else 0.0
    if scale == 0.0 or np.any(norms <= 1e-14 * scale):
        return SparkBound(value=1, tag="exact")
    if n_cols <= _SPARK_EXACT_COLS:
        for k in range(2, n_cols + 1):
            if k > n_rows:
                # any n_rows+1 columns are dependent in C^{n_rows}
                return SparkBound(value=k, tag="exact")
            for subset in itertools.combinations(range(n_cols), k):
                s = np.linalg.svd(A[:, subset], compute_uv=False)
                if s[-1] <= 1e-10 * s[0]:
                    return SparkBound(value=k, tag="exact")
        return SparkBound(value=n_cols + 1, tag="exact", full=True)
    An = A / norms
    gram = np.abs(An.conj().T @ An)
    np.fill_diagonal(gram, 0.0)
    mu = gram.max()
    if mu <= 1e-14:
        return SparkBound(value=min(n_rows, n_cols) + 1, tag="bound",
                          full=n_cols <= n_rows)
    bound = math.ceil(1.0 + 1.0 / mu)
    bound = min(bound, min(n_rows, n_cols) + 1)
    return SparkBound(value=int(bound), tag="bound")
