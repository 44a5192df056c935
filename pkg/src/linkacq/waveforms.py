"""Preamble waveforms, random channels, and the received sample stream.

Each user transmits a known preamble: a unit-modulus chip sequence (maximal
length shift-register sequences by default) linearly modulated onto a
unit-energy chip pulse.  The receiver observes a superposition of delayed,
Doppler-shifted, faded copies of the active users' preambles in circular
white Gaussian noise, sampled at the Nyquist rate Ts = T/nu.

Conventions used throughout the package:

* discrete inner products carry a Ts weight, so sampled-domain energies and
  covariances agree with their continuous-time counterparts;
* noise samples are i.i.d. CN(0, sigma2/Ts) (white-noise discretization);
* a path "delay" t places the first sample of the pulse-shaped waveform
  array at stream sample round(t/Ts).  For the default rectangular pulse
  this is the physical path delay; for truncated pulses it is the leading
  edge of the truncated support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "PulseShape",
    "Preamble",
    "ChannelRealization",
    "SampleStream",
    "Scenario",
    "find_primitive_taps",
    "gen_msequence",
    "make_preamble",
    "default_preamble_set",
    "sample_channel",
    "synthesize_received",
    "stream_window",
]


# --------------------------------------------------------------------------
# Chip sequences
# --------------------------------------------------------------------------

def _lfsr_period(degree: int, taps: int) -> int:
    """Length of the LFSR state cycle starting from state 1."""
    mask = taps & ((1 << degree) - 1)
    state = 1
    for step in range(1, (1 << degree) + 1):
        newbit = bin(state & mask).count("1") & 1
        state = (state >> 1) | (newbit << (degree - 1))
        if state == 1:
            return step
    return 0


@lru_cache(maxsize=None)
def find_primitive_taps(degree: int, count: int = 1) -> tuple[int, ...]:
    """Find feedback polynomials generating maximal-length sequences.

    Scans tap bitmasks in ascending order (bit i of the mask is the
    coefficient of x^i; the x^degree bit is implied and included in the
    returned value) and keeps polynomials whose shift-register cycle from
    state 1 has period exactly 2^degree - 1.  Deterministic, so a given
    (degree, count) always yields the same preamble family.
    """
    if not 2 <= degree <= 16:
        raise ValueError(f"degree must be in [2, 16], got {degree}")
    period = (1 << degree) - 1
    found = []
    top = 1 << degree
    # the constant term must be 1, otherwise the recurrence degenerates
    for low in range(1, top, 2):
        if _lfsr_period(degree, low) == period:
            found.append(top | low)
            if len(found) >= count:
                return tuple(found)
    raise ValueError(f"only {len(found)} primitive polynomials of degree {degree} exist")


def gen_msequence(register_degree: int, taps: int, initial_state: int) -> np.ndarray:
    """Generate one period of a maximal-length sequence in {+1, -1}.

    taps is the feedback polynomial bitmask (bit i <-> x^i; the x^degree bit
    may be present or omitted).  The Fibonacci register emits bit 0 of the
    state; output bit 1 maps to +1 and bit 0 to -1.  Two distinct nonzero
    initial states generate cyclic shifts of the same sequence.
    """
    if not 2 <= register_degree <= 16:
        raise ValueError(f"register degree must be in [2, 16], got {register_degree}")
    m = register_degree
    state = initial_state & ((1 << m) - 1)
    if state == 0:
        raise ValueError("initial LFSR state must be nonzero")
    mask = taps & ((1 << m) - 1)
    if _lfsr_period(m, mask) != (1 << m) - 1:
        raise ValueError(f"taps {taps:#x} are not primitive for degree {m}")
    n = (1 << m) - 1
    bits = np.empty(n, dtype=np.int8)
    for t in range(n):
        bits[t] = state & 1
        newbit = bin(state & mask).count("1") & 1
        state = (state >> 1) | (newbit << (m - 1))
    return (2.0 * bits - 1.0).astype(np.float64)


# --------------------------------------------------------------------------
# Pulse shapes and preambles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PulseShape:
    """Unit-energy chip pulse sampled on the Ts = T/nu grid.

    kind: "rectangular" (default, truncation 0) or "truncated-raised-cosine"
    (time-domain raised-cosine-spectrum pulse truncated to +-Lg chips and
    renormalized).  The sample array holds g(j*Ts - Lg*T) for
    j = 0..(2*Lg+1)*nu - 1, with anything beyond +Lg*T zeroed so the support
    stays inside [-Lg*T, Lg*T].
    """

    kind: str = "rectangular"
    chip_duration: float = 1.0
    truncation_chips: int = 0
    oversampling: int = 2
    rolloff: float = 0.25

    def __post_init__(self):
        if self.kind not in ("rectangular", "truncated-raised-cosine"):
            raise ValueError(f"unknown pulse kind {self.kind!r}")
        if self.oversampling < 1:
            raise ValueError("oversampling factor must be a positive integer")
        if self.kind == "rectangular" and self.truncation_chips != 0:
            raise ValueError("rectangular pulse has truncation 0")
        if self.kind == "truncated-raised-cosine" and self.truncation_chips < 1:
            raise ValueError("truncated pulse needs truncation_chips >= 1")

    @property
    def sample_period(self) -> float:
        return self.chip_duration / self.oversampling

    def samples(self) -> np.ndarray:
        T, nu, Lg = self.chip_duration, self.oversampling, self.truncation_chips
        Ts = self.sample_period
        if self.kind == "rectangular":
            return np.full(nu, 1.0 / np.sqrt(T))
        j = np.arange((2 * Lg + 1) * nu)
        t = j * Ts - Lg * T
        x = t / T
        beta = self.rolloff
        # raised-cosine-spectrum pulse; the removable singularity at
        # |x| = 1/(2*beta) is filled with the analytic limit
        denom = 1.0 - (2.0 * beta * x) ** 2
        g = np.where(
            np.abs(denom) > 1e-8,
            np.sinc(x) * np.cos(np.pi * beta * x) / np.where(np.abs(denom) > 1e-8, denom, 1.0),
            np.pi / 4.0 * np.sinc(1.0 / (2.0 * beta)),
        )
        g = np.where(t > Lg * T + 1e-12, 0.0, g)
        g = g / np.sqrt(np.sum(np.abs(g) ** 2) * Ts)
        return g


@dataclass(frozen=True)
class Preamble:
    """One user's sampled preamble waveform phi_i(j*Ts - Lg*T)."""

    user: int
    chips: np.ndarray
    samples: np.ndarray
    pulse: PulseShape

    @property
    def length(self) -> int:
        return len(self.chips)

    @property
    def sample_period(self) -> float:
        return self.pulse.sample_period


def make_preamble(chips, pulse: PulseShape, user: int = 1) -> Preamble:
    """Pulse-modulate a chip sequence onto the Ts grid.

    The result has exactly (M + 2*Lg)*nu samples, M = len(chips).
    """
    chips = np.asarray(chips)
    if chips.size == 0:
        raise ValueError("chip sequence is empty")
    if not np.allclose(np.abs(chips), 1.0, atol=1e-9):
        raise ValueError("chips must be unit modulus")
    nu = pulse.oversampling
    up = np.zeros((len(chips) - 1) * nu + 1, dtype=complex)
    up[::nu] = chips
    samples = np.convolve(up, pulse.samples().astype(complex))
    return Preamble(user=user, chips=chips, samples=samples, pulse=pulse)


def default_preamble_set(n_users: int, register_degree: int, pulse: PulseShape) -> list[Preamble]:
    """Build n_users preambles from distinct primitive polynomials."""
    taps = find_primitive_taps(register_degree, n_users)
    return [
        make_preamble(gen_msequence(register_degree, taps[i], 1), pulse, user=i + 1)
        for i in range(n_users)
    ]


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Channel-draw parameters (the simulation scenario)."""

    n_users: int = 10
    n_active: int = 4
    paths_per_user: int = 2
    chip_duration: float = 1.0
    preamble_length: int = 255
    delay_spread: float = 4.0          # tau~_max, seconds
    doppler_max: float = 2.5e-3 * 2 * np.pi  # omega_max, rad/s (for T = 1)
    noise_var: float = 1.0             # sigma^2

    def __post_init__(self):
        if not 1 <= self.n_active <= self.n_users:
            raise ValueError("need 1 <= n_active <= n_users")
        if self.paths_per_user < 1:
            raise ValueError("paths_per_user must be >= 1")


@dataclass(frozen=True)
class ChannelRealization:
    """Ground truth for one trial: active users and per-path (h, t, omega)."""

    active: tuple[int, ...]
    gains: np.ndarray      # (|active|, R) complex
    delays: np.ndarray     # (|active|, R) seconds
    dopplers: np.ndarray   # (|active|, R) rad/s
    noise_var: float

    @property
    def n_paths(self) -> int:
        return self.gains.shape[1]

    @property
    def t0(self) -> float:
        return float(self.delays.min())

    def paths(self):
        """Iterate (user, gain, delay, doppler) over all paths."""
        for a, user in enumerate(self.active):
            for r in range(self.n_paths):
                yield user, self.gains[a, r], self.delays[a, r], self.dopplers[a, r]


def sample_channel(rng: np.random.Generator, scen: Scenario) -> ChannelRealization:
    """Draw one channel realization.

    Fades are CN(0, 1/(|active|*R)) so the total received power is
    unit-normalized on average; t0 ~ U(0, M*T); per-path offsets are
    U(0, delay_spread) shifted so the earliest arrival is exactly t0;
    Dopplers are U(-omega_max, omega_max).
    """
    na, R = scen.n_active, scen.paths_per_user
    users = tuple(sorted(rng.choice(scen.n_users, size=na, replace=False) + 1))
    std = np.sqrt(1.0 / (2.0 * na * R))
    gains = std * (rng.standard_normal((na, R)) + 1j * rng.standard_normal((na, R)))
    t0 = rng.uniform(0.0, scen.preamble_length * scen.chip_duration)
    offsets = rng.uniform(0.0, scen.delay_spread, size=(na, R)) if scen.delay_spread > 0 \
        else np.zeros((na, R))
    offsets = offsets - offsets.min()
    dopplers = rng.uniform(-scen.doppler_max, scen.doppler_max, size=(na, R))
    return ChannelRealization(
        active=users,
        gains=gains,
        delays=t0 + offsets,
        dopplers=dopplers,
        noise_var=scen.noise_var,
    )


# --------------------------------------------------------------------------
# Received stream
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleStream:
    """Nyquist-rate received samples with sliding-window bookkeeping.

    window_samples (W) and shift_samples are the per-shift window length and
    hop; D = shift_samples * Ts.  W >= shift_samples so consecutive windows
    leave no gap.
    """

    samples: np.ndarray
    sample_period: float
    window_samples: int
    shift_samples: int

    def __post_init__(self):
        if self.shift_samples < 1:
            raise ValueError("shift_samples must be a positive integer")
        if self.window_samples < self.shift_samples:
            raise ValueError("window must cover at least one shift (W >= N)")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_shifts(self) -> int:
        """Number of full windows available."""
        return max(0, (len(self.samples) - self.window_samples) // self.shift_samples + 1)


def synthesize_received(
    preambles,
    channel: ChannelRealization | None,
    rng: np.random.Generator,
    n_samples: int,
    window_samples: int,
    shift_samples: int,
    noise_var: float | None = None,
) -> SampleStream:
    """Superpose faded/delayed/Doppler-shifted preambles plus white noise.

    preambles: sequence of Preamble indexed by user id (user i at position
    i-1).  channel=None synthesizes pure noise at noise_var (default 1).
    Raises if any path's waveform would extend past the stream buffer.
    """
    Ts = preambles[0].sample_period
    x = np.zeros(n_samples, dtype=complex)
    if channel is not None:
        for user, h, t, omega in channel.paths():
            arr = preambles[user - 1].samples
            m0 = int(round(t / Ts))
            if m0 < 0 or m0 + len(arr) > n_samples:
                raise ValueError(
                    f"path at delay {t:.3f}s (samples [{m0}, {m0 + len(arr)})) "
                    f"does not fit in a stream of {n_samples} samples"
                )
            idx = np.arange(m0, m0 + len(arr))
            x[idx] += h * arr * np.exp(1j * omega * idx * Ts)
        sigma2 = channel.noise_var if noise_var is None else noise_var
    else:
        sigma2 = 1.0 if noise_var is None else noise_var
    if sigma2 > 0:
        scale = np.sqrt(sigma2 / (2.0 * Ts))
        x += scale * (rng.standard_normal(n_samples) + 1j * rng.standard_normal(n_samples))
    return SampleStream(
        samples=x,
        sample_period=Ts,
        window_samples=window_samples,
        shift_samples=shift_samples,
    )


def stream_window(stream: SampleStream, n: int, window_samples: int | None = None,
                  shift_samples: int | None = None) -> np.ndarray:
    """The n-th sliding window [x((n*N + w)Ts)]_{w=0..W-1}."""
    W = stream.window_samples if window_samples is None else window_samples
    N = stream.shift_samples if shift_samples is None else shift_samples
    start = n * N
    if n < 0 or start + W > len(stream.samples):
        raise IndexError(f"window {n} (samples [{start}, {start + W})) out of range")
    return stream.samples[start:start + W]


def all_windows(stream: SampleStream, n_shifts: int | None = None) -> np.ndarray:
    """Stack the first n_shifts windows as rows (zero-copy strided view)."""
    W, N = stream.window_samples, stream.shift_samples
    avail = stream.n_shifts
    if n_shifts is None:
        n_shifts = avail
    if n_shifts > avail:
        raise IndexError(f"requested {n_shifts} windows, only {avail} fit")
    view = np.lib.stride_tricks.sliding_window_view(stream.samples, W)[::N]
    return view[:n_shifts]
