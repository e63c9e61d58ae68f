"""FFT workloads for the two execution domains.

``fft_float`` plays the software-core role (double precision), ``fft_fixed``
emulates a scaled fixed-point transform core bit-accurately, and
``dft_naive`` is the O(N^2) oracle both are checked against.

Signals and spectra are 1-D ``numpy.complex128`` arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import Enum

import numpy as np

MIN_POINTS = 8
MAX_POINTS = 65536


class InvalidLengthError(ValueError):
    """Transform length is not a power of two in [MIN_POINTS, MAX_POINTS]."""


def is_valid_points(n) -> bool:
    return (
        isinstance(n, (int, np.integer))
        and not isinstance(n, bool)
        and MIN_POINTS <= n <= MAX_POINTS
        and (n & (n - 1)) == 0
    )


def check_points(n) -> int:
    if not is_valid_points(n):
        raise InvalidLengthError(
            f"length must be a power of two in [{MIN_POINTS}, {MAX_POINTS}], got {n!r}"
        )
    return int(n)


def _as_signal(signal) -> np.ndarray:
    x = np.asarray(signal, dtype=np.complex128)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains NaN or Inf")
    return x


@functools.lru_cache(maxsize=32)
def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.flags.writeable = False
    return rev


@functools.lru_cache(maxsize=32)
def _twiddles(n: int) -> np.ndarray:
    # exact-angle table, k in [0, n/2)
    k = np.arange(n // 2)
    w = np.exp(-2j * np.pi * k / n)
    w.flags.writeable = False
    return w


def fft_float(signal) -> np.ndarray:
    """Unnormalized forward DFT via iterative radix-2 decimation in time."""
    x = _as_signal(signal)
    n = check_points(len(x))
    a = x[_bit_reverse_perm(n)].copy()
    tw = _twiddles(n)
    half = 1
    while half < n:
        span = 2 * half
        w = tw[:: n // span][:half]
        a = a.reshape(-1, span)
        top = a[:, :half]
        t = a[:, half:] * w
        a = np.concatenate((top + t, top - t), axis=1).reshape(-1)
        half = span
    return a


def dft_naive(signal, block: int = 256) -> np.ndarray:
    """Direct evaluation of X[k] = sum_n x[n] exp(-2 pi i n k / N).

    Phases are reduced with exact integer arithmetic ``(n*k) mod N`` before
    taking the exponential, so the oracle stays accurate for large N.
    """
    x = _as_signal(signal)
    n = len(x)
    if n == 0:
        raise ValueError("empty signal")
    idx = np.arange(n, dtype=np.int64)
    out = np.empty(n, dtype=np.complex128)
    for k0 in range(0, n, block):
        ks = idx[k0 : k0 + block]
        phase = np.outer(ks, idx) % n
        out[k0 : k0 + block] = np.exp(-2j * np.pi * phase / n) @ x
    return out


def mse(a, b) -> float:
    """Mean of |a_k - b_k|^2."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty spectra")
    d = a - b
    return float(np.mean(d.real**2 + d.imag**2))


# --------------------------------------------------------------------------
# Fixed point
# --------------------------------------------------------------------------


class Rounding(str, Enum):
    HALF_TO_EVEN = "HalfToEven"


class Overflow(str, Enum):
    SATURATE = "Saturate"


class StageScaling(str, Enum):
    HALF_EACH_STAGE = "HalfEachStage"


@dataclass(frozen=True)
class FixedPointFormat:
    word_bits: int = 16
    frac_bits: int = 15
    rounding: Rounding = Rounding.HALF_TO_EVEN
    overflow: Overflow = Overflow.SATURATE
    stage_scaling: StageScaling = StageScaling.HALF_EACH_STAGE

    def __post_init__(self):
        if not (0 < self.frac_bits < self.word_bits <= 32):
            raise ValueError(
                f"need 0 < frac_bits < word_bits <= 32, got Q{self.word_bits - self.frac_bits}.{self.frac_bits}"
            )

    @classmethod
    def parse(cls, text: str) -> "FixedPointFormat":
        """Parse ``"Q1.15"`` style notation (integer bits include the sign)."""
        t = text.strip().upper()
        if not t.startswith("Q") or "." not in t:
            raise ValueError(f"bad fixed-point format {text!r}, expected e.g. Q1.15")
        ib, fb = t[1:].split(".", 1)
        return cls(word_bits=int(ib) + int(fb), frac_bits=int(fb))

    @property
    def name(self) -> str:
        return f"Q{self.word_bits - self.frac_bits}.{self.frac_bits}"

    @property
    def min_int(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.word_bits - 1)) - 1


Q15 = FixedPointFormat()


@dataclass(frozen=True)
class FixedFFTResult:
    spectrum: np.ndarray
    saturations: int


def _dtype_for(fmt: FixedPointFormat):
    # products of two words plus an aligned word must fit in int64
    return np.int64 if fmt.word_bits <= 30 else object


def _round_shift(x: np.ndarray, s: int) -> np.ndarray:
    """Divide integers by 2**s with round-half-to-even."""
    if s == 0:
        return x
    q = x >> s
    r = x - (q << s)
    half = 1 << (s - 1)
    up = ((r > half) | ((r == half) & ((q & 1) == 1))).astype(np.int64)
    return q + (up if x.dtype != object else up.astype(object))


def _saturate(x: np.ndarray, fmt: FixedPointFormat) -> tuple[np.ndarray, int]:
    lo, hi = fmt.min_int, fmt.max_int
    over = (x > hi) | (x < lo)
    count = int(np.count_nonzero(over))
    if count:
        x = np.where(x > hi, hi, np.where(x < lo, lo, x)).astype(x.dtype)
    return x, count


def _quantize(values: np.ndarray, fmt: FixedPointFormat) -> tuple[np.ndarray, int]:
    # np.rint rounds half to even
    scaled = np.rint(values * float(1 << fmt.frac_bits))
    dtype = _dtype_for(fmt)
    lo, hi = fmt.min_int, fmt.max_int
    count = int(np.count_nonzero((scaled > hi) | (scaled < lo)))
    clipped = np.clip(scaled, lo, hi)
    if dtype is object:
        return np.array([int(v) for v in clipped], dtype=object), count
    return clipped.astype(np.int64), count


@functools.lru_cache(maxsize=64)
def _fixed_twiddles(n: int, fmt: FixedPointFormat) -> tuple[np.ndarray, np.ndarray]:
    w = _twiddles(n)
    wr, _ = _quantize(w.real, fmt)
    wi, _ = _quantize(w.imag, fmt)
    return wr, wi


def fft_fixed_detailed(signal, fmt: FixedPointFormat = Q15) -> FixedFFTResult:
    """Bit-accurate scaled fixed-point radix-2 DIT FFT.

    Each butterfly computes ``(a +/- w*b) / 2`` from full-precision integer
    products, then rounds half-to-even once and saturates to the word. After
    log2(N) stages the output carries a 1/N scale, which is undone when
    converting back to float so results compare directly with ``fft_float``.
    """
    x = _as_signal(signal)
    n = check_points(len(x))
    f = fmt.frac_bits
    x = x[_bit_reverse_perm(n)]
    re, sat_r = _quantize(x.real, fmt)
    im, sat_i = _quantize(x.imag, fmt)
    saturations = sat_r + sat_i
    wr_all, wi_all = _fixed_twiddles(n, fmt)

    half = 1
    while half < n:
        span = 2 * half
        step = n // span
        wr = wr_all[::step][:half]
        wi = wi_all[::step][:half]
        re = re.reshape(-1, span)
        im = im.reshape(-1, span)
        ar, ai = re[:, :half] << f, im[:, :half] << f
        br, bi = re[:, half:], im[:, half:]
        tr = br * wr - bi * wi
        ti = br * wi + bi * wr
        outs = []
        for v in (ar + tr, ai + ti, ar - tr, ai - ti):
            v, c = _saturate(_round_shift(v, f + 1), fmt)
            saturations += c
            outs.append(v)
        re = np.concatenate((outs[0], outs[2]), axis=1).reshape(-1)
        im = np.concatenate((outs[1], outs[3]), axis=1).reshape(-1)
        half = span

    scale = n / float(1 << f)
    spectrum = (re.astype(np.float64) + 1j * im.astype(np.float64)) * scale
    return FixedFFTResult(spectrum=spectrum, saturations=saturations)


def fft_fixed(signal, fmt: FixedPointFormat = Q15) -> np.ndarray:
    return fft_fixed_detailed(signal, fmt).spectrum


def normalize(signal, fmt: FixedPointFormat = Q15) -> tuple[np.ndarray, float]:
    """Scale ``signal`` so every component lies in [-1, 1 - 2**-frac_bits].

    Returns the scaled signal and the gain to multiply the spectrum by
    afterwards.
    """
    x = _as_signal(signal)
    peak = float(np.max(np.maximum(np.abs(x.real), np.abs(x.imag)))) if x.size else 0.0
    if peak == 0.0:
        return x.copy(), 1.0
    headroom = 1.0 - 2.0**-fmt.frac_bits
    gain = peak / headroom
    return x / gain, gain


# --------------------------------------------------------------------------
# Test signals
# --------------------------------------------------------------------------


class SignalKind(str, Enum):
    IMPULSE = "Impulse"
    DC = "Dc"
    TONE = "Tone"
    SEEDED_UNIFORM = "SeededUniform"


def generate_signal(kind, n: int, *, bin: int = 0, seed: int = 0, amplitude: float = 0.5) -> np.ndarray:
    """Deterministic test signal of length ``n``.

    ``SeededUniform`` draws real and imaginary parts independently from
    U[-amplitude, amplitude) with a PCG64 generator seeded by ``seed``.
    """
    kind = SignalKind(kind)
    n = check_points(n)
    if kind is SignalKind.IMPULSE:
        x = np.zeros(n, dtype=np.complex128)
        x[0] = 1.0
        return x
    if kind is SignalKind.DC:
        return np.ones(n, dtype=np.complex128)
    if kind is SignalKind.TONE:
        phase = (np.arange(n, dtype=np.int64) * bin) % n
        return np.exp(2j * np.pi * phase / n)
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random((2, n))
    return (2.0 * u[0] - 1.0) * amplitude + 1j * (2.0 * u[1] - 1.0) * amplitude
