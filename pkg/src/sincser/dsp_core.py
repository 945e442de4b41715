"""Sinc band-pass kernels: evaluation, responses, cutoff constraints and gradients.

Frequencies handed to the kernel math are normalized (cycles/sample, ``f / fs``);
everything user facing is in Hz.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F_MIN = 30.0  # Hz, lowest admissible low cutoff
BAND_MIN = 50.0  # Hz, narrowest admissible band
DEFAULT_LENGTH = 251


@dataclass
class SincFilterParams:
    theta1: float
    theta2: float
    sample_rate: float = 16000.0
    length: int = DEFAULT_LENGTH
    f_min: float = F_MIN
    band_min: float = BAND_MIN


@dataclass
class FilterKernel:
    coeffs: np.ndarray
    center_index: int
    f1: float
    f2: float


@dataclass
class SincBank:
    """Ordered filters sharing length and sample rate, plus the fixed window."""

    filters: list[SincFilterParams]
    window: np.ndarray

    def __post_init__(self):
        if not self.filters:
            raise ValueError("a SincBank needs at least one filter")
        lengths = {p.length for p in self.filters}
        rates = {p.sample_rate for p in self.filters}
        if len(lengths) != 1 or len(rates) != 1:
            raise ValueError("all filters in a bank must share length and sample_rate")
        if len(self.window) != self.length:
            raise ValueError(f"window has {len(self.window)} taps, filters have {self.length}")

    @property
    def length(self) -> int:
        return self.filters[0].length

    @property
    def sample_rate(self) -> float:
        return self.filters[0].sample_rate

    @property
    def num_filters(self) -> int:
        return len(self.filters)

    @classmethod
    def from_thetas(cls, theta1, theta2, sample_rate=16000.0, length=DEFAULT_LENGTH,
                    window=None) -> "SincBank":
        filters = [SincFilterParams(float(a), float(b), sample_rate, length)
                   for a, b in zip(theta1, theta2)]
        return cls(filters, hamming(length) if window is None else np.asarray(window, float))

    def thetas(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([p.theta1 for p in self.filters]),
                np.array([p.theta2 for p in self.filters]))

    def cutoffs(self) -> np.ndarray:
        """(num_filters, 2) array of constrained (f1, f2) in Hz."""
        return np.array([constrain_cutoffs(p) for p in self.filters])

    def kernels(self) -> np.ndarray:
        return np.stack([time_domain_kernel(p, self.window).coeffs for p in self.filters])


def sinc(x):
    """sin(x)/x with the continuous extension sinc(0) = 1."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = np.sin(x[nz]) / x[nz]
    return out if out.ndim else float(out)


def hamming(length: int) -> np.ndarray:
    """Hamming window, mirrored so it is bitwise symmetric."""
    if length < 1:
        raise ValueError("window length must be >= 1")
    w = np.hamming(length)
    half = (length + 1) // 2
    w[length - half:] = w[:half][::-1]
    return w


def _check_odd(length):
    if length % 2 == 0:
        raise ValueError(f"kernel length must be odd for exact symmetry, got {length}")


def constrain_cutoffs(p: SincFilterParams) -> tuple[float, float]:
    """Map raw thetas to (f1, f2) Hz with 0 < f1 < f2 <= fs/2."""
    nyq = p.sample_rate / 2.0
    f1 = p.f_min + abs(p.theta1)
    # huge theta1 would push f1 past Nyquist; keep the band non-empty
    f1 = min(f1, nyq - p.band_min)
    f2 = min(f1 + p.band_min + abs(p.theta2), nyq)
    return float(f1), float(f2)


def cutoff_jacobian(p: SincFilterParams) -> np.ndarray:
    """2x2 matrix d(f1, f2)/d(theta1, theta2), rows f1/f2, columns theta1/theta2.

    The kink of |theta| at zero takes the right-hand slope so that parameters
    initialised at zero still receive gradient.
    """
    nyq = p.sample_rate / 2.0
    s1 = 1.0 if p.theta1 >= 0 else -1.0
    s2 = 1.0 if p.theta2 >= 0 else -1.0
    f1_free = p.f_min + abs(p.theta1) < nyq - p.band_min
    f1 = min(p.f_min + abs(p.theta1), nyq - p.band_min)
    f2_free = f1 + p.band_min + abs(p.theta2) < nyq
    d11 = s1 if f1_free else 0.0
    d21 = d11 if f2_free else 0.0
    d22 = s2 if f2_free else 0.0
    return np.array([[d11, 0.0], [d21, d22]])


def frequency_response(f1: float, f2: float, f):
    """Ideal band-pass magnitude as the difference of two rect low-passes."""

    def rect(x):
        ax = np.abs(x)
        return np.where(ax < 0.5, 1.0, np.where(ax == 0.5, 0.5, 0.0))

    f = np.asarray(f, dtype=float)
    out = rect(f / (2.0 * f2)) - rect(f / (2.0 * f1))
    return out if out.ndim else float(out)


def _half_taps(length):
    c = (length - 1) // 2
    return c, np.arange(0, c + 1, dtype=float)


def _mirror(half):
    return np.concatenate([half[:0:-1], half])


def lowpass_kernel(F: float, length: int) -> np.ndarray:
    """Unwindowed 2F*sinc(2*pi*F*n) for n = -c..c, F in cycles/sample."""
    _check_odd(length)
    _, n = _half_taps(length)
    return _mirror(2.0 * F * sinc(2.0 * np.pi * F * n))


def time_domain_kernel(p: SincFilterParams, window) -> FilterKernel:
    _check_odd(p.length)
    window = np.asarray(window, dtype=float)
    if len(window) != p.length:
        raise ValueError(f"window has {len(window)} taps, filter length is {p.length}")
    f1, f2 = constrain_cutoffs(p)
    F1, F2 = f1 / p.sample_rate, f2 / p.sample_rate
    c, n = _half_taps(p.length)
    half = window[c:] * (2.0 * F2 * sinc(2.0 * np.pi * F2 * n)
                         - 2.0 * F1 * sinc(2.0 * np.pi * F1 * n))
    return FilterKernel(coeffs=_mirror(half), center_index=c, f1=f1, f2=f2)


def kernel_param_gradients(p: SincFilterParams, window):
    """Partials of every kernel tap w.r.t. the normalized cutoffs F1, F2.

    d/dF [2F sinc(2 pi F n)] = 2 cos(2 pi F n), which is also right at n = 0.
    Divide by the sample rate to get per-Hz derivatives.
    """
    _check_odd(p.length)
    window = np.asarray(window, dtype=float)
    if len(window) != p.length:
        raise ValueError(f"window has {len(window)} taps, filter length is {p.length}")
    f1, f2 = constrain_cutoffs(p)
    F1, F2 = f1 / p.sample_rate, f2 / p.sample_rate
    c, n = _half_taps(p.length)
    d1 = -window[c:] * 2.0 * np.cos(2.0 * np.pi * F1 * n)
    d2 = window[c:] * 2.0 * np.cos(2.0 * np.pi * F2 * n)
    return _mirror(d1), _mirror(d2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_spaced_init(num_filters: int, sample_rate: float = 16000.0,
                    length: int = DEFAULT_LENGTH, f_min: float = F_MIN,
                    band_min: float = BAND_MIN) -> list[SincFilterParams]:
    """Adjacent mel-equidistant bands covering (f_min, Nyquist).

    Bands narrower than ``band_min`` are widened to it, which breaks adjacency
    only for very large ``num_filters``.
    """
    if num_filters <= 0:
        raise ValueError(f"num_filters must be >= 1, got {num_filters}")
    nyq = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(nyq), num_filters + 1))
    edges[0], edges[-1] = f_min, nyq
    # with many filters the lowest mel bands undercut band_min; those are widened to it
    return [SincFilterParams(theta1=float(lo - f_min), theta2=float(max(hi - lo - band_min, 0.0)),
                             sample_rate=sample_rate, length=length,
                             f_min=f_min, band_min=band_min)
            for lo, hi in zip(edges[:-1], edges[1:])]


def kernel_response(coeffs, sample_rate: float = 16000.0, num_bins: int = 1024):
    """Magnitude of the kernel's DFT on ``num_bins`` bins from 0 up to Nyquist."""
    spec = np.abs(np.fft.rfft(coeffs, n=2 * num_bins))[:num_bins]
    freqs = np.arange(num_bins) * sample_rate / (2 * num_bins)
    return freqs, spec


def band_energy_fraction(coeffs, bands, sample_rate: float = 16000.0, num_bins: int = 1024) -> float:
    """Share of the kernel's DFT energy that falls inside the union of ``bands`` (Hz, inclusive)."""
    freqs, mag = kernel_response(coeffs, sample_rate, num_bins)
    energy = mag ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    inside = np.zeros(freqs.shape, dtype=bool)
    for lo, hi in bands:
        inside |= (freqs >= lo) & (freqs <= hi)
    return float(energy[inside].sum() / total)
