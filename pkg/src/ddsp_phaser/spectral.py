"""Frame-based spectral processing with Hann windows and 75% overlap-add.

Each frame is windowed, zero-padded to a power-of-two DFT length, multiplied
bin-wise by a transfer function, inverse transformed, truncated, windowed a
second time and overlap-added.  The periodic Hann window squared sums to 3/2
at a hop of a quarter frame, which is the normalisation used on output.

The public single-frame functions follow the matrix definitions literally
(full-length DFTs).  The ``*_frames`` helpers are the batched half-spectrum
equivalents used by the model and the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

OLA_GAIN = 1.5
HERMITIAN_TOL = 1e-9


@dataclass(frozen=True)
class FrameConfig:
    """Frame geometry derived from a window duration and a sample rate."""

    window_seconds: float
    sample_rate: float

    def __post_init__(self):
        if not self.window_seconds > 0:
            raise ValueError("window_seconds must be positive")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if self.frame_len < 4:
            raise ValueError(
                f"window of {self.window_seconds} s gives fewer than 4 samples"
            )

    @classmethod
    def from_ms(cls, window_ms: float, sample_rate: float = 44100.0) -> "FrameConfig":
        return cls(window_ms / 1000.0, float(sample_rate))

    @property
    def frame_len(self) -> int:
        # floor(W * Fs) truncated down to a multiple of four; the small
        # epsilon guards against 0.04 * 44100 = 1763.9999...
        n = int(math.floor(self.window_seconds * self.sample_rate + 1e-9))
        return n - n % 4

    @property
    def hop(self) -> int:
        return self.frame_len // 4

    @property
    def dft_len(self) -> int:
        return 1 << (self.frame_len - 1).bit_length()

    @property
    def n_bins(self) -> int:
        """Number of non-redundant bins of a real-input DFT."""
        return self.dft_len // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def num_frames(self, length: int) -> int:
        return -(-length // self.hop)

    def padded_length(self, length: int) -> int:
        return (self.num_frames(length) - 1) * self.hop + self.frame_len

    def window(self) -> np.ndarray:
        return hann(self.frame_len)

    def describe(self) -> dict:
        return {
            "window_ms": self.window_seconds * 1000.0,
            "sample_rate": self.sample_rate,
            "frame_len": self.frame_len,
            "hop": self.hop,
            "dft_len": self.dft_len,
            "frame_rate": self.frame_rate,
        }


def hann(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass
class FrameSet:
    frames: np.ndarray  # (count, frame_len)

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, m):
        return self.frames[m]


@dataclass
class SpectralFilter:
    """Full-length transfer function sampled on the DFT grid."""

    bins: np.ndarray

    @classmethod
    def from_half(cls, half: np.ndarray, dft_len: int) -> "SpectralFilter":
        """Mirror ``dft_len // 2 + 1`` bins into a Hermitian full grid.

        The DC and Nyquist bins keep their real parts only, which is what a
        real inverse transform of the half spectrum does implicitly.
        """
        half = np.asarray(half, dtype=complex)
        if half.shape[-1] != dft_len // 2 + 1:
            raise ValueError("half spectrum has the wrong number of bins")
        full = np.empty(dft_len, dtype=complex)
        full[: dft_len // 2 + 1] = half
        full[0] = half[0].real
        full[dft_len // 2] = half[-1].real
        full[dft_len // 2 + 1 :] = np.conj(half[1:-1][::-1])
        return cls(full)

    @classmethod
    def identity(cls, dft_len: int) -> "SpectralFilter":
        return cls(np.ones(dft_len, dtype=complex))

    @classmethod
    def from_fir(cls, taps, dft_len: int) -> "SpectralFilter":
        taps = np.asarray(taps, dtype=float)
        if taps.size > dft_len:
            raise ValueError("more FIR taps than DFT bins")
        return cls(np.fft.fft(taps, dft_len))

    @property
    def dft_len(self) -> int:
        return self.bins.shape[0]

    def hermitian_error(self) -> float:
        b = self.bins
        n = b.shape[0]
        mirrored = np.conj(b[(-np.arange(n)) % n])
        return float(np.max(np.abs(b - mirrored)))


def _as_samples(signal) -> np.ndarray:
    x = getattr(signal, "samples", signal)
    return np.asarray(x, dtype=float)


def segment(signal, cfg: FrameConfig) -> FrameSet:
    """Split a signal into ceil(L/H) frames, zero-padding the tail."""
    x = _as_samples(signal)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("cannot segment an empty signal")
    n_frames = cfg.num_frames(x.size)
    padded = np.zeros(cfg.padded_length(x.size))
    padded[: x.size] = x
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    return FrameSet(padded[idx])


def analyze(frame, cfg: FrameConfig) -> np.ndarray:
    """Full ``dft_len``-point spectrum of the windowed, zero-padded frame."""
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (cfg.frame_len,):
        raise ValueError(
            f"frame has length {frame.shape}, expected {cfg.frame_len}"
        )
    return np.fft.fft(frame * cfg.window(), cfg.dft_len)


def apply_and_resynthesize(
    spectrum: np.ndarray, filt: SpectralFilter, cfg: FrameConfig
) -> np.ndarray:
    spectrum = np.asarray(spectrum, dtype=complex)
    if spectrum.shape != (cfg.dft_len,) or filt.dft_len != cfg.dft_len:
        raise ValueError("spectrum/filter length does not match dft_len")
    full = np.fft.ifft(filt.bins * spectrum)[: cfg.frame_len]
    # peak magnitude, not the 2-norm: squaring underflows for tiny frames
    peak = np.max(np.abs(full)) if full.size else 0.0
    residue = np.max(np.abs(full.imag)) if full.size else 0.0
    if residue > HERMITIAN_TOL * max(peak, np.finfo(float).tiny):
        raise ValueError(
            f"filter is not Hermitian: imaginary residue {residue:.3g} "
            f"against frame peak {peak:.3g}"
        )
    return full.real * cfg.window()


def overlap_add(frames, cfg: FrameConfig, out_len: int) -> np.ndarray:
    """Sum frames at multiples of the hop and divide by the Hann^2 overlap gain."""
    f = np.asarray(getattr(frames, "frames", frames), dtype=float)
    if f.ndim != 2 or f.shape[1] != cfg.frame_len:
        raise ValueError("frames do not match the frame geometry")
    n_frames, hop = f.shape[0], cfg.hop
    out = np.zeros((n_frames + 3, hop))
    parts = f.reshape(n_frames, 4, hop)
    for q in range(4):
        out[q : q + n_frames] += parts[:, q, :]
    out = out.reshape(-1) / OLA_GAIN
    if out_len > out.size:
        raise ValueError("out_len exceeds the overlap-added length")
    return out[:out_len]


FilterProvider = Union[
    Callable[[int], SpectralFilter], Sequence[SpectralFilter], SpectralFilter
]


def process_signal(signal, filters: FilterProvider, cfg: FrameConfig) -> np.ndarray:
    """Run segment, analyze, filter, resynthesize and overlap-add over a signal."""
    x = _as_samples(signal)
    fs = segment(x, cfg)
    if isinstance(filters, SpectralFilter):
        provider = lambda m: filters  # noqa: E731
    elif callable(filters):
        provider = filters
    else:
        provider = filters.__getitem__
    out = np.empty_like(fs.frames)
    for m in range(fs.count):
        out[m] = apply_and_resynthesize(analyze(fs.frames[m], cfg), provider(m), cfg)
    y = overlap_add(out, cfg, x.size)
    if hasattr(signal, "with_samples"):
        return signal.with_samples(y)
    return y


# -- batched half-spectrum path ---------------------------------------------


def analyze_frames(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Half spectra of every frame, shape ``(num_frames, n_bins)``."""
    frames = segment(x, cfg).frames
    return np.fft.rfft(frames * cfg.window(), cfg.dft_len, axis=1)


def resynthesize_frames(spectra: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Inverse of the half spectra, truncated and windowed."""
    y = np.fft.irfft(spectra, cfg.dft_len, axis=1)[:, : cfg.frame_len]
    return y * cfg.window()


def overlap_add_adjoint(grad: np.ndarray, n_frames: int, cfg: FrameConfig) -> np.ndarray:
    """Adjoint of ``overlap_add``: scatter a per-sample gradient back to frames."""
    padded = np.zeros((n_frames + 3) * cfg.hop)
    padded[: grad.size] = grad
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    return padded[idx] / OLA_GAIN


def resynthesis_adjoint(frame_grads: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Map output-frame gradients to half-spectrum adjoints.

    For a real-valued loss ``L`` and Hermitian spectra ``Y``, the derivative of
    ``L`` along any perturbation ``dY`` of the half spectrum equals
    ``Re(sum(dY * adjoint))`` with the returned ``adjoint``.
    """
    g = np.fft.rfft(frame_grads * cfg.window(), cfg.dft_len, axis=1)
    weight = np.full(cfg.n_bins, 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0
    return weight * np.conj(g) / cfg.dft_len
