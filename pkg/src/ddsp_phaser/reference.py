"""Analysis of continuous- and discrete-time phasers, and a digital phaser oracle.

The oracle renders a time-varying phaser sample by sample, with a triangle
LFO sweeping the break frequency of K identical first-order all-pass
sections and a fixed integer delay in the feedback loop.  It is used to make
training targets with known parameters.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .signals import AudioBuffer

log = logging.getLogger(__name__)

COMPLEX_INF = complex(np.inf, np.inf)
BLOWUP_TOL = 1e-12


@dataclass(frozen=True)
class ContinuousPhaserSpec:
    break_freq: float  # rad/s
    stages: int = 4
    g1: float = 1.0
    g2: float = 0.0

    def __post_init__(self):
        if self.break_freq < 0:
            raise ValueError("break_freq must be non-negative")
        if self.stages < 1:
            raise ValueError("stages must be a positive integer")
        if not 0.0 <= self.g2 < 1.0:
            raise ValueError("g2 must lie in [0, 1)")


@dataclass(frozen=True)
class DiscretePhaserSpec:
    break_freq: float  # rad/s
    stages: int = 4
    g1: float = 1.0
    g2: float = 0.0
    sample_rate: float = 44100.0
    feedback_delay: int = 1

    def __post_init__(self):
        if self.break_freq < 0:
            raise ValueError("break_freq must be non-negative")
        if self.stages < 1:
            raise ValueError("stages must be a positive integer")
        if abs(self.g2) >= 1.0:
            raise ValueError(f"|g2| = {abs(self.g2)} is unstable, need |g2| < 1")
        if self.feedback_delay < 0 or int(self.feedback_delay) != self.feedback_delay:
            raise ValueError("feedback_delay must be a non-negative integer")

    @property
    def period(self) -> float:
        return 1.0 / self.sample_rate


@dataclass(frozen=True)
class TriangleLfoSpec:
    """Symmetric triangle LFO; phase 0 sits at ``break_min``."""

    period: float  # seconds
    break_min: float = 4000.0  # rad/s
    break_max: float = 16000.0
    initial_phase: float = 0.0  # fraction of a period

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not 0 < self.break_min <= self.break_max:
            raise ValueError("need 0 < break_min <= break_max")
        if not 0.0 <= self.initial_phase < 1.0:
            raise ValueError("initial_phase must lie in [0, 1)")

    def shape(self, t) -> np.ndarray:
        """Unit triangle in [0, 1] at times ``t`` (0 at phase 0, 1 at half period)."""
        ph = np.mod(np.asarray(t, dtype=float) / self.period + self.initial_phase, 1.0)
        return 1.0 - np.abs(1.0 - 2.0 * ph)

    def break_freq(self, t) -> np.ndarray:
        return self.break_min + (self.break_max - self.break_min) * self.shape(t)


# -- continuous time ----------------------------------------------------------


def allpass_phase(omega, break_freq: float) -> np.ndarray:
    """Phase of the first-order analog all-pass: pi - 2 arctan(w / wb)."""
    return np.pi - 2.0 * np.arctan(np.asarray(omega, dtype=float) / break_freq)


def analog_allpass(s, break_freq: float):
    s = np.asarray(s, dtype=complex)
    return (s - break_freq) / (s + break_freq)


def _phaser_from_allpass(a_k, g1: float, g2):
    return g1 + a_k / (1.0 - g2 * a_k)


def continuous_response(spec: ContinuousPhaserSpec, omega) -> np.ndarray:
    """H(jw) for real angular frequencies ``omega``."""
    omega = np.asarray(omega, dtype=float)
    if spec.break_freq == 0:
        theta = np.zeros_like(omega)  # A(s) = 1 everywhere
    else:
        theta = allpass_phase(omega, spec.break_freq)
    a = np.exp(1j * theta)
    return _phaser_from_allpass(a**spec.stages, spec.g1, spec.g2)


def continuous_response_s(spec: ContinuousPhaserSpec, s) -> np.ndarray:
    """H evaluated at arbitrary complex frequencies ``s``."""
    a = analog_allpass(s, spec.break_freq)
    return _phaser_from_allpass(a**spec.stages, spec.g1, spec.g2)


def poles_zeros(spec: ContinuousPhaserSpec) -> tuple[np.ndarray, np.ndarray]:
    """Poles and zeros of the analog phaser in the s-plane.

    Uses the principal real K-th roots.  With ``g2 == 0`` the poles sit at the
    open-loop positions ``-wb``.
    """
    K, wb, g1, g2 = spec.stages, spec.break_freq, spec.g1, spec.g2
    k = np.arange(K)
    if g2 == 0:
        poles = np.full(K, -wb, dtype=complex)
    else:
        lam = np.exp(2j * np.pi * k / K) / g2 ** (1.0 / K)
        poles = wb * (1 + lam) / (1 - lam)
    denom = 1.0 - g1 * g2
    if denom == 0:
        raise ValueError("g1 * g2 == 1 puts the zeros at infinity")
    ratio = g1 / denom
    if ratio < 0:
        raise ValueError("g1 / (1 - g1 g2) must be non-negative for a real root")
    beta = ratio ** (1.0 / K) * np.exp(1j * np.pi * (2 * k + 1) / K)
    with np.errstate(divide="ignore", invalid="ignore"):
        zeros = wb * (1 + beta) / (1 - beta)
    return poles, zeros


def root_locus(g1: float, break_freq: float, g2_values, stages: int = 4) -> list[dict]:
    rows = []
    for g2 in g2_values:
        poles, zeros = poles_zeros(ContinuousPhaserSpec(break_freq, stages, g1, g2))
        for pz, zz in zip(poles, zeros):
            rows.append(
                {
                    "g2": float(g2),
                    "pole_re": pz.real,
                    "pole_im": pz.imag,
                    "zero_re": zz.real,
                    "zero_im": zz.imag,
                }
            )
    return rows


# -- discrete time ------------------------------------------------------------


def allpass_coefficient(break_freq, sample_rate: float):
    """Bilinear-transform all-pass coefficient (1 - tan(wb T/2)) / (1 + tan(wb T/2))."""
    wb = np.asarray(break_freq, dtype=float)
    if np.any(wb < 0) or np.any(wb >= np.pi * sample_rate):
        raise ValueError(
            "break frequency must lie in [0, pi * sample_rate) rad/s"
        )
    t = np.tan(wb / (2.0 * sample_rate))
    p = (1.0 - t) / (1.0 + t)
    return float(p) if p.ndim == 0 else p


def digital_allpass(p: float, omega) -> np.ndarray:
    """A_d(e^{jw}) for normalised angular frequency ``omega`` (rad/sample)."""
    zi = np.exp(-1j * np.asarray(omega, dtype=float))
    return (p - zi) / (1.0 - p * zi)


def discrete_response(spec: DiscretePhaserSpec, omega) -> np.ndarray:
    """H_d(e^{jw}) on normalised frequencies ``omega`` in rad/sample.

    Bins where the feedback denominator vanishes are set to ``COMPLEX_INF``.
    """
    omega = np.asarray(omega, dtype=float)
    p = allpass_coefficient(spec.break_freq, spec.sample_rate)
    a_k = digital_allpass(p, omega) ** spec.stages
    den = 1.0 - spec.g2 * np.exp(-1j * omega * spec.feedback_delay) * a_k
    bad = np.abs(den) < BLOWUP_TOL
    if np.any(bad):
        log.warning("denominator blow-up at %d bins", int(bad.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        h = spec.g1 + a_k / den
    h[bad] = COMPLEX_INF
    return h


def response_rows(h: np.ndarray, freq_hz) -> list[dict]:
    mag = np.abs(h)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return [
        {"frequency_hz": float(f), "magnitude_db": float(m), "phase_rad": float(ph)}
        for f, m, ph in zip(freq_hz, db, np.angle(h))
    ]


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# -- time-domain oracle --------------------------------------------------------


@njit(cache=True)
def _render(x, p, g1, g2, stages, delay):
    n = x.size
    y = np.empty(n)
    state = np.zeros(stages)
    ring = np.zeros(delay)
    pos = 0
    for i in range(n):
        pi = p[i]
        v = x[i] + g2 * ring[pos]
        for k in range(stages):
            # transposed direct form II: out = p*in + s; s = p*out - in
            out = pi * v + state[k]
            state[k] = pi * out - v
            v = out
        ring[pos] = v
        pos += 1
        if pos == delay:
            pos = 0
        y[i] = g1 * x[i] + v
    return y


def render_digital_phaser(
    x: AudioBuffer, spec: DiscretePhaserSpec, lfo: TriangleLfoSpec, start_time: float = 0.0
) -> AudioBuffer:
    """Render the time-varying digital phaser sample by sample.

    Coefficients follow the LFO every sample; the filter states persist.
    """
    if x.sample_rate != spec.sample_rate:
        raise ValueError("input sample rate differs from the phaser sample rate")
    if spec.feedback_delay < 1:
        raise ValueError("a recursive render needs feedback_delay >= 1")
    t = start_time + np.arange(len(x)) / spec.sample_rate
    p = allpass_coefficient(lfo.break_freq(t), spec.sample_rate)
    y = _render(
        np.ascontiguousarray(x.samples),
        np.atleast_1d(p).astype(float),
        float(spec.g1),
        float(spec.g2),
        int(spec.stages),
        int(spec.feedback_delay),
    )
    return AudioBuffer(y, x.sample_rate)


def feedback_poles(spec: DiscretePhaserSpec, break_freq: float | None = None) -> np.ndarray:
    """Poles of H_d(z): roots of (1 - p z^-1)^K - g2 z^-phi (p - z^-1)^K."""
    from numpy.polynomial import polynomial as P

    wb = spec.break_freq if break_freq is None else break_freq
    p = allpass_coefficient(wb, spec.sample_rate)
    a = P.polypow([1.0, -p], spec.stages)
    b = spec.g2 * P.polymul(np.eye(spec.feedback_delay + 1)[-1], P.polypow([p, -1.0], spec.stages))
    den = P.polysub(a, b)
    w = P.polyroots(den)  # roots in w = z^-1
    return 1.0 / w[w != 0]


def decay_time(
    spec: DiscretePhaserSpec,
    break_freq: float | None = None,
    level_db: float = -60.0,
    method: str = "pole",
    max_seconds: float = 1.0,
) -> float:
    """Time for the phaser's impulse response to decay by ``level_db``.

    ``method="pole"`` uses the decay rate of the slowest pole, which is what
    governs the tail.  ``method="envelope"`` renders the impulse response with
    the LFO frozen and returns the last time its magnitude exceeds
    ``level_db`` relative to its peak.
    """
    wb = spec.break_freq if break_freq is None else break_freq
    if method == "pole":
        radius = np.max(np.abs(feedback_poles(spec, wb)))
        if radius >= 1.0:
            return math.inf
        return float(math.log(10.0 ** (-level_db / 20.0)) / (-math.log(radius)) / spec.sample_rate)
    if method != "envelope":
        raise ValueError(f"unknown method {method!r}")
    n = int(max_seconds * spec.sample_rate)
    impulse = np.zeros(n)
    impulse[0] = 1.0
    frozen = TriangleLfoSpec(1.0, wb, wb)
    # the dry path is an impulse at n = 0 and would dominate the peak
    wet = DiscretePhaserSpec(wb, spec.stages, 0.0, spec.g2, spec.sample_rate, spec.feedback_delay)
    h = render_digital_phaser(AudioBuffer(impulse, spec.sample_rate), wet, frozen).samples
    env = np.maximum.accumulate(np.abs(h)[::-1])[::-1]
    thresh = env[0] * 10.0 ** (level_db / 20.0)
    above = np.nonzero(env > thresh)[0]
    return float((above[-1] + 1) / spec.sample_rate)
