import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddsp_phaser import spectral
from ddsp_phaser.signals import AudioBuffer
from ddsp_phaser.spectral import FrameConfig, SpectralFilter

FS = 44100.0


def interior(x, cfg):
    return x[cfg.frame_len : x.size - cfg.frame_len]


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


class TestFrameConfig:
    def test_40ms_geometry(self):
        cfg = FrameConfig.from_ms(40, FS)
        assert cfg.frame_len == 1764
        assert cfg.hop == 441
        assert cfg.dft_len == 2048
        assert cfg.frame_rate == pytest.approx(100.0)

    @pytest.mark.parametrize("ms", [10, 20, 40, 80, 160, 37.3, 5.01])
    def test_invariants(self, ms):
        cfg = FrameConfig.from_ms(ms, FS)
        assert cfg.frame_len % 4 == 0 and cfg.frame_len > 0
        assert cfg.hop * 4 == cfg.frame_len
        assert cfg.dft_len & (cfg.dft_len - 1) == 0
        assert cfg.dft_len >= cfg.frame_len
        assert cfg.dft_len < 2 * cfg.frame_len
        assert cfg.frame_rate == FS / cfg.hop

    def test_truncates_to_multiple_of_four(self):
        # floor(0.010 * 44100) = 441 -> 440
        cfg = FrameConfig.from_ms(10, FS)
        assert cfg.frame_len == 440 and cfg.hop == 110 and cfg.dft_len == 512

    def test_too_short(self):
        with pytest.raises(ValueError):
            FrameConfig(1e-5, FS)


class TestSegment:
    cfg = FrameConfig.from_ms(10, FS)

    def test_exact_multiple(self):
        x = np.arange(4 * self.cfg.hop, dtype=float) + 1
        fs = spectral.segment(x, self.cfg)
        assert fs.count == 4
        np.testing.assert_array_equal(fs.frames[0], x[: self.cfg.frame_len])

    def test_one_extra_sample(self):
        x = np.ones(4 * self.cfg.hop + 1)
        fs = spectral.segment(x, self.cfg)
        assert fs.count == 5
        assert fs.frames[4][0] == 1.0
        assert np.all(fs.frames[4][1:] == 0.0)

    def test_frame_starts(self):
        x = np.arange(1000, dtype=float)
        fs = spectral.segment(AudioBuffer(x), self.cfg)
        for m in range(fs.count):
            assert fs.frames[m][0] == (x[m * self.cfg.hop] if m * self.cfg.hop < x.size else 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            spectral.segment(np.zeros(0), self.cfg)


class TestAnalyze:
    cfg = FrameConfig.from_ms(2, 4000.0)  # N = 8, N' = 8

    def test_zero_frame(self):
        np.testing.assert_array_equal(spectral.analyze(np.zeros(self.cfg.frame_len), self.cfg), 0)

    def test_constant_frame_is_window_spectrum(self):
        cfg = self.cfg
        assert cfg.frame_len == cfg.dft_len
        X = spectral.analyze(np.ones(cfg.frame_len), cfg)
        np.testing.assert_allclose(X, dft_matrix(cfg.dft_len) @ spectral.hann(cfg.frame_len), atol=1e-12)

    def test_centre_impulse(self):
        cfg = FrameConfig.from_ms(40, FS)
        x = np.zeros(cfg.frame_len)
        x[cfg.frame_len // 2] = 1.0
        X = spectral.analyze(x, cfg)
        # periodic Hann peaks at exactly 1 in the centre
        np.testing.assert_allclose(np.abs(X), spectral.hann(cfg.frame_len)[cfg.frame_len // 2], atol=1e-12)

    def test_matches_dft_matrix(self):
        cfg = FrameConfig(0.003, 8000.0)  # N = 24, N' = 32
        rng = np.random.default_rng(0)
        x = rng.standard_normal(cfg.frame_len)
        Q = np.vstack([np.diag(spectral.hann(cfg.frame_len)), np.zeros((cfg.dft_len - cfg.frame_len, cfg.frame_len))])
        expected = dft_matrix(cfg.dft_len) @ Q @ x
        np.testing.assert_allclose(spectral.analyze(x, cfg), expected, atol=1e-10)

    def test_parseval(self):
        cfg = FrameConfig.from_ms(20, FS)
        x = np.random.default_rng(1).standard_normal(cfg.frame_len)
        X = spectral.analyze(x, cfg)
        lhs = np.sum(np.abs(X) ** 2) / cfg.dft_len
        rhs = np.sum((x * cfg.window()) ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spectral.analyze(np.zeros(3), self.cfg)


class TestResynthesize:
    cfg = FrameConfig.from_ms(20, FS)

    def test_identity_gives_hann_squared(self):
        x = np.random.default_rng(2).standard_normal(self.cfg.frame_len)
        y = spectral.apply_and_resynthesize(
            spectral.analyze(x, self.cfg), SpectralFilter.identity(self.cfg.dft_len), self.cfg
        )
        np.testing.assert_allclose(y, x * self.cfg.window() ** 2, atol=1e-12)

    def test_pure_delay(self):
        cfg = self.cfg
        d = 37
        assert d < cfg.dft_len - cfg.frame_len
        x = np.random.default_rng(3).standard_normal(cfg.frame_len)
        k = np.arange(cfg.dft_len)
        filt = SpectralFilter(np.exp(-2j * np.pi * k * d / cfg.dft_len))
        y = spectral.apply_and_resynthesize(spectral.analyze(x, cfg), filt, cfg)
        shifted = np.zeros(cfg.frame_len)
        shifted[d:] = (x * cfg.window())[:-d]
        np.testing.assert_allclose(y, shifted * cfg.window(), atol=1e-12)

    def test_non_hermitian_rejected(self):
        cfg = self.cfg
        bins = np.ones(cfg.dft_len, dtype=complex)
        bins[5] = 1j
        x = np.random.default_rng(4).standard_normal(cfg.frame_len)
        with pytest.raises(ValueError, match="Hermitian"):
            spectral.apply_and_resynthesize(spectral.analyze(x, cfg), SpectralFilter(bins), cfg)

    def test_from_half_is_hermitian(self):
        half = np.random.default_rng(5).standard_normal(self.cfg.n_bins) * (1 + 0.5j)
        filt = SpectralFilter.from_half(half, self.cfg.dft_len)
        assert filt.hermitian_error() == 0.0


class TestOverlapAdd:
    cfg = FrameConfig.from_ms(10, FS)

    def test_single_frame_scaled(self):
        cfg = self.cfg
        frames = np.zeros((6, cfg.frame_len))
        frames[2] = np.random.default_rng(6).standard_normal(cfg.frame_len)
        y = spectral.overlap_add(frames, cfg, 9 * cfg.hop)
        expected = np.zeros(9 * cfg.hop)
        expected[2 * cfg.hop : 2 * cfg.hop + cfg.frame_len] = frames[2] * 2 / 3
        np.testing.assert_allclose(y, expected, atol=1e-15)

    def test_constant_signal(self):
        cfg = self.cfg
        x = np.full(20 * cfg.hop, 0.3)
        y = spectral.process_signal(x, SpectralFilter.identity(cfg.dft_len), cfg)
        np.testing.assert_allclose(interior(y, cfg), 0.3, rtol=1e-12)

    def test_hann_squared_overlap_sum(self):
        w2 = spectral.hann(40) ** 2
        total = sum(np.roll(w2, 10 * q) for q in range(4))
        np.testing.assert_allclose(total, spectral.OLA_GAIN, atol=1e-14)


def _lag_weight(cfg, k, n):
    """Brute-force sum over frames of w(j) w(j - k) at output sample ``n``."""
    w = cfg.window()
    total = 0.0
    for m in range(max(0, n // cfg.hop - 4), n // cfg.hop + 1):
        j = n - m * cfg.hop
        if 0 <= j < cfg.frame_len and 0 <= j - k < cfg.frame_len:
            total += w[j] * w[j - k]
    return total / spectral.OLA_GAIN


def framed_fir_oracle(x, taps, cfg):
    """Direct convolution with per-sample lag weights from the two windows.

    The weights only depend on the output position modulo the hop, away from
    the signal edges.
    """
    base = 5 * cfg.frame_len
    y = np.zeros(x.size)
    for r in range(cfg.hop):
        weights = [_lag_weight(cfg, k, base + r) for k in range(taps.size)]
        full = np.convolve(x, taps * np.array(weights))[: x.size]
        y[(base + r) % cfg.hop :: cfg.hop] = full[(base + r) % cfg.hop :: cfg.hop]
    return y


class TestProcessSignal:
    @pytest.mark.parametrize("ms", [10, 20, 40, 80, 160])
    def test_identity_reconstruction(self, ms):
        cfg = FrameConfig.from_ms(ms, FS)
        x = np.random.default_rng(7).standard_normal(int(FS))
        y = spectral.process_signal(x, SpectralFilter.identity(cfg.dft_len), cfg)
        assert y.size == x.size
        assert rel_err(interior(y, cfg), interior(x, cfg)) <= 1e-9

    def test_fir_matches_lag_weighted_convolution(self):
        # Windowing before and after filtering weights each FIR tap by
        # sum_m w(j) w(j - k) / 1.5, so the oracle is a lag-weighted convolution.
        cfg = FrameConfig.from_ms(10, FS)
        rng = np.random.default_rng(8)
        taps = rng.standard_normal(64)
        assert cfg.dft_len >= cfg.frame_len + taps.size - 1
        x = rng.standard_normal(int(0.25 * FS))
        y = spectral.process_signal(x, SpectralFilter.from_fir(taps, cfg.dft_len), cfg)
        ref = framed_fir_oracle(x, taps, cfg)
        assert rel_err(interior(y, cfg), interior(ref, cfg)) <= 1e-9

    def test_fir_vs_plain_convolution_gap(self):
        # Plain convolution differs by the lag weighting, of order (k / N)^2.
        cfg = FrameConfig.from_ms(40, FS)
        rng = np.random.default_rng(8)
        taps = rng.standard_normal(64)
        x = rng.standard_normal(int(0.5 * FS))
        y = spectral.process_signal(x, SpectralFilter.from_fir(taps, cfg.dft_len), cfg)
        ref = np.convolve(x, taps)[: x.size]
        assert 1e-4 < rel_err(interior(y, cfg), interior(ref, cfg)) < 1e-2

    def test_frame_varying_filters(self):
        cfg = FrameConfig.from_ms(10, FS)
        x = np.random.default_rng(9).standard_normal(40 * cfg.hop)
        gains = lambda m: SpectralFilter(np.full(cfg.dft_len, 1.0 + m, dtype=complex))  # noqa: E731
        y = spectral.process_signal(x, gains, cfg)
        early = np.linalg.norm(y[5 * cfg.hop : 6 * cfg.hop]) / np.linalg.norm(x[5 * cfg.hop : 6 * cfg.hop])
        late = np.linalg.norm(y[30 * cfg.hop : 31 * cfg.hop]) / np.linalg.norm(x[30 * cfg.hop : 31 * cfg.hop])
        assert late > 3 * early

    def test_audio_buffer_in_out(self):
        cfg = FrameConfig.from_ms(10, FS)
        buf = AudioBuffer(np.random.default_rng(10).standard_normal(5000), FS)
        out = spectral.process_signal(buf, SpectralFilter.identity(cfg.dft_len), cfg)
        assert isinstance(out, AudioBuffer) and len(out) == len(buf)

    def test_batched_path_matches_reference_path(self):
        cfg = FrameConfig.from_ms(20, FS)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(9000)
        halves = rng.standard_normal((cfg.num_frames(x.size), cfg.n_bins)) + 1j * rng.standard_normal(
            (cfg.num_frames(x.size), cfg.n_bins)
        )
        slow = spectral.process_signal(x, lambda m: SpectralFilter.from_half(halves[m], cfg.dft_len), cfg)
        X = spectral.analyze_frames(x, cfg)
        fast = spectral.overlap_add(spectral.resynthesize_frames(halves * X, cfg), cfg, x.size)
        np.testing.assert_allclose(fast, slow, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    ms=st.floats(min_value=2.0, max_value=60.0),
    n=st.integers(min_value=1, max_value=6000),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_linearity(ms, n, a, b, seed):
    cfg = FrameConfig.from_ms(ms, 8000.0)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    filt = SpectralFilter.from_half(rng.standard_normal(cfg.n_bins) + 1j * rng.standard_normal(cfg.n_bins), cfg.dft_len)
    lhs = spectral.process_signal(a * x + b * y, filt, cfg)
    rhs = a * spectral.process_signal(x, filt, cfg) + b * spectral.process_signal(y, filt, cfg)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.max(np.abs(rhs))))


@settings(max_examples=25, deadline=None)
@given(ms=st.floats(min_value=1.0, max_value=50.0), seed=st.integers(0, 2**32 - 1))
def test_cola_property(ms, seed):
    cfg = FrameConfig.from_ms(ms, 8000.0)
    x = np.random.default_rng(seed).standard_normal(3 * cfg.frame_len + 17)
    y = spectral.process_signal(x, SpectralFilter.identity(cfg.dft_len), cfg)
    assert rel_err(interior(y, cfg), interior(x, cfg)) <= 1e-9


def test_overlap_add_adjoint():
    cfg = FrameConfig.from_ms(5, 8000.0)
    rng = np.random.default_rng(12)
    n = 1000
    frames = rng.standard_normal((cfg.num_frames(n), cfg.frame_len))
    g = rng.standard_normal(n)
    lhs = g @ spectral.overlap_add(frames, cfg, n)
    rhs = np.sum(frames * spectral.overlap_add_adjoint(g, frames.shape[0], cfg))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_hermitian_check_tiny_frames():
    # the 2-norm of a 1e-170 frame underflows to 0; the check must not trip on it
    cfg = FrameConfig(0.002, 8000.0)
    x = 1e-170 * np.random.default_rng(0).standard_normal(40)
    filt = SpectralFilter(np.fft.fft(np.r_[0.5, -0.25, np.zeros(cfg.dft_len - 2)]))
    out = spectral.process_signal(x, filt, cfg)
    assert np.all(np.isfinite(out))
