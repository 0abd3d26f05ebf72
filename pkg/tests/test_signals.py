import warnings

import numpy as np
import pytest
from scipy.io import wavfile

from ddsp_phaser import signals as sig
from ddsp_phaser.signals import AudioBuffer, DatasetPair

FS = 44100.0


class TestBuffers:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            AudioBuffer([0.0, np.nan], FS)
        with pytest.raises(ValueError):
            AudioBuffer([0.0], 0.0)

    def test_slicing(self):
        b = AudioBuffer(np.arange(44100.0), FS)
        assert b.duration == 1.0
        assert len(b.seconds(0.5)) == 22050
        assert b.slice(10, 20).samples[0] == 10

    def test_pair_checks(self):
        a = AudioBuffer(np.zeros(10), FS)
        with pytest.raises(ValueError):
            DatasetPair(a, AudioBuffer(np.zeros(9), FS))
        with pytest.raises(ValueError):
            DatasetPair(a, AudioBuffer(np.zeros(10), 48000.0))


class TestChirpTrain:
    def test_impulse_spacing(self):
        x = sig.synth_chirp_train(0.2, FS, stages=0).samples
        nz = np.flatnonzero(x)
        assert np.all(np.diff(nz) == 1323)
        assert nz[0] == 0 and np.max(x) == 0.5

    def test_harmonic_flatness(self):
        x = sig.synth_chirp_train(3.0, FS).samples
        seg = x[10 * 1323 : 90 * 1323]  # whole periods in steady state
        spec = np.abs(np.fft.rfft(seg))
        harmonics = spec[::80]
        db = 20 * np.log10(harmonics / harmonics.max())
        assert db.max() - db.min() <= 0.1

    def test_dispersed(self):
        x = sig.synth_chirp_train(0.1, FS).samples
        assert np.count_nonzero(np.abs(x[:1323]) > 1e-3) > 100

    def test_duration_checked(self):
        with pytest.raises(ValueError):
            sig.synth_chirp_train(0.0, FS)

    def test_plucks(self):
        a = sig.synth_plucks(1.0, FS, seed=3)
        b = sig.synth_plucks(1.0, FS, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert np.max(np.abs(a.samples)) == pytest.approx(0.5)
        assert np.all(a.samples[: int(0.1 * FS)] == 0)

    def test_karplus_strong_recursion(self):
        burst = np.random.default_rng(0).uniform(-1, 1, 50)
        y = sig._karplus_strong(burst, 400)
        np.testing.assert_array_equal(y[:50], burst)
        n = np.arange(51, 400)
        np.testing.assert_allclose(y[n], 0.5 * 0.997 * (y[n - 50] + y[n - 51]), atol=1e-15)


class TestWav:
    def test_float32_bit_exact(self, tmp_path):
        x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32).astype(float)
        sig.write_wav(tmp_path / "a.wav", AudioBuffer(x, FS))
        y = sig.read_wav(tmp_path / "a.wav")
        np.testing.assert_array_equal(x, y.samples)
        assert y.sample_rate == FS

    def test_pcm16_scaling(self, tmp_path):
        wavfile.write(tmp_path / "a.wav", 44100, np.array([-32768, 0, 16384, 32767], dtype=np.int16))
        np.testing.assert_array_equal(sig.read_wav(tmp_path / "a.wav").samples, [-1.0, 0.0, 0.5, 32767 / 32768])

    @pytest.mark.parametrize("subtype,bits", [("pcm16", 16), ("pcm24", 24)])
    def test_integer_round_trip(self, tmp_path, subtype, bits):
        q = np.random.default_rng(1).integers(-(2 ** (bits - 1)), 2 ** (bits - 1), 500)
        x = q / 2.0 ** (bits - 1)
        sig.write_wav(tmp_path / "a.wav", AudioBuffer(x, FS), subtype)
        np.testing.assert_array_equal(sig.read_wav(tmp_path / "a.wav").samples, x)

    def test_stereo_warns(self, tmp_path):
        data = np.stack([np.full(10, 0.25), np.full(10, -0.5)], axis=1).astype(np.float32)
        wavfile.write(tmp_path / "s.wav", 44100, data)
        with pytest.warns(UserWarning, match="channel 0"):
            b = sig.read_wav(tmp_path / "s.wav")
        np.testing.assert_array_equal(b.samples, 0.25)

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFF1234WAVEjunk")
        with pytest.raises(ValueError):
            sig.read_wav(tmp_path / "bad.wav")

    def test_unknown_subtype(self, tmp_path):
        with pytest.raises(ValueError):
            sig.write_wav(tmp_path / "a.wav", AudioBuffer(np.zeros(4), FS), "pcm8")


class TestDataset:
    x = AudioBuffer(np.arange(10 * 441, dtype=float) / 1e4, FS)  # 0.1 s

    def test_split(self):
        train, test = sig.make_dataset(self.x, self.x, 0.06, test_seconds=0.03, label="DP-2")
        assert len(train) == 2646 and len(test) == 1323
        assert test.start_sample == 2646
        np.testing.assert_array_equal(test.input.samples, self.x.samples[2646:3969])
        assert train.label == "DP-2"

    def test_train_only(self):
        train, test = sig.make_dataset(self.x, self.x, 0.05)
        assert test is None and len(train) == 2205

    def test_calibration_replaces_input(self):
        cal = self.x.with_samples(-self.x.samples)
        train, _ = sig.make_dataset(self.x, self.x, 0.05, calibration=cal)
        np.testing.assert_array_equal(train.input.samples, -self.x.samples[:2205])
        np.testing.assert_array_equal(train.target.samples, self.x.samples[:2205])

    def test_offset(self):
        y = self.x.with_samples(np.concatenate([np.zeros(7), self.x.samples[:-7]]))
        train, _ = sig.make_dataset(self.x, y, 0.05, offset=7)
        np.testing.assert_array_equal(train.input.samples, train.target.samples)

    def test_mismatches(self):
        with pytest.raises(ValueError):
            sig.make_dataset(self.x, AudioBuffer(np.zeros(10), FS), 0.05)
        with pytest.raises(ValueError):
            sig.make_dataset(self.x, AudioBuffer(self.x.samples, 48000.0), 0.05)
        with pytest.raises(ValueError):
            sig.make_dataset(self.x, self.x, 1.0)

    def test_manifest(self, tmp_path):
        sig.write_wav(tmp_path / "in.wav", self.x)
        sig.write_wav(tmp_path / "out.wav", self.x)
        sig.write_manifest(
            tmp_path / "m.json",
            [{"label": "SS-A", "input": "in.wav", "target": "out.wav", "train_seconds": 0.05, "T0": 2.5}],
        )
        (entry,) = sig.load_manifest(tmp_path / "m.json")
        train, test = sig.dataset_from_manifest(entry)
        assert train.label == "SS-A" and train.metadata["T0"] == 2.5 and test is None
        assert len(train) == 2205

    def test_manifest_validation(self, tmp_path):
        (tmp_path / "m.json").write_text('{"datasets": [{"input": "a.wav"}]}')
        with pytest.raises(ValueError):
            sig.load_manifest(tmp_path / "m.json")


def test_seconds_to_samples():
    assert sig.seconds_to_samples(2.67, FS) == 117747
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert sig.seconds_to_samples(0.03, FS) == 1323
