"""Audio buffers, synthetic excitation signals, WAV I/O and dataset pairing."""

from __future__ import annotations

import json
import logging
import math
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 44100.0
PEAK_LEVEL = 0.5


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)

    def slice(self, start: int, stop: Optional[int] = None) -> "AudioBuffer":
        return AudioBuffer(self.samples[start:stop].copy(), self.sample_rate)

    def seconds(self, start: float, stop: Optional[float] = None) -> "AudioBuffer":
        a = int(round(start * self.sample_rate))
        b = None if stop is None else int(round(stop * self.sample_rate))
        return self.slice(a, b)


@dataclass
class DatasetPair:
    """Time-aligned input/target pair.

    ``start_sample`` is the position of the pair within the continuous
    recording it was cut from; the model uses it to keep its LFO phase
    consistent between training and test segments.
    """

    input: AudioBuffer
    target: AudioBuffer
    label: str = ""
    start_sample: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.input) != len(self.target):
            raise ValueError(
                f"input and target lengths differ ({len(self.input)} vs {len(self.target)})"
            )
        if self.input.sample_rate != self.target.sample_rate:
            raise ValueError("input and target sample rates differ")

    @property
    def sample_rate(self) -> float:
        return self.input.sample_rate

    def __len__(self) -> int:
        return len(self.input)


def _peak_normalize(x: np.ndarray, level: float = PEAK_LEVEL) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x if peak == 0 else x * (level / peak)


def allpass_cascade(x: np.ndarray, p: float, stages: int) -> np.ndarray:
    """Filter through ``stages`` identical first-order all-pass sections."""
    y = np.asarray(x, dtype=float)
    for _ in range(stages):
        y = sps.lfilter([p, -1.0], [1.0, -p], y)
    return y


def synth_chirp_train(
    duration: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    period: float = 0.030,
    stages: int = 64,
    p: float = 0.9,
) -> AudioBuffer:
    """Unit impulse train dispersed into chirps by an all-pass cascade."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    spacing = int(round(period * sample_rate))
    x = np.zeros(n)
    x[::spacing] = 1.0
    x = allpass_cascade(x, p, stages)
    return AudioBuffer(_peak_normalize(x), sample_rate)


def synth_plucks(
    duration: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    seed: int = 0,
    notes_per_second: float = 3.0,
    lead_in: float = 0.1,
) -> AudioBuffer:
    """Karplus-Strong plucked-string notes, a stand-in for DI guitar.

    The first ``lead_in`` seconds are silent so that frame-edge effects at the
    start of a segment do not contribute to a held-out error.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    start = int(round(lead_in * sample_rate))
    step = int(round(sample_rate / notes_per_second))
    note_len = int(round(2.0 * sample_rate))
    for onset in range(start, n, step):
        f0 = 82.41 * 2.0 ** (rng.integers(0, 30) / 12.0)
        delay = max(int(round(sample_rate / f0)), 2)
        length = min(note_len, n - onset)
        note = _karplus_strong(rng.uniform(-1.0, 1.0, delay), length)
        out[onset : onset + length] += rng.uniform(0.5, 1.0) * note
    return AudioBuffer(_peak_normalize(out), sample_rate)


def _karplus_strong(burst: np.ndarray, length: int, loss: float = 0.997) -> np.ndarray:
    # y[n] = x[n] + loss/2 * (y[n-d] + y[n-d-1]), evaluated one period at a time
    d = burst.size
    y = np.zeros(length + d + 1)
    y[d + 1 : 2 * d + 1] = burst[: max(0, min(d, length))]
    for start in range(2 * d + 1, length + d + 1, d):
        stop = min(start + d, length + d + 1)
        k = stop - start
        y[start:stop] = 0.5 * loss * (y[start - d : start - d + k] + y[start - d - 1 : start - d - 1 + k])
    return y[d + 1 :]


# -- WAV --------------------------------------------------------------------

_SUBTYPES = ("float32", "pcm16", "pcm24")


def read_wav(path) -> AudioBuffer:
    """Read a mono WAV file into [-1, 1) floats.

    Multichannel files are reduced to channel 0 with a warning.
    """
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise ValueError(f"unreadable WAV file {path}: {exc}") from exc
    if data.ndim == 2:
        warnings.warn(
            f"{path}: {data.shape[1]} channels, using channel 0 only", stacklevel=2
        )
        data = data[:, 0]
    if data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(float)
    elif data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        x = data.astype(float) / 2147483648.0
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    return AudioBuffer(x, float(rate))


def write_wav(path, buffer: AudioBuffer, subtype: str = "float32") -> None:
    if subtype not in _SUBTYPES:
        raise ValueError(f"subtype must be one of {_SUBTYPES}")
    rate = int(round(buffer.sample_rate))
    x = buffer.samples
    if subtype == "float32":
        wavfile.write(str(path), rate, x.astype(np.float32))
        return
    if np.max(np.abs(x), initial=0.0) > 1.0:
        log.warning("clipping %s while writing integer PCM", path)
    if subtype == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
        wavfile.write(str(path), rate, q)
        return
    q = np.clip(np.round(x * 8388608.0), -8388608, 8388607).astype("<i4")
    raw = q.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(rate)
        w.writeframes(raw)


# -- datasets ---------------------------------------------------------------

AudioSource = Union[str, Path, AudioBuffer]


def _load(src: AudioSource) -> AudioBuffer:
    return src if isinstance(src, AudioBuffer) else read_wav(src)


def make_dataset(
    input_src: AudioSource,
    target_src: AudioSource,
    train_seconds: float,
    test_seconds: Optional[float] = None,
    test_start: Optional[float] = None,
    calibration: Optional[AudioSource] = None,
    offset: int = 0,
    label: str = "",
    metadata: Optional[dict] = None,
    length_tolerance: float = 0.05,
) -> tuple[DatasetPair, Optional[DatasetPair]]:
    """Cut aligned train/test pairs from one continuous recording.

    When a calibration (bypass) recording is given it replaces the nominal
    input, so the model sees the recording chain on both sides.  ``offset``
    delays the target by that many samples relative to the input (negative
    values advance it).  Training audio starts at time zero; the test segment
    starts at ``test_start`` seconds, or immediately after the training audio.
    """
    x = _load(calibration if calibration is not None else input_src)
    y = _load(target_src)
    if x.sample_rate != y.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {x.sample_rate} vs {y.sample_rate} (no resampling)"
        )
    fs = x.sample_rate
    xs, ys = x.samples, y.samples
    if offset > 0:
        ys = ys[offset:]
    elif offset < 0:
        xs = xs[-offset:]
    if abs(xs.size - ys.size) > length_tolerance * fs:
        raise ValueError(
            f"input and target lengths differ by {abs(xs.size - ys.size)} samples"
        )
    n = min(xs.size, ys.size)
    xs, ys = xs[:n], ys[:n]
    meta = dict(metadata or {})

    n_train = int(round(train_seconds * fs))
    if n_train < 1 or n_train > n:
        raise ValueError("train_seconds outside the available audio")
    train = DatasetPair(
        AudioBuffer(xs[:n_train].copy(), fs),
        AudioBuffer(ys[:n_train].copy(), fs),
        label=label,
        start_sample=0,
        metadata=meta,
    )
    if test_seconds is None and test_start is None:
        return train, None
    a = n_train if test_start is None else int(round(test_start * fs))
    b = n if test_seconds is None else min(n, a + int(round(test_seconds * fs)))
    if b <= a:
        raise ValueError("empty test segment")
    test = DatasetPair(
        AudioBuffer(xs[a:b].copy(), fs),
        AudioBuffer(ys[a:b].copy(), fs),
        label=label,
        start_sample=a,
        metadata=meta,
    )
    return train, test


def load_manifest(path) -> list[dict]:
    """Read a dataset manifest: ``{"datasets": [{label, input, target, ...}]}``.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc.get("datasets")
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest needs a 'datasets' list")
    out = []
    for e in entries:
        if "input" not in e or "target" not in e:
            raise ValueError(f"{path}: every dataset needs 'input' and 'target'")
        e = dict(e)
        for key in ("input", "target", "calibration"):
            if e.get(key) is not None and not Path(e[key]).is_absolute():
                e[key] = str(path.parent / e[key])
        out.append(e)
    return out


def dataset_from_manifest(entry: dict) -> tuple[DatasetPair, Optional[DatasetPair]]:
    meta = dict(entry.get("metadata", {}))
    for key in ("T0", "f0"):
        if key in entry:
            meta[key] = entry[key]
    return make_dataset(
        entry["input"],
        entry["target"],
        train_seconds=entry.get("train_seconds", 2.67),
        test_seconds=entry.get("test_seconds"),
        test_start=entry.get("test_start"),
        calibration=entry.get("calibration"),
        offset=int(entry.get("offset", 0)),
        label=entry.get("label", ""),
        metadata=meta,
    )


def write_manifest(path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"datasets": entries}, indent=2) + "\n")


def seconds_to_samples(seconds: float, sample_rate: float) -> int:
    return int(math.floor(seconds * sample_rate + 1e-9))
