"""Digital-phaser datasets and the frame-size, LFO-rate and inference-window sweeps.

Every sweep returns a list of flat dicts, one per grid point, ready for
:func:`ddsp_phaser.trainer.write_rows`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import reference as ref
from .model import ModelHyper, ModelParams
from .signals import AudioBuffer, DatasetPair, make_dataset, synth_chirp_train, synth_plucks
from .spectral import FrameConfig
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DpConfig:
    """Digital-phaser target settings and the layout of the synthetic recording.

    The recording is a chirp train for ``train_seconds``, ``gap_seconds`` of
    silence, then ``test_seconds`` of plucked notes, all rendered through the
    reference phaser in one pass so the LFO phase is continuous.
    """

    period: float = 2.0
    g1: float = 1.0
    g2: float = 0.7
    delay: int = 1
    stages: int = 4
    break_min: float = 4000.0
    break_max: float = 16000.0
    train_seconds: float = 2.67
    gap_seconds: float = 0.3
    test_seconds: float = 8.0
    sample_rate: float = 44100.0
    pluck_seed: int = 1

    @property
    def label(self) -> str:
        return f"DP-{self.period:g}"

    @property
    def test_start(self) -> float:
        return self.train_seconds + self.gap_seconds

    def phaser(self) -> tuple[ref.DiscretePhaserSpec, ref.TriangleLfoSpec]:
        spec = ref.DiscretePhaserSpec(self.break_min, self.stages, self.g1, self.g2, self.sample_rate, self.delay)
        return spec, ref.TriangleLfoSpec(self.period, self.break_min, self.break_max)


def dp_input(cfg: DpConfig) -> AudioBuffer:
    fs = cfg.sample_rate
    chirp = synth_chirp_train(cfg.train_seconds + cfg.gap_seconds, fs).samples
    chirp[int(round(cfg.train_seconds * fs)) :] = 0.0
    parts = [chirp]
    if cfg.test_seconds > 0:
        parts.append(synth_plucks(cfg.test_seconds, fs, seed=cfg.pluck_seed).samples)
    return AudioBuffer(np.concatenate(parts), fs)


def dp_recording(cfg: DpConfig) -> tuple[AudioBuffer, AudioBuffer]:
    """Input and oracle target for one digital-phaser configuration."""
    x = dp_input(cfg)
    spec, lfo = cfg.phaser()
    return x, ref.render_digital_phaser(x, spec, lfo)


def dp_dataset(cfg: DpConfig = DpConfig()) -> tuple[DatasetPair, Optional[DatasetPair]]:
    x, y = dp_recording(cfg)
    meta = {"T0": cfg.period, "f0": 1.0 / cfg.period, "g2": cfg.g2, "delay": cfg.delay}
    test = {"test_start": cfg.test_start} if cfg.test_seconds > 0 else {}
    return make_dataset(x, y, cfg.train_seconds, label=cfg.label, metadata=meta, **test)


def truncate_to_cycles(pair: DatasetPair, period: float, cycles: float = 3.0) -> DatasetPair:
    """Shorten a training pair to about ``cycles`` LFO periods."""
    n = min(len(pair), int(round(cycles * period * pair.sample_rate)))
    return replace(pair, input=pair.input.slice(0, n), target=pair.target.slice(0, n))


def rate_sweep_windows(period: float, bands: Sequence[int] = range(11)) -> list[float]:
    """Window lengths in seconds, ``T0 * 2**(b/2) / 100``."""
    return [period * 2.0 ** (b / 2.0) / 100.0 for b in bands]


def _result_row(report, hyper: ModelHyper, test: Optional[DatasetPair]) -> dict:
    learned = report.learned_summary()
    best = report.best
    cfg = hyper.frame_cfg
    return {
        "window_ms": 1000.0 * cfg.window_seconds,
        "frame_len": cfg.frame_len,
        "hop": cfg.hop,
        "best_restart": report.best_index,
        "train_esr": best.losses[-1],
        "test_esr": report.eval_esr if test is not None else math.nan,
        "f0_hz": learned["f0_hz"],
        "g1": learned["g1"],
        "g2": learned["g2"],
        "phi": learned["phi"],
        "diverged": sum(r.status != "ok" for r in report.restarts),
        "seconds": report.seconds,
    }


def frame_sweep(
    windows_ms: Sequence[float],
    train_cfg: TrainConfig,
    dp: DpConfig = DpConfig(),
    data: Optional[tuple[DatasetPair, Optional[DatasetPair]]] = None,
) -> list[dict]:
    """Train one model per window length on the same dataset."""
    train_pair, test_pair = data if data is not None else dp_dataset(dp)
    rows = []
    for w in windows_ms:
        hyper = ModelHyper(FrameConfig.from_ms(w, train_pair.sample_rate))
        log.info("frame sweep: W = %g ms", w)
        report = train(train_pair, hyper, train_cfg, test_pair)
        rows.append({"label": train_pair.label, **_result_row(report, hyper, test_pair)})
    return rows


def rate_sweep(
    periods: Sequence[float],
    train_cfg: TrainConfig,
    bands: Sequence[int] = range(11),
    dp: DpConfig = DpConfig(train_seconds=10.0),
) -> list[dict]:
    """For each LFO period, train over the window schedule ``T0 2^(b/2) / 100``."""
    rows = []
    for period in periods:
        cfg = replace(dp, period=period)
        train_pair, test_pair = dp_dataset(cfg)
        for b, w in zip(bands, rate_sweep_windows(period, bands)):
            frame = FrameConfig(w, cfg.sample_rate)
            if frame.frame_len < 4 or frame.num_frames(len(train_pair)) < 2:
                log.warning("rate sweep: skipping W = %g s for T0 = %g s", w, period)
                continue
            hyper = ModelHyper(frame)
            log.info("rate sweep: T0 = %g s, b = %d, W = %g ms", period, b, 1000 * w)
            report = train(train_pair, hyper, train_cfg, test_pair)
            row = _result_row(report, hyper, test_pair)
            rows.append({"period_s": period, "band": b, "window_ratio": w / period, **row})
    return rows


def inference_sweep(
    params: ModelParams,
    hyper: ModelHyper,
    pair: DatasetPair,
    windows_ms: Sequence[float],
) -> list[dict]:
    """Re-evaluate a trained model at other window lengths, without retraining."""
    rows = []
    for w in windows_ms:
        frame = FrameConfig.from_ms(w, pair.sample_rate)
        rows.append(
            {
                "window_ms": w,
                "frame_len": frame.frame_len,
                "hop": frame.hop,
                "train_window_ms": 1000.0 * hyper.lfo_cfg.window_seconds,
                "esr": evaluate(params, hyper, pair, frame),
            }
        )
    return rows


def describe(dp: DpConfig) -> dict:
    return {"label": dp.label, **asdict(dp)}
