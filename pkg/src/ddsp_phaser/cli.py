"""Command-line entry point: ``ddsp-phaser <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes ``<command>_manifest.json`` with the resolved configuration into
``--out-dir`` (default: the directory of ``--out``, else the working dir).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as exp
from . import reference as ref
from . import signals as sig
from .model import ModelHyper, forward, load_model
from .spectral import FrameConfig
from .trainer import (
    EarlyStop,
    TrainConfig,
    esr,
    lfo_rows,
    save_report,
    save_trained_model,
    train,
    write_rows,
)

log = logging.getLogger("ddsp_phaser")


class UsageError(Exception):
    """Bad combination of arguments; reported with exit code 2."""


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


# -- parser -------------------------------------------------------------------


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    g.add_argument("--threads", type=int, default=1, help="worker processes for independent restarts")
    g.add_argument("--deterministic", action="store_true", help="run restarts sequentially in one process")
    g.add_argument("--out-dir", type=Path, default=None, help="where manifests and reports go")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _train_options(p: argparse.ArgumentParser, epochs: int = 5000) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--early-stop", type=int, default=None, metavar="PATIENCE",
                   help="stop a restart after PATIENCE epochs without improvement")


def _dp_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--period", type=float, default=2.0, help="LFO period of the digital phaser target (s)")
    p.add_argument("--g2", type=float, default=0.7)
    p.add_argument("--delay", type=int, default=1)
    p.add_argument("--train-seconds", type=float, default=None)
    p.add_argument("--test-seconds", type=float, default=8.0)
    p.add_argument("--train-cycles", type=float, default=None, help="truncate training audio to N LFO cycles")


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(prog="ddsp-phaser", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesise a chirp train (or plucked notes)")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kind", dest="signal", choices=("chirp", "plucks"), default="chirp")
    p.add_argument("--period", type=float, default=0.030)
    p.add_argument("--stages", type=int, default=64)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--sample-rate", type=float, default=44100.0)
    p.add_argument("--subtype", choices=("float32", "pcm16", "pcm24"), default="float32")

    p = sub.add_parser("render", parents=[common], help="render the reference digital phaser")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lfo-period", type=float, default=2.0)
    p.add_argument("--lfo-phase", type=float, default=0.0, help="initial triangle phase in cycles")
    p.add_argument("--break-min", type=float, default=4000.0, help="rad/s")
    p.add_argument("--break-max", type=float, default=16000.0, help="rad/s")
    p.add_argument("--g1", type=float, default=1.0)
    p.add_argument("--g2", type=float, default=0.7)
    p.add_argument("--delay", type=int, default=1)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--subtype", choices=("float32", "pcm16", "pcm24"), default="float32")

    p = sub.add_parser("train", parents=[common], help="fit the model to an input/target pair")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--calibration", type=Path, default=None, help="bypass recording used as the model input")
    p.add_argument("--offset", type=int, default=0, help="target delay relative to input, samples")
    p.add_argument("--window-ms", type=float, default=80.0)
    p.add_argument("--train-seconds", type=float, default=None, help="default: the whole file")
    p.add_argument("--test-start", type=float, default=None, help="held-out segment start (s)")
    p.add_argument("--test-seconds", type=float, default=None)
    p.add_argument("--out", type=Path, required=True, help="model file (JSON)")
    _train_options(p)

    p = sub.add_parser("infer", parents=[common], help="process audio with a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--window-ms", type=float, default=None, help="default: the training window")
    p.add_argument("--start-sample", type=int, default=0, help="position of the input in the recording")
    p.add_argument("--subtype", choices=("float32", "pcm16", "pcm24"), default="float32")

    p = sub.add_parser("eval", parents=[common], help="print the inference-mode ESR of a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--window-ms", type=float, default=None)
    p.add_argument("--start-sample", type=int, default=0)

    p = sub.add_parser("export", help="CSV exports for external plotting")
    what = p.add_subparsers(dest="what", required=True)
    q = what.add_parser("lfo", parents=[common], help="per-frame s_m, d_m, p_m of a model")
    q.add_argument("--model", type=Path, required=True)
    q.add_argument("--frames", type=int, default=500)
    q.add_argument("--start-sample", type=int, default=0)
    q.add_argument("--out", type=Path, default=None)
    q = what.add_parser("response", parents=[common], help="phaser magnitude and phase response")
    kind = q.add_mutually_exclusive_group(required=True)
    kind.add_argument("--continuous", action="store_true")
    kind.add_argument("--discrete", action="store_true")
    q.add_argument("--wb", type=float, default=2 * math.pi * 1000, help="break frequency, rad/s")
    q.add_argument("--g1", type=float, default=1.0)
    q.add_argument("--g2", type=float, default=0.9)
    q.add_argument("--delay", type=int, default=1)
    q.add_argument("--stages", type=int, default=4)
    q.add_argument("--sample-rate", type=float, default=44100.0)
    q.add_argument("--points", type=int, default=1000)
    q.add_argument("--fmin", type=float, default=10.0, help="Hz")
    q.add_argument("--fmax", type=float, default=None, help="Hz (default: Nyquist)")
    q.add_argument("--out", type=Path, default=None)
    q = what.add_parser("rootlocus", parents=[common], help="continuous-time poles and zeros versus g2")
    q.add_argument("--wb", type=float, default=2 * math.pi * 1000)
    q.add_argument("--g1", type=float, default=1.0)
    q.add_argument("--stages", type=int, default=4)
    q.add_argument("--steps", type=int, default=100, help="g2 grid points in [0, 0.999]")
    q.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("experiment", help="experiment sweeps, CSV output")
    kind = p.add_subparsers(dest="kind", required=True)
    q = kind.add_parser("frame-sweep", parents=[common], help="train at several window lengths")
    q.add_argument("--windows", type=_floats, default=[10, 20, 40, 80, 160], help="ms, comma-separated")
    _train_options(q)
    _dp_options(q)
    q.add_argument("--out", type=Path, default=None)
    q = kind.add_parser("rate-sweep", parents=[common], help="train over T0 2^(b/2)/100 windows per LFO rate")
    q.add_argument("--periods", type=_floats, default=[0.5, 2.0, 8.0])
    q.add_argument("--bands", type=_ints, default=list(range(11)), help="e.g. 0..10 or 0,2,4")
    _train_options(q)
    _dp_options(q)
    q.add_argument("--out", type=Path, default=None)
    q = kind.add_parser("inference-sweep", parents=[common], help="evaluate a model at other windows")
    q.add_argument("--model", type=Path, required=True)
    q.add_argument("--windows", type=_floats, default=[10, 20, 40, 80, 160, 320])
    q.add_argument("--in", dest="input", type=Path, default=None, help="default: synthetic DP test audio")
    q.add_argument("--target", type=Path, default=None)
    q.add_argument("--start-sample", type=int, default=0)
    _dp_options(q)
    q.add_argument("--out", type=Path, default=None)
    return parser


# -- helpers ------------------------------------------------------------------


def _out_dir(args) -> Path:
    if args.out_dir is not None:
        d = args.out_dir
    elif getattr(args, "out", None) is not None:
        d = Path(args.out).parent
    else:
        d = Path(".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_run_manifest(args, outputs: dict, extra: dict = None) -> Path:
    name = "_".join(x for x in (args.command, getattr(args, "what", None), getattr(args, "kind", None)) if x)
    path = _out_dir(args) / f"{name}_manifest.json"
    doc = {
        "tool": "ddsp-phaser",
        "version": __version__,
        "command": name,
        "argv": list(args.argv),
        "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("argv", "verbose")},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _train_config(args) -> TrainConfig:
    early = EarlyStop(args.early_stop) if args.early_stop else None
    workers = 1 if args.deterministic else max(1, args.threads)
    return TrainConfig(
        learning_rate=args.lr, max_epochs=args.epochs, restarts=args.restarts, seed=args.seed,
        early_stop=early, workers=workers,
    )


def _frame(window_ms: float, fs: float) -> FrameConfig:
    cfg = FrameConfig.from_ms(window_ms, fs)
    if cfg.frame_len < 4:
        raise UsageError(f"--window-ms {window_ms} is shorter than 4 samples")
    return cfg


def _model_hyper(args, fs: float):
    params, hyper, prov = load_model(args.model)
    if fs != hyper.frame_cfg.sample_rate:
        raise ValueError(f"audio is at {fs} Hz but the model was trained at {hyper.frame_cfg.sample_rate} Hz")
    frame = _frame(args.window_ms, fs) if args.window_ms else None
    return params, hyper, hyper.for_inference(frame)


def _dp_config(args) -> exp.DpConfig:
    cfg = exp.DpConfig(period=args.period, g2=args.g2, delay=args.delay, test_seconds=args.test_seconds)
    if args.train_seconds is not None:
        cfg = replace(cfg, train_seconds=args.train_seconds)
    return cfg


def _check_g2(g2: float) -> None:
    if not abs(g2) < 1.0:
        raise UsageError(f"--g2 {g2} gives an unstable phaser, need |g2| < 1")


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.signal == "chirp":
        buf = sig.synth_chirp_train(args.duration, args.sample_rate, args.period, args.stages, args.p)
    else:
        buf = sig.synth_plucks(args.duration, args.sample_rate, seed=args.seed)
    sig.write_wav(args.out, buf, args.subtype)
    write_run_manifest(args, {"audio": args.out}, {"samples": len(buf)})
    return 0


def cmd_render(args) -> int:
    _check_g2(args.g2)
    x = sig.read_wav(args.input)
    spec = ref.DiscretePhaserSpec(args.break_min, args.stages, args.g1, args.g2, x.sample_rate, args.delay)
    lfo = ref.TriangleLfoSpec(args.lfo_period, args.break_min, args.break_max, args.lfo_phase)
    y = ref.render_digital_phaser(x, spec, lfo)
    sig.write_wav(args.out, y, args.subtype)
    write_run_manifest(args, {"audio": args.out})
    return 0


def cmd_train(args) -> int:
    x = sig.read_wav(args.input)
    train_seconds = args.train_seconds if args.train_seconds is not None else len(x) / x.sample_rate
    train_pair, test_pair = sig.make_dataset(
        args.input, args.target, train_seconds,
        test_seconds=args.test_seconds, test_start=args.test_start,
        calibration=args.calibration, offset=args.offset,
    )
    hyper = ModelHyper(_frame(args.window_ms, x.sample_rate), stages=args.stages)
    cfg = _train_config(args)
    report = train(train_pair, hyper, cfg, test_pair)
    save_trained_model(args.out, report, cfg)
    paths = save_report(report, _out_dir(args), Path(args.out).stem)
    summary = report.learned_summary()
    print(f"best restart {report.best_index}: {report.eval_on} ESR {report.eval_esr:.6g}, "
          f"f0 {summary['f0_hz']:.4f} Hz, g2 {summary['g2']:.4f}, phi {summary['phi']:.4f}")
    write_run_manifest(args, {"model": args.out, **paths}, {"frame": hyper.frame_cfg.describe()})
    return 0


def cmd_infer(args) -> int:
    x = sig.read_wav(args.input)
    params, _, hyper = _model_hyper(args, x.sample_rate)
    y = forward(x, params, hyper, args.start_sample)
    sig.write_wav(args.out, y, args.subtype)
    write_run_manifest(args, {"audio": args.out}, {"frame": hyper.frame_cfg.describe()})
    return 0


def cmd_eval(args) -> int:
    x, y = sig.read_wav(args.input), sig.read_wav(args.target)
    if len(x) != len(y):
        raise ValueError(f"input has {len(x)} samples but target has {len(y)}")
    params, _, hyper = _model_hyper(args, x.sample_rate)
    value = esr(y, forward(x, params, hyper, args.start_sample))
    print(f"ESR {value:.8g}")
    write_run_manifest(args, {}, {"esr": value, "frame": hyper.frame_cfg.describe()})
    return 0


def _csv_path(args, default: str) -> Path:
    return args.out if args.out is not None else _out_dir(args) / default


def cmd_export(args) -> int:
    if args.what == "lfo":
        params, hyper, _ = load_model(args.model)
        rows = lfo_rows(params, hyper, args.frames, args.start_sample)
        path = _csv_path(args, "lfo.csv")
        write_rows(path, rows, ["frame", "time_s", "s_m", "d_m", "p_m"])
    elif args.what == "response":
        _check_g2(args.g2)
        fs = args.sample_rate
        f = np.geomspace(args.fmin, args.fmax or fs / 2, args.points)
        if args.continuous:
            spec = ref.ContinuousPhaserSpec(args.wb, args.stages, args.g1, args.g2)
            h = ref.continuous_response(spec, 2 * np.pi * f)
            default = "response_continuous.csv"
        else:
            spec = ref.DiscretePhaserSpec(args.wb, args.stages, args.g1, args.g2, fs, args.delay)
            h = ref.discrete_response(spec, 2 * np.pi * f / fs)
            default = f"response_discrete_delay{args.delay}.csv"
        path = _csv_path(args, default)
        ref.write_csv(path, ref.response_rows(h, f))
    else:
        g2 = np.linspace(0.0, 0.999, args.steps)
        path = _csv_path(args, "rootlocus.csv")
        ref.write_csv(path, ref.root_locus(args.g1, args.wb, g2, args.stages))
    write_run_manifest(args, {"csv": path})
    return 0


def cmd_experiment(args) -> int:
    if args.kind == "inference-sweep":
        params, hyper, _ = load_model(args.model)
        if args.input is not None or args.target is not None:
            if args.input is None or args.target is None:
                raise UsageError("--in and --target go together")
            x, y = sig.read_wav(args.input), sig.read_wav(args.target)
            pair = sig.DatasetPair(x, y, "external", args.start_sample)
        else:
            _, pair = exp.dp_dataset(_dp_config(args))
            if pair is None:
                raise UsageError("--test-seconds must be positive for the synthetic test set")
        rows = exp.inference_sweep(params, hyper, pair, args.windows)
    else:
        _check_g2(args.g2)
        cfg = _train_config(args)
        dp = _dp_config(args)
        if args.kind == "frame-sweep":
            train_pair, test_pair = exp.dp_dataset(dp)
            if args.train_cycles:
                train_pair = exp.truncate_to_cycles(train_pair, dp.period, args.train_cycles)
            rows = exp.frame_sweep(args.windows, cfg, dp, (train_pair, test_pair))
        else:
            if args.train_seconds is None:
                dp = replace(dp, train_seconds=10.0)
            if args.train_cycles:
                rows = []
                for period in args.periods:
                    d = replace(dp, period=period, train_seconds=args.train_cycles * period)
                    rows += exp.rate_sweep([period], cfg, args.bands, d)
            else:
                rows = exp.rate_sweep(args.periods, cfg, args.bands, dp)
    if not rows:
        raise RuntimeError("experiment produced no rows")
    path = _csv_path(args, f"{args.kind}.csv")
    write_rows(path, rows)
    for row in rows:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    write_run_manifest(args, {"csv": path})
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "export": cmd_export,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ddsp-phaser: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface everything as exit code 1
        log.debug("failure", exc_info=True)
        print(f"ddsp-phaser: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
