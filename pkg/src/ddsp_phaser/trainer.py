"""ESR loss, analytic gradients of the frame pipeline, and Adam training."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import spectral
from .model import (
    ForwardCache,
    MlpParams,
    ModelHyper,
    ModelParams,
    NonFiniteError,
    allpass_derivative,
    analyze_input,
    control_signals,
    forward,
    forward_frames,
    lfo_wirtinger_grads,
    mlp_backward,
    normalized_biquad,
    save_model,
)
from .signals import AudioBuffer, DatasetPair

log = logging.getLogger(__name__)


def esr(y, y_hat) -> float:
    """Error-to-signal ratio sum((y - y_hat)^2) / sum(y^2)."""
    y = np.asarray(getattr(y, "samples", y), dtype=float)
    y_hat = np.asarray(getattr(y_hat, "samples", y_hat), dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    energy = float(np.dot(y, y))
    if energy == 0:
        raise ValueError("target has zero energy")
    r = y - y_hat
    return float(np.dot(r, r)) / energy


@dataclass
class GradientSet:
    """Partials of the loss, laid out like ModelParams with complex values split."""

    z_a: tuple
    z_b: tuple
    mlp: MlpParams
    g1: float
    g2: float
    phi: float
    biquad1: np.ndarray
    biquad2: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [list(self.z_a), list(self.z_b), self.mlp.to_vector(), [self.g1, self.g2, self.phi], self.biquad1, self.biquad2]
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


class TrainingProblem:
    """A fixed input/target pair with the input spectra precomputed."""

    def __init__(self, x, y, hyper: ModelHyper, start_sample: int = 0):
        self.x = np.asarray(getattr(x, "samples", x), dtype=float)
        self.y = np.asarray(getattr(y, "samples", y), dtype=float)
        if self.x.shape != self.y.shape:
            raise ValueError("input and target must have equal lengths")
        self.energy = float(np.dot(self.y, self.y))
        if self.energy == 0:
            raise ValueError("target has zero energy")
        self.hyper = hyper
        self.start_sample = start_sample
        self.X = analyze_input(self.x, hyper)

    def loss(self, params: ModelParams) -> float:
        cache = forward_frames(self.X, self.x.size, params, self.hyper, self.start_sample)
        r = cache.y - self.y
        return float(np.dot(r, r)) / self.energy

    def loss_and_grad(self, params: ModelParams) -> tuple[float, GradientSet]:
        if self.hyper.inference:
            raise ValueError("gradients are only defined for the damped training LFO")
        cache = forward_frames(self.X, self.x.size, params, self.hyper, self.start_sample)
        r = cache.y - self.y
        loss = float(np.dot(r, r)) / self.energy
        grads = _adjoint(cache, params, self.hyper, 2.0 * r / self.energy)
        return loss, grads


def _biquad_grads(coeffs, h, den, zinv, adj) -> np.ndarray:
    # adj is d(loss)/d(h) in the Re(sum dh * adj) sense, per bin
    g = np.empty(5)
    for i in range(3):
        g[i] = np.real(np.sum(adj * zinv**i / den))
    for i in (1, 2):
        g[2 + i] = np.real(np.sum(adj * (-h) * zinv**i / den))
    return g


def _adjoint(cache: ForwardCache, params: ModelParams, hyper: ModelHyper, grad_y: np.ndarray) -> GradientSet:
    """Reverse pass from d(loss)/d(output) back to every parameter."""
    cfg = hyper.frame_cfg
    pt = cache.parts
    n_frames = cache.X.shape[0]
    frame_grads = spectral.overlap_add_adjoint(grad_y, n_frames, cfg)
    adj_H = spectral.resynthesis_adjoint(frame_grads, cfg) * cache.X
    adj_F = adj_H * pt.h1
    inv_D2 = 1.0 / pt.D**2
    adj_u = adj_F * inv_D2

    g1 = float(np.real(np.sum(adj_H * pt.h1)))
    fb = np.sum(adj_F * pt.u**2 * inv_D2, axis=0)  # d/d(|g2| * delay)
    g2 = float(np.sign(params.g2) * np.real(np.sum(fb * pt.delay)))
    if params.phi > 0:
        phi = float(np.real(np.sum(fb * abs(params.g2) * pt.delay * (-1j * pt.omega))))
    else:
        phi = 0.0

    adj_h1 = np.sum(adj_H * pt.F, axis=0)
    adj_h2 = np.sum(adj_u * pt.a, axis=0)
    bq1 = _biquad_grads(params.biquad1, pt.h1, pt.den1, pt.zinv, adj_h1)
    bq2 = _biquad_grads(params.biquad2, pt.h2, pt.den2, pt.zinv, adj_h2)

    K = hyper.stages
    p = cache.p[:, None]
    dap_dp = allpass_derivative(p, pt.zinv)
    da_dp = K * pt.allpass ** (K - 1) * dap_dp
    grad_p = np.real(np.sum(adj_u * pt.h2 * da_dp, axis=1))
    grad_d = grad_p * -(1.0 + cache.p**2)
    mlp_grads, grad_s = mlp_backward(params.mlp, cache.acts, grad_d)

    dza, dzb = lfo_wirtinger_grads(cache.z_a, params.z_b, cache.mu)
    wa = np.sum(grad_s * dza)
    wb = np.sum(grad_s * dzb)
    return GradientSet(
        (2.0 * wa.real, -2.0 * wa.imag),
        (2.0 * wb.real, -2.0 * wb.imag),
        mlp_grads,
        g1,
        g2,
        phi,
        bq1,
        bq2,
    )


def backward(x, target, params: ModelParams, hyper: ModelHyper, start_sample: int = 0) -> tuple[float, GradientSet]:
    """Loss and exact gradients for one full-sequence batch."""
    return TrainingProblem(x, target, hyper, start_sample).loss_and_grad(params)


# -- optimisation -------------------------------------------------------------


class Adam:
    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EarlyStop:
    patience_epochs: int = 200
    min_delta: float = 0.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    restarts: int = 3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop: Optional[EarlyStop] = None
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")


def init_params(seed, frame_rate: float) -> ModelParams:
    """Initial parameters: damped LFO at a random rate, identity biquads.

    ``z_a = 0.7 exp(j zeta / F_f)`` with ``zeta ~ N(0, 1)``, ``z_b = 1``,
    ``g1 = 1``, ``g2 = 0.01``, ``phi = 0.5``.
    """
    rng = np.random.default_rng(seed)
    zeta = rng.standard_normal()
    mlp = MlpParams.init(rng)
    return ModelParams(0.7 * np.exp(1j * zeta / frame_rate), 1.0 + 0j, mlp, g1=1.0, g2=0.01, phi=0.5)


@dataclass
class RestartResult:
    index: int
    seed: list
    losses: list
    status: str  # "ok" or "diverged"
    message: str = ""
    params: Optional[ModelParams] = None
    eval_esr: float = math.inf
    seconds: float = 0.0


@dataclass
class TrainReport:
    restarts: list
    best_index: int
    params: ModelParams
    hyper: ModelHyper
    eval_on: str
    lfo: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def best(self) -> RestartResult:
        return self.restarts[self.best_index]

    @property
    def eval_esr(self) -> float:
        return self.best.eval_esr

    def learned_summary(self) -> dict:
        p, F = self.params, self.hyper.lfo_cfg.frame_rate
        return {
            "f0_hz": p.lfo_frequency(F),
            "z_a_abs": abs(p.z_a),
            "g1": p.g1,
            "g2": p.g2,
            "phi": p.phi,
            "biquad1": normalized_biquad(p.biquad1).tolist(),
            "biquad2": normalized_biquad(p.biquad2).tolist(),
        }

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "eval_on": self.eval_on,
            "eval_esr": self.eval_esr,
            "seconds": self.seconds,
            "learned": self.learned_summary(),
            "restarts": [
                {
                    "index": r.index,
                    "seed": r.seed,
                    "status": r.status,
                    "message": r.message,
                    "epochs": len(r.losses),
                    "final_train_esr": r.losses[-1] if r.losses else None,
                    "eval_esr": r.eval_esr if math.isfinite(r.eval_esr) else None,
                    "seconds": r.seconds,
                }
                for r in self.restarts
            ],
            "params": self.params.to_dict(),
            "hyper": self.hyper.to_dict(),
        }


def restart_seed(seed: int, index: int) -> list:
    return [int(seed), int(index)]


def _run_restart(index, train_x, train_y, hyper, cfg: TrainConfig, start_sample=0) -> RestartResult:
    t0 = time.perf_counter()
    seed = restart_seed(cfg.seed, index)
    problem = TrainingProblem(train_x, train_y, hyper, start_sample)
    params = init_params(seed, hyper.frame_cfg.frame_rate)
    theta = params.to_vector()
    opt = Adam(theta.size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses: list = []
    best, since_best = math.inf, 0
    for epoch in range(cfg.max_epochs):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                loss, grads = problem.loss_and_grad(params)
            gvec = grads.to_vector()
            if not (math.isfinite(loss) and np.all(np.isfinite(gvec))):
                raise NonFiniteError("non-finite loss or gradient")
        except (NonFiniteError, FloatingPointError) as exc:
            log.warning("restart %d diverged at epoch %d: %s", index, epoch, exc)
            return RestartResult(index, seed, losses, "diverged", f"epoch {epoch}: {exc}", None,
                                 seconds=time.perf_counter() - t0)
        losses.append(loss)
        if cfg.early_stop is not None:
            if loss < best - cfg.early_stop.min_delta:
                best, since_best = loss, 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop.patience_epochs:
                    break
        theta = opt.step(theta, gvec)
        params = ModelParams.from_vector(theta)
        if epoch % 100 == 0:
            log.info("restart %d epoch %d train ESR %.5f", index, epoch, loss)
    return RestartResult(index, seed, losses, "ok", "", params, seconds=time.perf_counter() - t0)


def evaluate(params: ModelParams, hyper: ModelHyper, pair: DatasetPair, frame_cfg=None) -> float:
    """Inference-mode ESR on a dataset pair."""
    h = hyper.for_inference(frame_cfg)
    y_hat = forward(pair.input.samples, params, h, pair.start_sample)
    return esr(pair.target.samples, y_hat)


def train(
    train_pair: DatasetPair,
    hyper: ModelHyper,
    cfg: TrainConfig,
    test_pair: Optional[DatasetPair] = None,
) -> TrainReport:
    """Train ``cfg.restarts`` independently initialised models and keep the best.

    Restarts are ranked by inference-mode ESR on ``test_pair`` when given,
    otherwise on the training pair.
    """
    t0 = time.perf_counter()
    if hyper.inference:
        raise ValueError("train with a training-mode hyper")
    args = (train_pair.input.samples, train_pair.target.samples, hyper, cfg, train_pair.start_sample)
    if cfg.workers > 1 and cfg.restarts > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_restart_star, [(i,) + args for i in range(cfg.restarts)]))
    else:
        results = [_run_restart(i, *args) for i in range(cfg.restarts)]

    eval_pair = test_pair if test_pair is not None else train_pair
    for r in results:
        if r.status != "ok":
            continue
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                r.eval_esr = evaluate(r.params, hyper, eval_pair)
        except (NonFiniteError, FloatingPointError) as exc:
            r.status, r.message = "diverged", f"evaluation: {exc}"
        if not math.isfinite(r.eval_esr):
            r.status = "diverged"
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        msgs = "; ".join(f"restart {r.index}: {r.message}" for r in results)
        raise RuntimeError(f"all restarts diverged ({msgs})")
    best = min(ok, key=lambda r: r.eval_esr)
    report = TrainReport(
        results,
        best.index,
        best.params,
        ModelHyper(hyper.frame_cfg, hyper.stages, False, hyper.lfo_cfg),
        "test" if test_pair is not None else "train",
        seconds=time.perf_counter() - t0,
    )
    n_frames = hyper.frame_cfg.num_frames(len(train_pair))
    report.lfo = lfo_rows(best.params, hyper, n_frames)
    return report


def _run_restart_star(args):
    return _run_restart(*args)


# -- exports --------------------------------------------------------------------


def lfo_rows(params: ModelParams, hyper: ModelHyper, n_frames: int, start_sample: int = 0) -> list[dict]:
    """Per-frame inference-mode LFO, waveshaper output and all-pass coefficient."""
    h = hyper.for_inference()
    ctrl = control_signals(params, h, n_frames, start_sample)
    cfg = h.frame_cfg
    rows = []
    for m in range(n_frames):
        rows.append(
            {
                "frame": m,
                "time_s": (start_sample + m * cfg.hop + cfg.frame_len / 2) / cfg.sample_rate,
                "s_m": float(ctrl["s"][m]),
                "d_m": float(ctrl["d"][m]),
                "p_m": float(ctrl["p"][m]),
            }
        )
    return rows


def write_rows(path, rows: list[dict], fieldnames=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames or list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def loss_rows(report: TrainReport) -> list[dict]:
    return [
        {"epoch": e, "restart": r.index, "train_esr": loss}
        for r in report.restarts
        for e, loss in enumerate(r.losses)
    ]


def save_report(report: TrainReport, directory, stem: str = "train") -> dict:
    """Write model JSON, report JSON, loss-trace CSV and LFO CSV; return paths."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": d / f"{stem}_report.json",
        "losses": d / f"{stem}_losses.csv",
        "lfo": d / f"{stem}_lfo.csv",
    }
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    write_rows(paths["losses"], loss_rows(report), ["epoch", "restart", "train_esr"])
    write_rows(paths["lfo"], report.lfo, ["frame", "time_s", "s_m", "d_m", "p_m"])
    return {k: str(v) for k, v in paths.items()}


def model_provenance(report: TrainReport, cfg: TrainConfig) -> dict:
    best = report.best
    return {
        "seed": cfg.seed,
        "restart_seed": best.seed,
        "epochs": len(best.losses),
        "final_train_esr": best.losses[-1] if best.losses else None,
        "eval_esr": best.eval_esr,
        "eval_on": report.eval_on,
        "train_config": {k: v for k, v in asdict(cfg).items() if k != "early_stop"},
    }


def save_trained_model(path, report: TrainReport, cfg: TrainConfig) -> None:
    save_model(path, report.params, report.hyper, model_provenance(report, cfg))
