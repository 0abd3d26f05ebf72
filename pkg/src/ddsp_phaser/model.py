"""The learnable phaser: LFO, MLP waveshaper and frame-wise transfer function.

Per frame ``m`` the model computes

    s_m = Re(z_b * z_a**m)                    LFO sample
    d_m = MLP(s_m)                            normalised break frequency
    p_m = (1 - tan d_m) / (1 + tan d_m)       all-pass coefficient
    a_m = ((p_m - z^-1) / (1 - p_m z^-1))**K  all-pass cascade
    h_m = h1 * (g1 + h2 a_m / (1 - |g2| z^-phi h2 a_m))

on the DFT grid and filters the frame with ``h_m``.  ``h1`` and ``h2`` are
biquads; the feedback delay ``z^-phi`` is only applied when ``phi > 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import spectral
from .signals import AudioBuffer
from .spectral import FrameConfig, SpectralFilter

SCHEMA_VERSION = 1
HIDDEN = 8
LAYER_SHAPES = ((1, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 1))
IDENTITY_BIQUAD = (1.0, 0.0, 0.0, 0.0, 0.0)
TAN_GUARD = 1e-6
DENOM_GUARD = 1e-12


class NonFiniteError(ArithmeticError):
    """A forward pass hit a singularity (tan pole or vanishing denominator)."""


@dataclass
class MlpParams:
    """Scalar-to-scalar MLP, three tanh hidden layers of 8 units, linear output.

    Layers act as ``h @ weights[i] + biases[i]``.
    """

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float).reshape(s) for w, s in zip(self.weights, LAYER_SHAPES)]
        self.biases = [np.asarray(b, dtype=float).reshape(s[1]) for b, s in zip(self.biases, LAYER_SHAPES)]
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValueError("MLP needs exactly four layers")

    @classmethod
    def init(cls, rng: np.random.Generator) -> "MlpParams":
        ws = [rng.uniform(-1.0, 1.0, s) / math.sqrt(s[0]) for s in LAYER_SHAPES]
        bs = [np.zeros(s[1]) for s in LAYER_SHAPES]
        return cls(ws, bs)

    @classmethod
    def zeros(cls) -> "MlpParams":
        return cls([np.zeros(s) for s in LAYER_SHAPES], [np.zeros(s[1]) for s in LAYER_SHAPES])

    @classmethod
    def constant(cls, value: float) -> "MlpParams":
        mlp = cls.zeros()
        mlp.biases[-1][:] = value
        return mlp

    def __call__(self, s) -> np.ndarray:
        return mlp_forward(self, s)[0]

    @staticmethod
    def size() -> int:
        return sum(a * b + b for a, b in LAYER_SHAPES)

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        ws, bs, i = [], [], 0
        for a, b in LAYER_SHAPES:
            ws.append(vec[i : i + a * b].reshape(a, b))
            i += a * b
            bs.append(vec[i : i + b].copy())
            i += b
        return cls(ws, bs)


def mlp_forward(mlp: MlpParams, s) -> tuple[np.ndarray, list]:
    """Evaluate the MLP on a vector of inputs; also return layer activations."""
    h = np.asarray(s, dtype=float).reshape(-1, 1)
    acts = [h]
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i < 3:
            h = np.tanh(h)
        acts.append(h)
    return h[:, 0], acts


def mlp_backward(mlp: MlpParams, acts: list, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of the MLP weights and of its inputs, given d(loss)/d(output)."""
    g = np.asarray(grad_out, dtype=float).reshape(-1, 1)
    gw, gb = [None] * 4, [None] * 4
    for i in range(3, -1, -1):
        if i < 3:
            g = g * (1.0 - acts[i + 1] ** 2)
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
    return MlpParams(gw, gb), g[:, 0]


@dataclass
class ModelParams:
    z_a: complex
    z_b: complex
    mlp: MlpParams
    g1: float = 1.0
    g2: float = 0.01
    phi: float = 0.5
    biquad1: np.ndarray = field(default_factory=lambda: np.array(IDENTITY_BIQUAD))
    biquad2: np.ndarray = field(default_factory=lambda: np.array(IDENTITY_BIQUAD))

    def __post_init__(self):
        self.z_a = complex(self.z_a)
        self.z_b = complex(self.z_b)
        self.g1, self.g2, self.phi = float(self.g1), float(self.g2), float(self.phi)
        self.biquad1 = np.asarray(self.biquad1, dtype=float).reshape(5)
        self.biquad2 = np.asarray(self.biquad2, dtype=float).reshape(5)

    # flat real vector view, used by the optimiser
    @staticmethod
    def names() -> list[str]:
        names = ["z_a.re", "z_a.im", "z_b.re", "z_b.im"]
        for i, (a, b) in enumerate(LAYER_SHAPES):
            names += [f"mlp.w{i}[{j}]" for j in range(a * b)]
            names += [f"mlp.b{i}[{j}]" for j in range(b)]
        names += ["g1", "g2", "phi"]
        for q in (1, 2):
            names += [f"biquad{q}.{c}" for c in ("b0", "b1", "b2", "a1", "a2")]
        return names

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                [self.z_a.real, self.z_a.imag, self.z_b.real, self.z_b.imag],
                self.mlp.to_vector(),
                [self.g1, self.g2, self.phi],
                self.biquad1,
                self.biquad2,
            ]
        )

    @classmethod
    def from_vector(cls, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        n = MlpParams.size()
        mlp = MlpParams.from_vector(vec[4 : 4 + n])
        rest = vec[4 + n :]
        return cls(
            complex(vec[0], vec[1]),
            complex(vec[2], vec[3]),
            mlp,
            rest[0],
            rest[1],
            rest[2],
            rest[3:8].copy(),
            rest[8:13].copy(),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_vector(self.to_vector())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def lfo_frequency(self, frame_rate: float) -> float:
        """LFO rate in Hz implied by the per-frame rotation of ``z_a``."""
        return abs(np.angle(self.z_a)) * frame_rate / (2.0 * math.pi)

    def to_dict(self) -> dict:
        return {
            "z_a": {"re": self.z_a.real, "im": self.z_a.imag},
            "z_b": {"re": self.z_b.real, "im": self.z_b.imag},
            "mlp": {
                "weights": [w.tolist() for w in self.mlp.weights],
                "biases": [b.tolist() for b in self.mlp.biases],
            },
            "g1": self.g1,
            "g2": self.g2,
            "phi": self.phi,
            "biquad1": dict(zip(("b0", "b1", "b2", "a1", "a2"), self.biquad1.tolist())),
            "biquad2": dict(zip(("b0", "b1", "b2", "a1", "a2"), self.biquad2.tolist())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        keys = ("b0", "b1", "b2", "a1", "a2")
        return cls(
            complex(d["z_a"]["re"], d["z_a"]["im"]),
            complex(d["z_b"]["re"], d["z_b"]["im"]),
            MlpParams(d["mlp"]["weights"], d["mlp"]["biases"]),
            d["g1"],
            d["g2"],
            d["phi"],
            [d["biquad1"][k] for k in keys],
            [d["biquad2"][k] for k in keys],
        )


@dataclass(frozen=True)
class ModelHyper:
    """Structural settings that are not learned.

    ``train_cfg`` is the frame geometry the LFO was learned at.  When the
    model runs at a different geometry the LFO index of each frame is
    remapped through wall-clock time so the phase stays consistent.
    """

    frame_cfg: FrameConfig
    stages: int = 4
    inference: bool = False
    train_cfg: Optional[FrameConfig] = None

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    @property
    def lfo_cfg(self) -> FrameConfig:
        return self.train_cfg or self.frame_cfg

    def for_inference(self, frame_cfg: Optional[FrameConfig] = None) -> "ModelHyper":
        return replace(
            self,
            frame_cfg=frame_cfg or self.frame_cfg,
            inference=True,
            train_cfg=self.lfo_cfg,
        )

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "window_seconds": self.frame_cfg.window_seconds,
            "sample_rate": self.frame_cfg.sample_rate,
            "train_window_seconds": self.lfo_cfg.window_seconds,
            "frame": self.frame_cfg.describe(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHyper":
        fs = d["sample_rate"]
        return cls(
            FrameConfig(d["window_seconds"], fs),
            stages=int(d["stages"]),
            train_cfg=FrameConfig(d.get("train_window_seconds", d["window_seconds"]), fs),
        )


# -- LFO ----------------------------------------------------------------------


def _cpow(z: complex, mu: np.ndarray) -> np.ndarray:
    """z**mu for real exponents via the principal logarithm."""
    mu = np.asarray(mu, dtype=float)
    if z == 0:
        return np.where(mu == 0, 1.0 + 0j, 0.0 + 0j)
    return np.exp(mu * np.log(complex(z)))


def lfo_sample(z_a: complex, z_b: complex, m) -> np.ndarray:
    """Re(z_b * z_a**m); ``m`` may be fractional after frame-rate remapping."""
    return np.real(z_b * _cpow(z_a, m))


def lfo_wirtinger_grads(z_a: complex, z_b: complex, m) -> tuple[np.ndarray, np.ndarray]:
    """Wirtinger derivatives of the LFO sample w.r.t. ``z_a`` and ``z_b``.

    Returns ``(m z_b z_a**(m-1) / 2, z_a**m / 2)``; the first term is 0 at m = 0.
    """
    m = np.asarray(m, dtype=float)
    zm = _cpow(z_a, m)
    if z_a == 0:
        dza = np.where(m == 1, z_b / 2.0, 0.0 + 0j)
    else:
        dza = m * z_b * zm / z_a / 2.0
    return dza, zm / 2.0


def lfo_indices(n_frames: int, hyper: ModelHyper, start_sample: int = 0) -> np.ndarray:
    """LFO index of each frame, measured in frames of the training geometry.

    Frame centres are matched in wall-clock time, so at the training geometry
    this is simply ``m + start_sample / hop``.
    """
    cfg, ref = hyper.frame_cfg, hyper.lfo_cfg
    m = np.arange(n_frames)
    if cfg == ref:
        if start_sample % cfg.hop == 0:
            return (m + start_sample // cfg.hop).astype(float)
        return m + start_sample / cfg.hop
    centre = start_sample + m * cfg.hop + cfg.frame_len / 2.0
    return (centre - ref.frame_len / 2.0) / ref.hop


def effective_z_a(params: ModelParams, hyper: ModelHyper) -> complex:
    if hyper.inference:
        mag = abs(params.z_a)
        if mag == 0:
            raise NonFiniteError("cannot normalise z_a = 0 onto the unit circle")
        return params.z_a / mag
    return params.z_a


# -- waveshaper and transfer function -----------------------------------------


def allpass_param(d) -> np.ndarray:
    """(1 - tan d) / (1 + tan d), rejecting arguments near a tan pole."""
    d = np.asarray(d, dtype=float)
    dist = np.abs(np.mod(d - math.pi / 2, math.pi))
    dist = np.minimum(dist, math.pi - dist)
    if np.any(dist < TAN_GUARD):
        raise NonFiniteError("waveshaper output hit a tan singularity")
    t = np.tan(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = (1.0 - t) / (1.0 + t)
    if not np.all(np.isfinite(p)):
        raise NonFiniteError("all-pass coefficient is not finite")
    return p


def waveshape(s, mlp: MlpParams) -> np.ndarray:
    return mlp_forward(mlp, s)[0]


def dft_grid(dft_len: int) -> np.ndarray:
    """z^-1 on the non-negative half of the DFT grid."""
    k = np.arange(dft_len // 2 + 1)
    return np.exp(-2j * np.pi * k / dft_len)


def first_order_allpass(p, zinv: np.ndarray) -> np.ndarray:
    """(p - z^-1) / (1 - p z^-1) on the half grid.

    DC and Nyquist are pinned to their limits -1 and +1, which also covers
    the removable 0/0 at p = 1 (DC) and p = -1 (Nyquist).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        ap = (p - zinv) / (1.0 - p * zinv)
    ap[..., 0] = -1.0
    ap[..., -1] = 1.0
    return ap


def allpass_derivative(p, zinv: np.ndarray) -> np.ndarray:
    """d/dp of the first-order all-pass; zero at DC and Nyquist."""
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = (1.0 - zinv**2) / (1.0 - p * zinv) ** 2
    dp[..., 0] = 0.0
    dp[..., -1] = 0.0
    return dp


def biquad_response(coeffs, zinv: np.ndarray) -> np.ndarray:
    b0, b1, b2, a1, a2 = coeffs
    return (b0 + b1 * zinv + b2 * zinv**2) / (1.0 + a1 * zinv + a2 * zinv**2)


def feedback_delay(phi: float, omega: np.ndarray) -> np.ndarray:
    """z^-phi gated by the Heaviside step (1 for phi <= 0)."""
    if phi > 0:
        return np.exp(-1j * omega * phi)
    return np.ones_like(omega, dtype=complex)


@dataclass
class TransferParts:
    """Intermediate quantities of the frame transfer functions."""

    zinv: np.ndarray
    omega: np.ndarray
    allpass: np.ndarray  # first-order section, (frames, bins)
    a: np.ndarray  # cascade
    h1: np.ndarray
    h2: np.ndarray
    den1: np.ndarray
    den2: np.ndarray
    delay: np.ndarray
    u: np.ndarray
    D: np.ndarray
    F: np.ndarray
    H: np.ndarray


def transfer_functions(p, params: ModelParams, stages: int, dft_len: int) -> TransferParts:
    """Half-grid transfer functions for a vector of all-pass coefficients."""
    p = np.atleast_1d(np.asarray(p, dtype=float))[:, None]
    zinv = dft_grid(dft_len)
    omega = 2.0 * np.pi * np.arange(zinv.size) / dft_len
    ap = first_order_allpass(p, zinv)
    a = ap**stages
    q1, q2 = params.biquad1, params.biquad2
    den1 = 1.0 + q1[3] * zinv + q1[4] * zinv**2
    den2 = 1.0 + q2[3] * zinv + q2[4] * zinv**2
    h1 = (q1[0] + q1[1] * zinv + q1[2] * zinv**2) / den1
    h2 = (q2[0] + q2[1] * zinv + q2[2] * zinv**2) / den2
    delay = feedback_delay(params.phi, omega)
    u = h2 * a
    D = 1.0 - abs(params.g2) * delay * u
    if np.min(np.abs(D)) < DENOM_GUARD or np.min(np.abs(den1)) < DENOM_GUARD or np.min(np.abs(den2)) < DENOM_GUARD:
        raise NonFiniteError("transfer-function denominator vanished")
    F = params.g1 + u / D
    H = h1 * F
    return TransferParts(zinv, omega, ap, a, h1, h2, den1, den2, delay, u, D, F, H)


def frame_transfer(p_m: float, params: ModelParams, hyper: ModelHyper) -> SpectralFilter:
    """Full-grid Hermitian transfer function of one frame."""
    cfg = hyper.frame_cfg
    parts = transfer_functions([p_m], params, hyper.stages, cfg.dft_len)
    return SpectralFilter.from_half(parts.H[0], cfg.dft_len)


# -- forward pass -------------------------------------------------------------


@dataclass
class ForwardCache:
    """Everything the adjoint pass needs from a forward evaluation."""

    X: np.ndarray
    mu: np.ndarray
    z_a: complex
    s: np.ndarray
    acts: list
    d: np.ndarray
    p: np.ndarray
    parts: TransferParts
    y: np.ndarray


def analyze_input(x, hyper: ModelHyper) -> np.ndarray:
    """Half spectra of the input frames; independent of the parameters."""
    return spectral.analyze_frames(np.asarray(getattr(x, "samples", x), dtype=float), hyper.frame_cfg)


def control_signals(params: ModelParams, hyper: ModelHyper, n_frames: int, start_sample: int = 0) -> dict:
    """Per-frame LFO index, LFO sample, break-frequency prediction and p."""
    mu = lfo_indices(n_frames, hyper, start_sample)
    z_a = effective_z_a(params, hyper)
    s = lfo_sample(z_a, params.z_b, mu)
    d, acts = mlp_forward(params.mlp, s)
    p = allpass_param(d)
    return {"mu": mu, "z_a": z_a, "s": s, "d": d, "p": p, "acts": acts}


def forward_frames(
    X: np.ndarray, length: int, params: ModelParams, hyper: ModelHyper, start_sample: int = 0
) -> ForwardCache:
    cfg = hyper.frame_cfg
    ctrl = control_signals(params, hyper, X.shape[0], start_sample)
    parts = transfer_functions(ctrl["p"], params, hyper.stages, cfg.dft_len)
    frames = spectral.resynthesize_frames(parts.H * X, cfg)
    y = spectral.overlap_add(frames, cfg, length)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("model output is not finite")
    return ForwardCache(X, ctrl["mu"], ctrl["z_a"], ctrl["s"], ctrl["acts"], ctrl["d"], ctrl["p"], parts, y)


def forward(x, params: ModelParams, hyper: ModelHyper, start_sample: int = 0):
    """Run the model over a whole signal; returns the same type as ``x``.

    ``start_sample`` is the position of ``x`` in the continuous recording,
    which fixes the LFO phase of the first frame.
    """
    samples = np.asarray(getattr(x, "samples", x), dtype=float)
    if isinstance(x, AudioBuffer) and x.sample_rate != hyper.frame_cfg.sample_rate:
        raise ValueError("input sample rate differs from the model sample rate")
    X = spectral.analyze_frames(samples, hyper.frame_cfg)
    y = forward_frames(X, samples.size, params, hyper, start_sample).y
    return x.with_samples(y) if isinstance(x, AudioBuffer) else y


# -- serialisation ------------------------------------------------------------


def normalized_biquad(coeffs) -> np.ndarray:
    """Feedforward coefficients divided by b0, for reporting."""
    c = np.asarray(coeffs, dtype=float).copy()
    if c[0] != 0:
        c[:3] = c[:3] / c[0]
    return c


def save_model(path, params: ModelParams, hyper: ModelHyper, provenance: Optional[dict] = None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ddsp-phaser-model",
        "params": params.to_dict(),
        "hyper": hyper.to_dict(),
        "provenance": provenance or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path) -> tuple[ModelParams, ModelHyper, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    return ModelParams.from_dict(doc["params"]), ModelHyper.from_dict(doc["hyper"]), doc.get("provenance", {})
