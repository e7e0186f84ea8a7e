"""Client-side detectors for manipulated global models.

``detect_handcrafted`` inspects the received parameters alone.
``analyze_loss`` and ``analyze_gradients`` compare the behaviour of the
received model on local data against the client's last trusted model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.spatial.distance import pdist

from .exceptions import ConfigError, DomainError, ShapeError
from .nn import LabeledDataset, ModelParams, per_sample_grad_norms, per_sample_losses

ENTROPY_BINS = 64
RANK_TOL = 1e-8
MIN_STATIC_WIDTH = 4
MIN_BIAS_LENGTH = 6
MIN_SAMPLES = 16
COLLAPSE_FACTOR = 0.1


@dataclass(frozen=True)
class ThresholdConfig:
    tau_D: float
    tau_H: float
    tau_R: float
    tau_lmax: float
    tau_max_inc: float
    tau_spikes: float
    tau_p95: float
    tau_cv_ratio: float
    tau_g_norm: float
    tau_g_var: float
    count_loss: int = 2
    count_grad: int = 2
    count_static: int = 1
    # None: 1e-6 of the bias range
    tau_B: float | None = None
    name: str = "custom"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("tau_") and v is not None and not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
            if f.name.startswith("count_") and (int(v) != v or v < 1):
                raise ConfigError(f"{f.name} must be an integer >= 1, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown threshold fields: {sorted(extra)}")
        return cls(**d)


PRESETS = {
    "conservative": ThresholdConfig(
        tau_D=1e-4, tau_H=2.0, tau_R=0.5,
        tau_lmax=25.0, tau_max_inc=20.0, tau_spikes=0.5, tau_p95=3.0, tau_cv_ratio=2.0,
        tau_g_norm=0.8, tau_g_var=0.4, count_loss=2, name="conservative",
    ),
    "standard": ThresholdConfig(
        tau_D=1e-3, tau_H=3.0, tau_R=0.8,
        tau_lmax=10.0, tau_max_inc=10.0, tau_spikes=0.1, tau_p95=3.0, tau_cv_ratio=1.5,
        tau_g_norm=0.5, tau_g_var=0.2, count_loss=2, name="standard",
    ),
    "aggressive": ThresholdConfig(
        tau_D=1e-2, tau_H=4.0, tau_R=0.9,
        tau_lmax=4.0, tau_max_inc=1.0, tau_spikes=1e-2, tau_p95=0.8, tau_cv_ratio=1.1,
        tau_g_norm=1e-5, tau_g_var=1e-5, count_loss=2, name="aggressive",
    ),
}


def preset(name: str) -> ThresholdConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def interpolate_configs(lo: ThresholdConfig, hi: ThresholdConfig, n: int) -> list[ThresholdConfig]:
    """``n`` configs spaced linearly field by field from ``lo`` to ``hi``."""
    if n < 2:
        raise ConfigError("need n >= 2")
    out = []
    for i in range(n):
        t = i / (n - 1)
        kw = {}
        for f in fields(ThresholdConfig):
            a, b = getattr(lo, f.name), getattr(hi, f.name)
            if f.name == "name":
                kw[f.name] = lo.name if i == 0 else hi.name if i == n - 1 else f"interp-{i:02d}"
            elif a is None or b is None:
                kw[f.name] = a if a == b else (a if t < 0.5 else b)
            elif i == 0 or i == n - 1:
                kw[f.name] = a if i == 0 else b
            elif f.name.startswith("count_"):
                kw[f.name] = max(1, int(math.floor(a + t * (b - a) + 0.5)))
            else:
                kw[f.name] = a + t * (b - a)
        out.append(ThresholdConfig(**kw))
    return out


# --------------------------------------------------------------------------
# static weight statistics


def neuron_diversity(W) -> float:
    """Mean Euclidean distance between distinct weight rows."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 2:
        raise ShapeError("neuron diversity needs at least two rows")
    return float(pdist(W).mean())


def weight_entropy(W, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (bits) of the equal-width histogram of all entries."""
    if bins < 2:
        raise DomainError("bins must be >= 2")
    w = np.asarray(W, dtype=np.float64).ravel()
    lo, hi = w.min(), w.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(w, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / w.size
    return float(-(p * np.log2(p)).sum())


def rank_ratio(W, tol: float = RANK_TOL) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ShapeError("empty matrix")
    s = np.linalg.svd(W, compute_uv=False)
    rank = int((s > tol * s[0]).sum()) if s[0] > 0 else 0
    return rank / min(W.shape)


def bias_anomaly(b, tau_B: float | None = None) -> tuple[int, int, int]:
    """(B_m, B_s, B_m + B_s): strictly sorted (either direction) and
    constant spacing up to ``tau_B``."""
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.size < 3:
        raise DomainError("bias anomaly needs at least three entries")
    diffs = np.diff(b)
    b_m = int(bool(np.all(diffs > 0) or np.all(diffs < 0)))
    if tau_B is None:
        tau_B = max(1e-6 * float(b.max() - b.min()), 1e-12)
    b_s = int(bool(np.max(np.abs(diffs - diffs.mean())) < tau_B))
    return b_m, b_s, b_m + b_s


@dataclass
class StaticScores:
    layer: int
    D: float | None
    H: float | None
    R: float | None
    B_m: int | None
    B_s: int | None
    B: int | None
    reasons: list[str] = field(default_factory=list)

    @property
    def flag(self) -> bool:
        return bool(self.reasons)


def layer_scores(layer_index: int, W, b, cfg: ThresholdConfig) -> StaticScores:
    W = np.asarray(W)
    n = W.shape[0]
    D = H = R = None
    b_m = b_s = B = None
    reasons = []
    if n >= MIN_STATIC_WIDTH:
        D = neuron_diversity(W)
        H = weight_entropy(W)
        R = rank_ratio(W)
        if D < cfg.tau_D:
            reasons.append("D")
        if H < cfg.tau_H:
            reasons.append("H")
        if R < cfg.tau_R:
            reasons.append("R")
    if np.size(b) >= MIN_BIAS_LENGTH:
        b_m, b_s, B = bias_anomaly(b, cfg.tau_B)
        if B >= 1:
            reasons.append("B")
    return StaticScores(layer_index, D, H, R, b_m, b_s, B, reasons)


def detect_handcrafted(model: ModelParams, cfg: ThresholdConfig) -> tuple[list[StaticScores], bool]:
    """Score every linear layer; flag when any layer trips at least
    ``count_static`` of the D/H/R/B checks."""
    scores = [layer_scores(i, l.weights, l.bias, cfg) for i, l in enumerate(model.layers)]
    flag = any(len(s.reasons) >= cfg.count_static for s in scores)
    return scores, flag


# --------------------------------------------------------------------------
# behavioural divergence


def safe_ratio(num: float, den: float) -> float:
    if den == 0 or math.isinf(den):
        if num == den:
            return 1.0
        if math.isinf(den):
            return 0.0
        return math.inf if num > 0 else 1.0
    return num / den


def same_parameters(a: ModelParams, b: ModelParams) -> bool:
    return a.shapes() == b.shapes() and all(
        np.array_equal(x.weights, y.weights) and np.array_equal(x.bias, y.bias)
        for x, y in zip(a.layers, b.layers)
    )


def _loss_stats(losses: np.ndarray) -> dict:
    mu = float(losses.mean())
    sigma = float(losses.std())
    return {
        "mean": mu,
        "std": sigma,
        "max": float(losses.max()),
        "p95": float(np.percentile(losses, 95)),
        "cv": safe_ratio(sigma, mu) if sigma or mu else 0.0,
    }


@dataclass
class LossDivergence:
    current: dict
    previous: dict
    r_lmax: float
    r_p95: float
    r_cv: float
    r_spikes: float
    A: tuple[int, int, int, int]
    identical: bool = False

    @property
    def count(self) -> int:
        return sum(self.A)


@dataclass
class GradDivergence:
    mu_t: float
    sigma_t: float
    mu_prev: float
    sigma_prev: float
    r_norm: float
    r_var: float
    B: tuple[int, int, int]
    diagnostic: str | None = None

    @property
    def count(self) -> int:
        return sum(self.B)


def _check_pair(model_t: ModelParams, model_prev: ModelParams, data: LabeledDataset):
    if model_t.shapes() != model_prev.shapes():
        raise ShapeError("received and trusted models differ in architecture")
    if len(data) < MIN_SAMPLES:
        raise DomainError(f"need at least {MIN_SAMPLES} local samples, got {len(data)}")


def loss_divergence(losses_t, losses_prev, cfg: ThresholdConfig) -> tuple[LossDivergence, bool]:
    """Decision layer of the loss analysis on precomputed per-sample losses."""
    lt = np.asarray(losses_t, dtype=np.float64)
    lp = np.asarray(losses_prev, dtype=np.float64)
    cur, prev = _loss_stats(lt), _loss_stats(lp)
    r_lmax = safe_ratio(cur["max"], prev["max"])
    r_p95 = safe_ratio(cur["p95"], prev["p95"])
    r_cv = safe_ratio(cur["cv"], prev["cv"])
    r_spikes = float(np.mean(lt > prev["mean"] + 3.0 * prev["std"]))
    A = (
        int(cur["max"] > cfg.tau_lmax and r_lmax > cfg.tau_max_inc),
        int(r_spikes > cfg.tau_spikes),
        int(r_p95 > cfg.tau_p95),
        int(r_cv > cfg.tau_cv_ratio),
    )
    div = LossDivergence(cur, prev, r_lmax, r_p95, r_cv, r_spikes, A)
    return div, div.count >= cfg.count_loss


def analyze_loss(
    model_t: ModelParams, model_prev: ModelParams, data: LabeledDataset, cfg: ThresholdConfig
) -> tuple[LossDivergence, bool]:
    """Compare per-sample loss distributions of the received and trusted
    models on local data.  Bit-identical models never flag."""
    _check_pair(model_t, model_prev, data)
    lp = per_sample_losses(model_prev, data)
    if same_parameters(model_t, model_prev):
        div, _ = loss_divergence(lp, lp, cfg)
        div.identical = True
        div.A = (0, 0, 0, 0)
        return div, False
    return loss_divergence(per_sample_losses(model_t, data), lp, cfg)


def grad_divergence(norms_t, norms_prev, cfg: ThresholdConfig) -> tuple[GradDivergence, bool]:
    nt = np.asarray(norms_t, dtype=np.float64)
    npv = np.asarray(norms_prev, dtype=np.float64)
    mu_t, sd_t = float(nt.mean()), float(nt.std())
    mu_p, sd_p = float(npv.mean()), float(npv.std())
    if mu_p == 0:
        div = GradDivergence(mu_t, sd_t, mu_p, sd_p, 0.0, 0.0, (0, 0, 0),
                             "trusted model has zero gradient norms; no signal")
        return div, False
    r_norm = (mu_p - mu_t) / mu_p
    r_var = (sd_p - sd_t) / sd_p if sd_p > 0 else 0.0
    B = (
        int(r_norm > cfg.tau_g_norm),
        int(r_var > cfg.tau_g_var),
        int(mu_t < COLLAPSE_FACTOR * mu_p),
    )
    div = GradDivergence(mu_t, sd_t, mu_p, sd_p, r_norm, r_var, B)
    return div, div.count >= cfg.count_grad


def analyze_gradients(
    model_t: ModelParams, model_prev: ModelParams, data: LabeledDataset, cfg: ThresholdConfig
) -> tuple[GradDivergence, bool]:
    _check_pair(model_t, model_prev, data)
    return grad_divergence(per_sample_grad_norms(model_t, data), per_sample_grad_norms(model_prev, data), cfg)


# --------------------------------------------------------------------------


@dataclass
class DetectionVerdict:
    static: list[StaticScores]
    static_flag: bool
    loss: LossDivergence | None
    loss_flag: bool
    grad: GradDivergence | None
    grad_flag: bool
    config: str
    round: int | None = None
    client: int | None = None

    @property
    def abort(self) -> bool:
        return self.static_flag or self.loss_flag or self.grad_flag

    @property
    def offending_layers(self) -> list[int]:
        return [s.layer for s in self.static if s.flag]

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "-inf" if v < 0 else "nan"
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean({
            "round": self.round,
            "client": self.client,
            "config": self.config,
            "abort": self.abort,
            "static": {"flag": self.static_flag, "offending_layers": self.offending_layers,
                       "layers": [asdict(s) for s in self.static]},
            "loss": {"flag": self.loss_flag, **(asdict(self.loss) if self.loss else {})},
            "grad": {"flag": self.grad_flag, **(asdict(self.grad) if self.grad else {})},
        })


def run_detectors(
    model_t: ModelParams,
    model_prev: ModelParams,
    data: LabeledDataset,
    cfg: ThresholdConfig,
    round: int | None = None,
    client: int | None = None,
) -> DetectionVerdict:
    static, s_flag = detect_handcrafted(model_t, cfg)
    loss, l_flag = analyze_loss(model_t, model_prev, data, cfg)
    grad, g_flag = analyze_gradients(model_t, model_prev, data, cfg)
    return DetectionVerdict(static, s_flag, loss, l_flag, grad, g_flag, cfg.name, round, client)


def with_name(cfg: ThresholdConfig, name: str) -> ThresholdConfig:
    return replace(cfg, name=name)
