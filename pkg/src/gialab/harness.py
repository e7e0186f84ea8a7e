"""Experiment orchestration: federations with scheduled attack rounds,
detector verdicts on every selected client, TPR/FPR/ROC bookkeeping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import attacks
from .attacks import AttackKind, PairedAttackParams, SurrogateAttackParams
from .data import gen_synthetic, iid_partition, lda_partition
from .detection import (
    DetectionVerdict,
    ThresholdConfig,
    detect_handcrafted,
    grad_divergence,
    interpolate_configs,
    layer_scores,
    loss_divergence,
    preset,
    run_detectors,
    same_parameters,
)
from .exceptions import AttackError, ConfigError, GialabError, NumericError
from .federation import (
    AttackAssignment,
    RoundPlan,
    new_federation,
    run_round_fedavg,
    run_round_fedsgd,
    select_clients,
)
from .nn import (
    LabeledDataset,
    ModelParams,
    desk_model,
    per_sample_grad_norms,
    per_sample_losses,
)

log = logging.getLogger(__name__)


@dataclass
class AttackSpec:
    kind: str | None = None
    target_classes: list[int] = field(default_factory=lambda: [0])
    amplify_weight: float = 50.0
    finetune_steps: int | None = None
    lr: float | None = None
    flip: bool = True
    scale: float = 50.0
    alpha_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if self.kind is not None:
            try:
                AttackKind(self.kind)
            except ValueError:
                raise ConfigError(f"unknown attack kind {self.kind!r}") from None


@dataclass
class ExperimentConfig:
    clients: int = 10
    rounds: int = 60
    participation: float = 1.0
    algorithm: str = "fedavg"
    partition: str = "lda"
    alpha: float = 0.3
    victim_fraction: float = 0.2
    victim_batch: int = 64
    attack: AttackSpec = field(default_factory=AttackSpec)
    attack_rounds: list[int] = field(default_factory=list)
    detector_config: Any = "standard"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    # desk-scale task and training knobs
    classes: int = 4
    dim: int = 16
    per_class: int = 1000
    spread: float = 0.5
    aux_fraction: float = 0.2
    head_width: int = 16
    local_steps: int = 5
    batch_size: int = 32
    lr: float = 0.1
    weighted: bool = False
    trust: str = "received"
    enforce_abort: bool = True
    aggregate_victim_updates: bool = False
    eval_rounds: list[int] | None = None

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackSpec(**self.attack)
        if self.algorithm not in ("fedavg", "fedsgd"):
            raise ConfigError(f"algorithm must be fedavg or fedsgd, not {self.algorithm!r}")
        if self.partition not in ("lda", "iid"):
            raise ConfigError(f"partition must be lda or iid, not {self.partition!r}")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must be in (0, 1]")
        if self.rounds < 1 or self.clients < 2:
            raise ConfigError("need rounds >= 1 and clients >= 2")
        if any(not 1 <= r <= self.rounds for r in self.attack_rounds):
            raise ConfigError(f"attack rounds must lie in [1, {self.rounds}]")
        if self.attack_rounds and self.attack.kind is None:
            raise ConfigError("attack rounds given but no attack kind")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.thresholds()

    def thresholds(self) -> ThresholdConfig:
        if isinstance(self.detector_config, ThresholdConfig):
            return self.detector_config
        if isinstance(self.detector_config, str):
            return preset(self.detector_config)
        if isinstance(self.detector_config, dict):
            return ThresholdConfig.from_dict(self.detector_config)
        raise ConfigError("detector_config must be a preset name or a threshold mapping")

    def n_victims(self) -> int:
        return max(1, int(round(self.victim_fraction * self.clients))) if self.victim_fraction > 0 else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.detector_config, ThresholdConfig):
            d["detector_config"] = self.detector_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


# --------------------------------------------------------------------------
# exposure snapshots: everything the decision layer needs, so thresholds can
# be re-applied without re-running training


@dataclass
class Exposure:
    seed: int
    round: int
    client: int
    victim: bool
    attacked: bool
    first_selection: bool
    identical: bool
    static_raw: list[tuple]  # (layer, W-derived D, H, R, B_m, B_s) per layer
    losses_t: np.ndarray
    losses_prev: np.ndarray
    norms_t: np.ndarray
    norms_prev: np.ndarray

    @property
    def positive(self) -> bool:
        return self.victim and self.attacked

    def decide(self, cfg: ThresholdConfig) -> tuple[bool, bool, bool]:
        static = False
        for layer, D, H, R, b_m, b_s in self.static_raw:
            hits = 0
            if D is not None:
                hits += (D < cfg.tau_D) + (H < cfg.tau_H) + (R < cfg.tau_R)
            if b_m is not None:
                hits += (b_m + b_s) >= 1
            if hits >= cfg.count_static:
                static = True
        if self.identical:
            return static, False, False
        _, lf = loss_divergence(self.losses_t, self.losses_prev, cfg)
        _, gf = grad_divergence(self.norms_t, self.norms_prev, cfg)
        return static, lf, gf


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, positive: bool, flagged: bool) -> None:
        if positive:
            if flagged:
                self.tp += 1
            else:
                self.fn += 1
        elif flagged:
            self.fp += 1
        else:
            self.tn += 1


def compute_tpr_fpr(counts: Counts) -> tuple[float | None, float | None]:
    tpr = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    fpr = counts.fp / (counts.fp + counts.tn) if counts.fp + counts.tn else None
    return tpr, fpr


@dataclass
class RunResult:
    seed: int
    counts: Counts
    log_lines: list[str]
    exposures: list[Exposure]
    victims: list[int]
    first_selection: Counts
    valid: bool = True
    error: str | None = None
    final_accuracy: float | None = None


def _mean_std(values: Iterable[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


@dataclass
class ExperimentReport:
    config: dict
    runs: list[dict]
    tpr_mean: float | None
    tpr_std: float | None
    fpr_mean: float | None
    fpr_std: float | None
    totals: dict
    first_selection_fpr: float | None = None
    roc: list[tuple[float, float]] | None = None
    auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------


def build_world(cfg: ExperimentConfig, seed: int):
    """Data split, victim choice and client shards for one seed."""
    rng = np.random.default_rng(seed)
    total = gen_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.spread, seed)
    n_aux = int(round(cfg.aux_fraction * len(total)))
    aux = total.subset(np.arange(n_aux))
    train = total.subset(np.arange(n_aux, len(total)))
    min_shard = max(cfg.victim_batch, 16)
    if cfg.partition == "lda":
        plan = lda_partition(train, cfg.clients, cfg.alpha, seed, min_shard=min_shard)
    else:
        plan = iid_partition(train, cfg.clients, seed)
    victims = sorted(rng.choice(cfg.clients, size=cfg.n_victims(), replace=False).tolist())
    shards = []
    for cid, idx in enumerate(plan.shards):
        idx = np.asarray(idx)
        if cid in victims and len(idx) > cfg.victim_batch:
            idx = np.sort(rng.choice(idx, size=cfg.victim_batch, replace=False))
        shards.append(train.subset(idx))
    return train, aux, shards, victims


def craft_attack(cfg: ExperimentConfig, theta: ModelParams, aux: LabeledDataset, seed: int, rnd: int) -> ModelParams:
    spec = cfg.attack
    kind = AttackKind(spec.kind)
    if kind == AttackKind.BINNING:
        return attacks.apply_binning(theta, aux)[0]
    if kind == AttackKind.PAIRED:
        width = theta.layers[theta.split_index].n_out
        lo, hi = spec.alpha_range
        params = PairedAttackParams.random(width // 2, theta.split_index, seed * 1000 + rnd, lo, hi)
        return attacks.apply_paired(theta, params)
    sp = SurrogateAttackParams(
        kind, frozenset(spec.target_classes), spec.amplify_weight, spec.finetune_steps, spec.lr, spec.flip, spec.scale
    )
    if kind == AttackKind.LOSS_AMPLIFY:
        return attacks.apply_loss_amplify(theta, aux, sp)
    return attacks.apply_gradient_suppress(theta, aux, sp)


def fresh_baseline(cfg: ExperimentConfig, seed: int) -> ModelParams:
    """The initial model the server declares, rebuilt by the client from
    the announced seed; used as the trusted reference before a client has
    ever participated."""
    return desk_model(cfg.dim, cfg.classes, cfg.head_width, seed=seed)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def run_single(cfg: ExperimentConfig, seed: int) -> RunResult:
    thresholds = cfg.thresholds()
    train, aux, shards, victims = build_world(cfg, seed)
    model = desk_model(cfg.dim, cfg.classes, cfg.head_width, seed=seed)
    state = new_federation(model, shards, seed, cfg.trust)
    attack_rounds = set(cfg.attack_rounds)
    eval_rounds = None if cfg.eval_rounds is None else set(cfg.eval_rounds)
    counts, first_counts = Counts(), Counts()
    lines, exposures = [], []
    seen: set[int] = set()

    for rnd in range(1, cfg.rounds + 1):
        attacked = rnd in attack_rounds
        sel_seed = int(np.random.SeedSequence([seed, rnd, 104729]).generate_state(1)[0])
        selected = select_clients(state, cfg.participation, victims if attacked else (), sel_seed)
        assignment = None
        if attacked:
            try:
                malicious = craft_attack(cfg, state.global_model, aux, seed, rnd)
            except (AttackError, GialabError, FloatingPointError) as exc:
                log.warning("seed %d round %d: attack construction failed: %s", seed, rnd, exc)
                return RunResult(seed, counts, lines, exposures, victims, first_counts, False, str(exc))
            assignment = AttackAssignment(cfg.attack.kind, tuple(victims), malicious,
                                          cfg.aggregate_victim_updates)
        plan = RoundPlan(tuple(selected), assignment)
        verdicts = []

        def hook(client, received):
            first = client.last_trusted_model is None
            baseline = fresh_baseline(cfg, seed) if first else client.last_trusted_model
            v = run_detectors(received, baseline, client.shard, thresholds, rnd, client.id)
            is_victim = client.id in victims
            positive = is_victim and attacked
            record = v.to_dict()
            record.update(victim=is_victim, positive=positive, first_selection=first,
                          received=received.digest())
            if eval_rounds is None or rnd in eval_rounds:
                counts.add(positive, v.abort)
                if first and not positive:
                    first_counts.add(False, v.abort)
                record["counted"] = True
                exposures.append(Exposure(
                    seed, rnd, client.id, is_victim, attacked, first, same_parameters(received, baseline),
                    [(s.layer, s.D, s.H, s.R, s.B_m, s.B_s) for s in v.static],
                    per_sample_losses(received, client.shard), per_sample_losses(baseline, client.shard),
                    per_sample_grad_norms(received, client.shard), per_sample_grad_norms(baseline, client.shard),
                ))
            else:
                record["counted"] = False
            verdicts.append(record)
            return v.abort and cfg.enforce_abort

        if cfg.algorithm == "fedavg":
            res = run_round_fedavg(state, plan, cfg.local_steps, cfg.batch_size, cfg.lr, cfg.weighted, hook)
        else:
            res = run_round_fedsgd(state, plan, cfg.batch_size, cfg.lr, hook)
        state = res.state
        seen.update(selected)
        global_loss = float(per_sample_losses(state.global_model, aux).mean())
        if not np.isfinite(global_loss):
            raise NumericError(f"seed {seed} round {rnd}: global loss diverged")
        lines.append(_json_line({
            "seed": seed,
            "round": rnd,
            "selected": list(selected),
            "attacked": attacked,
            "victims": victims if attacked else [],
            "all_victims": victims,
            "aborted": res.aborted,
            "verdicts": verdicts,
            "global_loss": global_loss,
        }))
    from .nn import accuracy

    return RunResult(seed, counts, lines, exposures, victims, first_counts,
                     final_accuracy=accuracy(state.global_model, aux))


def _report(cfg: ExperimentConfig, results: Sequence[RunResult]) -> ExperimentReport:
    runs, tprs, fprs = [], [], []
    total, first_total = Counts(), Counts()
    for r in results:
        tpr, fpr = compute_tpr_fpr(r.counts)
        runs.append({
            "seed": r.seed, "valid": r.valid, "error": r.error, "victims": r.victims,
            "counts": asdict(r.counts), "tpr": tpr, "fpr": fpr,
            "first_selection": asdict(r.first_selection), "final_accuracy": r.final_accuracy,
        })
        if not r.valid:
            continue
        tprs.append(tpr)
        fprs.append(fpr)
        for k in ("tp", "fp", "tn", "fn"):
            setattr(total, k, getattr(total, k) + getattr(r.counts, k))
            setattr(first_total, k, getattr(first_total, k) + getattr(r.first_selection, k))
    tm, ts = _mean_std(tprs)
    fm, fs = _mean_std(fprs)
    return ExperimentReport(cfg.to_dict(), runs, tm, ts, fm, fs, asdict(total),
                            compute_tpr_fpr(first_total)[1])


def run_experiment(cfg: ExperimentConfig, keep: list | None = None) -> ExperimentReport:
    """Run every seed; if ``keep`` is a list, the per-seed RunResults are
    appended to it (round logs and cached exposures)."""
    results = [run_single(cfg, s) for s in cfg.seeds]
    if keep is not None:
        keep.extend(results)
    return _report(cfg, results)


def counts_from_log(lines: Iterable[str]) -> Counts:
    """Re-derive confusion counts from a round log."""
    c = Counts()
    for line in lines:
        rec = json.loads(line)
        victims = set(rec["victims"])
        for v in rec["verdicts"]:
            if not v.get("counted", True):
                continue
            positive = rec["attacked"] and v["client"] in victims
            if positive != v["positive"]:
                raise GialabError(f"round {rec['round']}: ground truth mismatch for client {v['client']}")
            c.add(positive, v["abort"])
    return c


# --------------------------------------------------------------------------
# ROC


def trapezoid_auc(points: Sequence[tuple[float, float]]) -> float:
    """Area under (fpr, tpr) points padded with (0,0) and (1,1)."""
    pts = sorted([(0.0, 0.0), *points, (1.0, 1.0)])
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


DETECTORS = ("static", "loss", "grad")


def evaluate_exposures(exposures: Sequence[Exposure], cfg: ThresholdConfig, seeds: Sequence[int],
                       detectors: Sequence[str] = DETECTORS):
    """Seed-averaged (fpr, tpr) under ``cfg`` of the OR of ``detectors``."""
    unknown = set(detectors) - set(DETECTORS)
    if unknown or not detectors:
        raise ConfigError(f"detectors must be a nonempty subset of {DETECTORS}")
    pick = [DETECTORS.index(d) for d in detectors]
    tprs, fprs = [], []
    for s in seeds:
        c = Counts()
        for e in exposures:
            if e.seed == s:
                flags = e.decide(cfg)
                c.add(e.positive, any(flags[i] for i in pick))
        tpr, fpr = compute_tpr_fpr(c)
        tprs.append(tpr)
        fprs.append(fpr)
    return _mean_std(fprs)[0], _mean_std(tprs)[0]


@dataclass
class RocResult:
    points: list[tuple[float, float]]
    auc: float
    configs: list[str]
    envelope_violations: list[int]
    report: ExperimentReport


def roc_sweep(cfg: ExperimentConfig, n_configs: int = 30,
              lo: ThresholdConfig | None = None, hi: ThresholdConfig | None = None) -> RocResult:
    if n_configs < 2:
        raise ConfigError("n_configs must be >= 2")
    kept: list[RunResult] = []
    report = run_experiment(cfg, kept)
    exposures = [e for r in kept if r.valid for e in r.exposures]
    seeds = [r.seed for r in kept if r.valid]
    family = interpolate_configs(lo or preset("conservative"), hi or preset("aggressive"), n_configs)
    raw = []
    for t in family:
        fpr, tpr = evaluate_exposures(exposures, t, seeds)
        raw.append((0.0 if fpr is None else fpr, 0.0 if tpr is None else tpr, t.name))
    raw.sort(key=lambda p: (p[0], p[1]))
    points = [(f, t) for f, t, _ in raw]
    violations = [i for i in range(1, len(points)) if points[i][1] < points[i - 1][1] - 1e-12]
    if violations:
        log.info("ROC family not monotone at %d points", len(violations))
    auc = trapezoid_auc(points)
    report.roc, report.auc = points, auc
    return RocResult(points, auc, [n for _, _, n in raw], violations, report)


# --------------------------------------------------------------------------


def measure_overhead(model: ModelParams, data: LabeledDataset, baseline: ModelParams | None = None,
                     cfg: ThresholdConfig | None = None, reps: int = 10) -> dict:
    """Wall-clock mean/std (seconds) of each detector over ``reps`` calls."""
    from .detection import analyze_gradients, analyze_loss

    cfg = cfg or preset("standard")
    if baseline is None:
        baseline = desk_model(model.n_in, model.n_classes, model.layers[model.split_index].n_out, seed=12345)
    jobs = {
        "handcrafted": lambda: detect_handcrafted(model, cfg),
        "loss": lambda: analyze_loss(model, baseline, data, cfg),
        "gradient": lambda: analyze_gradients(model, baseline, data, cfg),
    }
    out = {}
    for name, fn in jobs.items():
        fn()
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        out[name] = {"mean": float(np.mean(ts)), "std": float(np.std(ts)), "reps": reps}
    return out
