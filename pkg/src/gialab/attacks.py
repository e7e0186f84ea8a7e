"""Malicious-server model manipulations and the matching closed-form
feature reconstructions.

Two handcrafted transforms (quantile binning and paired weights) act on
the first two linear layers of the classifier head and leave the
architecture untouched.  Two learned attacks are modelled by surrogates
that reproduce the statistical footprint a client can observe: a
weighted-loss fine-tune that blows up the loss on a set of target classes,
and a logit rescaling that collapses per-sample gradient norms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import AttackError, DomainError, NumericError
from .nn import (
    Activation,
    GradientSet,
    LabeledDataset,
    ModelParams,
    batch_gradient,
    layer_inputs,
    per_sample_losses,
)

EPS = 1e-9


class AttackKind(str, enum.Enum):
    BINNING = "binning"
    PAIRED = "paired"
    LOSS_AMPLIFY = "loss_amplify"
    GRAD_SUPPRESS = "grad_suppress"


DEFAULT_LR = {AttackKind.LOSS_AMPLIFY: 0.02, AttackKind.GRAD_SUPPRESS: 0.5}
DEFAULT_STEPS = {AttackKind.LOSS_AMPLIFY: 200, AttackKind.GRAD_SUPPRESS: 500}


@dataclass(frozen=True)
class BinningAttackParams:
    feature_vector: np.ndarray
    quantiles: np.ndarray
    target_layer: int
    uniform_value: float
    uniform_bias: float

    def __post_init__(self):
        q = np.asarray(self.quantiles, dtype=np.float64)
        if q.size < 2 or np.any(np.diff(q) <= 0):
            raise AttackError("quantile boundaries must be strictly ascending")

    @property
    def k(self) -> int:
        return self.quantiles.size


@dataclass(frozen=True)
class PairedAttackParams:
    alphas: np.ndarray
    target_layer: int

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if a.size == 0 or np.any(a >= 0):
            raise AttackError("every pairing coefficient must be strictly negative")
        object.__setattr__(self, "alphas", a)

    @classmethod
    def random(cls, n_pairs: int, target_layer: int, seed: int = 0, low: float = 0.5, high: float = 2.0):
        rng = np.random.default_rng(seed)
        return cls(-rng.uniform(low, high, n_pairs), target_layer)


@dataclass(frozen=True)
class SurrogateAttackParams:
    kind: AttackKind
    target_classes: frozenset = field(default_factory=frozenset)
    amplify_weight: float = 50.0
    finetune_steps: int | None = None
    lr: float | None = None
    flip: bool = True
    scale: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR.get(self.kind, 0.05))
        if self.finetune_steps is None:
            object.__setattr__(self, "finetune_steps", DEFAULT_STEPS.get(self.kind, 200))
        object.__setattr__(self, "target_classes", frozenset(int(c) for c in self.target_classes))
        if self.finetune_steps < 0 or (self.kind == AttackKind.LOSS_AMPLIFY and self.finetune_steps < 1):
            raise AttackError("finetune_steps must be >= 1")
        if self.kind == AttackKind.LOSS_AMPLIFY:
            if self.flip and self.amplify_weight <= 1:
                raise AttackError("amplify_weight must exceed 1")
        if self.kind == AttackKind.GRAD_SUPPRESS and self.scale < 1:
            raise AttackError("suppression scale must be >= 1")


# --------------------------------------------------------------------------
# quantile binning


def _head_pair(model: ModelParams, target_layer: int | None) -> int:
    t = model.split_index if target_layer is None else target_layer
    if not 0 <= t < len(model) - 1:
        raise AttackError(f"need two consecutive linear layers starting at {t}")
    if model.layers[t].activation != Activation.RELU:
        raise AttackError(f"layer {t} must be a ReLU layer")
    return t


def apply_binning(
    model: ModelParams,
    aux: LabeledDataset,
    target_layer: int | None = None,
    uniform_value: float | None = None,
    uniform_bias: float | None = None,
) -> tuple[ModelParams, BinningAttackParams]:
    t = _head_pair(model, target_layer)
    first, second = model.layers[t], model.layers[t + 1]
    k, d = first.n_out, first.n_in
    if len(aux) == 0:
        raise AttackError("auxiliary dataset is empty")
    v = np.full(d, 1.0 / np.sqrt(d))
    proj = layer_inputs(model, aux.features, t) @ v
    if np.unique(proj).size < k:
        raise AttackError(
            f"only {np.unique(proj).size} distinct projections for {k} bins (degenerate quantiles)"
        )
    # lowest boundary sits at the aux minimum so the k bins carry equal mass
    q = np.quantile(proj, np.arange(k) / k)
    if np.any(np.diff(q) <= 0):
        raise AttackError("degenerate quantile boundaries; enlarge the auxiliary set")
    u = 1.0 / k if uniform_value is None else float(uniform_value)
    ub = 1.0 / k if uniform_bias is None else float(uniform_bias)

    w2 = np.full((second.n_out, k), u)
    if t + 1 == len(model) - 1:
        # Rows feeding softmax directly must differ across classes; identical
        # logits would zero every gradient reaching the bin neurons.
        w2 *= np.arange(1, second.n_out + 1)[:, None]
    params = BinningAttackParams(v, q, t, u, ub)
    out = model.with_layer(t, first.replace(np.tile(v, (k, 1)), -q))
    out = out.with_layer(t + 1, second.replace(w2, np.full(second.n_out, ub)))
    return out, params


def bin_assignments(model: ModelParams, params: BinningAttackParams, x) -> np.ndarray:
    """Highest active bin neuron per sample (-1 when none fires)."""
    proj = layer_inputs(model, x, params.target_layer) @ params.feature_vector
    return (proj[:, None] > params.quantiles[None, :]).sum(axis=1) - 1


def reconstruct_binning(
    grads: GradientSet, params: BinningAttackParams, eps: float = EPS
) -> list[tuple[int, np.ndarray]]:
    """Recover layer inputs bin by bin from summed gradients.

    Bin r collects inputs whose highest active neuron is r, so the
    difference of adjacent neuron gradients leaves exactly their share.
    Bins whose bias-gradient difference is below ``eps`` are skipped.
    """
    gw = grads.weights[params.target_layer]
    gb = grads.biases[params.target_layer]
    out = []
    k = params.k
    for r in range(k):
        if r + 1 < k:
            num = gw[r] - gw[r + 1]
            den = gb[r] - gb[r + 1]
        else:
            num, den = gw[r], gb[r]
        if abs(den) > eps:
            out.append((r, num / den))
    return out


# --------------------------------------------------------------------------
# paired weights


def apply_paired(model: ModelParams, params: PairedAttackParams) -> ModelParams:
    t = _head_pair(model, params.target_layer)
    first, second = model.layers[t], model.layers[t + 1]
    if first.n_out % 2:
        raise AttackError(f"layer {t} has odd width {first.n_out}; pairing needs even")
    if params.alphas.size != first.n_out // 2:
        raise AttackError(f"need {first.n_out // 2} pairing coefficients, got {params.alphas.size}")
    w = first.weights.copy()
    b = first.bias.copy()
    w[1::2] = params.alphas[:, None] * w[0::2]
    b[1::2] = params.alphas * b[0::2]
    out = model.with_layer(t, first.replace(w, b))
    return out.with_layer(t + 1, second.replace(np.abs(second.weights)))


def reconstruct_paired(
    grads: GradientSet, labels: Sequence[int], layer: int = -1, eps: float = EPS
) -> np.ndarray:
    """Batch-averaged input of ``layer`` (default: the output layer) from
    the gradient rows of the labels present in the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    num = grads.weights[layer][labels].sum(axis=0)
    den = grads.biases[layer][labels].sum()
    if abs(den) < eps:
        raise AttackError(f"bias-gradient sum {den:.3g} too small to invert")
    return num / den


# --------------------------------------------------------------------------
# learned-attack surrogates


def apply_loss_amplify(model: ModelParams, aux: LabeledDataset, params: SurrogateAttackParams) -> ModelParams:
    """Fine-tune on aux with per-sample weights: targets get
    ``amplify_weight`` and (with ``flip``) ascend their loss, the rest
    descend with weight 1."""
    if not params.target_classes:
        raise DomainError("target_classes must be nonempty")
    targets = np.isin(aux.labels, sorted(params.target_classes))
    if not targets.any():
        raise DomainError("no auxiliary sample belongs to the target classes")
    w = np.where(targets, params.amplify_weight * (-1.0 if params.flip else 1.0), 1.0)
    w = w / np.abs(w).sum()
    for _ in range(params.finetune_steps):
        g = batch_gradient(model, aux, w)
        # ascent on cross-entropy grows multiplicatively through the ReLU
        # stack; unit-norm clipping keeps each step bounded by lr
        step = params.lr / max(1.0, g.norm())
        try:
            model = model.apply_update(g, step)
        except NumericError as exc:
            raise NumericError(f"loss amplification diverged ({exc}); use a smaller lr", exc.layer) from exc
    if not np.all(np.isfinite(per_sample_losses(model, aux))):
        raise NumericError("loss amplification diverged; use a smaller lr")
    return model


def apply_gradient_suppress(model: ModelParams, aux: LabeledDataset, params: SurrogateAttackParams) -> ModelParams:
    """Fit aux for ``finetune_steps`` full-batch steps, then multiply the
    output layer by ``scale``: softmax saturates and per-sample gradients
    of confidently classified inputs vanish.  The rescaling itself leaves
    argmax predictions unchanged."""
    if len(aux) == 0:
        raise DomainError("auxiliary dataset is empty")
    step = params.lr / len(aux)
    for _ in range(params.finetune_steps):
        model = model.apply_update(batch_gradient(model, aux), step)
    s = float(params.scale)
    last = model.layers[-1]
    return model.with_layer(len(model) - 1, last.replace(s * last.weights, s * last.bias))
