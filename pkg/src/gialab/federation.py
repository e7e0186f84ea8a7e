"""In-process federation: client sampling, FedSGD / FedAvg rounds and the
per-client memory of the last trusted model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .exceptions import DomainError, ProtocolError, SelectionError
from .nn import DenseLayer, LabeledDataset, ModelParams, batch_gradient, local_train

# (client, received model) -> True to abort before local work
AbortHook = Callable[["ClientState", ModelParams], bool]


@dataclass(frozen=True)
class ClientState:
    id: int
    shard: LabeledDataset
    last_trusted_model: ModelParams | None = None
    last_participation_round: int | None = None

    def __post_init__(self):
        if self.last_participation_round is not None and self.last_trusted_model is None:
            raise ProtocolError(f"client {self.id} participated but holds no trusted model")


@dataclass(frozen=True)
class AttackAssignment:
    kind: str
    victims: tuple[int, ...]
    model: ModelParams
    # the server keeps victim updates for inversion instead of averaging them
    aggregate_victims: bool = False


@dataclass(frozen=True)
class RoundPlan:
    selected: tuple[int, ...]
    attack: AttackAssignment | None = None

    def __post_init__(self):
        if not self.selected:
            raise SelectionError("a round needs at least one selected client")
        if self.attack is not None and not set(self.attack.victims) <= set(self.selected):
            raise SelectionError("victims must be among the selected clients")

    def aggregates(self, cid: int) -> bool:
        return self.attack is None or self.attack.aggregate_victims or cid not in self.attack.victims

    def model_for(self, cid: int, global_model: ModelParams) -> ModelParams:
        if self.attack is not None and cid in self.attack.victims:
            return self.attack.model
        return global_model


@dataclass(frozen=True)
class FederationState:
    global_model: ModelParams
    clients: tuple[ClientState, ...]
    round: int = 0
    rng_seed: int = 0
    # "received": keep the model the client was sent; "local": keep the
    # model the client produced by local training (FedAvg only)
    trust: str = "received"

    def client(self, cid: int) -> ClientState:
        return self.clients[cid]


@dataclass
class RoundResult:
    state: FederationState
    aborted: list[int] = field(default_factory=list)
    contributors: list[int] = field(default_factory=list)


def new_federation(
    model: ModelParams, shards: Sequence[LabeledDataset], seed: int = 0, trust: str = "received"
) -> FederationState:
    if trust not in ("received", "local"):
        raise DomainError(f"unknown trust mode {trust!r}")
    clients = tuple(ClientState(i, s) for i, s in enumerate(shards))
    return FederationState(model, clients, 0, seed, trust)


def quota(fraction: float, n: int) -> int:
    if not 0 < fraction <= 1:
        raise SelectionError("participation fraction must be in (0, 1]")
    return max(1, math.ceil(round(fraction * n, 9)))


def select_clients(
    state: FederationState, fraction: float, force_include: Sequence[int] = (), seed: int = 0
) -> list[int]:
    n = len(state.clients)
    m = quota(fraction, n)
    forced = sorted(set(int(c) for c in force_include))
    if len(forced) > m:
        raise SelectionError(f"{len(forced)} forced clients exceed the quota of {m}")
    if any(not 0 <= c < n for c in forced):
        raise SelectionError("forced client id out of range")
    rest = [c for c in range(n) if c not in forced]
    rng = np.random.default_rng(seed)
    picked = rng.choice(rest, size=m - len(forced), replace=False).tolist() if m > len(forced) else []
    return sorted(forced + [int(c) for c in picked])


def _check_shape(cid: int, ref: ModelParams, other) -> None:
    shapes = ref.shapes()
    got = other.shapes() if isinstance(other, ModelParams) else tuple(
        (w.shape[0], w.shape[1], s[2]) for w, s in zip(other.weights, shapes)
    )
    if got != shapes:
        raise ProtocolError(f"update from client {cid} does not match the global model")


def _client_rng(state: FederationState, cid: int) -> int:
    return int(np.random.SeedSequence([state.rng_seed, state.round, cid]).generate_state(1)[0])


def _finish(state: FederationState, new_global, plan, kept: dict, aborted, contributors) -> RoundResult:
    clients = list(state.clients)
    for cid, trusted in kept.items():
        clients[cid] = replace(clients[cid], last_trusted_model=trusted, last_participation_round=state.round)
    new_state = replace(state, global_model=new_global, clients=tuple(clients), round=state.round + 1)
    return RoundResult(new_state, aborted, contributors)


def run_round_fedsgd(
    state: FederationState,
    plan: RoundPlan,
    batch_size: int,
    lr: float,
    abort_hook: AbortHook | None = None,
) -> RoundResult:
    """Clients send one mini-batch gradient; the server steps along their mean."""
    theta = state.global_model
    grads, kept, aborted, contributors = [], {}, [], []
    for cid in plan.selected:
        client = state.client(cid)
        received = plan.model_for(cid, theta)
        if abort_hook is not None and abort_hook(client, received):
            aborted.append(cid)
            continue
        rng = np.random.default_rng(_client_rng(state, cid))
        bs = min(batch_size, len(client.shard))
        batch = client.shard.subset(rng.choice(len(client.shard), size=bs, replace=False))
        g = batch_gradient(received, batch).scale(1.0 / bs)
        _check_shape(cid, theta, g)
        kept[cid] = received
        if plan.aggregates(cid):
            grads.append(g)
            contributors.append(cid)
    new_global = theta
    if grads:
        total = grads[0]
        for g in grads[1:]:
            total = total + g
        new_global = theta.apply_update(total, lr / len(grads))
    return _finish(state, new_global, plan, kept, aborted, contributors)


def average_models(models: Sequence[ModelParams], weights: Sequence[float] | None = None) -> ModelParams:
    if weights is None:
        w = np.full(len(models), 1.0 / len(models))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    ref = models[0]
    layers = []
    for i, layer in enumerate(ref.layers):
        W = sum(wi * m.layers[i].weights for wi, m in zip(w, models))
        b = sum(wi * m.layers[i].bias for wi, m in zip(w, models))
        layers.append(DenseLayer(W, b, layer.activation))
    return ModelParams(tuple(layers), ref.split_index)


def run_round_fedavg(
    state: FederationState,
    plan: RoundPlan,
    local_steps: int,
    batch_size: int,
    lr: float,
    weighted: bool = False,
    abort_hook: AbortHook | None = None,
) -> RoundResult:
    """Clients train locally for ``local_steps``; the server takes the
    plain (or shard-size weighted) mean of the returned models."""
    if local_steps < 1:
        raise DomainError("local_steps must be >= 1")
    theta = state.global_model
    models, sizes, kept, aborted, contributors = [], [], {}, [], []
    for cid in plan.selected:
        client = state.client(cid)
        received = plan.model_for(cid, theta)
        if abort_hook is not None and abort_hook(client, received):
            aborted.append(cid)
            continue
        local = local_train(received, client.shard, local_steps, batch_size, lr, _client_rng(state, cid))
        _check_shape(cid, theta, local)
        kept[cid] = local if state.trust == "local" else received
        if plan.aggregates(cid):
            models.append(local)
            sizes.append(len(client.shard))
            contributors.append(cid)
    new_global = average_models(models, sizes if weighted else None) if models else theta
    return _finish(state, new_global, plan, kept, aborted, contributors)
