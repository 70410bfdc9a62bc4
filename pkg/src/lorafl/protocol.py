"""The federated loop: local SGD, server aggregation, sampling, accounting.

Three aggregation strategies decide which adapter tensors cross the wire:

* ``full``  — average both tensor roles and broadcast them (FedAvg-style).
* ``ffa``   — the shared role is frozen at its random init; only the
  client-specific role is trained, averaged, and broadcast.
* ``fedsa`` — both roles train, but only the shared role is averaged and
  broadcast; the client-specific role never leaves the client.

A round runs: sample participants -> broadcast server tensors -> E local SGD
steps per participant -> collect uploads -> aggregate -> record metrics.
Everything is driven by named RNG streams derived from the config seed, so a
rerun of the same config reproduces every byte of output.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import adapters
from .adapters import AdapterSpec, FrozenLayer, Variant, a_role, b_role
from .analysis import aggregation_error
from .config import ExperimentConfig
from .linalg import ParameterError, RngStream, gaussian_matrix
from .tasks import (
    Dataset,
    PartitionSpec,
    RegressionGroundTruth,
    gen_classification,
    gen_regression,
    gen_regression_clients,
    partition,
)

DIVERGENCE_LIMIT = 1e6

# stream tags hung off the config seed; fixed so layouts never drift
_TAG_DATA = 2
_TAG_SAMPLING = 4
_TAG_CLIENT = 5
_TAG_EVAL_SPLIT = 6
_TAG_W0 = 7
_TAG_ADAPTER = 8


class Strategy(str, Enum):
    FULL_AVG = "full"
    FREEZE_A = "ffa"
    SHARE_A = "fedsa"


class ProtocolError(RuntimeError):
    """Client updates disagree with the server's expectations."""


class DivergenceError(RuntimeError):
    """Local training produced a non-finite or runaway loss."""

    def __init__(self, client_id: int, loss: float, round_idx: int | None = None):
        self.client_id = client_id
        self.loss = loss
        self.round_idx = round_idx
        self.partial_metrics: list[RoundMetrics] = []
        super().__init__(self._format())

    def _format(self) -> str:
        where = f"round {self.round_idx}" if self.round_idx is not None else "local training"
        return f"divergence at {where}, client {self.client_id}: loss={self.loss}"

    def with_round(self, round_idx: int) -> "DivergenceError":
        err = DivergenceError(self.client_id, self.loss, round_idx)
        err.partial_metrics = self.partial_metrics
        return err


# ---------------------------------------------------------------------------
# losses

def mse_loss_and_grad(pred: np.ndarray, targets: np.ndarray):
    """Mean-over-samples squared L2 error and its gradient w.r.t. pred."""
    n = pred.shape[1]
    err = pred - targets
    loss = float((err * err).sum() / n)
    return loss, (2.0 / n) * err


def cross_entropy_loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy (mean), gradient, and argmax accuracy."""
    n = logits.shape[1]
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[labels, np.arange(n)].mean())
    grad = np.exp(log_p)
    grad[labels, np.arange(n)] -= 1.0
    grad /= n
    acc = float((logits.argmax(axis=0) == labels).mean())
    return loss, grad, acc


def loss_and_grad(out: np.ndarray, data: Dataset):
    if data.kind == "regression":
        loss, grad = mse_loss_and_grad(out, data.targets)
        return loss, grad, float("nan")
    return cross_entropy_loss_and_grad(out, data.labels)


# ---------------------------------------------------------------------------
# chain model helpers

def model_forward(layers: list[FrozenLayer], x: np.ndarray) -> list[np.ndarray]:
    """Forward through the stack; returns [x, h1, ..., output]."""
    acts = [x]
    for layer in layers:
        acts.append(adapters.forward(layer, acts[-1]))
    return acts


def model_adapter_grads(layers: list[FrozenLayer], acts: list[np.ndarray],
                        g_out: np.ndarray) -> list[dict[str, np.ndarray] | None]:
    """Per-layer adapter gradients; None for layers without an adapter."""
    grads: list[dict[str, np.ndarray] | None] = [None] * len(layers)
    g = g_out
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        if layer.adapter is not None:
            grads[idx] = adapters.backward(layer, acts[idx], g)
        if idx > 0:
            g = adapters.input_gradient(layer, g)
    return grads


def apply_sgd_step(layers: list[FrozenLayer],
                   grads: list[dict[str, np.ndarray] | None], lr: float) -> None:
    for layer, layer_grads in zip(layers, grads):
        if not layer_grads:
            continue
        tensors = layer.adapter.tensors()
        for role, grad in layer_grads.items():
            tensors[role] -= lr * grad


def weight_grad_norm_sq(layers: list[FrozenLayer], data: Dataset) -> float:
    """Full-batch ||dL/dW_eff||_F^2 summed over adapted layers."""
    acts = model_forward(layers, data.inputs)
    _, g, _ = loss_and_grad(acts[-1], data)
    total = 0.0
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        if layer.adapter is not None:
            gw = g @ acts[idx].T
            total += float((gw * gw).sum())
        if idx > 0:
            g = adapters.input_gradient(layer, g)
    return total


def evaluate(layers: list[FrozenLayer], data: Dataset) -> tuple[float, float]:
    """(loss, accuracy) on a dataset; accuracy is NaN for regression."""
    out = model_forward(layers, data.inputs)[-1]
    loss, _, acc = loss_and_grad(out, data)
    return loss, acc


# ---------------------------------------------------------------------------
# client / server state

@dataclass
class ClientState:
    """One client's shard, model stack, and private RNG stream."""

    client_id: int
    train_data: Dataset
    eval_data: Dataset | None
    layers: list[FrozenLayer]
    rng: RngStream
    lr: float
    local_steps: int
    batch_size: int | None = None

    def eval_or_train(self) -> Dataset:
        return self.eval_data if self.eval_data is not None else self.train_data


@dataclass
class ServerState:
    strategy: Strategy
    shared: list[dict[str, np.ndarray]]  # per adapted layer: role -> tensor
    adapted_positions: list[int]
    sampling_rate: float = 1.0
    round_idx: int = 0


@dataclass
class ClientRoundStats:
    train_loss: float
    eval_loss: float
    eval_acc: float
    grad_norm_sq: float
    comm_params: int


@dataclass
class RoundMetrics:
    round_idx: int
    per_client: dict[int, ClientRoundStats]
    eval_loss: float
    eval_acc: float
    mean_grad_norm_sq: float
    communicated_params: int
    wall_clock: float

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean([s.train_loss for s in self.per_client.values()]))


@dataclass
class FederationResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    clients: list[ClientState]
    server: ServerState
    init_snapshots: list[list[dict]]
    final_snapshots: list[list[dict]]
    agg_error_rows: list[dict]
    broadcast_log: list[dict] = field(default_factory=list)
    truth: RegressionGroundTruth | None = None


# ---------------------------------------------------------------------------
# wire helpers

def shared_roles(strategy: Strategy, variant: Variant) -> tuple[str, ...]:
    """Tensor roles that cross the wire under a strategy."""
    if strategy == Strategy.FULL_AVG:
        return (a_role(variant), b_role(variant))
    if strategy == Strategy.FREEZE_A:
        return (b_role(variant),)
    return (a_role(variant),)


def extract_upload(client: ClientState, adapted_positions: list[int],
                   roles: tuple[str, ...]) -> list[dict[str, np.ndarray]]:
    payload = []
    for pos in adapted_positions:
        tensors = client.layers[pos].adapter.tensors()
        payload.append({role: tensors[role].copy() for role in roles})
    return payload


def broadcast(server: ServerState, client: ClientState) -> None:
    """Copy the server's shared tensors into the client's adapters."""
    for pos, shared in zip(server.adapted_positions, server.shared):
        adapter = client.layers[pos].adapter
        for role, value in shared.items():
            adapter.set_role(role, value)


def aggregate(server: ServerState,
              client_updates: list[tuple[int, list[dict[str, np.ndarray]]]],
              weights: list[float] | None = None) -> ServerState:
    """Average uploads into the server's shared tensors.

    Uniform 1/m weights by default; explicit weights are normalised. The sum
    runs in ascending client-id order so results are bitwise reproducible.
    """
    if not client_updates:
        raise ProtocolError("aggregate needs at least one client update")
    order = np.argsort([cid for cid, _ in client_updates], kind="stable")
    updates = [client_updates[i] for i in order]
    if weights is None:
        w = [1.0 / len(updates)] * len(updates)
    else:
        if len(weights) != len(client_updates):
            raise ProtocolError("one weight per update required")
        weights = [weights[i] for i in order]
        total = float(sum(weights))
        if total <= 0:
            raise ProtocolError("aggregation weights must sum to > 0")
        w = [float(v) / total for v in weights]
    n_layers = len(server.shared)
    for cid, payload in updates:
        if len(payload) != n_layers:
            raise ProtocolError(
                f"client {cid} sent {len(payload)} layers, expected {n_layers}")
        for pos, (have, want) in enumerate(zip(payload, server.shared)):
            if set(have) != set(want):
                raise ProtocolError(
                    f"client {cid} layer {pos}: roles {sorted(have)} != {sorted(want)}")
            for role in want:
                if have[role].shape != want[role].shape:
                    raise ProtocolError(
                        f"client {cid} layer {pos} role {role}: shape "
                        f"{have[role].shape} != {want[role].shape}")
    new_shared = []
    for pos in range(n_layers):
        entry = {}
        for role in server.shared[pos]:
            acc = np.zeros_like(server.shared[pos][role])
            for (cid, payload), wi in zip(updates, w):
                acc += wi * payload[pos][role]
            entry[role] = acc
        new_shared.append(entry)
    server.shared = new_shared
    return server


def sample_clients(rng: RngStream, m: int, rate: float) -> list[int]:
    """Uniformly sample ceil(rate * m) distinct client ids, sorted."""
    if not 0 < rate <= 1:
        raise ParameterError(f"sampling rate must be in (0, 1], got {rate}")
    count = math.ceil(rate * m)
    if count >= m:
        return list(range(m))
    return sorted(int(i) for i in rng.choice(m, size=count, replace=False))


def _role_sizes(variant: Variant, k: int, d: int, r: int) -> dict[str, int]:
    if variant == Variant.VERA:
        return {a_role(variant): r, b_role(variant): k}
    return {a_role(variant): r * d, b_role(variant): k * r}


def count_comms(strategy: Strategy, adapter_shapes: list[tuple[int, int, int]],
                direction: str = "upload", participants: int = 1,
                variant: Variant = Variant.LORA) -> int:
    """Parameters crossing the wire per round in one direction.

    ``adapter_shapes`` lists (k, d, r) per adapted layer. For matrix adapters
    the per-layer upload is r*(d+k) under full averaging, r*k when only the
    client-specific tensor moves, and r*d when only the shared tensor moves;
    VeRA ships vectors of length r and k instead. Download totals mirror
    upload totals (averaged tensors return to each participant).
    """
    if direction not in ("upload", "download"):
        raise ParameterError(f"direction must be upload or download, got {direction!r}")
    if participants < 0:
        raise ParameterError("participants must be >= 0")
    strategy = Strategy(strategy)
    variant = Variant(variant)
    total = 0
    for k, d, r in adapter_shapes:
        if k < 1 or d < 1 or r < 1:
            raise ParameterError(f"invalid adapter shape ({k}, {d}, {r})")
        sizes = _role_sizes(variant, k, d, r)
        total += sum(sizes[role] for role in shared_roles(strategy, variant))
    return total * participants


# ---------------------------------------------------------------------------
# experiment wiring

@dataclass
class Experiment:
    clients: list[ClientState]
    server: ServerState
    adapted_positions: list[int]
    variant: AdapterSpec
    shapes: list[tuple[int, int, int]]
    truth: RegressionGroundTruth | None


def _split_eval(shard: Dataset, rng: RngStream, eval_fraction: float):
    if eval_fraction <= 0 or shard.n < 2:
        return shard, None
    n_eval = int(round(eval_fraction * shard.n))
    n_eval = max(1, min(shard.n - 1, n_eval))
    order = rng.permutation(shard.n)
    return shard.subset(order[n_eval:]), shard.subset(order[:n_eval])


def _build_layers(cfg: ExperimentConfig, root: RngStream,
                  truth: RegressionGroundTruth | None,
                  spec: AdapterSpec) -> tuple[list[FrozenLayer], list[int]]:
    task = cfg.task
    dims = [task.d, *task.hidden_dims, task.out_dim]
    adapted = sorted(cfg.adapted_layers)
    w0_rng = root.child(_TAG_W0)
    adapter_rng_root = root.child(_TAG_ADAPTER)
    layers = []
    for idx in range(len(dims) - 1):
        d_in, d_out = dims[idx], dims[idx + 1]
        if task.kind == "regression":
            w0 = truth.w0.copy()
        elif task.w0_std == 0.0:
            w0 = np.zeros((d_out, d_in))
        else:
            w0 = gaussian_matrix(w0_rng.child(idx), d_out, d_in,
                                 std=task.w0_std / np.sqrt(d_in))
        adapter = None
        if idx in adapted:
            if spec.variant == Variant.VERA:
                adapter = adapters.init_adapter(spec, d_out, d_in, adapter_rng_root)
            else:
                adapter = adapters.init_adapter(spec, d_out, d_in,
                                                adapter_rng_root.child(idx))
        layers.append(FrozenLayer(w0=w0, adapter=adapter))
    return layers, adapted


def _clone_layers(layers: list[FrozenLayer]) -> list[FrozenLayer]:
    return [FrozenLayer(w0=layer.w0.copy(),
                        adapter=None if layer.adapter is None else layer.adapter.clone(),
                        bias=None if layer.bias is None else layer.bias.copy())
            for layer in layers]


def apply_strategy_freeze(layers: list[FrozenLayer], strategy: Strategy) -> None:
    """Under freeze-A, pin the shared-role tensor at its initial value."""
    if strategy != Strategy.FREEZE_A:
        return
    for layer in layers:
        if layer.adapter is None:
            continue
        if layer.adapter.spec.variant == Variant.VERA:
            layer.adapter.frozen_d_vec = True
        else:
            layer.adapter.frozen_a = True


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Deterministically wire data, shards, models, and server state."""
    root = RngStream(cfg.seed)
    strategy = Strategy(cfg.strategy)
    spec = AdapterSpec(variant=Variant(cfg.variant_kind), rank=cfg.rank,
                       alpha=cfg.alpha)
    task = cfg.task
    data_rng = root.child(_TAG_DATA)
    truth = None
    if task.kind == "regression":
        if task.client_delta_spread > 0:
            shards, truth = gen_regression_clients(
                data_rng, task.k, task.d, max(1, task.n // cfg.m), cfg.m,
                covariance_spec=task.covariance, noise_std=task.noise_std,
                delta_scale=task.delta_scale, delta_rank=task.delta_rank,
                delta_spread=task.client_delta_spread)
        else:
            dataset, truth = gen_regression(
                data_rng, task.k, task.d, task.n,
                covariance_spec=task.covariance, noise_std=task.noise_std,
                delta_scale=task.delta_scale, delta_rank=task.delta_rank)
            parts = partition(dataset, PartitionSpec(
                mode=cfg.partition_mode, num_clients=cfg.m, seed=cfg.seed,
                alpha=cfg.partition_alpha))
            shards = [dataset.subset(p) for p in parts]
    else:
        dataset = gen_classification(data_rng, task.d, task.num_classes,
                                     task.n, task.separation)
        parts = partition(dataset, PartitionSpec(
            mode=cfg.partition_mode, num_clients=cfg.m, seed=cfg.seed,
            alpha=cfg.partition_alpha))
        shards = [dataset.subset(p) for p in parts]

    template, adapted = _build_layers(cfg, root, truth, spec)
    split_rng = root.child(_TAG_EVAL_SPLIT)
    client_rng = root.child(_TAG_CLIENT)
    clients = []
    for i in range(cfg.m):
        train, eval_data = _split_eval(shards[i], split_rng.child(i),
                                       cfg.eval_fraction)
        layers = _clone_layers(template)
        apply_strategy_freeze(layers, strategy)
        clients.append(ClientState(
            client_id=i, train_data=train, eval_data=eval_data, layers=layers,
            rng=client_rng.child(i), lr=cfg.lr, local_steps=cfg.local_steps,
            batch_size=cfg.batch_size))
    roles = shared_roles(strategy, spec.variant)
    shared = [{role: template[pos].adapter.tensors()[role].copy()
               for role in roles} for pos in adapted]
    server = ServerState(strategy=strategy, shared=shared,
                         adapted_positions=adapted,
                         sampling_rate=cfg.sampling_rate)
    shapes = [(template[pos].adapter.k, template[pos].adapter.d, spec.rank)
              for pos in adapted]
    return Experiment(clients=clients, server=server, adapted_positions=adapted,
                      variant=spec, shapes=shapes, truth=truth)


# ---------------------------------------------------------------------------
# training

def _draw_batch(client: ClientState) -> Dataset:
    data = client.train_data
    if client.batch_size is None or client.batch_size >= data.n:
        return data
    idx = client.rng.choice(data.n, size=client.batch_size, replace=False)
    return data.subset(idx)


def local_train(client: ClientState, steps: int | None = None,
                lr: float | None = None) -> ClientState:
    """Run E SGD steps on the client's shard, touching only unfrozen tensors."""
    steps = client.local_steps if steps is None else steps
    lr = client.lr if lr is None else lr
    if lr <= 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    if steps < 1:
        raise ParameterError(f"local steps must be >= 1, got {steps}")
    for _ in range(steps):
        batch = _draw_batch(client)
        acts = model_forward(client.layers, batch.inputs)
        loss, g, _ = loss_and_grad(acts[-1], batch)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(client.client_id, loss)
        grads = model_adapter_grads(client.layers, acts, g)
        apply_sgd_step(client.layers, grads, lr)
    return client


def client_snapshots(client: ClientState,
                     adapted_positions: list[int]) -> list[dict]:
    return [adapters.snapshot(client.layers[pos].adapter)
            for pos in adapted_positions]


def _factor_pairs(client: ClientState, pos: int) -> tuple[np.ndarray, np.ndarray]:
    """(left, right) factors whose product is the layer's delta (up to scale)."""
    ad = client.layers[pos].adapter
    if ad.spec.variant == Variant.VERA:
        return ad.b_vec[:, None] * ad.b, ad.d_vec[:, None] * ad.a
    return ad.b, ad.a


def run_local_only(cfg: ExperimentConfig, epochs: int | None = None):
    """Train every client locally with no aggregation (similarity studies).

    Returns (experiment, init_snapshots, final_snapshots).
    """
    exp = build_experiment(cfg)
    init_snaps = [client_snapshots(c, exp.adapted_positions) for c in exp.clients]
    steps = cfg.similarity_epochs if epochs is None else epochs
    for client in exp.clients:
        local_train(client, steps=steps)
    final_snaps = [client_snapshots(c, exp.adapted_positions) for c in exp.clients]
    return exp, init_snaps, final_snaps


def run_federation(cfg: ExperimentConfig, record_broadcasts: bool = False,
                   progress=None) -> FederationResult:
    """Run the full federated loop for cfg.rounds rounds.

    On divergence the raised error carries the metrics of completed rounds so
    callers can flush partial output. ``progress`` is an optional callback
    invoked with each completed RoundMetrics.
    """
    from .analysis import aggregation_error  # local import; analysis sits above

    exp = build_experiment(cfg)
    strategy = exp.server.strategy
    scale = adapters.effective_scale(exp.variant)
    if exp.variant.variant == Variant.VERA:
        scale = 1.0
    roles = shared_roles(strategy, exp.variant.variant)
    sampling_rng = RngStream(cfg.seed).child(_TAG_SAMPLING)
    init_snaps = [client_snapshots(c, exp.adapted_positions) for c in exp.clients]
    metrics: list[RoundMetrics] = []
    agg_rows: list[dict] = []
    broadcast_log: list[dict] = []

    for round_idx in range(cfg.rounds):
        started = time.perf_counter()
        participants = sample_clients(sampling_rng.child(round_idx), cfg.m,
                                      cfg.sampling_rate)
        for cid in participants:
            broadcast(exp.server, exp.clients[cid])
        if record_broadcasts:
            broadcast_log.append({
                "round": round_idx,
                "participants": list(participants),
                "payload": [{role: tensor.copy() for role, tensor in entry.items()}
                            for entry in exp.server.shared],
            })
        grad_norms = {c.client_id: weight_grad_norm_sq(c.layers, c.train_data)
                      for c in exp.clients}
        for cid in participants:
            try:
                local_train(exp.clients[cid])
            except DivergenceError as err:
                failure = err.with_round(round_idx)
                failure.partial_metrics = metrics
                raise failure from None
        uploads = [(cid, extract_upload(exp.clients[cid], exp.adapted_positions,
                                        roles))
                   for cid in participants]
        for li, pos in enumerate(exp.adapted_positions):
            pairs = [_factor_pairs(exp.clients[cid], pos) for cid in participants]
            report = aggregation_error(pairs, scale=scale)
            agg_rows.append({
                "round": round_idx,
                "layer": pos,
                "frobenius_error": report.frobenius_error,
                "relative_error": report.relative_error,
            })
        weights = None
        if cfg.data_weighted:
            weights = [float(exp.clients[cid].train_data.n) for cid in participants]
        aggregate(exp.server, uploads, weights=weights)
        exp.server.round_idx = round_idx + 1

        comm_each = count_comms(strategy, exp.shapes, "upload", 1,
                                exp.variant.variant)
        per_client = {}
        for client in exp.clients:
            train_loss, _ = evaluate(client.layers, client.train_data)
            eval_loss, eval_acc = evaluate(client.layers, client.eval_or_train())
            per_client[client.client_id] = ClientRoundStats(
                train_loss=train_loss, eval_loss=eval_loss, eval_acc=eval_acc,
                grad_norm_sq=grad_norms[client.client_id],
                comm_params=comm_each if client.client_id in participants else 0)
        stats = list(per_client.values())
        round_metrics = RoundMetrics(
            round_idx=round_idx,
            per_client=per_client,
            eval_loss=float(np.mean([s.eval_loss for s in stats])),
            eval_acc=float(np.mean([s.eval_acc for s in stats])),
            mean_grad_norm_sq=float(np.mean([s.grad_norm_sq for s in stats])),
            communicated_params=comm_each * len(participants),
            wall_clock=time.perf_counter() - started)
        metrics.append(round_metrics)
        if progress is not None:
            progress(round_metrics)

    for client in exp.clients:
        broadcast(exp.server, client)
    final_snaps = [client_snapshots(c, exp.adapted_positions) for c in exp.clients]
    return FederationResult(
        config=cfg, metrics=metrics, clients=exp.clients, server=exp.server,
        init_snapshots=init_snaps, final_snapshots=final_snaps,
        agg_error_rows=agg_rows, broadcast_log=broadcast_log, truth=exp.truth)
