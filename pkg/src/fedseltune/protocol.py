"""Round execution for federated selective-layer fine-tuning.

One round: sample clients, pick per-client layer masks, run masked local SGD
for tau steps on each client, aggregate the accumulated updates with
data-proportional layer-wise weights, and step the global model. All
randomness is derived from (seed, epoch, client_id) so a round is a pure
function of its inputs; clients could train in any order without changing
the result because aggregation always sums in ascending client-id order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    Batch,
    ConfigError,
    GradientVector,
    LayeredModel,
    apply_masked_update,
    backward,
    forward,
)
from .selection import EmptyShardError, StrategyConfig, select_masks
from .rng import child_rng, derive_seed


@dataclass(frozen=True)
class ClientState:
    """One client: its shard, global data share, and per-round layer budget."""

    client_id: int
    shard: object
    alpha: float
    budget: int

    @property
    def d(self) -> int:
        return self.shard.d


def build_clients(shards, budgets) -> list:
    """ClientStates with alpha_i = d_i / sum_j d_j over all clients."""
    if len(budgets) != len(shards):
        raise ConfigError("one budget per shard required")
    total = float(sum(s.d for s in shards))
    if total <= 0:
        raise ConfigError("all shards are empty")
    return [
        ClientState(client_id=s.client_id, shard=s, alpha=s.d / total, budget=int(b))
        for s, b in zip(shards, budgets)
    ]


def sample_clients(clients, count: int, seed: int, epoch: int) -> list:
    """Uniform without-replacement draw of client ids, sorted ascending."""
    if not 1 <= count <= len(clients):
        raise ConfigError(f"cannot sample {count} of {len(clients)} clients")
    rng = child_rng(seed, "sampling", epoch)
    ids = [clients[i].client_id for i in rng.choice(len(clients), size=count, replace=False)]
    return sorted(ids)


def local_train(client: ClientState, global_model: LayeredModel, mask, tau: int, eta: float,
                batch_size: int, seed: int) -> GradientVector:
    """Run tau masked SGD steps from the global model; return the accumulated update.

    The returned value is the sum of the per-step masked gradients, which
    equals (theta_start - theta_end) / eta; blocks of unselected layers are
    exactly zero. Mini-batches cycle through a per-round shuffled shard; a
    batch_size >= shard size means full-batch steps in stored sample order.
    """
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    d = client.shard.d
    if d == 0:
        raise EmptyShardError(f"client {client.client_id} has no local samples")

    mask = np.asarray(mask)
    tunable = global_model.tunable_layers
    full_batch = batch_size >= d
    if full_batch:
        order = np.arange(d)
    else:
        order = child_rng(seed, "batch-order").permutation(d)

    acc_w = [np.zeros_like(w) for w in global_model.weights]
    acc_b = [np.zeros_like(b) for b in global_model.biases]
    local = global_model
    cursor = 0
    for _ in range(tau):
        if full_batch:
            idx = order
        else:
            if cursor + batch_size <= d:
                idx = order[cursor:cursor + batch_size]
            else:
                idx = np.concatenate([order[cursor:], order[: cursor + batch_size - d]])
            cursor = (cursor + batch_size) % d
        grad = backward(local, Batch(client.shard.inputs[idx], client.shard.labels[idx]))
        for j, layer in enumerate(tunable):
            if mask[j]:
                acc_w[layer] += grad.d_weights[layer]
                acc_b[layer] += grad.d_biases[layer]
        local = apply_masked_update(local, grad, mask, eta)
    return GradientVector(acc_w, acc_b)


def compute_weights(sampled, masks) -> np.ndarray:
    """Aggregation weights: client i's data share among the clients selecting layer l.

    w[i][l] = d_i / sum of d_j over sampled clients with mask_j(l)=1 when
    client i selected layer l, else exactly 0. A layer selected by nobody
    gets an all-zero column.
    """
    masks = np.asarray(masks)
    if masks.ndim != 2 or masks.shape[0] != len(sampled):
        raise ConfigError("mask matrix rows must align with the sampled clients")
    sizes = np.array([float(c.d) for c in sampled])
    num_layers = masks.shape[1]
    denom = np.zeros(num_layers)
    for i in range(len(sampled)):
        denom[masks[i] == 1] += sizes[i]
    safe = np.where(denom > 0, denom, 1.0)
    weights = np.zeros_like(masks, dtype=np.float64)
    for i in range(len(sampled)):
        chosen = masks[i] == 1
        weights[i, chosen] = sizes[i] / safe[chosen]
    return weights


def aggregate(updates, weights, client_ids=None, layer_indices=None) -> GradientVector:
    """Layer-wise weighted sum of client updates, in ascending client-id order.

    updates and weight rows are aligned; passing client_ids makes the result
    independent of the order clients finished (rows are re-sorted by id).
    Weight column j addresses gradient block layer_indices[j] (identity when
    omitted, i.e. every model layer is selectable).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(updates) != weights.shape[0] or not updates:
        raise ConfigError("need one update per weight row")
    if layer_indices is None:
        layer_indices = tuple(range(weights.shape[1]))
    order = range(len(updates))
    if client_ids is not None:
        if len(client_ids) != len(updates):
            raise ConfigError("client_ids must align with updates")
        order = np.argsort(client_ids)

    first = updates[0]
    acc_w = [np.zeros_like(w) for w in first.d_weights]
    acc_b = [np.zeros_like(b) for b in first.d_biases]
    for i in order:
        update = updates[i]
        for j, w in enumerate(weights[i]):
            if w != 0.0:
                layer = layer_indices[j]
                acc_w[layer] += w * update.d_weights[layer]
                acc_b[layer] += w * update.d_biases[layer]
    return GradientVector(acc_w, acc_b)


def global_update(model: LayeredModel, delta: GradientVector, eta: float) -> LayeredModel:
    """theta <- theta - eta * delta on every selectable layer."""
    ones = np.ones(model.num_tunable, dtype=np.int64)
    return apply_masked_update(model, delta, ones, eta)


def evaluate(model: LayeredModel, inputs, labels):
    """Mean cross-entropy and accuracy on a labeled set."""
    logits, loss = forward(model, Batch(inputs, labels))
    accuracy = float((logits.argmax(axis=1) == np.asarray(labels)).mean())
    return loss, accuracy


@dataclass(frozen=True)
class RoundConfig:
    clients_per_round: int
    tau: int
    eta: float
    batch_size: int
    flops_per_layer: float = 1.0

    def __post_init__(self):
        if self.clients_per_round < 1 or self.tau < 1 or self.batch_size < 1:
            raise ConfigError("clients_per_round, tau, and batch_size must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")


@dataclass
class RoundRecord:
    """Everything one round produced; append-only, one record per epoch."""

    epoch: int
    sampled_clients: list
    budgets: list
    masks: list
    weights: list
    unselected_layers: list
    noop: bool
    train_loss: float
    test_loss: float
    test_accuracy: float
    delta_layer_norms: list
    selection_objective: float
    cost: dict
    diagnostics: dict = None
    strategy: str = ""
    seed: int = 0
    phase: str = "round"
    schema_version: int = 1

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "phase": self.phase,
            "strategy": self.strategy,
            "seed": self.seed,
            "epoch": self.epoch,
            "sampled_clients": self.sampled_clients,
            "budgets": self.budgets,
            "masks": self.masks,
            "weights": self.weights,
            "unselected_layers": self.unselected_layers,
            "noop": self.noop,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "delta_layer_norms": self.delta_layer_norms,
            "selection_objective": self.selection_objective,
            "cost": self.cost,
            "diagnostics": self.diagnostics,
        }


def round_cost(masks: np.ndarray, num_layers: int, tau: int, probed: bool,
               flops_per_layer: float = 1.0) -> dict:
    """Backward-pass FLOP and upload tallies for one round.

    Per client: the selection probe costs (L-1) extra layer-backwards when a
    strategy probes, fine-tuning costs tau backwards per selected layer, and
    the upload is one layer's worth of traffic per selected layer. Full
    fine-tuning of the same round would cost L*tau backwards and L uploads
    per client.
    """
    n = masks.shape[0]
    selected = int(masks.sum())
    flops = flops_per_layer * (tau * selected + (num_layers - 1) * n * (1 if probed else 0))
    return {
        "flops": flops,
        "flops_full": flops_per_layer * num_layers * tau * n,
        "comm_layers": selected,
        "comm_layers_full": num_layers * n,
    }


def run_round(model: LayeredModel, clients, strategy: StrategyConfig, cfg: RoundConfig,
              epoch: int, seed: int, eval_inputs=None, eval_labels=None,
              diagnostic: bool = False):
    """Execute one full training round; returns (new model, RoundRecord).

    Identical (model, clients, strategy, cfg, seed, epoch) always produce an
    identical record. When diagnostic is set, full-batch gradients of every
    client are computed at the pre-update model and the convergence-analysis
    quantities are embedded in the record.
    """
    by_id = {c.client_id: c for c in clients}
    sampled_ids = sample_clients(clients, cfg.clients_per_round, seed, epoch)
    sampled = [by_id[i] for i in sampled_ids]

    masks, _, objective = select_masks(strategy, model, sampled, seed, epoch)
    weights = compute_weights(sampled, masks)
    unselected = np.flatnonzero(masks.sum(axis=0) == 0)

    updates = [
        local_train(
            client, model, masks[i], cfg.tau, cfg.eta, cfg.batch_size,
            seed=derive_seed(seed, "local", epoch, client.client_id),
        )
        for i, client in enumerate(sampled)
    ]
    delta = aggregate(updates, weights, client_ids=sampled_ids, layer_indices=model.tunable_layers)

    diagnostics = None
    if diagnostic:
        from .diagnostics import round_diagnostics

        diagnostics = round_diagnostics(model, clients, masks, weights, sampled_ids, delta).to_json_dict()

    new_model = global_update(model, delta, cfg.eta)

    pooled_inputs = np.concatenate([c.shard.inputs for c in clients])
    pooled_labels = np.concatenate([c.shard.labels for c in clients])
    train_loss, _ = evaluate(new_model, pooled_inputs, pooled_labels)
    if eval_inputs is not None:
        test_loss, test_accuracy = evaluate(new_model, eval_inputs, eval_labels)
    else:
        test_loss, test_accuracy = None, None

    tunable = model.tunable_layers
    record = RoundRecord(
        epoch=epoch,
        sampled_clients=[int(i) for i in sampled_ids],
        budgets=[int(c.budget) for c in sampled],
        masks=[[int(v) for v in row] for row in masks],
        weights=[[float(v) for v in row] for row in weights],
        unselected_layers=[int(v) for v in unselected],
        noop=bool(masks.sum() == 0),
        train_loss=train_loss,
        test_loss=test_loss,
        test_accuracy=test_accuracy,
        delta_layer_norms=[float(delta.layer_norms[k]) for k in tunable],
        selection_objective=None if objective is None else float(objective),
        cost=round_cost(masks, model.num_tunable, cfg.tau,
                        probed=strategy.name in ("snr", "rgn", "proposed"),
                        flops_per_layer=cfg.flops_per_layer),
        diagnostics=diagnostics,
    )
    return new_model, record
