"""Runtime evaluation of the convergence-analysis quantities.

Computes, from exact full-batch gradients, the per-round weight-divergence
and error terms that govern convergence under selective-layer training, the
empirical smoothness/variance/diversity constants, and the single-step and
multi-step bound values. Everything here is diagnostic: the constants are
empirical maxima (lower bounds of the true assumption constants), so bound
values are estimates, never certified upper bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Batch, ConfigError, GradientVector, LayeredModel, backward, forward
from .protocol import global_update
from .rng import child_rng


def client_full_gradients(model: LayeredModel, clients) -> list:
    """Exact full-batch gradient of every client's local objective."""
    grads = []
    for client in clients:
        grads.append(backward(model, Batch(client.shard.inputs, client.shard.labels)))
    return grads


def global_gradient(client_grads, alphas) -> GradientVector:
    """Gradient of the global objective: the alpha-weighted client mixture."""
    if len(client_grads) != len(alphas):
        raise ConfigError("one alpha per client gradient required")
    acc_w = [np.zeros_like(w) for w in client_grads[0].d_weights]
    acc_b = [np.zeros_like(b) for b in client_grads[0].d_biases]
    for grad, alpha in zip(client_grads, alphas):
        for k in range(len(acc_w)):
            acc_w[k] += alpha * grad.d_weights[k]
            acc_b[k] += alpha * grad.d_biases[k]
    return GradientVector(acc_w, acc_b)


def surrogate_gradient(layer: int, sampled, weights_col, model: LayeredModel, client_grads=None):
    """Layer gradient of the round's surrogate objective for one layer.

    The surrogate mixes the sampled clients' objectives with that layer's
    aggregation weights, so its layer gradient is the expected aggregated
    update for the layer. Returns (d_weights, d_biases) for `layer`.
    """
    weights_col = np.asarray(weights_col, dtype=np.float64)
    if weights_col.shape != (len(sampled),):
        raise ConfigError("one weight per sampled client required")
    if client_grads is None:
        client_grads = client_full_gradients(model, sampled)
    acc_w = np.zeros_like(client_grads[0].d_weights[layer])
    acc_b = np.zeros_like(client_grads[0].d_biases[layer])
    for grad, w in zip(client_grads, weights_col):
        acc_w += w * grad.d_weights[layer]
        acc_b += w * grad.d_biases[layer]
    return acc_w, acc_b


def chi_divergence(weights_col, alphas) -> float:
    """Chi-square-style distance between a layer's aggregation weights and alpha.

    Both vectors run over all N clients (unsampled clients contribute weight
    zero). Zero exactly when every client contributes at its data share.
    """
    weights_col = np.asarray(weights_col, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if weights_col.shape != alphas.shape:
        raise ConfigError("weights column and alphas must align")
    if np.any(alphas <= 0):
        raise ConfigError("every alpha must be positive")
    if abs(alphas.sum() - 1.0) > 1e-9:
        raise ConfigError(f"alphas must sum to 1, got {alphas.sum()}")
    return float(np.sum((weights_col - alphas) ** 2 / alphas))


@dataclass
class RoundDiagnostics:
    """Per-round convergence-analysis quantities (selectable-layer order)."""

    chi: list
    kappa_sq: list
    e1_hat: float
    e2_hat: float
    e_t: float
    lemma1_residual: float
    lemma2_slack: float
    jensen_term1: float
    jensen_term2: float

    def to_json_dict(self) -> dict:
        return {
            "chi": self.chi,
            "kappa_sq": self.kappa_sq,
            "e1_hat": self.e1_hat,
            "e2_hat": self.e2_hat,
            "e_t": self.e_t,
            "lemma1_residual": self.lemma1_residual,
            "lemma2_slack": self.lemma2_slack,
            "jensen_term1": self.jensen_term1,
            "jensen_term2": self.jensen_term2,
        }


def round_diagnostics(model: LayeredModel, clients, masks, weights, sampled_ids,
                      delta: GradientVector = None) -> RoundDiagnostics:
    """Exact diagnostic quantities for one round, at the pre-update model.

    Computes full-batch gradients for ALL clients (expensive by design), the
    per-layer weight divergence and diversity maxima, the two error terms,
    the measured surrogate-objective deviation, and the residual of the
    aggregated update against the surrogate gradients (zero at tau=1
    full-batch rounds).
    """
    masks = np.asarray(masks)
    weights = np.asarray(weights, dtype=np.float64)
    tunable = model.tunable_layers
    alphas = np.array([c.alpha for c in clients])
    grads = client_full_gradients(model, clients)
    grad_f = global_gradient(grads, alphas)

    pos_of_id = {c.client_id: pos for pos, c in enumerate(clients)}
    id_to_row = {cid: row for row, cid in enumerate(sampled_ids)}
    sampled = [clients[pos_of_id[cid]] for cid in sampled_ids]
    sampled_grads = [grads[pos_of_id[cid]] for cid in sampled_ids]
    selected_cols = set(np.flatnonzero(masks.sum(axis=0) >= 1).tolist())

    chi, kappa_sq = [], []
    surrogates = {}
    for j, layer in enumerate(tunable):
        col_full = np.zeros(len(clients))
        for cid in sampled_ids:
            col_full[pos_of_id[cid]] = weights[id_to_row[cid], j]
        chi.append(chi_divergence(col_full, alphas))
        diffs = [
            float(np.sum((grad_f.d_weights[layer] - g.d_weights[layer]) ** 2))
            + float(np.sum((grad_f.d_biases[layer] - g.d_biases[layer]) ** 2))
            for g in grads
        ]
        kappa_sq.append(max(diffs))
        surrogates[j] = surrogate_gradient(layer, sampled, weights[:, j], model, sampled_grads)

    e1 = 0.0
    e2 = 0.0
    e_t = 0.0
    jensen_term2 = 0.0
    for j, layer in enumerate(tunable):
        block_sq = float(grad_f.layer_norms[layer] ** 2)
        if j in selected_cols:
            sw, sb = surrogates[j]
            diff_sq = float(np.sum((grad_f.d_weights[layer] - sw) ** 2)) + float(
                np.sum((grad_f.d_biases[layer] - sb) ** 2)
            )
            e2 += chi[j] * kappa_sq[j]
            e_t += diff_sq
            jensen_term2 += diff_sq
        else:
            e1 += block_sq
            e_t += block_sq

    lemma1_residual = float("nan")
    if delta is not None:
        residual_sq = 0.0
        for j, layer in enumerate(tunable):
            if j in selected_cols:
                sw, sb = surrogates[j]
            else:
                sw, sb = 0.0, 0.0
            residual_sq += float(np.sum((delta.d_weights[layer] - sw) ** 2))
            residual_sq += float(np.sum((delta.d_biases[layer] - sb) ** 2))
        lemma1_residual = math.sqrt(residual_sq)

    return RoundDiagnostics(
        chi=[float(v) for v in chi],
        kappa_sq=[float(v) for v in kappa_sq],
        e1_hat=float(e1),
        e2_hat=float(e2),
        e_t=float(e_t),
        lemma1_residual=lemma1_residual,
        lemma2_slack=float(2.0 * (e1 + e2) - e_t),
        jensen_term1=float(e1),
        jensen_term2=float(jensen_term2),
    )


def _flatten_tunable(model: LayeredModel) -> np.ndarray:
    parts = []
    for k in model.tunable_layers:
        parts.append(model.weights[k].ravel())
        parts.append(model.biases[k])
    return np.concatenate(parts)


def _flatten_grad(grad: GradientVector, layer_indices) -> np.ndarray:
    parts = []
    for k in layer_indices:
        parts.append(grad.d_weights[k].ravel())
        parts.append(grad.d_biases[k])
    return np.concatenate(parts)


def max_pairwise_smoothness(points, grads_per_point) -> float:
    """max over point pairs and gradient streams of ||g(p) - g(q)|| / ||p - q||.

    points: list of flat parameter vectors; grads_per_point[p][i]: flat
    gradient of stream i (e.g. one client) at points[p]. An empirical lower
    bound of the true smoothness constant.
    """
    if len(points) < 2:
        raise ConfigError("need at least two probe points")
    best = 0.0
    for p in range(len(points)):
        for q in range(p + 1, len(points)):
            gap = float(np.linalg.norm(points[p] - points[q]))
            if gap == 0.0:
                raise ConfigError("identical probe points")
            for g_p, g_q in zip(grads_per_point[p], grads_per_point[q]):
                best = max(best, float(np.linalg.norm(g_p - g_q)) / gap)
    return best


@dataclass
class TheoryConstants:
    """Empirical estimates of the analysis constants (lower bounds, not certified)."""

    gamma: float
    sigma_sq: float
    sigma_sq_per_layer: list
    kappa_sq_per_layer: list
    eta: float
    tau: int
    horizon: int


def estimate_constants(probe_models, clients, eta: float, tau: int, horizon: int,
                       sigma_batch_size: int = 32, sigma_batches: int = 2,
                       seed: int = 0) -> TheoryConstants:
    """Estimate smoothness, gradient variance, and gradient diversity.

    Smoothness is the max finite-difference quotient of client gradients over
    all probe-model pairs; variance compares mini-batch probe gradients with
    full-batch gradients at the last probe model; diversity is the max
    client-vs-global gradient gap per layer at the last probe model. All are
    empirical maxima, i.e. lower bounds of the assumption constants.
    """
    if len(probe_models) < 2:
        raise ConfigError("need at least two probe models")
    tunable = probe_models[0].tunable_layers
    points = [_flatten_tunable(m) for m in probe_models]
    grads_per_point = []
    for m in probe_models:
        grads = client_full_gradients(m, clients)
        grads_per_point.append([_flatten_grad(g, tunable) for g in grads])
    gamma = max_pairwise_smoothness(points, grads_per_point)

    last = probe_models[-1]
    alphas = [c.alpha for c in clients]
    full_grads = client_full_gradients(last, clients)
    grad_f = global_gradient(full_grads, alphas)
    kappa_sq = []
    for k in tunable:
        kappa_sq.append(
            max(
                float(np.sum((grad_f.d_weights[k] - g.d_weights[k]) ** 2))
                + float(np.sum((grad_f.d_biases[k] - g.d_biases[k]) ** 2))
                for g in full_grads
            )
        )

    sigma_sq = [0.0] * len(tunable)
    for client, full in zip(clients, full_grads):
        d = client.shard.d
        size = min(sigma_batch_size, d)
        rng = child_rng(seed, "sigma-probe", client.client_id)
        for _ in range(sigma_batches):
            idx = np.sort(rng.choice(d, size=size, replace=False))
            g = backward(last, Batch(client.shard.inputs[idx], client.shard.labels[idx]))
            for j, k in enumerate(tunable):
                gap = float(np.sum((g.d_weights[k] - full.d_weights[k]) ** 2)) + float(
                    np.sum((g.d_biases[k] - full.d_biases[k]) ** 2)
                )
                sigma_sq[j] = max(sigma_sq[j], gap)

    return TheoryConstants(
        gamma=float(gamma),
        sigma_sq=float(sum(sigma_sq)),
        sigma_sq_per_layer=[float(v) for v in sigma_sq],
        kappa_sq_per_layer=[float(v) for v in kappa_sq],
        eta=float(eta),
        tau=int(tau),
        horizon=int(horizon),
    )


@dataclass
class BoundEstimate:
    value: float
    constant: float
    valid: bool

    def to_json_dict(self) -> dict:
        return {"value": self.value, "constant": self.constant, "valid": self.valid}


def theorem1_rhs(constants: TheoryConstants, f0: float, fstar: float,
                 e1_list, e2_list, horizon: int = None, variant: str = "proof",
                 num_layers: int = None) -> BoundEstimate:
    """Single-step (tau=1) bound value on the average squared gradient norm.

    variant "proof" uses the constant C = 1 - gamma*eta from the derivation;
    variant "main" uses C = 1 - 4*eta*L as printed in the theorem statement
    (needs num_layers). Invalid (non-positive C) returns value NaN.
    """
    eta, gamma = constants.eta, constants.gamma
    if variant == "proof":
        c = 1.0 - gamma * eta
    elif variant == "main":
        if num_layers is None:
            raise ConfigError("main-text variant needs num_layers")
        c = 1.0 - 4.0 * eta * num_layers
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    horizon = int(horizon) if horizon is not None else len(e1_list)
    if c <= 0 or horizon < 1:
        return BoundEstimate(value=float("nan"), constant=c, valid=False)
    err_sum = float(np.sum(np.asarray(e1_list) + np.asarray(e2_list)))
    if err_sum == 0.0:
        err_part = 0.0
    elif gamma * eta == 0.0:
        err_part = float("inf")
    else:
        err_part = (1.0 / (gamma * eta * c) + 2.0) * err_sum / horizon
    value = (
        2.0 * (f0 - fstar) / (eta * c * horizon)
        + 2.0 * gamma * eta * constants.sigma_sq / c
        + err_part
    )
    return BoundEstimate(value=float(value), constant=float(c), valid=True)


def multistep_rhs(constants: TheoryConstants, f0: float, fstar: float,
                  e1_list, e2_list, tau: int = None, horizon: int = None) -> BoundEstimate:
    """Multi-step (tau>=1) bound value; reduces to the single-step shape at tau=1."""
    eta, gamma = constants.eta, constants.gamma
    tau = int(tau) if tau is not None else constants.tau
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    drift = gamma ** 2 * tau * (tau - 1)
    c = 1.0 - 4.0 * eta * tau - 8.0 * eta ** 2 * drift - 32.0 * eta ** 3 * tau * drift
    a_tau = eta + 2.0 * eta ** 2 * drift + 8.0 * eta ** 3 * tau * drift
    horizon = int(horizon) if horizon is not None else len(e1_list)
    if c <= 0 or horizon < 1:
        return BoundEstimate(value=float("nan"), constant=c, valid=False)
    err_sum = float(np.sum(np.asarray(e1_list) + np.asarray(e2_list)))
    if err_sum == 0.0:
        err_part = 0.0
    elif eta * tau * gamma == 0.0:
        err_part = float("inf")
    else:
        err_part = (1.0 / (eta * tau * gamma * c) + 2.0) * err_sum / horizon
    value = (
        2.0 * (f0 - fstar) / (eta * tau * c * horizon)
        + 4.0 * a_tau * constants.sigma_sq / c
        + err_part
    )
    return BoundEstimate(value=float(value), constant=float(c), valid=True)


@dataclass
class CostSummary:
    flops_selective: float
    flops_full: float
    compute_ratio: float       # full / selective
    selective_fraction: float  # selective / full
    comm_ratio: float          # budget / layers

    def to_json_dict(self) -> dict:
        return {
            "flops_selective": self.flops_selective,
            "flops_full": self.flops_full,
            "compute_ratio": self.compute_ratio,
            "selective_fraction": self.selective_fraction,
            "comm_ratio": self.comm_ratio,
        }


def cost_model(num_layers: int, tau: int, budget: int, flops_per_layer: float = 1.0) -> CostSummary:
    """Closed-form per-client cost of probe-then-select vs full fine-tuning.

    Selecting costs (L-1) extra layer-backwards once per round and tau
    layer-backwards of training, so flops ratio full/selective is
    L*tau / (tau + L - 1); uploading only selected layers puts communication
    at budget / L of the full model (equal layer sizes).
    """
    if num_layers < 1 or tau < 1 or budget < 1 or flops_per_layer <= 0:
        raise ConfigError("cost model inputs must be positive")
    flops_selective = flops_per_layer * (tau + num_layers - 1)
    flops_full = flops_per_layer * num_layers * tau
    return CostSummary(
        flops_selective=float(flops_selective),
        flops_full=float(flops_full),
        compute_ratio=float(flops_full / flops_selective),
        selective_fraction=float(flops_selective / flops_full),
        comm_ratio=float(budget / num_layers),
    )


def centralized_reference_minimum(model: LayeredModel, inputs, labels, eta: float, steps: int):
    """Minimum loss seen along a full-batch gradient-descent reference run.

    Serves as the estimate of the unknowable optimal loss; callers must treat
    it as an estimate, not a certified minimum.
    """
    batch = Batch(inputs, labels)
    _, best = forward(model, batch)
    current = model
    for _ in range(steps):
        grad = backward(current, batch)
        current = global_update(current, grad, eta)
        _, loss = forward(current, batch)
        best = min(best, loss)
    return float(best)
