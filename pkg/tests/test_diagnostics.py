import math

import numpy as np
import pytest

from fedseltune.data import Shard, generate_dataset, dirichlet_partition
from fedseltune.diagnostics import (
    BoundEstimate,
    TheoryConstants,
    centralized_reference_minimum,
    chi_divergence,
    client_full_gradients,
    cost_model,
    estimate_constants,
    global_gradient,
    max_pairwise_smoothness,
    multistep_rhs,
    round_diagnostics,
    surrogate_gradient,
    theorem1_rhs,
)
from fedseltune.model import Batch, ConfigError, backward, init_model, mlp_specs
from fedseltune.protocol import (
    RoundConfig,
    aggregate,
    build_clients,
    compute_weights,
    global_update,
    local_train,
    run_round,
    sample_clients,
)
from fedseltune.rng import child_rng
from fedseltune.selection import StrategyConfig, select_masks


def make_clients(seed, num_clients=4, num_classes=3, dim=4, per_class=60, budgets=None,
                 concentration=0.7):
    data = generate_dataset(num_classes, dim, per_class, seed=seed)
    shards = dirichlet_partition(data, num_clients, concentration, seed=seed)
    if budgets is None:
        budgets = [2] * num_clients
    return build_clients(shards, budgets)


def test_chi_hand_example_and_zero_case():
    assert chi_divergence([1.0, 0.0], [0.5, 0.5]) == 1.0
    assert chi_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_chi_matches_naive_loop():
    rng = child_rng(0, "chi")
    for _ in range(30):
        n = int(rng.integers(2, 10))
        alphas = rng.uniform(0.1, 1.0, size=n)
        alphas /= alphas.sum()
        w = rng.uniform(0.0, 1.0, size=n)
        expected = sum((w[i] - alphas[i]) ** 2 / alphas[i] for i in range(n))
        assert chi_divergence(w, alphas) == pytest.approx(expected, rel=1e-12)


def test_chi_rejects_bad_alphas():
    with pytest.raises(ConfigError):
        chi_divergence([1.0, 0.0], [1.0, 0.0])


def test_surrogate_single_client_and_alpha_mixture():
    clients = make_clients(seed=1)
    model = init_model(mlp_specs([4, 5, 3]), seed=2)
    grads = client_full_gradients(model, clients)
    dw, db = surrogate_gradient(0, [clients[2]], [1.0], model, [grads[2]])
    assert np.array_equal(dw, grads[2].d_weights[0])
    assert np.array_equal(db, grads[2].d_biases[0])
    # weights = alpha over all clients reproduces the global layer gradient
    alphas = [c.alpha for c in clients]
    grad_f = global_gradient(grads, alphas)
    dw, db = surrogate_gradient(1, clients, alphas, model, grads)
    assert np.allclose(dw, grad_f.d_weights[1], rtol=1e-12, atol=1e-15)


def test_surrogate_matches_naive_sum():
    clients = make_clients(seed=3)
    model = init_model(mlp_specs([4, 5, 3]), seed=4)
    grads = client_full_gradients(model, clients)
    rng = child_rng(1, "sur")
    weights = rng.uniform(0, 1, size=len(clients))
    dw, db = surrogate_gradient(1, clients, weights, model, grads)
    expected_w = np.zeros_like(dw)
    expected_b = np.zeros_like(db)
    for g, w in zip(grads, weights):
        expected_w = expected_w + w * g.d_weights[1]
        expected_b = expected_b + w * g.d_biases[1]
    assert np.allclose(dw, expected_w, rtol=1e-12, atol=0)
    assert np.allclose(db, expected_b, rtol=1e-12, atol=0)


def run_diagnostic_round(clients, model, strategy, cfg, epoch, seed):
    from fedseltune.rng import derive_seed

    sampled_ids = sample_clients(clients, cfg.clients_per_round, seed, epoch)
    by_id = {c.client_id: c for c in clients}
    sampled = [by_id[i] for i in sampled_ids]
    masks, _, _ = select_masks(strategy, model, sampled, seed, epoch)
    weights = compute_weights(sampled, masks)
    updates = [
        local_train(c, model, masks[i], cfg.tau, cfg.eta, cfg.batch_size,
                    seed=derive_seed(seed, "local", epoch, c.client_id))
        for i, c in enumerate(sampled)
    ]
    delta = aggregate(updates, weights, client_ids=sampled_ids,
                      layer_indices=model.tunable_layers)
    diag = round_diagnostics(model, clients, masks, weights, sampled_ids, delta)
    return global_update(model, delta, cfg.eta), diag


def test_lemma1_identity_full_batch_tau1():
    # The aggregated update must equal the summed surrogate layer gradients.
    for trial in range(10):
        clients = make_clients(seed=20 + trial, num_clients=5,
                               budgets=[1, 2, 1, 2, 1])
        model = init_model(mlp_specs([4, 6, 3]), seed=30 + trial)
        cfg = RoundConfig(clients_per_round=3, tau=1, eta=0.1, batch_size=10 ** 6)
        strategy = StrategyConfig(name="proposed", lam=1.0, solver="exact")
        _, diag = run_diagnostic_round(clients, model, strategy, cfg, epoch=trial, seed=trial)
        assert diag.lemma1_residual <= 1e-9


def test_chi_zero_when_all_select_under_full_participation():
    clients = make_clients(seed=40, num_clients=4, budgets=[2] * 4)
    model = init_model(mlp_specs([4, 5, 3]), seed=41)
    cfg = RoundConfig(clients_per_round=4, tau=1, eta=0.1, batch_size=10 ** 6)
    _, diag = run_diagnostic_round(clients, model, StrategyConfig(name="full"), cfg, 0, 0)
    assert np.allclose(diag.chi, 0.0, atol=1e-12)
    assert diag.e1_hat == 0.0
    assert diag.e2_hat == pytest.approx(0.0, abs=1e-12)


def test_lemma2_inequality_and_jensen_decomposition():
    for trial in range(8):
        clients = make_clients(seed=50 + trial, num_clients=6,
                               budgets=[1, 2, 1, 2, 1, 2], concentration=0.3)
        model = init_model(mlp_specs([4, 6, 6, 3]), seed=60 + trial)
        cfg = RoundConfig(clients_per_round=3, tau=2, eta=0.1, batch_size=8)
        strategy = StrategyConfig(name="proposed", lam=0.5, solver="exact")
        _, diag = run_diagnostic_round(clients, model, strategy, cfg, epoch=trial, seed=trial)
        assert diag.lemma2_slack >= -1e-9
        assert diag.e_t <= 2.0 * (diag.jensen_term1 + diag.jensen_term2) + 1e-9


def test_e1_zero_when_every_layer_selected_by_someone():
    clients = make_clients(seed=70, num_clients=4, budgets=[1] * 4)
    model = init_model(mlp_specs([4, 5, 3]), seed=71)
    cfg = RoundConfig(clients_per_round=4, tau=1, eta=0.1, batch_size=10 ** 6)
    # Static split guarantees the union covers both layers.
    masks = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    weights = compute_weights(clients, masks)
    diag = round_diagnostics(model, clients, masks, weights, [0, 1, 2, 3])
    assert diag.e1_hat == 0.0


def test_max_pairwise_smoothness_quadratic_oracle():
    # Linear-regression loss: gradient map is A theta - c with A = X^T X / n,
    # so the true smoothness constant is the top Hessian eigenvalue.
    rng = child_rng(2, "quad")
    n, dim = 60, 6
    x = rng.normal(size=(n, dim))
    y = rng.normal(size=n)
    a = x.T @ x / n
    c = x.T @ y / n
    gamma_true = float(np.linalg.eigvalsh(a).max())

    grad = lambda theta: a @ theta - c
    points = [np.zeros(dim)]
    v = rng.normal(size=dim)
    for _ in range(40):
        v = a @ v
        v /= np.linalg.norm(v)
        points.append(v.copy())
    grads = [[grad(p)] for p in points]
    gamma_hat = max_pairwise_smoothness(points, grads)
    assert gamma_hat <= gamma_true + 1e-9
    assert gamma_hat >= 0.95 * gamma_true


def test_max_pairwise_smoothness_rejects_identical_points():
    with pytest.raises(ConfigError):
        max_pairwise_smoothness([np.zeros(3), np.zeros(3)], [[np.zeros(3)], [np.zeros(3)]])


def test_estimate_constants_iid_shards_have_zero_kappa():
    data = generate_dataset(3, 4, 30, seed=80)
    shard = lambda cid: Shard(cid, data.inputs.copy(), data.labels.copy())
    clients = build_clients([shard(0), shard(1), shard(2)], budgets=[1, 1, 1])
    m0 = init_model(mlp_specs([4, 5, 3]), seed=81)
    m1 = init_model(mlp_specs([4, 5, 3]), seed=82)
    constants = estimate_constants([m0, m1], clients, eta=0.1, tau=1, horizon=10,
                                   sigma_batch_size=10 ** 6)
    assert np.allclose(constants.kappa_sq_per_layer, 0.0, atol=1e-20)
    # full-batch sigma probes see no sampling noise
    assert constants.sigma_sq == 0.0
    assert constants.gamma > 0.0


def test_estimate_constants_rejects_identical_probes():
    clients = make_clients(seed=83)
    model = init_model(mlp_specs([4, 5, 3]), seed=84)
    with pytest.raises(ConfigError):
        estimate_constants([model, model], clients, eta=0.1, tau=1, horizon=1)


def make_constants(gamma, sigma_sq, eta, tau=1, horizon=10):
    return TheoryConstants(gamma=gamma, sigma_sq=sigma_sq, sigma_sq_per_layer=[],
                           kappa_sq_per_layer=[], eta=eta, tau=tau, horizon=horizon)


def test_theorem1_rhs_noise_floor_at_large_horizon():
    constants = make_constants(gamma=2.0, sigma_sq=0.5, eta=0.1)
    bound = theorem1_rhs(constants, f0=1.0, fstar=0.2, e1_list=[0.0], e2_list=[0.0],
                         horizon=10 ** 9)
    c = 1.0 - 2.0 * 0.1
    floor = 2.0 * 2.0 * 0.1 * 0.5 / c
    assert bound.valid
    assert bound.value == pytest.approx(floor, rel=1e-6)


def test_theorem1_rhs_zero_case():
    constants = make_constants(gamma=1.0, sigma_sq=0.0, eta=0.1)
    bound = theorem1_rhs(constants, f0=0.7, fstar=0.7, e1_list=[0.0, 0.0], e2_list=[0.0, 0.0])
    assert bound.value == 0.0


def test_theorem1_rhs_matches_independent_formula():
    rng = child_rng(3, "t1")
    for _ in range(30):
        gamma = float(rng.uniform(0.5, 3.0))
        eta = float(rng.uniform(0.01, 0.2))
        if 1.0 - gamma * eta <= 0:
            continue
        sigma_sq = float(rng.uniform(0, 1))
        f0, fstar = float(rng.uniform(1, 2)), float(rng.uniform(0, 1))
        e1 = rng.uniform(0, 1, size=5)
        e2 = rng.uniform(0, 1, size=5)
        constants = make_constants(gamma, sigma_sq, eta)
        bound = theorem1_rhs(constants, f0, fstar, e1, e2)
        c = 1.0 - gamma * eta
        t = 5
        expected = (2.0 * (f0 - fstar) / (eta * c * t)
                    + 2.0 * gamma * eta * sigma_sq / c
                    + (1.0 / (gamma * eta * c) + 2.0) * float(np.sum(e1 + e2)) / t)
        assert bound.value == pytest.approx(expected, rel=1e-12)


def test_theorem1_invalid_constant_flagged():
    constants = make_constants(gamma=100.0, sigma_sq=0.1, eta=0.5)
    bound = theorem1_rhs(constants, 1.0, 0.0, [0.1], [0.1])
    assert not bound.valid
    assert math.isnan(bound.value)
    # main-text variant: C = 1 - 4 eta L
    main = theorem1_rhs(make_constants(1.0, 0.1, 0.1), 1.0, 0.0, [0.1], [0.1],
                        variant="main", num_layers=6)
    assert not main.valid


def test_multistep_reduces_to_single_step_shape_at_tau1():
    constants = make_constants(gamma=2.0, sigma_sq=0.3, eta=0.02, tau=1)
    e1, e2 = [0.1, 0.2], [0.05, 0.0]
    multi = multistep_rhs(constants, f0=1.0, fstar=0.1, e1_list=e1, e2_list=e2, tau=1)
    # tau(tau-1)=0 wipes the drift terms: C' = 1 - 4 eta, A_tau = eta.
    c = 1.0 - 4.0 * 0.02
    expected = (2.0 * 0.9 / (0.02 * c * 2)
                + 4.0 * 0.02 * 0.3 / c
                + (1.0 / (0.02 * 2.0 * c) + 2.0) * (0.1 + 0.2 + 0.05) / 2)
    assert multi.value == pytest.approx(expected, rel=1e-12)
    assert multi.constant == pytest.approx(c, rel=1e-12)


def test_multistep_limits_as_eta_vanishes():
    for eta in (1e-3, 1e-5, 1e-7):
        constants = make_constants(gamma=2.0, sigma_sq=0.3, eta=eta, tau=4)
        bound = multistep_rhs(constants, 1.0, 0.0, [0.0], [0.0], tau=4)
        drift = 2.0 ** 2 * 4 * 3
        expected_c = 1.0 - 4 * eta * 4 - 8 * eta ** 2 * drift - 32 * eta ** 3 * 4 * drift
        assert bound.constant == pytest.approx(expected_c, rel=1e-12)
    assert abs(bound.constant - 1.0) < 1e-4
    a_tau = eta + 2 * eta ** 2 * drift + 8 * eta ** 3 * 4 * drift
    assert a_tau == pytest.approx(eta, rel=1e-3)


def test_multistep_matches_independent_formula():
    rng = child_rng(4, "t2")
    for _ in range(30):
        gamma = float(rng.uniform(0.5, 2.0))
        eta = float(rng.uniform(0.001, 0.05))
        tau = int(rng.integers(1, 6))
        sigma_sq = float(rng.uniform(0, 1))
        f0, fstar = 1.5, 0.3
        e1 = rng.uniform(0, 0.5, size=4)
        e2 = rng.uniform(0, 0.5, size=4)
        constants = make_constants(gamma, sigma_sq, eta, tau=tau)
        bound = multistep_rhs(constants, f0, fstar, e1, e2, tau=tau)
        drift = gamma ** 2 * tau * (tau - 1)
        c = 1 - 4 * eta * tau - 8 * eta ** 2 * drift - 32 * eta ** 3 * tau * drift
        if c <= 0:
            assert not bound.valid
            continue
        a_tau = eta + 2 * eta ** 2 * drift + 8 * eta ** 3 * tau * drift
        expected = (2 * (f0 - fstar) / (eta * tau * c * 4)
                    + 4 * a_tau * sigma_sq / c
                    + (1 / (eta * tau * gamma * c) + 2) * float(np.sum(e1 + e2)) / 4)
        assert bound.value == pytest.approx(expected, rel=1e-12)


def test_cost_model_paper_figures():
    twelve_one = cost_model(num_layers=12, tau=5, budget=1)
    assert twelve_one.comm_ratio * 100 == pytest.approx(8.33, abs=0.5)
    # Reported empirical costs: 2.24 of 8.47 TFLOPs, 234 of 2811 MBits.
    assert abs(twelve_one.selective_fraction - 2.24 / 8.47) * 100 <= 0.5
    assert abs(twelve_one.comm_ratio - 234 / 2811) * 100 <= 0.5
    assert twelve_one.compute_ratio == pytest.approx(60 / 16, rel=1e-12)


def test_cost_model_tau1_probe_dominates():
    summary = cost_model(num_layers=9, tau=1, budget=2)
    assert summary.flops_selective == summary.flops_full == 9.0


def test_cost_model_closed_forms_hold_everywhere():
    rng = child_rng(5, "cost")
    for _ in range(50):
        num_layers = int(rng.integers(1, 30))
        tau = int(rng.integers(1, 20))
        budget = int(rng.integers(1, num_layers + 1))
        summary = cost_model(num_layers, tau, budget)
        assert summary.comm_ratio == pytest.approx(budget / num_layers, rel=1e-12)
        assert summary.compute_ratio == pytest.approx(
            num_layers * tau / (tau + num_layers - 1), rel=1e-12
        )


def test_centralized_reference_minimum_decreases():
    data = generate_dataset(3, 4, 60, seed=90)
    model = init_model(mlp_specs([4, 6, 3]), seed=91)
    from fedseltune.model import forward

    initial = forward(model, Batch(data.inputs, data.labels))[1]
    best = centralized_reference_minimum(model, data.inputs, data.labels, eta=0.5, steps=100)
    assert best < initial
