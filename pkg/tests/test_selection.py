import itertools

import numpy as np
import pytest

from fedseltune.data import generate_dataset, dirichlet_partition
from fedseltune.model import Batch, ConfigError, backward, init_model, mlp_specs
from fedseltune.protocol import build_clients
from fedseltune.rng import child_rng
from fedseltune.selection import (
    CapacityError,
    SelectionProblem,
    StrategyConfig,
    feasible_masks,
    p1_objective,
    probe_gradient_norms,
    select_masks,
    select_rgn,
    select_snr,
    select_static,
    solve_p1_exact,
    solve_p1_greedy,
)


def naive_objective(scores, masks, lam, exponent=2):
    """Straight re-implementation of the selection objective with plain loops."""
    gain = 0.0
    n, num_layers = len(scores), len(scores[0])
    for i in range(n):
        for l in range(num_layers):
            if masks[i][l]:
                gain += scores[i][l]
    penalty = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dist = sum(abs(masks[i][l] - masks[j][l]) for l in range(num_layers))
            penalty += dist ** exponent
    return gain - lam / 2.0 * penalty


def naive_best(scores, budgets, lam, exponent=2):
    """Exhaustive independent search over all per-client subsets (unit costs)."""
    n, num_layers = len(scores), len(scores[0])
    per_client = []
    for budget in budgets:
        choices = []
        for size in range(min(budget, num_layers) + 1):
            for combo in itertools.combinations(range(num_layers), size):
                mask = [0] * num_layers
                for l in combo:
                    mask[l] = 1
                choices.append(mask)
        per_client.append(choices)
    best = None
    for combo in itertools.product(*per_client):
        value = naive_objective(scores, combo, lam, exponent)
        if best is None or value > best:
            best = value
    return best


def random_problem(rng, max_clients=3, max_layers=8, lam=None):
    n = int(rng.integers(1, max_clients + 1))
    num_layers = int(rng.integers(2, max_layers + 1))
    scores = rng.uniform(0.0, 4.0, size=(n, num_layers))
    budgets = rng.integers(1, min(3, num_layers) + 1, size=n)
    if lam is None:
        lam = float(rng.choice([0.0, 0.1, 1.0, 5.0]))
    return SelectionProblem(scores=scores, budgets=budgets, lam=lam)


def test_p1_objective_all_ones_lambda_zero():
    problem = SelectionProblem(scores=[[1.0, 2.0], [3.0, 4.0]], budgets=[2, 2], lam=0.0)
    assert p1_objective(problem, np.ones((2, 2))) == 10.0


def test_p1_objective_identical_masks_have_no_penalty():
    problem = SelectionProblem(scores=[[1.0, 2.0], [3.0, 4.0]], budgets=[1, 1], lam=7.0)
    masks = np.array([[0, 1], [0, 1]])
    assert p1_objective(problem, masks) == 6.0


def test_p1_objective_hand_example():
    problem = SelectionProblem(scores=[[3.0, 1.0], [1.0, 3.0]], budgets=[1, 1], lam=1.0)
    masks = np.array([[1, 0], [0, 1]])
    assert p1_objective(problem, masks) == 2.0


def test_p1_objective_matches_naive_on_random_instances():
    rng = child_rng(0, "objective-check")
    for _ in range(50):
        problem = random_problem(rng)
        masks = rng.integers(0, 2, size=problem.scores.shape)
        expected = naive_objective(problem.scores.tolist(), masks.tolist(), problem.lam)
        assert p1_objective(problem, masks) == pytest.approx(expected, rel=1e-12)


def test_exact_lambda_zero_is_per_client_top_budget():
    rng = child_rng(1, "sep")
    for _ in range(20):
        problem = random_problem(rng, lam=0.0)
        result = solve_p1_exact(problem)
        for i in range(problem.num_clients):
            top = np.argsort(-problem.scores[i], kind="stable")[: problem.budgets[i]]
            expected = np.zeros(problem.num_layers, dtype=int)
            expected[top] = 1
            assert np.array_equal(result.masks[i], expected)


def test_exact_huge_lambda_forces_identical_top_column_sum_masks():
    rng = child_rng(2, "consensus")
    for _ in range(20):
        n, num_layers, budget = 3, 5, 2
        scores = rng.uniform(0.0, 4.0, size=(n, num_layers))
        problem = SelectionProblem(scores=scores, budgets=[budget] * n, lam=1e9)
        result = solve_p1_exact(problem)
        assert all(np.array_equal(result.masks[0], m) for m in result.masks)
        top_cols = np.argsort(-scores.sum(axis=0), kind="stable")[:budget]
        expected = np.zeros(num_layers, dtype=int)
        expected[top_cols] = 1
        assert np.array_equal(result.masks[0], expected)


def test_exact_tie_break_prefers_lower_layer():
    problem = SelectionProblem(scores=[[3.0, 1.0], [1.0, 3.0]], budgets=[1, 1], lam=1.0)
    result = solve_p1_exact(problem)
    assert result.objective_value == 4.0
    assert np.array_equal(result.masks, np.array([[1, 0], [1, 0]]))


def test_exact_matches_naive_oracle():
    rng = child_rng(3, "exact-oracle")
    for _ in range(60):
        problem = random_problem(rng)
        result = solve_p1_exact(problem)
        expected = naive_best(problem.scores.tolist(), problem.budgets.tolist(), problem.lam)
        assert result.objective_value == pytest.approx(expected, abs=1e-9)


def test_exact_capacity_error():
    problem = SelectionProblem(
        scores=np.ones((6, 10)), budgets=np.full(6, 10), lam=1.0
    )
    with pytest.raises(CapacityError):
        solve_p1_exact(problem)


def test_exact_budget_feasibility_and_general_costs():
    problem = SelectionProblem(
        scores=[[5.0, 4.0, 3.0]],
        budgets=[3],
        lam=0.0,
        layer_costs=[2.0, 2.0, 1.0],
    )
    result = solve_p1_exact(problem)
    # Best pair under the budget: layer 0 (cost 2) + layer 2 (cost 1).
    assert np.array_equal(result.masks[0], [1, 0, 1])


def test_greedy_equals_exact_at_lambda_zero():
    rng = child_rng(4, "greedy-sep")
    for _ in range(30):
        problem = random_problem(rng, lam=0.0)
        exact = solve_p1_exact(problem)
        greedy = solve_p1_greedy(problem)
        assert np.array_equal(exact.masks, greedy.masks)


def test_greedy_near_optimal_and_monotone():
    rng = child_rng(5, "greedy-vs-exact")
    for _ in range(100):
        problem = random_problem(rng)
        exact = solve_p1_exact(problem)
        greedy = solve_p1_greedy(problem)
        if exact.objective_value > 0:
            assert greedy.objective_value >= 0.95 * exact.objective_value
        history = greedy.objective_history
        assert all(a <= b + 1e-9 for a, b in zip(history, history[1:]))


def test_exact_beats_every_other_strategy():
    rng = child_rng(6, "dominance")
    for _ in range(25):
        n, num_layers = 2, 5
        scores = rng.uniform(0.0, 4.0, size=(n, num_layers))
        budgets = rng.integers(1, 3, size=n)
        problem = SelectionProblem(scores=scores, budgets=budgets, lam=float(rng.uniform(0, 2)))
        best = solve_p1_exact(problem).objective_value
        for kind in ("top", "bottom", "both"):
            masks = select_static(kind, budgets, num_layers)
            assert best >= p1_objective(problem, masks) - 1e-9


def test_lambda_zero_row_dependence_only():
    # Client 0's mask must not move when other rows change.
    rng = child_rng(7, "row-dep")
    scores = rng.uniform(0.0, 4.0, size=(3, 6))
    problem = SelectionProblem(scores=scores, budgets=[2, 2, 2], lam=0.0)
    baseline = solve_p1_exact(problem).masks[0]
    for _ in range(5):
        other = scores.copy()
        other[1:] = rng.uniform(0.0, 4.0, size=(2, 6))
        perturbed = SelectionProblem(scores=other, budgets=[2, 2, 2], lam=0.0)
        assert np.array_equal(solve_p1_exact(perturbed).masks[0], baseline)


def hamming_disagreement(masks):
    total = 0
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            total += int(np.abs(masks[i] - masks[j]).sum())
    return total


def test_lambda_monotonicity_of_disagreement():
    rng = child_rng(8, "lambda-grid")
    grid = [0.0, 0.1, 1.0, 10.0, 1e3, 1e9]
    for _ in range(30):
        scores = rng.uniform(0.0, 4.0, size=(3, 5))
        budgets = rng.integers(1, 3, size=3)
        disagreements = []
        for lam in grid:
            problem = SelectionProblem(scores=scores, budgets=budgets, lam=lam)
            disagreements.append(hamming_disagreement(solve_p1_exact(problem).masks))
        assert all(a >= b for a, b in zip(disagreements, disagreements[1:]))


def test_penalty_exponent_one_supported():
    problem = SelectionProblem(
        scores=[[3.0, 1.0], [1.0, 3.0]], budgets=[1, 1], lam=1.0, penalty_exponent=1
    )
    masks = np.array([[1, 0], [0, 1]])
    # Linear penalty: 6 - (1/2) * (2 + 2) = 4.
    assert p1_objective(problem, masks) == 4.0


def test_feasible_masks_are_subset_ordered():
    masks = feasible_masks(3, budget=2)
    keys = [tuple(np.flatnonzero(row)) for row in masks]
    assert keys == sorted(keys)
    assert all(row.sum() <= 2 for row in masks)


def test_select_static_examples():
    # Spec positions are 1-based; layer indices here are 0-based.
    assert np.array_equal(select_static("top", [2], 6)[0], [0, 0, 0, 0, 1, 1])
    assert np.array_equal(select_static("bottom", [2], 6)[0], [1, 1, 0, 0, 0, 0])
    assert np.array_equal(select_static("both", [2], 6)[0], [1, 0, 0, 0, 0, 1])
    assert np.array_equal(select_static("both", [3], 6)[0], [1, 0, 0, 0, 1, 1])


def test_select_static_clamps_excess_budget():
    with pytest.warns(UserWarning):
        masks = select_static("top", [9], 4)
    assert np.array_equal(masks[0], [1, 1, 1, 1])


class FakeGrad:
    """Stands in for a GradientVector with chosen per-layer elements."""

    def __init__(self, blocks):
        self.blocks = [np.asarray(b, dtype=float) for b in blocks]
        self.layer_norms = np.array([np.linalg.norm(b) for b in self.blocks])

    def block_elements(self, k):
        return self.blocks[k]


def test_snr_constant_block_ranks_first():
    grad = FakeGrad([[0.5, 0.5, 0.5], [10.0, -10.0, 0.0]])
    masks = select_snr([grad], budgets=[1], layer_indices=(0, 1))
    assert np.array_equal(masks[0], [1, 0])


def test_snr_tie_breaks_to_lower_index():
    grad = FakeGrad([[1.0, 2.0], [1.0, 2.0]])
    masks = select_snr([grad], budgets=[1], layer_indices=(0, 1))
    assert np.array_equal(masks[0], [1, 0])


def test_snr_matches_independent_ranking():
    rng = child_rng(9, "snr")
    for _ in range(20):
        blocks = [rng.normal(size=rng.integers(2, 6)) for _ in range(5)]
        grad = FakeGrad(blocks)
        budget = int(rng.integers(1, 5))
        masks = select_snr([grad], budgets=[budget], layer_indices=tuple(range(5)))
        ratios = []
        for b in blocks:
            var = float(np.var(b))
            ratios.append(abs(float(np.mean(b))) / var if var > 0 else np.inf)
        expected = sorted(range(5), key=lambda l: (-ratios[l], l))[:budget]
        assert set(np.flatnonzero(masks[0])) == set(expected)


def test_rgn_scaling_and_uniform_norms():
    model = init_model(mlp_specs([4, 4, 4, 4]), seed=1)
    grad = backward(model, Batch(child_rng(1, "x").normal(size=(6, 4)),
                                 np.array([0, 1, 2, 3, 0, 1])))
    masks = select_rgn([grad], model, budgets=[2])
    # Oracle: rank gradient-norm / parameter-norm by hand.
    ratios = [grad.layer_norms[k] / model.layer_norm(k) for k in range(3)]
    expected = sorted(range(3), key=lambda l: (-ratios[l], l))[:2]
    assert set(np.flatnonzero(masks[0])) == set(expected)
    # Scaling one layer's parameters by 10 divides its score by 10 at fixed gradient.
    scaled_ratio = grad.layer_norms[1] / (10.0 * model.layer_norm(1))
    assert scaled_ratio == pytest.approx(ratios[1] / 10.0, rel=1e-12)


def make_clients(seed, num_clients=4, num_classes=3, dim=5):
    data = generate_dataset(num_classes, dim, 40, seed=seed)
    shards = dirichlet_partition(data, num_clients, 0.7, seed=seed)
    return build_clients(shards, budgets=[2] * num_clients)


def test_probe_deterministic_and_matches_backward():
    clients = make_clients(seed=20)
    model = init_model(mlp_specs([5, 6, 3]), seed=21)
    scores1, grads1 = probe_gradient_norms(clients, model, probe_batch_size=1000, seed=0, epoch=0)
    scores2, _ = probe_gradient_norms(clients, model, probe_batch_size=1000, seed=0, epoch=0)
    assert np.array_equal(scores1, scores2)
    # Full-shard probe equals a direct backward pass on the shard.
    for row, client in enumerate(clients):
        direct = backward(model, Batch(client.shard.inputs, client.shard.labels))
        for j, k in enumerate(model.tunable_layers):
            assert scores1[row, j] == pytest.approx(float(direct.layer_norms[k] ** 2), rel=1e-12)
            assert np.array_equal(grads1[row].d_weights[k], direct.d_weights[k])


def test_probe_zero_gradient_layer_scores_zero():
    # A zero output layer kills the gradient of everything upstream.
    specs = mlp_specs([4, 4, 3])
    model = init_model(specs, seed=5)
    from fedseltune.model import LayeredModel

    dead = LayeredModel(
        specs,
        [model.weights[0], np.zeros_like(model.weights[1])],
        [model.biases[0], model.biases[1]],
    )
    clients = make_clients(seed=22, num_classes=3, dim=4)
    scores, _ = probe_gradient_norms(clients, dead, probe_batch_size=64, seed=0, epoch=0)
    assert np.all(scores[:, 0] == 0.0)


def test_select_masks_budget_feasibility_all_strategies():
    clients = make_clients(seed=23)
    model = init_model(mlp_specs([5, 6, 6, 3]), seed=24)
    for name in ("top", "bottom", "both", "snr", "rgn", "proposed"):
        strategy = StrategyConfig(name=name, lam=1.0, solver="exact")
        masks, _, _ = select_masks(strategy, model, clients, seed=1, epoch=0)
        for i, client in enumerate(clients):
            assert masks[i].sum() <= client.budget
    full_masks, _, _ = select_masks(StrategyConfig(name="full"), model, clients, seed=1, epoch=0)
    assert np.all(full_masks == 1)


def test_strategy_config_requires_lambda_for_proposed():
    with pytest.raises(ConfigError):
        StrategyConfig(name="proposed")
