"""Per-round layer selection.

Produces one binary mask per sampled client: static baselines (top, bottom,
both ends), gradient-statistic baselines (SNR, relative gradient norm), full
fine-tuning, and the budgeted maximizer of probed squared gradient norms with
a cross-client disagreement penalty. The maximizer ships with an exhaustive
exact solver (the correctness oracle) and a coordinate-ascent greedy solver
for larger rounds.

Layer indices are 0-based positions in the model's selectable (trainable)
layer list; ties everywhere break toward the lower index.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Batch, ConfigError, GradientVector, LayeredModel, backward
from .rng import child_rng

EXACT_ENUMERATION_BITS = 24          # cap: product of per-client choice counts <= 2**24
GREEDY_EXACT_SUBPROBLEM_CAP = 2 ** 16
MAX_GREEDY_SCANS = 50

STATIC_STRATEGIES = ("top", "bottom", "both")
PROBE_STRATEGIES = ("snr", "rgn", "proposed")
ALL_STRATEGIES = STATIC_STRATEGIES + PROBE_STRATEGIES + ("full",)


class CapacityError(RuntimeError):
    """Instance too large for exhaustive enumeration."""


class EmptyShardError(ValueError):
    """A participating client has no local samples."""


@dataclass
class SelectionProblem:
    """Inputs to the budgeted selection objective.

    scores[i][l] holds client i's probed squared gradient norm for layer l;
    budgets[i] caps the total layer cost client i may select; lam weights the
    pairwise mask-disagreement penalty (raised to penalty_exponent).
    """

    scores: np.ndarray
    budgets: np.ndarray
    lam: float
    layer_costs: np.ndarray = None
    penalty_exponent: int = 2

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ConfigError("scores must be a (clients, layers) matrix")
        self.budgets = np.asarray(self.budgets)
        if self.budgets.shape != (self.scores.shape[0],):
            raise ConfigError("budgets must align with the score matrix rows")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.layer_costs is None:
            self.layer_costs = np.ones(self.scores.shape[1])
        self.layer_costs = np.asarray(self.layer_costs, dtype=np.float64)
        if self.layer_costs.shape != (self.scores.shape[1],):
            raise ConfigError("layer_costs must have one entry per layer")
        if np.any(self.layer_costs <= 0):
            raise ConfigError("layer costs must be positive")
        if self.penalty_exponent not in (1, 2):
            raise ConfigError("penalty_exponent must be 1 or 2")

    @property
    def num_clients(self) -> int:
        return self.scores.shape[0]

    @property
    def num_layers(self) -> int:
        return self.scores.shape[1]

    @property
    def unit_costs(self) -> bool:
        return bool(np.all(self.layer_costs == 1.0))


@dataclass
class SelectionResult:
    masks: np.ndarray
    objective_value: float
    solver: str
    feasible: bool
    objective_history: list = field(default_factory=list)


def p1_objective(problem: SelectionProblem, masks) -> float:
    """Selected-score gain minus the weighted pairwise disagreement penalty."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != problem.scores.shape:
        raise ConfigError(f"mask matrix shape {masks.shape} != scores shape {problem.scores.shape}")
    gain = float(np.sum(masks * problem.scores))
    if problem.lam == 0.0 or problem.num_clients < 2:
        return gain
    penalty = 0.0
    for i in range(problem.num_clients):
        for j in range(i + 1, problem.num_clients):
            dist = float(np.abs(masks[i] - masks[j]).sum())
            penalty += dist ** problem.penalty_exponent
    return gain - problem.lam * penalty


def feasible_masks(num_layers: int, budget, layer_costs=None) -> np.ndarray:
    """All budget-feasible masks, ordered by their sorted selected-index tuples.

    That ordering makes "first maximum found" equal the lexicographically
    smallest tie-break used by the exact solver.
    """
    costs = np.ones(num_layers) if layer_costs is None else np.asarray(layer_costs, dtype=np.float64)
    budget = float(budget)
    subsets = []
    if np.all(costs == 1.0):
        max_size = min(int(budget), num_layers)
        for size in range(0, max_size + 1):
            subsets.extend(itertools.combinations(range(num_layers), size))
    else:
        if num_layers > 20:
            raise CapacityError(f"general-cost enumeration over {num_layers} layers is too large")
        for size in range(0, num_layers + 1):
            for combo in itertools.combinations(range(num_layers), size):
                if costs[list(combo)].sum() <= budget:
                    subsets.append(combo)
    subsets.sort()
    rows = np.zeros((len(subsets), num_layers), dtype=np.int64)
    for r, combo in enumerate(subsets):
        rows[r, list(combo)] = 1
    return rows


def _pairwise_hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ (1 - b).T + (1 - a) @ b.T


def solve_p1_exact(problem: SelectionProblem) -> SelectionResult:
    """Global maximizer by exhaustive enumeration of feasible mask matrices.

    Ties break to the lexicographically smallest matrix of per-client
    selected-index sets. Raises CapacityError beyond the enumeration cap.
    """
    candidates = [feasible_masks(problem.num_layers, r, problem.layer_costs) for r in problem.budgets]
    bits = sum(math.log2(c.shape[0]) for c in candidates)
    if bits > EXACT_ENUMERATION_BITS:
        raise CapacityError(
            f"instance needs {bits:.1f} enumeration bits, cap is {EXACT_ENUMERATION_BITS}"
        )
    gains = [c.astype(np.float64) @ problem.scores[i] for i, c in enumerate(candidates)]
    n = problem.num_clients

    if problem.lam == 0.0 or n == 1:
        # Separable: the per-client first maximum is the global tie-break winner.
        rows = [int(np.argmax(g)) for g in gains]
        masks = np.stack([candidates[i][rows[i]] for i in range(n)])
        return SelectionResult(
            masks=masks,
            objective_value=float(sum(g[r] for g, r in zip(gains, rows))),
            solver="exact",
            feasible=True,
            objective_history=[],
        )

    lam, p = problem.lam, problem.penalty_exponent
    penalties = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist = _pairwise_hamming(candidates[i], candidates[j]).astype(np.float64)
            penalties[(i, j)] = lam * dist ** p

    best_value = -np.inf
    best_rows = None
    last = n - 1
    prefix_sizes = [c.shape[0] for c in candidates[:last]]
    tail = gains[last]
    for prefix in itertools.product(*(range(s) for s in prefix_sizes)):
        value = 0.0
        for i, row in enumerate(prefix):
            value += gains[i][row]
            for j in range(i + 1, last):
                value -= penalties[(i, j)][row, prefix[j]]
        totals = value + tail
        for i, row in enumerate(prefix):
            totals = totals - penalties[(i, last)][row]
        row_last = int(np.argmax(totals))
        if totals[row_last] > best_value:
            best_value = float(totals[row_last])
            best_rows = prefix + (row_last,)
    masks = np.stack([candidates[i][best_rows[i]] for i in range(n)])
    return SelectionResult(
        masks=masks, objective_value=best_value, solver="exact", feasible=True, objective_history=[]
    )


def _top_k_selection(scores_row: np.ndarray, budget, layer_costs: np.ndarray) -> np.ndarray:
    """Highest-score layers that fit the budget; equal scores favor lower index."""
    mask = np.zeros(scores_row.size, dtype=np.int64)
    remaining = float(budget)
    for layer in np.argsort(-scores_row, kind="stable"):
        if layer_costs[layer] <= remaining:
            mask[layer] = 1
            remaining -= layer_costs[layer]
    return mask


def _swap_candidates(mask: np.ndarray, budget, layer_costs: np.ndarray) -> np.ndarray:
    """The current mask plus every feasible one-layer add, drop, or swap."""
    selected = np.flatnonzero(mask == 1)
    unselected = np.flatnonzero(mask == 0)
    cost = float(layer_costs[selected].sum())
    rows = [mask]
    for drop in selected:
        row = mask.copy()
        row[drop] = 0
        rows.append(row)
        for add in unselected:
            if cost - layer_costs[drop] + layer_costs[add] <= budget:
                swapped = row.copy()
                swapped[add] = 1
                rows.append(swapped)
    for add in unselected:
        if cost + layer_costs[add] <= budget:
            row = mask.copy()
            row[add] = 1
            rows.append(row)
    return np.unique(np.stack(rows), axis=0)


def _objective_at(problem: SelectionProblem, masks: np.ndarray, lam: float) -> float:
    gain = float(np.sum(masks * problem.scores))
    if lam == 0.0 or problem.num_clients < 2:
        return gain
    penalty = 0.0
    for i in range(problem.num_clients):
        for j in range(i + 1, problem.num_clients):
            dist = float(np.abs(masks[i] - masks[j]).sum())
            penalty += dist ** problem.penalty_exponent
    return gain - lam * penalty


def _improvement_floor(value: float) -> float:
    # Strictly-better moves only: float noise scaled by lambda must not cycle.
    return 1e-9 * (1.0 + abs(value))


def _single_client_sweep(problem, masks, exact_sets, lam) -> bool:
    """One pass of per-client re-optimization against the current others."""
    p = problem.penalty_exponent
    improved = False
    for i in range(problem.num_clients):
        others = np.delete(masks, i, axis=0)
        candidates = exact_sets[i]
        if candidates is None:
            candidates = _swap_candidates(masks[i], problem.budgets[i], problem.layer_costs)
        dist = _pairwise_hamming(candidates, others).astype(np.float64)
        values = candidates.astype(np.float64) @ problem.scores[i] - lam * (dist ** p).sum(axis=1)
        cur_dist = np.abs(masks[i] - others).sum(axis=1).astype(np.float64)
        cur_value = float(masks[i] @ problem.scores[i]) - lam * float((cur_dist ** p).sum())
        best = int(np.argmax(values))
        if values[best] > cur_value + _improvement_floor(cur_value):
            masks[i] = candidates[best]
            improved = True
    return improved


def _pair_sweep(problem, masks, exact_sets, lam, pair_penalties) -> bool:
    """One pass of joint two-client re-optimization; crosses single-move barriers."""
    p = problem.penalty_exponent
    n = problem.num_clients
    gains = [exact_sets[i].astype(np.float64) @ problem.scores[i] for i in range(n)]
    improved = False
    for i in range(n):
        for j in range(i + 1, n):
            keep = [k for k in range(n) if k not in (i, j)]
            others = masks[keep]
            if others.size:
                rest_i = lam * (_pairwise_hamming(exact_sets[i], others).astype(np.float64) ** p).sum(axis=1)
                rest_j = lam * (_pairwise_hamming(exact_sets[j], others).astype(np.float64) ** p).sum(axis=1)
            else:
                rest_i = np.zeros(exact_sets[i].shape[0])
                rest_j = np.zeros(exact_sets[j].shape[0])
            values = (
                (gains[i] - rest_i)[:, None]
                + (gains[j] - rest_j)[None, :]
                - lam * pair_penalties[(i, j)]
            )
            cur = (
                float(masks[i] @ problem.scores[i]) + float(masks[j] @ problem.scores[j])
                - lam * float(np.abs(masks[i] - masks[j]).sum() ** p)
            )
            if others.size:
                cur -= lam * float((np.abs(masks[i] - others).sum(axis=1).astype(np.float64) ** p).sum())
                cur -= lam * float((np.abs(masks[j] - others).sum(axis=1).astype(np.float64) ** p).sum())
            flat = int(np.argmax(values))
            row, col = divmod(flat, values.shape[1])
            if values[row, col] > cur + _improvement_floor(cur):
                masks[i] = exact_sets[i][row]
                masks[j] = exact_sets[j][col]
                improved = True
    return improved


def _coordinate_ascent(problem: SelectionProblem, masks: np.ndarray, exact_sets, lam: float,
                       pair_penalties=None):
    """Ascend by client scans (and joint pair moves, when affordable).

    Scans clients in id order re-optimizing one mask at a time; once a scan
    stalls, one sweep of exact two-client joint moves runs if the candidate
    sets are small enough, and scanning resumes on any improvement. Stops at
    the first full pass with no improvement or after MAX_GREEDY_SCANS passes;
    the recorded objective never decreases.
    """
    masks = masks.copy()
    history = [_objective_at(problem, masks, lam)]
    for _ in range(MAX_GREEDY_SCANS):
        improved = _single_client_sweep(problem, masks, exact_sets, lam)
        if not improved and pair_penalties is not None:
            improved = _pair_sweep(problem, masks, exact_sets, lam, pair_penalties)
        history.append(_objective_at(problem, masks, lam))
        if not improved:
            break
    return masks, history


PAIR_SWEEP_WORK_CAP = 2 ** 16


def solve_p1_greedy(problem: SelectionProblem) -> SelectionResult:
    """Scalable solver: multi-start coordinate ascent with joint pair moves.

    Deterministic starts cover the objective's regimes: per-client top-budget
    masks (optimal with the penalty off), consensus on the summed score
    columns at each client's own and at the common budget (strong when the
    penalty dominates), one start aligned on every single layer as a shared
    core, and a continuation path that re-ascends while annealing lambda up
    to its target. Each start is improved by _coordinate_ascent and the best
    final objective wins. Within a start the objective never decreases.
    """
    n, num_layers = problem.num_clients, problem.num_layers
    independent = np.stack(
        [_top_k_selection(problem.scores[i], problem.budgets[i], problem.layer_costs) for i in range(n)]
    )
    if problem.lam == 0.0 or n == 1:
        value = p1_objective(problem, independent)
        return SelectionResult(independent, value, "greedy", True, [value])

    exact_sets = []
    for i in range(n):
        count = _feasible_count(num_layers, problem.budgets[i], problem.layer_costs)
        if count <= GREEDY_EXACT_SUBPROBLEM_CAP:
            exact_sets.append(feasible_masks(num_layers, problem.budgets[i], problem.layer_costs))
        else:
            exact_sets.append(None)

    pair_penalties = None
    if all(c is not None for c in exact_sets):
        pair_work = sum(
            exact_sets[i].shape[0] * exact_sets[j].shape[0]
            for i in range(n) for j in range(i + 1, n)
        )
        if pair_work <= PAIR_SWEEP_WORK_CAP:
            p = problem.penalty_exponent
            pair_penalties = {
                (i, j): _pairwise_hamming(exact_sets[i], exact_sets[j]).astype(np.float64) ** p
                for i in range(n) for j in range(i + 1, n)
            }

    column_sums = problem.scores.sum(axis=0)
    consensus = np.stack(
        [_top_k_selection(column_sums, problem.budgets[i], problem.layer_costs) for i in range(n)]
    )
    common = _top_k_selection(column_sums, problem.budgets.min(), problem.layer_costs)
    starts = [independent, consensus, np.tile(common, (n, 1))]
    for core in range(num_layers):
        rows = []
        for i in range(n):
            boosted = problem.scores[i].copy()
            boosted[core] = np.inf
            rows.append(_top_k_selection(boosted, problem.budgets[i], problem.layer_costs))
        starts.append(np.stack(rows))

    best_masks, best_history = None, None
    for start in starts:
        masks, history = _coordinate_ascent(problem, start, exact_sets, problem.lam, pair_penalties)
        if best_history is None or history[-1] > best_history[-1]:
            best_masks, best_history = masks, history

    annealed = independent
    for stage in range(-8, 1):
        annealed, history = _coordinate_ascent(
            problem, annealed, exact_sets, problem.lam * 4.0 ** stage, pair_penalties
        )
    if history[-1] > best_history[-1]:
        best_masks, best_history = annealed, history
    return SelectionResult(best_masks, best_history[-1], "greedy", True, best_history)


def _feasible_count(num_layers: int, budget, layer_costs: np.ndarray) -> int:
    if np.all(layer_costs == 1.0):
        max_size = min(int(budget), num_layers)
        return sum(math.comb(num_layers, k) for k in range(max_size + 1))
    if num_layers > 20:
        return 2 ** num_layers
    return feasible_masks(num_layers, budget, layer_costs).shape[0]


def probe_gradient_norms(sampled, model: LayeredModel, probe_batch_size: int, seed: int, epoch: int):
    """One stochastic gradient per sampled client at the current global model.

    Returns the (clients, layers) matrix of squared layer-gradient norms over
    the selectable layers, plus the raw probe gradients for reuse by the
    SNR/RGN baselines and the diagnostics.
    """
    tunable = model.tunable_layers
    scores = np.zeros((len(sampled), len(tunable)))
    grads = []
    for row, client in enumerate(sampled):
        if client.shard.d == 0:
            raise EmptyShardError(f"client {client.client_id} has no samples to probe")
        if probe_batch_size >= client.shard.d:
            idx = np.arange(client.shard.d)
        else:
            rng = child_rng(seed, "probe", epoch, client.client_id)
            idx = np.sort(rng.choice(client.shard.d, size=probe_batch_size, replace=False))
        grad = backward(model, Batch(client.shard.inputs[idx], client.shard.labels[idx]))
        scores[row] = [grad.layer_norms[k] ** 2 for k in tunable]
        grads.append(grad)
    return scores, grads


def _clamped_budget(budget, num_layers: int) -> int:
    budget = int(budget)
    if budget > num_layers:
        warnings.warn(f"budget {budget} exceeds {num_layers} selectable layers; clamping")
        return num_layers
    return budget


def select_static(kind: str, budgets, num_layers: int) -> np.ndarray:
    """Fixed-position masks: top (near output), bottom (near input), or both ends.

    "both" takes ceil(R/2) from the top and floor(R/2) from the bottom, so an
    odd budget spends its extra layer near the output.
    """
    if kind not in STATIC_STRATEGIES:
        raise ConfigError(f"unknown static strategy {kind!r}")
    masks = np.zeros((len(budgets), num_layers), dtype=np.int64)
    for i, budget in enumerate(budgets):
        r = _clamped_budget(budget, num_layers)
        if kind == "top":
            chosen = range(num_layers - r, num_layers)
        elif kind == "bottom":
            chosen = range(r)
        else:
            from_top = (r + 1) // 2
            chosen = set(range(r // 2)) | set(range(num_layers - from_top, num_layers))
        masks[i, list(chosen)] = 1
    return masks


def _rank_to_masks(scores_by_client, budgets, num_layers: int) -> np.ndarray:
    masks = np.zeros((len(budgets), num_layers), dtype=np.int64)
    for i, scores in enumerate(scores_by_client):
        ranked = sorted(range(num_layers), key=lambda l: (-scores[l], l))
        masks[i, ranked[: _clamped_budget(budgets[i], num_layers)]] = 1
    return masks


def select_snr(probe_grads, budgets, layer_indices) -> np.ndarray:
    """Rank layers by |mean of gradient elements| / variance of them.

    Zero variance with a nonzero mean ranks first (infinite ratio); an
    all-zero block ranks last.
    """
    scored = []
    for grad in probe_grads:
        row = []
        for k in layer_indices:
            elems = grad.block_elements(k)
            mean, var = float(elems.mean()), float(elems.var())
            if var == 0.0:
                row.append(np.inf if mean != 0.0 else 0.0)
            else:
                row.append(abs(mean) / var)
        scored.append(row)
    return _rank_to_masks(scored, budgets, len(layer_indices))


def select_rgn(probe_grads, model: LayeredModel, budgets) -> np.ndarray:
    """Rank layers by gradient norm over parameter norm (zero param norm -> inf)."""
    layer_indices = model.tunable_layers
    scored = []
    for grad in probe_grads:
        row = []
        for k in layer_indices:
            param_norm = model.layer_norm(k)
            grad_norm = float(grad.layer_norms[k])
            row.append(np.inf if param_norm == 0.0 else grad_norm / param_norm)
        scored.append(row)
    return _rank_to_masks(scored, budgets, len(layer_indices))


@dataclass
class StrategyConfig:
    """Which selection rule a round uses, plus its knobs."""

    name: str
    lam: float = None
    penalty_exponent: int = 2
    probe_size: int = 64
    solver: str = "greedy"  # "greedy" | "exact"

    def __post_init__(self):
        if self.name not in ALL_STRATEGIES:
            raise ConfigError(f"unknown strategy {self.name!r}, expected one of {ALL_STRATEGIES}")
        if self.name == "proposed" and self.lam is None:
            raise ConfigError("the proposed strategy requires an explicit lambda")
        if self.solver not in ("greedy", "exact"):
            raise ConfigError(f"unknown solver {self.solver!r}")


def select_masks(strategy: StrategyConfig, model: LayeredModel, sampled, seed: int, epoch: int):
    """Dispatch one round of selection.

    Returns (mask matrix, probe gradients or None, selection objective or
    None). The full strategy ignores budgets by definition; every other
    strategy respects them.
    """
    num_layers = model.num_tunable
    budgets = [c.budget for c in sampled]
    if strategy.name == "full":
        return np.ones((len(sampled), num_layers), dtype=np.int64), None, None
    if strategy.name in STATIC_STRATEGIES:
        return select_static(strategy.name, budgets, num_layers), None, None

    scores, grads = probe_gradient_norms(sampled, model, strategy.probe_size, seed, epoch)
    if strategy.name == "snr":
        return select_snr(grads, budgets, model.tunable_layers), grads, None
    if strategy.name == "rgn":
        return select_rgn(grads, model, budgets), grads, None

    problem = SelectionProblem(
        scores=scores,
        budgets=np.asarray(budgets),
        lam=strategy.lam,
        penalty_exponent=strategy.penalty_exponent,
    )
    solver = solve_p1_exact if strategy.solver == "exact" else solve_p1_greedy
    result = solver(problem)
    return result.masks, grads, result.objective_value
