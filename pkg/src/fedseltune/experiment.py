"""Experiment configuration, orchestration, and reporting.

A YAML config defines one experiment: model shape, data and partition plan,
federation parameters, strategies to compare, budget scheme, and seeds. A run
executes every (strategy, seed) pair over T rounds and writes machine-readable
artifacts under out/<name>/:

    rounds.jsonl      one JSON record per evaluated epoch (plus an init record
                      per strategy/seed), schema_version 1
    summary.csv       per-strategy accuracy and cost summary with a rank column
    selection_freq.csv  how often each layer was selected, per strategy/epoch
    theory_report.json  constants, error terms, and bound values (diagnostic
                      mode), or a marker that diagnostics were off
    effective_config  full config echo with defaults applied

Outputs contain no timestamps or environment data: a (config, seed) pair
determines every output byte.
"""

from __future__ import annotations

import csv
import difflib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import (
    dirichlet_partition,
    feature_skew_partition,
    generate_dataset,
    split_train_test,
)
from .diagnostics import (
    centralized_reference_minimum,
    estimate_constants,
    multistep_rhs,
    theorem1_rhs,
)
from .model import ConfigError, init_model, mlp_specs
from .protocol import RoundConfig, build_clients, evaluate, run_round
from .rng import child_rng, derive_seed
from .selection import ALL_STRATEGIES, StrategyConfig

SCHEMA_VERSION = 1


@dataclass
class ModelSection:
    layer_dims: list
    hidden_kind: str = "affine+tanh"
    frozen_layers: list = field(default_factory=list)


@dataclass
class DataSection:
    num_classes: int
    dim: int
    per_class: int
    separation: float = 4.0
    test_fraction: float = 0.1


@dataclass
class PartitionSection:
    regime: str
    concentration: float = 0.1
    num_domains: int = 1
    shift_scale: float = 10.0


@dataclass
class FederationSection:
    num_clients: int
    clients_per_round: int
    rounds: int
    tau: int
    eta: float
    batch_size: int
    eta_schedule: str = "fixed"  # "fixed" | "inv_sqrt_rounds"


@dataclass
class SelectionSection:
    lam: float = None
    penalty_exponent: int = 2
    probe_size: int = 64
    solver: str = "greedy"


@dataclass
class BudgetSection:
    scheme: str  # "identical" | "half_normal"
    value: int = None
    lo: int = 1
    hi: int = 4
    sigma: float = 1.5


@dataclass
class ExperimentConfig:
    name: str
    model: ModelSection
    data: DataSection
    partition: PartitionSection
    federation: FederationSection
    strategies: list
    budgets: BudgetSection
    seeds: list
    selection: SelectionSection = field(default_factory=SelectionSection)
    diagnostic_mode: bool = False
    output_dir: str = "out"

    @property
    def num_layers(self) -> int:
        return len(self.model.layer_dims) - 1 - len(self.model.frozen_layers)


_SECTION_FIELDS = {
    "model": ModelSection,
    "data": DataSection,
    "partition": PartitionSection,
    "federation": FederationSection,
    "selection": SelectionSection,
    "budgets": BudgetSection,
}
_TOP_LEVEL_KEYS = (
    "name", "model", "data", "partition", "federation", "selection",
    "strategies", "budgets", "seeds", "diagnostic_mode", "output_dir",
)
# "lambda" is a Python keyword, so the config key maps to the lam field.
_KEY_ALIASES = {"lambda": "lam"}


def _reject_unknown(raw: dict, allowed, where: str) -> None:
    for key in raw:
        if key not in allowed:
            hint = difflib.get_close_matches(key, list(allowed), n=1)
            suggestion = f'; did you mean "{hint[0]}"?' if hint else ""
            raise ConfigError(f'unknown key "{key}" in {where}{suggestion}')


def _build_section(cls, raw: dict, where: str):
    fields = list(cls.__dataclass_fields__)
    allowed = fields + [k for k, v in _KEY_ALIASES.items() if v in fields]
    _reject_unknown(raw, allowed, where)
    kwargs = {_KEY_ALIASES.get(k, k): v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping; unknown keys are rejected with a hint."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown(raw, _TOP_LEVEL_KEYS, "config")
    for required in ("name", "model", "data", "partition", "federation", "strategies", "budgets", "seeds"):
        if required not in raw:
            raise ConfigError(f'config is missing required section "{required}"')
    sections = {}
    for key, cls in _SECTION_FIELDS.items():
        if key in raw:
            if not isinstance(raw[key], dict):
                raise ConfigError(f'section "{key}" must be a mapping')
            sections[key] = _build_section(cls, raw[key], f'section "{key}"')
    cfg = ExperimentConfig(
        name=str(raw["name"]),
        model=sections["model"],
        data=sections["data"],
        partition=sections["partition"],
        federation=sections["federation"],
        selection=sections.get("selection", SelectionSection()),
        strategies=list(raw["strategies"]),
        budgets=sections["budgets"],
        seeds=[int(s) for s in raw["seeds"]],
        diagnostic_mode=bool(raw.get("diagnostic_mode", False)),
        output_dir=str(raw.get("output_dir", "out")),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if len(cfg.model.layer_dims) < 2:
        raise ConfigError("model.layer_dims needs at least input and output sizes")
    if cfg.model.layer_dims[-1] != cfg.data.num_classes:
        raise ConfigError(
            f"model output dim {cfg.model.layer_dims[-1]} != data.num_classes {cfg.data.num_classes}"
        )
    if cfg.model.layer_dims[0] != cfg.data.dim:
        raise ConfigError(f"model input dim {cfg.model.layer_dims[0]} != data.dim {cfg.data.dim}")
    for key in ("eta", "tau"):
        if getattr(cfg.federation, key) is None:
            raise ConfigError(f"federation.{key} must be set explicitly")
    if cfg.federation.eta_schedule not in ("fixed", "inv_sqrt_rounds"):
        raise ConfigError(f"unknown eta_schedule {cfg.federation.eta_schedule!r}")
    if cfg.federation.rounds < 0:
        raise ConfigError("federation.rounds must be >= 0")
    if not cfg.strategies:
        raise ConfigError("strategies must not be empty")
    for s in cfg.strategies:
        if s not in ALL_STRATEGIES:
            hint = difflib.get_close_matches(s, ALL_STRATEGIES, n=1)
            suggestion = f'; did you mean "{hint[0]}"?' if hint else ""
            raise ConfigError(f"unknown strategy {s!r}{suggestion}")
    if "proposed" in cfg.strategies and cfg.selection.lam is None:
        raise ConfigError('strategy "proposed" requires selection.lambda to be set explicitly')
    if cfg.budgets.scheme not in ("identical", "half_normal"):
        raise ConfigError(f"unknown budget scheme {cfg.budgets.scheme!r}")
    if cfg.budgets.scheme == "identical" and cfg.budgets.value is None:
        raise ConfigError("identical budget scheme needs budgets.value")
    num_layers = cfg.num_layers
    if cfg.budgets.scheme == "half_normal":
        if not 1 <= cfg.budgets.lo <= cfg.budgets.hi:
            raise ConfigError("half_normal budgets need 1 <= lo <= hi")
        if cfg.budgets.hi > num_layers:
            raise ConfigError(f"budgets.hi {cfg.budgets.hi} exceeds the {num_layers} selectable layers")
    elif cfg.budgets.value > num_layers:
        raise ConfigError(f"budgets.value {cfg.budgets.value} exceeds the {num_layers} selectable layers")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")


def parse_config(path) -> ExperimentConfig:
    """Load and validate a YAML experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return load_config_dict(raw)


def effective_config_text(cfg: ExperimentConfig) -> str:
    """Full config echo with every default made explicit."""
    raw = asdict(cfg)
    raw["selection"]["lambda"] = raw["selection"].pop("lam")
    return yaml.safe_dump(raw, sort_keys=True)


def sample_budgets(scheme: BudgetSection, num_clients: int, seed: int, num_layers: int) -> np.ndarray:
    """Per-client layer budgets: identical, or discretized half-normal draws.

    Half-normal draws take ceil(|N(0, sigma)|) clamped into [lo, hi]; the
    default sigma of 1.5 puts the mode at the low end.
    """
    if scheme.scheme == "identical":
        value = int(scheme.value)
        if not 1 <= value <= num_layers:
            raise ConfigError(f"identical budget {value} outside [1, {num_layers}]")
        return np.full(num_clients, value, dtype=np.int64)
    if scheme.hi > num_layers:
        raise ConfigError(f"budget upper bound {scheme.hi} exceeds {num_layers} selectable layers")
    rng = child_rng(seed, "budgets")
    draws = np.ceil(np.abs(rng.normal(0.0, scheme.sigma, size=num_clients)))
    return np.clip(draws, scheme.lo, scheme.hi).astype(np.int64)


def _strategy_config(cfg: ExperimentConfig, name: str) -> StrategyConfig:
    return StrategyConfig(
        name=name,
        lam=cfg.selection.lam,
        penalty_exponent=cfg.selection.penalty_exponent,
        probe_size=cfg.selection.probe_size,
        solver=cfg.selection.solver,
    )


def _effective_eta(cfg: ExperimentConfig) -> float:
    if cfg.federation.eta_schedule == "inv_sqrt_rounds":
        return cfg.federation.eta / math.sqrt(max(cfg.federation.rounds, 1))
    return cfg.federation.eta


def _init_record(strategy_name, seed, model, clients, test, num_layers):
    pooled_inputs = np.concatenate([c.shard.inputs for c in clients])
    pooled_labels = np.concatenate([c.shard.labels for c in clients])
    train_loss, _ = evaluate(model, pooled_inputs, pooled_labels)
    test_loss, test_accuracy = evaluate(model, test.inputs, test.labels)
    return {
        "schema_version": SCHEMA_VERSION,
        "phase": "init",
        "strategy": strategy_name,
        "seed": seed,
        "epoch": -1,
        "sampled_clients": [],
        "budgets": [],
        "masks": [],
        "weights": [],
        "unselected_layers": list(range(num_layers)),
        "noop": True,
        "train_loss": train_loss,
        "test_loss": test_loss,
        "test_accuracy": test_accuracy,
        "delta_layer_norms": [],
        "selection_objective": None,
        "cost": {"flops": 0.0, "flops_full": 0.0, "comm_layers": 0, "comm_layers_full": 0},
        "diagnostics": None,
    }


def run_single(cfg: ExperimentConfig, strategy_name: str, seed: int):
    """One (strategy, seed) training run; returns (records, probe model snapshots)."""
    specs = mlp_specs(cfg.model.layer_dims, cfg.model.hidden_kind, cfg.model.frozen_layers)
    dataset = generate_dataset(
        cfg.data.num_classes, cfg.data.dim, cfg.data.per_class,
        seed=derive_seed(seed, "data"), separation=cfg.data.separation,
    )
    train, test = split_train_test(dataset, cfg.data.test_fraction, seed=derive_seed(seed, "split"))
    if cfg.partition.regime == "label_skew":
        shards = dirichlet_partition(
            train, cfg.federation.num_clients, cfg.partition.concentration,
            seed=derive_seed(seed, "partition"),
        )
    else:
        shards = feature_skew_partition(
            train, cfg.federation.num_clients, cfg.partition.num_domains,
            seed=derive_seed(seed, "partition"), shift_scale=cfg.partition.shift_scale,
        )
    num_layers = cfg.num_layers
    if strategy_name == "full":
        budgets = np.full(cfg.federation.num_clients, num_layers, dtype=np.int64)
    else:
        budgets = sample_budgets(cfg.budgets, cfg.federation.num_clients,
                                 seed=derive_seed(seed, "budgets"), num_layers=num_layers)
    clients = build_clients(shards, budgets)
    model = init_model(specs, seed=derive_seed(seed, "init"))
    strategy = _strategy_config(cfg, strategy_name)
    round_cfg = RoundConfig(
        clients_per_round=cfg.federation.clients_per_round,
        tau=cfg.federation.tau,
        eta=_effective_eta(cfg),
        batch_size=cfg.federation.batch_size,
    )

    records = [_init_record(strategy_name, seed, model, clients, test, num_layers)]
    snapshots = [model]
    for epoch in range(cfg.federation.rounds):
        model, record = run_round(
            model, clients, strategy, round_cfg, epoch, seed,
            eval_inputs=test.inputs, eval_labels=test.labels,
            diagnostic=cfg.diagnostic_mode,
        )
        record.strategy = strategy_name
        record.seed = seed
        records.append(record.to_json_dict())
        if cfg.diagnostic_mode:
            snapshots.append(model)
    return records, {"model": model, "clients": clients, "train": train, "snapshots": snapshots}


def _theory_entry(cfg: ExperimentConfig, strategy_name: str, seed: int, records, state) -> dict:
    rounds = [r for r in records if r["phase"] == "round"]
    e1 = [r["diagnostics"]["e1_hat"] for r in rounds]
    e2 = [r["diagnostics"]["e2_hat"] for r in rounds]
    constants = estimate_constants(
        state["snapshots"], state["clients"],
        eta=_effective_eta(cfg), tau=cfg.federation.tau, horizon=max(len(rounds), 1),
        sigma_batch_size=cfg.federation.batch_size, seed=derive_seed(seed, "sigma"),
    )
    train = state["train"]
    f0 = records[0]["train_loss"]
    fstar = centralized_reference_minimum(
        state["snapshots"][0], train.inputs, train.labels,
        eta=_effective_eta(cfg), steps=max(200, 4 * cfg.federation.rounds),
    )
    # Assumption-faithful variance aggregate: the max over rounds of the
    # selected-layer sums of the per-layer estimates.
    sigma_used = 0.0
    per_layer = np.asarray(constants.sigma_sq_per_layer)
    for r in rounds:
        masks = np.asarray(r["masks"])
        if masks.size:
            selected = np.flatnonzero(masks.sum(axis=0) >= 1)
            sigma_used = max(sigma_used, float(per_layer[selected].sum()))
    constants.sigma_sq = sigma_used
    single = theorem1_rhs(constants, f0, fstar, e1, e2)
    single_main = theorem1_rhs(constants, f0, fstar, e1, e2, variant="main", num_layers=cfg.num_layers)
    multi = multistep_rhs(constants, f0, fstar, e1, e2, tau=cfg.federation.tau)
    return {
        "strategy": strategy_name,
        "seed": seed,
        "constants": {
            "gamma": constants.gamma,
            "sigma_sq": constants.sigma_sq,
            "sigma_sq_per_layer": constants.sigma_sq_per_layer,
            "kappa_sq_per_layer": constants.kappa_sq_per_layer,
            "note": "empirical maxima; lower bounds of the assumption constants",
        },
        "f0": f0,
        "fstar_estimate": {"value": fstar, "method": "centralized full-batch reference run", "is_estimate": True},
        "e1_per_round": e1,
        "e2_per_round": e2,
        "lemma2_slack_min": min((r["diagnostics"]["lemma2_slack"] for r in rounds), default=None),
        "bound_single_step": single.to_json_dict(),
        "bound_single_step_main_text_constant": single_main.to_json_dict(),
        "bound_multi_step": multi.to_json_dict(),
    }


def summary_rows(records) -> list:
    """Per-strategy summary recomputed purely from round records."""
    by_strategy = {}
    for rec in records:
        by_strategy.setdefault(rec["strategy"], {}).setdefault(rec["seed"], []).append(rec)
    rows = []
    for strategy, by_seed in by_strategy.items():
        finals, bests, flops, comms = [], [], [], []
        for recs in by_seed.values():
            recs = sorted(recs, key=lambda r: r["epoch"])
            finals.append(recs[-1]["test_accuracy"])
            bests.append(max(r["test_accuracy"] for r in recs))
            flops.append(sum(r["cost"]["flops"] for r in recs))
            comms.append(sum(r["cost"]["comm_layers"] for r in recs))
        rows.append(
            {
                "strategy": strategy,
                "final_accuracy_mean": float(np.mean(finals)),
                "final_accuracy_std": float(np.std(finals)),
                "best_accuracy_mean": float(np.mean(bests)),
                "total_flops_mean": float(np.mean(flops)),
                "total_comm_layers_mean": float(np.mean(comms)),
                "num_seeds": len(by_seed),
            }
        )
    rows.sort(key=lambda r: (-r["final_accuracy_mean"], r["strategy"]))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows


def _summary_csv_text(rows) -> str:
    buf = io.StringIO()
    columns = [
        "rank", "strategy", "final_accuracy_mean", "final_accuracy_std",
        "best_accuracy_mean", "total_flops_mean", "total_comm_layers_mean", "num_seeds",
    ]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def _selection_freq_csv_text(records) -> str:
    """Counts of clients selecting each layer, per strategy and epoch, over seeds."""
    counts = {}
    for rec in records:
        if rec["phase"] != "round":
            continue
        masks = np.asarray(rec["masks"])
        if masks.size == 0:
            continue
        per_layer = masks.sum(axis=0)
        for layer, count in enumerate(per_layer):
            key = (rec["strategy"], rec["epoch"], layer)
            counts[key] = counts.get(key, 0) + int(count)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "epoch", "layer", "count"])
    for (strategy, epoch, layer), count in sorted(counts.items()):
        writer.writerow([strategy, epoch, layer, count])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute every (strategy, seed) pair and write all artifacts.

    Returns the output paths plus the in-memory summary rows. Round records
    are flushed to rounds.jsonl as each run finishes so partial logs survive
    an abort.
    """
    out = Path(cfg.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config").write_text(effective_config_text(cfg), encoding="utf-8")

    all_records = []
    theory_entries = []
    rounds_path = out / "rounds.jsonl"
    with open(rounds_path, "w", encoding="utf-8") as fh:
        for strategy_name in cfg.strategies:
            for seed in cfg.seeds:
                try:
                    records, state = run_single(cfg, strategy_name, seed)
                except Exception as exc:
                    raise RuntimeError(f"run failed (strategy={strategy_name}, seed={seed}): {exc}") from exc
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                all_records.extend(records)
                if cfg.diagnostic_mode:
                    theory_entries.append(_theory_entry(cfg, strategy_name, seed, records, state))

    rows = summary_rows(all_records)
    (out / "summary.csv").write_text(_summary_csv_text(rows), encoding="utf-8")
    (out / "selection_freq.csv").write_text(_selection_freq_csv_text(all_records), encoding="utf-8")
    report = {"schema_version": SCHEMA_VERSION, "diagnostic_mode": cfg.diagnostic_mode, "runs": theory_entries}
    (out / "theory_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {
        "out_dir": str(out),
        "rounds": str(rounds_path),
        "summary": str(out / "summary.csv"),
        "selection_freq": str(out / "selection_freq.csv"),
        "theory_report": str(out / "theory_report.json"),
        "summary_rows": rows,
    }


def read_round_records(run_dir) -> list:
    path = Path(run_dir) / "rounds.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def summarize_run(run_dir) -> list:
    """Rebuild summary.csv for an existing run directory from its round logs."""
    records = read_round_records(run_dir)
    rows = summary_rows(records)
    (Path(run_dir) / "summary.csv").write_text(_summary_csv_text(rows), encoding="utf-8")
    return rows
