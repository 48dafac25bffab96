"""Experiment driver: config parsing, the run matrix, and report files.

Configs are flat `key = value` text with `#` comments; keys carry explicit
units (tx_power_dbm, area_half_side_m). An experiment executes deployments x
initializations x optimizers (x decode modes when noma = both), writes one
CSV per run as it finishes, and a summary JSON with approximation ratios,
fairness, and NOMA gains. Everything is a pure function of the master seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .baselines import OptimizerBudget, nelder_mead_maximize, random_search_maximize
from .brd import BrConfig, run_best_response
from .channel import ChannelModel, db_to_linear, dbm_to_watts, objective_geomean
from .envs import MonteCarloEnv, OracleEnv
from .icnn import CentralizedConfig, run_centralized_optimization
from .metrics import approximation_ratio, evaluations_to_ratio, jain_fairness
from .oracle import ORACLE_MAX_DEVICES, build_conditional_table
from .topology import (
    Topology,
    generate_mesh_deployment,
    generate_uniform_deployment,
    place_bs_lloyd,
)

KNOWN_OPTIMIZERS = ("br", "icnn", "nelder-mead", "random", "homogeneous-grid")


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent experiment configs."""


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    try:
        value = int(text)
        return value
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config(text: str) -> dict:
    """Parse flat `key = value` lines; commas make a list, '#' comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v.strip()) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def dump_config(values: dict) -> str:
    """Canonical text form; parse(dump(parse(t))) == parse(t).

    Single-element lists keep a trailing comma so they re-parse as lists;
    empty lists are omitted (the typed config fills their defaults).
    """
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            if len(value) == 0:
                continue
            rendered = ", ".join(_render_scalar(v) for v in value)
            if len(value) == 1:
                rendered += ","
        else:
            rendered = _render_scalar(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def _render_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Typed view of an experiment config file."""

    name: str = "experiment"
    seed: int = 0
    # deployment
    deployment: str = "uniform"          # uniform | mesh
    n_devices: int = 8
    area_half_side_m: float = 500.0
    n_base_stations: int = 2
    bs_placement: str = "lloyd"          # lloyd | explicit
    bs_coordinates_m: list = field(default_factory=list)  # flat x,y,x,y,...
    # channel
    tx_power_dbm: float = 30.0
    noise_floor_dbm: float = -100.0
    path_loss_exponent: float = 2.0
    carrier_frequency_hz: float = 900e6
    reference_distance_m: float = 1.0
    bandwidth_hz: float = 1.0
    snir_threshold_db: float = -5.1
    fading: str = "rayleigh"             # rayleigh | none
    noma: str = "on"                     # on | off | both
    # evaluation
    rate_source: str = "oracle"          # oracle | monte-carlo
    oracle_fading_samples: int = 300
    slots_per_evaluation: int = 20000
    final_eval_slots: int = 200000
    eps_p: float = 1e-3
    # matrix
    optimizers: list = field(default_factory=lambda: ["br", "nelder-mead", "random"])
    budget_evaluations: int = 1000
    n_deployments: int = 1
    n_initializations: int = 1
    # best-response knobs
    br_probe_slots: int = 20000
    br_max_outer_iters: int = 500
    br_selection: str = "random"
    # surrogate knobs
    icnn_hidden: list = field(default_factory=lambda: [128, 128, 128])
    icnn_epochs: int = 40
    icnn_step_size: float = 3e-3
    icnn_minibatch: int = 32
    icnn_grad_clip: float = 1.0
    icnn_ensemble_size: int = 10
    icnn_rounds: int = 9
    icnn_samples_per_round: int = 100
    icnn_initial_samples: int = 100
    # homogeneous baseline
    homogeneous_grid_points: int = 101

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(parse_config(text))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, (list, tuple)) else value
        return out

    def validate(self):
        if isinstance(self.optimizers, str):
            self.optimizers = [self.optimizers]
        if isinstance(self.icnn_hidden, (int, float)):
            self.icnn_hidden = [int(self.icnn_hidden)]
        if isinstance(self.bs_coordinates_m, (int, float)):
            self.bs_coordinates_m = [self.bs_coordinates_m]
        if not self.optimizers:
            raise ConfigError("optimizer list is empty")
        for opt in self.optimizers:
            if opt not in KNOWN_OPTIMIZERS:
                raise ConfigError(f"unknown optimizer {opt!r}")
        for key in (
            "n_devices",
            "n_base_stations",
            "n_deployments",
            "n_initializations",
            "budget_evaluations",
            "slots_per_evaluation",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.deployment not in ("uniform", "mesh"):
            raise ConfigError(f"unknown deployment {self.deployment!r}")
        if self.bs_placement not in ("lloyd", "explicit"):
            raise ConfigError(f"unknown bs_placement {self.bs_placement!r}")
        if self.bs_placement == "explicit" and (
            not self.bs_coordinates_m or len(self.bs_coordinates_m) % 2
        ):
            raise ConfigError("explicit placement needs x,y pairs in bs_coordinates_m")
        if self.noma not in ("on", "off", "both"):
            raise ConfigError(f"noma must be on/off/both, got {self.noma!r}")
        if self.rate_source not in ("oracle", "monte-carlo"):
            raise ConfigError(f"unknown rate_source {self.rate_source!r}")
        if self.rate_source == "oracle" and self.n_devices > ORACLE_MAX_DEVICES:
            raise ConfigError(
                f"oracle rate source is capped at {ORACLE_MAX_DEVICES} devices"
            )
        icnn_total = self.icnn_initial_samples + self.icnn_rounds * self.icnn_samples_per_round
        if "icnn" in self.optimizers and icnn_total > self.budget_evaluations:
            raise ConfigError(
                f"surrogate sampling budget {icnn_total} exceeds budget_evaluations"
            )

    def channel_model(self, noma_enabled: bool) -> ChannelModel:
        return ChannelModel(
            tx_power_w=dbm_to_watts(self.tx_power_dbm),
            noise_floor_w=dbm_to_watts(self.noise_floor_dbm),
            path_loss_exponent=self.path_loss_exponent,
            carrier_frequency_hz=self.carrier_frequency_hz,
            reference_distance_m=self.reference_distance_m,
            bandwidth_hz=self.bandwidth_hz,
            snir_threshold=db_to_linear(self.snir_threshold_db),
            fading=self.fading,
            noma_enabled=noma_enabled,
        )


def _deployment_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=(1, index))

def _run_seed(master: int, deployment: int, mode_idx: int, opt_idx: int, init: int):
    return np.random.SeedSequence(
        entropy=master, spawn_key=(2, deployment, mode_idx, opt_idx, init)
    )


def build_topology(config: ExperimentConfig, deployment_index: int) -> Topology:
    ss = _deployment_seed(config.seed, deployment_index)
    dev_seed, bs_seed = ss.spawn(2)
    if config.deployment == "mesh":
        devices = generate_mesh_deployment(config.n_devices, config.area_half_side_m)
    else:
        devices = generate_uniform_deployment(
            config.n_devices, config.area_half_side_m, dev_seed
        )
    if config.bs_placement == "explicit":
        coords = np.asarray(config.bs_coordinates_m, dtype=float).reshape(-1, 2)
        bs = coords
    else:
        bs = place_bs_lloyd(devices, config.n_base_stations, bs_seed)
    return Topology(devices, bs)


def _oracle_env_for(config, topology, noma_enabled, deployment_index):
    model = config.channel_model(noma_enabled)
    if model.fading == "none":
        samples = 1
    else:
        samples = config.oracle_fading_samples
    table_seed = np.random.SeedSequence(
        entropy=config.seed, spawn_key=(3, deployment_index, int(noma_enabled))
    )
    table = build_conditional_table(model, topology, samples, seed=table_seed)
    return OracleEnv(table, eps_p=config.eps_p)


def _fresh_env(config, topology, noma_enabled, deployment_index, run_seed):
    if config.rate_source == "oracle":
        return _oracle_env_for(config, topology, noma_enabled, deployment_index)
    return MonteCarloEnv(
        config.channel_model(noma_enabled),
        topology,
        num_slots=config.slots_per_evaluation,
        seed=run_seed,
        eps_p=config.eps_p,
    )


def _homogeneous_grid_maximize(env, n_points: int):
    """Sweep one shared probability, maximizing the arithmetic-mean rate."""
    best_policy, best_am = None, -np.inf
    for p in np.linspace(env.eps_p, 1.0, n_points):
        policy = np.full(env.n_devices, p)
        est = env.estimate_rates(policy)
        am = float(est.mean_rate.mean())
        if am > best_am:
            best_am, best_policy = am, policy
    return best_policy


def run_single(config: ExperimentConfig, topology: Topology, deployment_index: int,
               noma_enabled: bool, optimizer: str, init_index: int):
    """One optimizer run; returns the trace and the best policy found."""
    mode_idx = int(noma_enabled)
    opt_idx = KNOWN_OPTIMIZERS.index(optimizer)
    ss = _run_seed(config.seed, deployment_index, mode_idx, opt_idx, init_index)
    env_seed, init_seed, algo_seed = ss.spawn(3)
    env = _fresh_env(config, topology, noma_enabled, deployment_index, env_seed)
    rng = np.random.default_rng(init_seed)
    p0 = rng.uniform(config.eps_p, 1.0, size=config.n_devices)
    budget = config.budget_evaluations

    if optimizer == "br":
        br_cfg = BrConfig(
            eps_p=config.eps_p,
            probe_slots=config.br_probe_slots,
            max_outer_iters=min(config.br_max_outer_iters, max(1, (budget - 1) // 3)),
            selection=config.br_selection,
        )
        result = run_best_response(env, p0, br_cfg, seed=algo_seed)
        policy = result.policy
    elif optimizer == "icnn":
        cfg = CentralizedConfig(
            ensemble_size=config.icnn_ensemble_size,
            rounds=config.icnn_rounds,
            samples_per_round=config.icnn_samples_per_round,
            initial_samples=config.icnn_initial_samples,
            hidden=tuple(config.icnn_hidden),
            epochs=config.icnn_epochs,
            step_size=config.icnn_step_size,
            minibatch=config.icnn_minibatch,
            grad_clip=config.icnn_grad_clip,
            eps_p=config.eps_p,
        )
        result = run_centralized_optimization(env, cfg, seed=algo_seed)
        policy = result.policy
    elif optimizer == "nelder-mead":
        policy, _ = nelder_mead_maximize(
            env, OptimizerBudget(budget, seed=algo_seed, initial_policy=p0)
        )
    elif optimizer == "random":
        policy, _ = random_search_maximize(
            env, OptimizerBudget(budget, seed=algo_seed, initial_policy=p0)
        )
    elif optimizer == "homogeneous-grid":
        policy = _homogeneous_grid_maximize(
            env, min(config.homogeneous_grid_points, budget)
        )
    else:  # pragma: no cover
        raise ConfigError(f"unknown optimizer {optimizer!r}")

    trace = list(env.objective_history[:budget])
    if not trace:
        trace = [env.objective(policy)]
    best_curve = np.maximum.accumulate(trace)
    best_objective = float(best_curve[-1])
    return {
        "deployment": deployment_index,
        "noma": "on" if noma_enabled else "off",
        "optimizer": optimizer,
        "init": init_index,
        "policy": [float(v) for v in policy],
        "best_objective": best_objective,
        "trace": [float(v) for v in trace],
        "evaluations": len(trace),
    }


def _write_run_csv(path: str, trace):
    best = -math.inf
    with open(path, "w") as fh:
        fh.write("eval_index,objective,best_so_far\n")
        for idx, value in enumerate(trace, start=1):
            best = max(best, value)
            fh.write(f"{idx},{value!r},{best!r}\n")


def _final_rates(config, topology, noma_enabled, deployment_index, policy):
    """High-precision per-device rates for a chosen policy."""
    if config.rate_source == "oracle":
        env = _oracle_env_for(config, topology, noma_enabled, deployment_index)
        return env.estimate_rates(policy).mean_rate
    model = config.channel_model(noma_enabled)
    from .channel import estimate_expected_rates

    seed = np.random.SeedSequence(
        entropy=config.seed, spawn_key=(4, deployment_index, int(noma_enabled))
    )
    est = estimate_expected_rates(
        model, topology, np.asarray(policy), config.final_eval_slots, seed
    )
    return est.mean_rate


def run_experiment(config: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Execute the experiment matrix and write runs/, summary.json, heatmaps.

    Deterministic for a fixed config (including the master seed); `threads`
    only parallelizes independent runs and never changes results.
    """
    os.makedirs(out_dir, exist_ok=True)
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(config.to_dict()))

    modes = {"on": [True], "off": [False], "both": [True, False]}[config.noma]
    topologies = {
        d: build_topology(config, d) for d in range(config.n_deployments)
    }

    specs = []
    for d in range(config.n_deployments):
        for noma_enabled in modes:
            for optimizer in config.optimizers:
                for init in range(config.n_initializations):
                    specs.append((d, noma_enabled, optimizer, init))

    results = []
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(run_single, config, topologies[d], d, noma, opt, init)
                for (d, noma, opt, init) in specs
            ]
            for spec, fut in zip(specs, futures):
                results.append(fut.result())
    else:
        for d, noma, opt, init in specs:
            results.append(run_single(config, topologies[d], d, noma, opt, init))

    for spec, result in zip(specs, results):
        d, noma, opt, init = spec
        mode = "on" if noma else "off"
        name = f"d{d}_{mode}_{opt}_i{init}.csv"
        _write_run_csv(os.path.join(runs_dir, name), result["trace"])
        result["trace_file"] = os.path.join("runs", name)

    # references: best objective per (deployment, mode) across all runs
    references = {}
    for result in results:
        key = f"d{result['deployment']}|{result['noma']}"
        references[key] = max(references.get(key, -math.inf), result["best_objective"])

    budget = config.budget_evaluations
    per_run = []
    curves = {}
    for result in results:
        key = f"d{result['deployment']}|{result['noma']}"
        trace = np.asarray(result["trace"])
        padded = np.concatenate([trace, np.full(budget - len(trace), trace.max())])
        ratios = approximation_ratio(padded, references[key])
        curves.setdefault((result["noma"], result["optimizer"]), []).append(ratios)
        per_run.append(
            {
                "deployment": result["deployment"],
                "noma": result["noma"],
                "optimizer": result["optimizer"],
                "init": result["init"],
                "best_objective": result["best_objective"],
                "final_ratio": float(ratios[-1]),
                "evaluations": result["evaluations"],
                "trace_file": result["trace_file"],
            }
        )

    optimizer_summary = {}
    for (mode, optimizer), ratio_list in sorted(curves.items()):
        stack = np.vstack(ratio_list)
        mean_curve = stack.mean(axis=0)
        hits = evaluations_to_ratio(mean_curve, 0.99)
        entry = optimizer_summary.setdefault(mode, {})
        entry[optimizer] = {
            "mean_final_ratio": float(stack[:, -1].mean()),
            "mean_ratio_curve_head": [float(v) for v in mean_curve[:10]],
            "evals_to_099_mean_curve": hits,
        }

    # best policies per (deployment, mode) feed fairness + heatmaps + gains
    best_by_key = {}
    for result in results:
        key = (result["deployment"], result["noma"])
        if key not in best_by_key or result["best_objective"] > best_by_key[key]["best_objective"]:
            best_by_key[key] = result

    fairness = {}
    final_objectives = {}
    for (d, mode), result in sorted(best_by_key.items()):
        policy = np.asarray(result["policy"])
        rates = _final_rates(config, topologies[d], mode == "on", d, policy)
        fairness[f"d{d}|{mode}"] = {
            "jain": jain_fairness(rates) if rates.sum() > 0 else None,
            "argmax_device": int(np.argmax(policy)),
            "argmin_device": int(np.argmin(policy)),
        }
        final_objectives[f"d{d}|{mode}"] = objective_geomean(rates).value
        heat_path = os.path.join(out_dir, f"heatmap_d{d}_{mode}.csv")
        with open(heat_path, "w") as fh:
            fh.write("device_id,x_m,y_m,p_star,mean_rate_bps\n")
            topo = topologies[d]
            for i in range(config.n_devices):
                fh.write(
                    f"{i},{float(topo.devices[i, 0])!r},{float(topo.devices[i, 1])!r},"
                    f"{float(policy[i])!r},{float(rates[i])!r}\n"
                )

    summary = {
        "name": config.name,
        "seed": config.seed,
        "references": references,
        "optimizer_summary": optimizer_summary,
        "fairness": fairness,
        "final_objectives": final_objectives,
        "runs": per_run,
    }
    if config.noma == "both":
        gains = []
        for d in range(config.n_deployments):
            gains.append(
                float(
                    np.expm1(
                        final_objectives[f"d{d}|on"] - final_objectives[f"d{d}|off"]
                    )
                )
            )
        summary["noma_gain"] = {
            "per_deployment": gains,
            "mean": float(np.mean(gains)),
        }

    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return summary
