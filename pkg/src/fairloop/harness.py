"""Experiment orchestration: runs, evaluation protocol, sweeps and the
hyperparameter-selection rule, plus metrics/checkpoint persistence.

Artifacts of one run live in a directory: ``manifest.json`` (config, seed,
content hash of the environment table), one ``.npz`` checkpoint per
network, and ``metrics.csv`` with a versioned header line.  Evaluation
deploys a frozen checkpoint for a fixed horizon under several seeds with
the simulator instrumented, so the exact pool disparity is recorded
alongside the observable ones.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envs as E
from . import metrics as M
from . import propensity as P
from . import tabular as T
from .mdp import ConfigurationError, LoadError, NotionKind, StateCache, init_run, collect_rollout
from .nets import Net, prob
from .training import TrainConfig, TrainingAborted, train

METRICS_VERSION = "fairloop-metrics v1"
SCHEMA_FIXED = [
    "phase", "run_id", "step", "seed", "reward_mean", "reward_cumulative", "resource",
    "delta_true", "delta_true_pool", "delta_observed", "delta_accepted", "max_weight", "min_cum_accept",
    "renyi_value", "overlap_floor_events", "disparity_ok", "bias_ok", "overall_ok",
    "wall_clock",
]


def schema_columns(group_count: int) -> list[str]:
    cols = list(SCHEMA_FIXED[:-1])
    for i in range(group_count):
        cols += [f"r{i}", f"eps_hat{i}", f"eps_bar{i}", f"d2_{i}", f"phi_tilde{i}", f"n_acc{i}"]
    cols.append("wall_clock")
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    if s == "True":
        return True
    if s == "False":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_metrics(path, rows: list[dict], group_count: int) -> None:
    cols = schema_columns(group_count)
    with open(path, "w") as fh:
        fh.write(f"# {METRICS_VERSION}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in cols) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        version = fh.readline().strip()
        if version != f"# {METRICS_VERSION}":
            raise LoadError(f"{path}: unsupported metrics header {version!r}")
        cols = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            vals = line.rstrip("\n").split(",")
            rows.append({c: _parse(v) for c, v in zip(cols, vals)})
    return rows


def reserialize_metrics(path) -> bytes:
    """Parse and re-serialize (round-trip check helper)."""
    rows = read_metrics(path)
    with open(path) as fh:
        fh.readline()
        cols = fh.readline().strip().split(",")
    buf = io.StringIO()
    buf.write(f"# {METRICS_VERSION}\n")
    buf.write(",".join(cols) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(row.get(c)) for c in cols) + "\n")
    return buf.getvalue().encode()


def save_net(path, net: Net) -> None:
    header = {"kind": net.kind, "shapes": [list(s) for s in net.shapes]}
    np.savez(path, header=json.dumps(header), theta=net.theta)


def load_net(path) -> Net:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        theta = np.asarray(data["theta"], dtype=np.float64)
    return Net(header["kind"], [tuple(s) for s in header["shapes"]], theta)


def env_table_hash(env_name_or_path: str) -> str:
    raw = E.load_raw(env_name_or_path)
    blob = json.dumps(raw, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path_or_dict) -> TrainConfig:
    if isinstance(path_or_dict, (str, Path)):
        try:
            with open(path_or_dict) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path_or_dict}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path_or_dict}: invalid JSON ({exc})") from None
    else:
        raw = dict(path_or_dict)
    allowed = set(TrainConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
    if "FAIRLOOP_SEED" in os.environ:
        raw["seed"] = int(os.environ["FAIRLOOP_SEED"])
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def run(config, out_dir=None, *, progress=None) -> Path:
    """Train per the config and write checkpoint, manifest and metrics."""
    cfg = config if isinstance(config, TrainConfig) else load_config(config)
    if out_dir is None:
        out_dir = os.environ.get("FAIRLOOP_OUT", f"runs/{cfg.run_id or 'run'}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = E.load_env(cfg.env, pool_size=cfg.pool_size)
    manifest = {
        "config": cfg.to_dict(),
        "env": cfg.env,
        "seed": cfg.seed,
        "env_table_sha256": env_table_hash(cfg.env),
        "metrics_schema": METRICS_VERSION,
        "status": "running",
    }
    try:
        result = train(cfg, env, progress=progress)
    except TrainingAborted as exc:
        for name, net in (("policy", exc.policy), ("value", exc.value), ("predictor", exc.predictor)):
            if net is not None:
                save_net(out / f"{name}.npz", net)
        write_metrics(out / "metrics.csv", exc.rows, env.group_count)
        manifest["status"] = f"aborted: {exc}"
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1)
        raise
    save_net(out / "policy.npz", result.policy)
    save_net(out / "value.npz", result.value)
    save_net(out / "predictor.npz", result.predictor)
    write_metrics(out / "metrics.csv", result.rows, env.group_count)
    manifest["status"] = "done"
    manifest["iterations"] = len(result.rows)
    manifest["overlap_floor_events"] = result.overlap_events
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


@dataclass
class EvalSummary:
    """Per-seed deployment statistics plus their across-seed means."""

    seeds: list[int]
    avg_abs_delta_true: list[float]
    abs_avg_delta_true: list[float]
    avg_abs_delta_observed: list[float]
    avg_abs_delta_accepted: list[float]
    final_resource: list[float]

    def mean(self, name: str) -> float:
        return float(np.mean(getattr(self, name)))

    def std(self, name: str) -> float:
        return float(np.std(getattr(self, name)))


def evaluate(
    run_dir,
    *,
    env_name: str | None = None,
    seeds: int = 10,
    horizon: int = 10_000,
    record_every: int = 1,
    seed_base: int = 10_000,
    out_path=None,
) -> tuple[list[dict], EvalSummary]:
    """Deploy a frozen checkpoint for ``horizon`` steps under each seed with
    the simulator instrumented; the exact pool disparity, the observable
    disparities and the resource trace are recorded per step."""
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = TrainConfig(**manifest["config"])
    env = E.load_env(env_name or cfg.env, pool_size=cfg.pool_size)
    policy = load_net(run_dir / "policy.npz")
    predictor = load_net(run_dir / "predictor.npz")
    if policy.in_dim != env.input_dim:
        raise LoadError(
            f"checkpoint expects input dim {policy.in_dim}, environment provides {env.input_dim}"
        )
    notion = cfg.notion_kind
    rows: list[dict] = []
    summary = EvalSummary([], [], [], [], [], [])
    t0 = time.perf_counter()
    for s in range(seeds):
        seed = seed_base + s
        run_state = init_run(env, seed)
        cache = StateCache(run_state.registry, lambda e: prob(policy, e), lambda e: prob(predictor, e))
        buf = collect_rollout(
            run_state,
            cache,
            notion,
            horizon,
            instrument=True,
            semi_stochastic=cfg.semi_stochastic,
        )
        reward_cum = np.cumsum(buf.reward)
        for t in range(0, horizon, record_every):
            rows.append(
                {
                    "phase": "eval",
                    "run_id": cfg.run_id,
                    "step": t,
                    "seed": seed,
                    "reward_cumulative": float(reward_cum[t]),
                    "resource": 1000.0 + float(reward_cum[t]),
                    "delta_true": float(buf.delta_true[t]),
                    "delta_true_pool": float(buf.delta_true_pool[t]),
                    "delta_observed": float(buf.delta_obs[t]),
                    "delta_accepted": float(buf.delta_acc[t]),
                    "wall_clock": time.perf_counter() - t0,
                }
            )
        summary.seeds.append(seed)
        summary.avg_abs_delta_true.append(float(np.mean(np.abs(buf.delta_true_pool))))
        summary.abs_avg_delta_true.append(float(abs(np.mean(buf.delta_true_pool))))
        summary.avg_abs_delta_observed.append(float(np.mean(np.abs(buf.delta_obs))))
        summary.avg_abs_delta_accepted.append(float(np.mean(np.abs(buf.delta_acc))))
        summary.final_resource.append(float(run_state.resource))
    if out_path is not None:
        write_metrics(out_path, rows, env.group_count)
    return rows, summary


SELECTION_SIGNAL = {
    "ppo": "avg_abs_delta_accepted",
    "reg_accepted": "avg_abs_delta_accepted",
    "reg_oracle": "avg_abs_delta_true",
    "reg_imputed": "avg_abs_delta_observed",
    "reg_imputed_semisto": "avg_abs_delta_observed",
}


def expand_grid(grid: dict) -> list[TrainConfig]:
    base = dict(grid.get("base", {}))
    configs = []
    for point in grid["points"]:
        algo = point["algorithm"]
        betas1 = point.get("beta1", [base.get("beta1", 0.0)])
        betas2 = point.get("beta2", [base.get("beta2", 0.0)])
        if not isinstance(betas1, list):
            betas1 = [betas1]
        if not isinstance(betas2, list):
            betas2 = [betas2]
        for b1 in betas1:
            for b2 in betas2:
                cfg = dict(base)
                cfg.update({"algorithm": algo, "beta1": b1, "beta2": b2})
                cfg["run_id"] = f"{algo}_b1_{b1}_b2_{b2}_s{cfg.get('seed', 0)}"
                configs.append(load_config(cfg))
    return configs


def _sweep_one(args):
    cfg_dict, out_dir, eval_opts = args
    cfg = TrainConfig(**cfg_dict)
    run_dir = Path(out_dir) / cfg.run_id
    run(cfg, run_dir)
    _, summary = evaluate(run_dir, **eval_opts)
    return {
        "run_id": cfg.run_id,
        "algorithm": cfg.algorithm,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "seed": cfg.seed,
        "selection_disparity": summary.mean(SELECTION_SIGNAL[cfg.algorithm]),
        "reward": summary.mean("final_resource"),
        "reward_std": summary.std("final_resource"),
        "delta_true_avg": summary.mean("avg_abs_delta_true"),
        "delta_true_std": summary.std("avg_abs_delta_true"),
        "abs_avg_delta_true": summary.mean("abs_avg_delta_true"),
        "run_dir": str(run_dir),
    }


def sweep(grid_path_or_dict, out_dir, *, workers: int | None = None) -> list[dict]:
    """Train and evaluate every grid point; returns the results table
    sorted by run id (written to ``results.json`` under ``out_dir``)."""
    if isinstance(grid_path_or_dict, (str, Path)):
        with open(grid_path_or_dict) as fh:
            grid = json.load(fh)
    else:
        grid = grid_path_or_dict
    configs = expand_grid(grid)
    if not configs:
        raise ConfigurationError("grid expands to no configurations")
    eval_opts = {
        "seeds": int(grid.get("eval", {}).get("seeds", 10)),
        "horizon": int(grid.get("eval", {}).get("horizon", 10_000)),
        "record_every": int(grid.get("eval", {}).get("record_every", 10)),
    }
    tasks = [(cfg.to_dict(), str(out_dir), eval_opts) for cfg in configs]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    results.sort(key=lambda r: r["run_id"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.json", "w") as fh:
        json.dump(results, fh, indent=1)
    return results


def select(results: list[dict], omega: float = 0.05) -> dict:
    """Deterministic configuration choice: clip each disparity at omega
    (below the constraint counts the same), keep the rows attaining the
    minimum clipped value, return the highest reward among them; ties break
    toward the lexicographically smallest (beta1, beta2).

    Every constraint-satisfying row clips to 0, so reward decides among
    them; if no row satisfies the constraint, the lowest disparity wins.
    """
    if not results:
        raise ConfigurationError("empty results table")
    clips = [max(r["selection_disparity"] - omega, 0.0) for r in results]
    best_clip = min(clips)
    pool = [r for r, c in zip(results, clips) if c == best_clip]
    best_reward = max(r["reward"] for r in pool)
    pool = [r for r in pool if r["reward"] == best_reward]
    pool.sort(key=lambda r: (r["beta1"], r["beta2"]))
    return pool[0]


def verify(instances: int = 100, seed: int = 0, *, out=print) -> bool:
    """Exact-theorem verification table over random tabular instances."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, bool, str]] = []

    worst = 0.0
    for notion in NotionKind:
        for _ in range(instances):
            inst = T.random_instance(rng, k_history=int(rng.integers(1, 4)))
            direct = T.enumerate_report(inst, notion)
            formula = M.exact_report(inst, notion)
            worst = max(worst, abs(M.decomposition_identity(formula) - direct.delta_observed))
    checks.append(("decomposition identities (3 notions)", worst <= 1e-12, f"max |gap| = {worst:.2e}"))

    eo_ok = True
    for _ in range(instances):
        inst = T.random_instance(rng)
        rep = T.enumerate_report(inst, NotionKind.OPPORTUNITY)
        eo_ok &= rep.delta_accepted == 0.0
    checks.append(("accepted-only TPR disparity is identically 0", eo_ok, ""))

    inst = T.random_instance(rng, constraint="prop1_counterexample")
    rep = T.enumerate_report(inst, NotionKind.QUALIFICATION)
    ok = abs(rep.delta_accepted) <= 1e-12 and abs(rep.delta_true) > 0.05
    checks.append(
        ("masking counterexample", ok, f"accepted gap {rep.delta_accepted:.1e}, true gap {rep.delta_true:.3f}")
    )

    for omega in (0.01, 0.05, 0.1):
        sound = True
        for notion in NotionKind:
            for _ in range(max(instances // 3, 10)):
                inst = T.random_instance(rng, constraint="conditions_hold", notion=notion, omega=omega)
                formula = M.exact_report(inst, notion)
                held = M.check_conditions_exact(
                    notion, omega, formula.r, formula.eps, formula.phi_tilde, formula.delta_observed
                )[2]
                if held:
                    sound &= abs(T.enumerate_report(inst, notion).delta_true) <= omega
        checks.append((f"exact-bias conditions sound at omega={omega}", sound, ""))

    sound = True
    for notion in NotionKind:
        for _ in range(instances // 2):
            inst = T.random_instance(
                rng, constraint="conditions_hold_bar", notion=notion, omega=0.05, margin=0.003
            )
            formula = M.exact_report(inst, notion)
            eps_bar = np.abs(formula.eps) + 0.003
            held = M.check_conditions(
                notion, 0.05, formula.r, eps_bar, formula.phi_tilde, formula.delta_observed
            )[2]
            if held:
                sound &= abs(T.enumerate_report(inst, notion).delta_true) <= 0.05
    checks.append(("bounded-bias conditions sound at omega=0.05", sound, ""))

    worst_w, worst_d2 = 0.0, math.inf
    for _ in range(instances):
        inst = T.random_instance(rng, k_history=int(rng.integers(1, 5)))
        for z in range(inst.group_count):
            d_a, _d_r, _w_ratio, a_cum, r = T.exact_weight_curves(inst, z)
            prev = np.stack([inst.history[k][z] for k in range(len(inst.history) - 1)]) if len(inst.history) > 1 else None
            w_formula, _ = P.weight(inst.pi[z], prev, a_cum, r)
            worst_w = max(worst_w, abs(float(np.sum(d_a * w_formula)) - 1.0))
            worst_d2 = min(worst_d2, float(np.sum(d_a * w_formula**2)))
    checks.append(("propensity weights integrate to 1", worst_w <= 1e-12, f"max |gap| = {worst_w:.2e}"))
    checks.append(("exact divergence >= 1", worst_d2 >= 1.0 - 1e-12, f"min d2 = {worst_d2:.6f}"))

    multi_ok = True
    for _ in range(instances // 2):
        inst = T.random_instance(rng, groups=3, constraint="conditions_hold", notion=NotionKind.QUALIFICATION, omega=0.05)
        formula = M.exact_report(inst, NotionKind.QUALIFICATION)
        held = M.check_conditions_exact(
            NotionKind.QUALIFICATION, 0.05, formula.r, formula.eps, formula.phi_tilde, formula.delta_observed
        )[2]
        if held:
            multi_ok &= abs(T.enumerate_report(inst, NotionKind.QUALIFICATION).delta_true) <= 0.05
    checks.append(("3-group conditions sound at omega=0.05", multi_ok, ""))

    all_ok = True
    for name, ok, detail in checks:
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
    return all_ok
