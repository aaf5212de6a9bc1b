"""Configurable runners for the three desk-scale studies.

* ``gp-compare``: GP regression against a vanilla ensemble, an NLL ensemble
  and MC-dropout on an eight-sample 1-D toy problem.
* ``pendulum-budget``: doubt and discrepancy rules with thresholds solved
  each epoch so their permitted sets have the same, growing volume.
* ``pendulum-fixed``: rules with fixed thresholds over many repetitions;
  learning performance, failure rate and permitted volume per epoch.

Every runner writes CSV files with full-precision floats, SVG figures drawn
from those CSVs only, and a ``manifest.json`` with checksums. Reruns with the
same config produce byte-identical CSVs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from .analysis import (
    InfeasibleTargetError,
    StateGrid,
    expert_basin,
    failure_of_trajectory,
    grid_statistics,
    learning_performance,
    nearest_dataset_distance,
    novice_basin,
    permitted_set,
    permitted_volume,
    solve_threshold_for_volume,
    write_grid_csv,
)
from .dagger import (
    DaggerConfig,
    Discrepancy,
    Doubt,
    EnsembleConfig,
    derive_seed,
    rule_from_dict,
    run_dagger,
    write_epoch_records_csv,
)
from .gpref import GpParams, gp_fit, gp_posterior
from .nncore import TrainConfig, TrainingDivergenceError
from .pendulum import ExpertController, PendulumParams
from .uncertainty import EnsemblePolicy, ensemble_predict, mc_dropout_predict, train_ensemble

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_hash",
    "run_experiment",
    "run_gp_compare",
    "run_pendulum_budget",
    "run_pendulum_fixed",
    "gp_target",
]

EXPERIMENTS = ("gp-compare", "pendulum-budget", "pendulum-fixed")

# spawn-key tags for experiment-level streams (disjoint from the DAgger tags)
TAG_GP_DATA, TAG_GP_FIT, TAG_GP_MODEL = 11, 12, 13


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


class ExperimentError(RuntimeError):
    """An experiment could not produce its outputs."""


# -- configuration ----------------------------------------------------------

@dataclass
class SeedConfig:
    master: int = 0
    # explicit [theta, theta_dot] per epoch (epoch 0 first); empty means sampled
    per_epoch_ic: tuple = ()


@dataclass
class BasinConfig:
    max_steps: int = 500
    # epochs whose learning performance is computed; empty means every gated epoch
    lp_epochs: tuple = ()
    cache_dir: str = ""

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("basin max_steps must be >= 1")


@dataclass
class BudgetConfig:
    v0: float = 0.02
    dv: float = 0.02
    rules: tuple = ("doubt", "discrepancy")
    novice_basin: bool = True

    def __post_init__(self):
        if not 0.0 <= self.v0 <= 1.0 or self.dv < 0:
            raise ValueError("budget needs v0 in [0, 1] and dv >= 0")
        for r in self.rules:
            if r not in ("doubt", "discrepancy"):
                raise ValueError(f"budget rule must be doubt or discrepancy, got {r!r}")

    def volume(self, epoch):
        """Target permitted volume for gated epoch ``epoch`` (1-based)."""
        return min(1.0, self.v0 + (epoch - 1) * self.dv)


@dataclass
class GpCompareConfig:
    n_train: int = 8
    train_range: tuple = (-1.0, 1.0)
    query_range: tuple = (-1.5, 1.5)
    n_query: int = 301
    far_range: tuple = (1.2, 1.5)
    gp_length_scale: float = 10.0
    gp_signal_variance: float = 1.0
    gp_noise_variance: float = 1e-6
    gp_restarts: int = 9
    gp_optimize_length_scale: bool = True
    hidden_sizes: tuple = (128, 64, 64, 64)
    activation: str = "relu"
    batch_size: int = 4
    n_members: int = 10
    vanilla_epochs: int = 300
    vanilla_learning_rate: float = 1e-3
    nll_epochs: int = 2400
    nll_learning_rate: float = 1e-4
    dropout_epochs: int = 2400
    dropout_learning_rate: float = 1e-3
    dropout_keep_prob: float = 0.75
    dropout_samples: int = 200

    def __post_init__(self):
        if self.n_train < 1 or self.n_query < 2:
            raise ValueError("need n_train >= 1 and n_query >= 2")


@dataclass
class ExperimentConfig:
    experiment: str = "pendulum-fixed"
    seeds: SeedConfig = field(default_factory=SeedConfig)
    repetitions: int = 30
    epochs: int = 6
    rules: tuple = (
        {"kind": "doubt", "chi": 1e-3},
        {"kind": "discrepancy", "tau": 1e-1},
        {"kind": "discrepancy", "tau": 5e-2},
    )
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=200, batch_size=16, learning_rate=1e-3, l2_coeff=1e-5))
    env: PendulumParams = field(default_factory=PendulumParams)
    gains: tuple = (0.316, 0.175)
    ic_box: tuple = ((-0.6, 0.6), (-1.5, 1.5))
    warm_start: bool = False
    trajectories_per_epoch: int = 1
    grid: StateGrid = field(default_factory=StateGrid)
    basin: BasinConfig = field(default_factory=BasinConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    detail_runs: int = 1
    gp: GpCompareConfig = field(default_factory=GpCompareConfig)
    output_dir: str = "results"
    jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.detail_runs < 0:
            raise ValueError("detail_runs must be >= 0")
        self.rule_objects()

    def rule_objects(self):
        return [rule_from_dict(r) for r in self.rules]

    def dagger_config(self, repetition):
        return DaggerConfig(
            epochs=self.epochs, ensemble=self.ensemble, train=self.train, env=self.env,
            gains=tuple(self.gains), ic_box=tuple(map(tuple, self.ic_box)),
            master_seed=self.seeds.master, repetition=repetition, warm_start=self.warm_start,
            trajectories_per_epoch=self.trajectories_per_epoch,
            initial_states=tuple(tuple(s) for s in self.seeds.per_epoch_ic))

    def to_dict(self):
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _freeze(value):
    """JSON arrays become tuples so configs stay hashable and comparable."""
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _build(base, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    updates = {}
    for key, value in data.items():
        current = getattr(base, key)
        if is_dataclass(current):
            updates[key] = _build(current, value, f"{path}.{key}")
        elif key == "rules" and path == "config":
            if not isinstance(value, list) or not all(isinstance(r, dict) for r in value):
                raise ConfigError(f"{path}.rules: expected a list of rule objects")
            updates[key] = tuple(dict(r) for r in value)
        else:
            updates[key] = _freeze(value)
    try:
        return replace(base, **updates)
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"{path}: {err}") from err


# defaults that differ from the fixed-threshold study
EXPERIMENT_DEFAULTS = {
    "pendulum-fixed": {},
    "pendulum-budget": {"repetitions": 20, "epochs": 3},
    "gp-compare": {"repetitions": 1},
}


def config_from_dict(data):
    """Validated config; keys not present keep the documented defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    kind = data.get("experiment", "pendulum-fixed")
    if kind not in EXPERIMENT_DEFAULTS:
        raise ConfigError(f"config.experiment must be one of {EXPERIMENTS}, got {kind!r}")
    base = replace(ExperimentConfig(), experiment=kind, **EXPERIMENT_DEFAULTS[kind])
    return _build(base, data, "config")


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return config_from_dict(data)


def config_hash(config):
    """Hash of everything that affects data outputs (not paths or the job count)."""
    d = config.to_dict()
    d.pop("output_dir", None)
    d.pop("jobs", None)
    d["basin"].pop("cache_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- output helpers -----------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_rows(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[h] for h in header]
            w.writerow([_fmt(v) for v in row])


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config, wall_clock):
    import matplotlib
    import scipy

    from . import __version__

    files = {}
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel != "manifest.json":
                files[rel.replace(os.sep, "/")] = _sha256(os.path.join(root, name))
    manifest = {
        "experiment": config.experiment,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "files": dict(sorted(files.items())),
        "wall_clock_seconds": wall_clock,
        "versions": {
            "ensembledagger": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _stderr(values):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if len(v) < 2:
        return float("nan")
    return float(v.std(ddof=1) / np.sqrt(len(v)))


def _nanmean(values):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if len(v) else float("nan")


# -- GP comparison ----------------------------------------------------------

def gp_target(x):
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * x) + 0.2 * np.sin(4 * np.pi * x)


def gp_training_inputs(config):
    g = config.gp
    rng = np.random.default_rng(derive_seed(config.seeds.master, TAG_GP_DATA))
    return rng.uniform(*g.train_range, g.n_train)


def _seed_ints(master, tag, n):
    return [int(derive_seed(master, tag, m).generate_state(1, dtype=np.uint64)[0])
            for m in range(n)]


def _fit_nets(X, y, g, master, kind):
    """Train one of the network models; returns (mean_fn, std_fn)."""
    sizes = [1, *g.hidden_sizes, 1]
    Xc, Yc = X[:, None], y[:, None]
    if kind == "vanilla_ensemble":
        seeds = _seed_ints(master, TAG_GP_MODEL, g.n_members)
        pol = EnsemblePolicy.create(sizes, seeds, activation=g.activation)
        cfg = TrainConfig(epochs=g.vanilla_epochs, batch_size=g.batch_size,
                          learning_rate=g.vanilla_learning_rate)
        pol = train_ensemble(pol, (Xc, Yc), cfg,
                             member_seeds=[derive_seed(master, TAG_GP_MODEL, 100, m)
                                           for m in range(g.n_members)])
        return lambda q: ensemble_predict(pol, q[:, None])
    if kind == "nll_ensemble":
        seeds = _seed_ints(master, TAG_GP_MODEL + 1, g.n_members)
        pol = EnsemblePolicy.create(sizes, seeds, activation=g.activation, head="gaussian")
        cfg = TrainConfig(epochs=g.nll_epochs, batch_size=g.batch_size,
                          learning_rate=g.nll_learning_rate, loss="gaussian_nll")
        pol = train_ensemble(pol, (Xc, Yc), cfg,
                             member_seeds=[derive_seed(master, TAG_GP_MODEL + 1, 100, m)
                                           for m in range(g.n_members)])
        return lambda q: ensemble_predict(pol, q[:, None])
    if kind == "mc_dropout":
        from .nncore import init_net, train

        seed = _seed_ints(master, TAG_GP_MODEL + 2, 1)[0]
        net = init_net(sizes, seed=seed, activation=g.activation)
        cfg = TrainConfig(epochs=g.dropout_epochs, batch_size=g.batch_size,
                          learning_rate=g.dropout_learning_rate,
                          dropout_keep_prob=g.dropout_keep_prob, rng_seed=seed)
        net = train(net, (Xc, Yc), cfg)
        rng_seed = derive_seed(master, TAG_GP_MODEL + 2, 1)
        return lambda q: mc_dropout_predict(net, q[:, None], g.dropout_samples,
                                            g.dropout_keep_prob, np.random.default_rng(rng_seed))
    raise ValueError(kind)


GP_MODELS = ("gp", "vanilla_ensemble", "nll_ensemble", "mc_dropout")


def run_gp_compare(config, out_dir):
    g = config.gp
    master = config.seeds.master
    X = gp_training_inputs(config)
    y = gp_target(X)
    q = np.linspace(*g.query_range, g.n_query)
    write_rows(os.path.join(out_dir, "training_data.csv"), ["x", "y"], zip(X, y))

    hull = (q >= X.min()) & (q <= X.max())
    far = (np.abs(q) >= g.far_range[0]) & (np.abs(q) <= g.far_range[1])
    results = {}
    for name in GP_MODELS:
        log.info("gp-compare: fitting %s", name)
        try:
            if name == "gp":
                init = GpParams(g.gp_length_scale, g.gp_signal_variance, g.gp_noise_variance)
                seed = int(derive_seed(master, TAG_GP_FIT).generate_state(1)[0])
                model = gp_fit(X, y, init, n_restarts=g.gp_restarts,
                               optimize_length_scale=g.gp_optimize_length_scale, seed=seed)
                mean_q, std_q = gp_posterior(model, q[:, None])
                mean_x, _ = gp_posterior(model, X[:, None])
            else:
                predict = _fit_nets(X, y, g, master, name)
                dq, dx = predict(q), predict(X)
                mean_q, std_q = dq.mean[:, 0], dq.std[:, 0]
                mean_x = dx.mean[:, 0]
            if not (np.all(np.isfinite(mean_q)) and np.all(np.isfinite(std_q))):
                raise TrainingDivergenceError(-1)
            results[name] = dict(mean=np.asarray(mean_q, float), std=np.asarray(std_q, float),
                                 rmse=float(np.sqrt(np.mean((mean_x - y) ** 2))), status="ok")
        except (TrainingDivergenceError, np.linalg.LinAlgError) as err:
            log.warning("gp-compare: %s failed: %s", name, err)
            results[name] = dict(status="diverged", error=str(err))

    gp_sum = float(results["gp"]["std"].sum()) if results["gp"]["status"] == "ok" else None
    summary = []
    for name in GP_MODELS:
        r = results[name]
        if r["status"] != "ok":
            summary.append([name, r["status"], float("nan"), float("nan"), float("nan")])
            continue
        std = r["std"]
        total = float(std.sum())
        scale = gp_sum / total if (gp_sum is not None and total > 0) else float("nan")
        if name == "gp":
            scale = 1.0
        write_rows(os.path.join(out_dir, f"{name}.csv"), ["x", "mean", "std_raw", "std_scaled"],
                   zip(q, r["mean"], std, std * scale))
        summary.append([name, "ok", r["rmse"], float(std[hull].mean()), float(std[far].mean())])
    write_rows(os.path.join(out_dir, "summary.csv"),
               ["model", "status", "train_rmse", "hull_std", "far_std"], summary)

    from .plotting import plot_gp_compare

    plot_gp_compare(out_dir, os.path.join(out_dir, "gp_compare.svg"))
    failed = [n for n in GP_MODELS if results[n]["status"] != "ok"]
    return {"failed_models": failed}


# -- pendulum: shared pieces --------------------------------------------------

def _expert_and_basin(config):
    ctrl = ExpertController(tuple(config.gains), config.env)
    cache = config.basin.cache_dir or None
    return ctrl, expert_basin(ctrl, config.grid, max_steps=config.basin.max_steps, cache_dir=cache)


# -- fixed-threshold experiment ---------------------------------------------

FIXED_RUN_HEADER = ["rule", "repetition", "epoch", "failure", "blew_up", "trajectory_len",
                    "novice_action_fraction", "dataset_size", "permitted_volume",
                    "learning_performance"]


def _fixed_repetition(config, repetition, eb):
    """All rule instances for one repetition; they share epoch-0 novices."""
    ctrl = ExpertController(tuple(config.gains), config.env)
    grid = config.grid
    lp_epochs = set(config.basin.lp_epochs) or set(range(1, config.epochs + 1))
    cache = {}
    rows, records = [], {}
    for rule in config.rule_objects():
        t0 = time.time()

        def on_epoch(rec, novice, next_novice, dataset, rule=rule):
            row = dict(rule=rule.label, repetition=repetition, epoch=rec.epoch,
                       failure=rec.failure, blew_up=rec.blew_up,
                       trajectory_len=rec.trajectory_len,
                       novice_action_fraction=rec.novice_action_fraction,
                       dataset_size=rec.dataset_size, permitted_volume=float("nan"),
                       learning_performance=float("nan"))
            if rec.epoch > 0:
                row["permitted_volume"] = permitted_volume(permitted_set(rule, novice, ctrl, grid))
            if rec.epoch in lp_epochs:
                # performance of the novice retrained on the data including this epoch;
                # cells outside the expert basin cannot count, so they are skipped
                mask, _ = novice_basin(next_novice, grid, config.env,
                                       max_steps=config.basin.max_steps, restrict_to=eb,
                                       escape_window=grid.window)
                row["learning_performance"] = learning_performance(mask, eb)
            rows.append(row)

        recs = run_dagger(config.dagger_config(repetition), rule,
                          failure_fn=lambda tr: failure_of_trajectory(tr, eb, grid),
                          on_epoch=on_epoch, novice_cache=cache)
        records[rule.label] = recs
        log.info("pendulum-fixed: rep %d %s done in %.0fs", repetition, rule.label,
                 time.time() - t0)
    return rows, records


def _fixed_worker(args):
    config, repetition, eb = args
    rows, records = _fixed_repetition(config, repetition, eb)
    # trajectories are large; only the per-epoch summaries cross the process boundary
    slim = {k: [(r.epoch, r.trajectory_len, r.novice_action_fraction, r.failure, r.dataset_size)
                for r in v] for k, v in records.items()}
    return repetition, rows, slim


class _SlimRecord:
    def __init__(self, epoch, n, frac, failure, size):
        self.epoch, self.trajectory_len, self.novice_action_fraction = epoch, n, frac
        self.failure, self.dataset_size = failure, size


def summarize_fixed(rows, rule_labels, epochs):
    out = []
    for label in rule_labels:
        for epoch in range(1, epochs + 1):
            sel = [r for r in rows if r["rule"] == label and r["epoch"] == epoch]
            n = len(sel)
            fails = np.array([bool(r["failure"]) for r in sel], dtype=float)
            p = float(fails.mean()) if n else float("nan")
            lp = [r["learning_performance"] for r in sel]
            vol = [r["permitted_volume"] for r in sel]
            out.append(dict(
                rule=label, epoch=epoch, n=n,
                learning_performance=_nanmean(lp), learning_performance_stderr=_stderr(lp),
                failure_rate=p, failure_rate_stderr=float(np.sqrt(p * (1 - p) / n)) if n else float("nan"),
                failures=int(fails.sum()),
                permitted_volume=_nanmean(vol), permitted_volume_stderr=_stderr(vol)))
    return out


FIXED_SUMMARY_HEADER = ["rule", "epoch", "n", "learning_performance", "learning_performance_stderr",
                        "failure_rate", "failure_rate_stderr", "failures", "permitted_volume",
                        "permitted_volume_stderr"]


def run_pendulum_fixed(config, out_dir):
    _, eb = _expert_and_basin(config)
    write_grid_csv(os.path.join(out_dir, "expert_basin.csv"), config.grid, eb)
    tasks = [(config, r, eb) for r in range(config.repetitions)]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_fixed_worker, tasks))
    else:
        results = [_fixed_worker(t) for t in tasks]
    results.sort(key=lambda t: t[0])

    labels = [r.label for r in config.rule_objects()]
    order = {lab: i for i, lab in enumerate(labels)}
    rows = [row for _, rs, _ in results for row in rs]
    rows.sort(key=lambda r: (order[r["rule"]], r["repetition"], r["epoch"]))
    write_rows(os.path.join(out_dir, "runs.csv"), FIXED_RUN_HEADER, rows)
    os.makedirs(os.path.join(out_dir, "records"), exist_ok=True)
    for rep, _, slim in results:
        for label, recs in slim.items():
            write_epoch_records_csv([_SlimRecord(*t) for t in recs],
                                    os.path.join(out_dir, "records", f"{label}_rep{rep:03d}.csv"))
    summary = summarize_fixed(rows, labels, config.epochs)
    write_rows(os.path.join(out_dir, "summary.csv"), FIXED_SUMMARY_HEADER, summary)

    from .plotting import plot_fixed

    plot_fixed(os.path.join(out_dir, "summary.csv"), os.path.join(out_dir, "fixed.svg"))
    return {"summary": summary}


# -- budgeted experiment ------------------------------------------------------

BUDGET_HEADER = ["rule", "repetition", "epoch", "target_volume", "threshold", "permitted_volume",
                 "infeasible", "mean_nearest_distance", "failure", "trajectory_len",
                 "novice_action_fraction", "dataset_size", "novice_basin_volume",
                 "learning_performance"]


def _budget_rule(kind, threshold):
    return Doubt(threshold) if kind == "doubt" else Discrepancy(threshold)


def _budget_repetition(config, repetition, eb, details_dir):
    ctrl = ExpertController(tuple(config.gains), config.env)
    grid = config.grid
    pts = grid.points().reshape(-1, 2)
    cache = {}
    rows = []
    for kind in config.budget.rules:
        info = {}

        def schedule(epoch, novice, dataset, kind=kind, info=info):
            target = config.budget.volume(epoch)
            stats = grid_statistics(novice, ctrl, grid)
            infeasible = False
            try:
                thr = solve_threshold_for_volume(kind, novice, ctrl, grid, target, stats=stats)
            except InfeasibleTargetError as err:
                # proceed at the closest volume the bracket reached
                infeasible, thr = True, err.threshold
            rule = _budget_rule(kind, thr)
            mask = permitted_set(rule, novice, ctrl, grid, stats).mask
            vol = permitted_volume(mask)
            infeasible |= abs(vol - target) > 2.0 / grid.n_cells
            obs, _ = dataset.arrays()
            dist = nearest_dataset_distance(pts[mask.ravel()], obs) if mask.any() else np.array([])
            info[epoch] = dict(target=target, threshold=thr, volume=vol, infeasible=infeasible,
                               distance=float(dist.mean()) if dist.size else float("nan"),
                               mask=mask)
            return rule

        def on_epoch(rec, novice, next_novice, dataset, kind=kind, info=info):
            e = rec.epoch
            i = info.get(e, {})
            nb_vol = lp = float("nan")
            nb_mask = None
            if config.budget.novice_basin and novice is not None:
                nb_mask, nb_vol = novice_basin(novice, grid, config.env,
                                               max_steps=config.basin.max_steps,
                                               escape_window=grid.window)
                lp = learning_performance(nb_mask, eb)
            rows.append(dict(rule=kind, repetition=repetition, epoch=e,
                             target_volume=i.get("target", float("nan")),
                             threshold=i.get("threshold", float("nan")),
                             permitted_volume=i.get("volume", float("nan")),
                             infeasible=i.get("infeasible", False),
                             mean_nearest_distance=i.get("distance", float("nan")),
                             failure=rec.failure, trajectory_len=rec.trajectory_len,
                             novice_action_fraction=rec.novice_action_fraction,
                             dataset_size=rec.dataset_size, novice_basin_volume=nb_vol,
                             learning_performance=lp))
            if details_dir is not None:
                d = os.path.join(details_dir, f"rep{repetition:03d}", kind)
                os.makedirs(d, exist_ok=True)
                rec.trajectory.to_csv(os.path.join(d, f"epoch{e}_trajectory.csv"))
                obs, act = dataset.arrays()
                write_rows(os.path.join(d, f"epoch{e}_dataset.csv"),
                           ["theta", "theta_dot", "expert_action"],
                           zip(obs[:, 0], obs[:, 1], act[:, 0]))
                if "mask" in i:
                    write_grid_csv(os.path.join(d, f"epoch{e}_permitted.csv"), grid, i["mask"])
                if nb_mask is not None:
                    write_grid_csv(os.path.join(d, f"epoch{e}_novice_basin.csv"), grid, nb_mask)

        run_dagger(config.dagger_config(repetition), schedule,
                   failure_fn=lambda tr: failure_of_trajectory(tr, eb, grid),
                   on_epoch=on_epoch, novice_cache=cache)
    return rows


def _budget_worker(args):
    config, repetition, eb, details_dir = args
    return repetition, _budget_repetition(config, repetition, eb, details_dir)


def familiarity_table(rows, epochs):
    """Per (repetition, epoch): mean nearest-dataset distance of each rule's permitted cells."""
    by = {(r["rule"], r["repetition"], r["epoch"]): r["mean_nearest_distance"] for r in rows}
    reps = sorted({r["repetition"] for r in rows})
    out = []
    for rep in reps:
        for e in range(1, epochs + 1):
            a = by.get(("doubt", rep, e), float("nan"))
            b = by.get(("discrepancy", rep, e), float("nan"))
            out.append(dict(repetition=rep, epoch=e, doubt_distance=a, discrepancy_distance=b,
                            doubt_closer=bool(a < b)))
    return out


def run_pendulum_budget(config, out_dir):
    _, eb = _expert_and_basin(config)
    write_grid_csv(os.path.join(out_dir, "expert_basin.csv"), config.grid, eb)
    details = os.path.join(out_dir, "details")
    tasks = [(config, r, eb, details if r < config.detail_runs else None)
             for r in range(config.repetitions)]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_budget_worker, tasks))
    else:
        results = [_budget_worker(t) for t in tasks]
    order = {k: i for i, k in enumerate(config.budget.rules)}
    rows = [row for _, rs in sorted(results, key=lambda t: t[0]) for row in rs]
    rows.sort(key=lambda r: (order[r["rule"]], r["repetition"], r["epoch"]))
    write_rows(os.path.join(out_dir, "runs.csv"), BUDGET_HEADER, rows)
    fam = []
    if set(config.budget.rules) == {"doubt", "discrepancy"}:
        fam = familiarity_table(rows, config.epochs)
        write_rows(os.path.join(out_dir, "familiarity.csv"),
                   ["repetition", "epoch", "doubt_distance", "discrepancy_distance", "doubt_closer"],
                   fam)

    from .plotting import plot_budget

    if config.detail_runs > 0:
        plot_budget(os.path.join(details, "rep000"), config.epochs, config.budget.rules,
                    config.grid, os.path.join(out_dir, "budget.svg"))
    return {"rows": rows, "familiarity": fam}


# -- dispatch ---------------------------------------------------------------

RUNNERS = {
    "gp-compare": run_gp_compare,
    "pendulum-budget": run_pendulum_budget,
    "pendulum-fixed": run_pendulum_fixed,
}


def run_experiment(config, out_dir=None):
    """Run ``config.experiment`` into ``out_dir`` and write the manifest."""
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    result = RUNNERS[config.experiment](config, out_dir)
    write_manifest(out_dir, config, round(time.time() - t0, 3))
    return result
