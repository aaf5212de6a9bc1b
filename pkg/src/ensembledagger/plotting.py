"""SVG figures drawn from the experiment CSVs (never from in-memory state)."""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed salt and no timestamp so reruns produce identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "ensembledagger"
_META = {"Date": None}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _col(rows, name):
    return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_gp_compare(out_dir, path):
    data = read_csv(os.path.join(out_dir, "training_data.csv"))
    models = [m for m in ("gp", "vanilla_ensemble", "nll_ensemble", "mc_dropout")
              if os.path.exists(os.path.join(out_dir, f"{m}.csv"))]
    fig, axes = plt.subplots(1, max(len(models), 1), figsize=(4 * max(len(models), 1), 3.2),
                             sharey=True, squeeze=False)
    for ax, m in zip(axes[0], models):
        rows = read_csv(os.path.join(out_dir, f"{m}.csv"))
        x, mu, s = _col(rows, "x"), _col(rows, "mean"), _col(rows, "std_scaled")
        ax.fill_between(x, mu - 2 * s, mu + 2 * s, alpha=0.3, lw=0)
        ax.plot(x, mu, lw=1.2)
        ax.plot(_col(data, "x"), _col(data, "y"), "k.", ms=6)
        ax.set_title(m.replace("_", " "))
        ax.set_xlabel("x")
    axes[0][0].set_ylabel("f(x)")
    fig.tight_layout()
    _save(fig, path)


def plot_fixed(summary_path, path):
    rows = read_csv(summary_path)
    rules = list(dict.fromkeys(r["rule"] for r in rows))
    panels = [("learning_performance", "learning performance"),
              ("failure_rate", "failure rate"),
              ("permitted_volume", "permitted volume")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for ax, (key, title) in zip(axes, panels):
        for rule in rules:
            sel = [r for r in rows if r["rule"] == rule]
            e, m, s = _col(sel, "epoch"), _col(sel, key), _col(sel, key + "_stderr")
            ax.errorbar(e, m, yerr=s, marker="o", ms=3, capsize=2, label=rule)
        ax.set_title(title)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def _grid_mask(path, grid):
    rows = read_csv(path)
    return _col(rows, "flag").reshape(grid.shape).astype(bool)


def plot_budget(run_dir, epochs, rules, grid, path):
    """One row per rule, one column per gated epoch: permitted cells, dataset, trajectory."""
    cols = list(range(1, epochs + 1))
    fig, axes = plt.subplots(len(rules), len(cols), figsize=(3.2 * len(cols), 3.0 * len(rules)),
                             sharex=True, sharey=True, squeeze=False)
    pts = grid.points()
    for i, rule in enumerate(rules):
        for j, e in enumerate(cols):
            ax = axes[i][j]
            base = os.path.join(run_dir, rule)
            perm = os.path.join(base, f"epoch{e}_permitted.csv")
            if os.path.exists(perm):
                m = _grid_mask(perm, grid)
                ax.plot(pts[..., 0][m], pts[..., 1][m], "k.", ms=1.5)
            prev = os.path.join(base, f"epoch{e - 1}_dataset.csv")
            if os.path.exists(prev):
                d = read_csv(prev)
                ax.plot(_col(d, "theta"), _col(d, "theta_dot"), ".", color="tab:orange", ms=2)
            traj = os.path.join(base, f"epoch{e}_trajectory.csv")
            if os.path.exists(traj):
                t = read_csv(traj)
                ax.plot(_col(t, "theta"), _col(t, "theta_dot"), "-", color="tab:blue", lw=1)
            ax.set_xlim(*grid.theta_range)
            ax.set_ylim(*grid.theta_dot_range)
            if i == 0:
                ax.set_title(f"epoch {e}")
            if j == 0:
                ax.set_ylabel(f"{rule}\ntheta_dot")
            if i == len(rules) - 1:
                ax.set_xlabel("theta")
    fig.tight_layout()
    _save(fig, path)
