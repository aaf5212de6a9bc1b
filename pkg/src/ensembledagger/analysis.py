"""Grid-based analyses of decision rules and policies on the pendulum.

Permitted sets and their volumes, threshold search for a volume budget,
basins of attraction, learning performance and failure rates.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dagger import Discrepancy, Doubt, Vanilla, permits
from .pendulum import basin_of_attraction, saturate, wrap_angle
from .uncertainty import doubt_of

__all__ = [
    "StateGrid",
    "PermittedSet",
    "MetricsRecord",
    "UnsupportedRuleError",
    "InfeasibleTargetError",
    "grid_statistics",
    "permitted_set",
    "permitted_volume",
    "volume_at",
    "solve_threshold_for_volume",
    "expert_basin",
    "novice_basin",
    "learning_performance",
    "failure_of_trajectory",
    "failure_rate",
    "nearest_dataset_distance",
    "write_grid_csv",
]


class UnsupportedRuleError(TypeError):
    pass


class InfeasibleTargetError(ValueError):
    def __init__(self, target, best_volume, threshold):
        self.target = target
        self.best_volume = best_volume
        self.threshold = threshold
        super().__init__(f"volume {target} unreachable; best achieved {best_volume} "
                         f"at threshold {threshold}")


@dataclass(frozen=True)
class StateGrid:
    theta_range: tuple = (-np.pi, np.pi)
    theta_dot_range: tuple = (-5.0, 5.0)
    resolution: tuple = (101, 101)

    def __post_init__(self):
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        for lo, hi in (self.theta_range, self.theta_dot_range):
            if not lo < hi:
                raise ValueError("grid ranges must be increasing")

    @property
    def shape(self):
        return tuple(self.resolution)

    @property
    def n_cells(self):
        return self.resolution[0] * self.resolution[1]

    @property
    def thetas(self):
        return np.linspace(*self.theta_range, self.resolution[0])

    @property
    def theta_dots(self):
        return np.linspace(*self.theta_dot_range, self.resolution[1])

    @property
    def window(self):
        return (tuple(self.theta_range), tuple(self.theta_dot_range))

    def points(self):
        """Cell centres, shape ``(n_theta, n_theta_dot, 2)`` (theta-major)."""
        T, W = np.meshgrid(self.thetas, self.theta_dots, indexing="ij")
        return np.stack([T, W], axis=-1)

    def cell_index(self, states):
        """Nearest cell ``(i, j)`` for each state after wrapping theta, plus an
        ``inside`` flag that is False for states outside the theta_dot window
        (their indices are clamped)."""
        states = np.asarray(states, dtype=float).reshape(-1, 2)
        th = wrap_angle(states[:, 0])
        w = states[:, 1]
        (t0, t1), (w0, w1) = self.window
        inside = (th >= t0) & (th <= t1) & (w >= w0) & (w <= w1)
        i = np.rint((th - t0) / (t1 - t0) * (self.resolution[0] - 1)).astype(int)
        j = np.rint((w - w0) / (w1 - w0) * (self.resolution[1] - 1)).astype(int)
        i = np.clip(i, 0, self.resolution[0] - 1)
        j = np.clip(j, 0, self.resolution[1] - 1)
        return i, j, inside

    def key(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PermittedSet:
    mask: np.ndarray
    grid: StateGrid

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.grid.shape:
            raise ValueError(f"mask shape {self.mask.shape} != grid shape {self.grid.shape}")

    @property
    def volume(self):
        return permitted_volume(self)


@dataclass
class MetricsRecord:
    epoch: int
    permitted_volume: float = float("nan")
    learning_performance: float = float("nan")
    failure: bool = False
    novice_basin_volume: float = float("nan")

    def __post_init__(self):
        for name in ("permitted_volume", "learning_performance", "novice_basin_volume"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def grid_statistics(novice, expert, grid):
    """Per-cell squared discrepancy and doubt, each shaped like the grid."""
    pts = grid.points().reshape(-1, 2)
    dist = novice.predict(pts)
    a_exp = np.asarray(expert(pts), dtype=float).reshape(len(pts), -1)
    disc = np.sum((dist.mean - a_exp) ** 2, axis=-1)
    return {
        "discrepancy_sq": disc.reshape(grid.shape),
        "doubt": doubt_of(dist).reshape(grid.shape),
    }


def permitted_set(rule, novice, expert, grid, stats=None):
    """Cells where ``rule`` would let the novice act."""
    if isinstance(rule, Vanilla):
        raise UnsupportedRuleError("the vanilla rule has a stochastic permitted set")
    if stats is None:
        stats = grid_statistics(novice, expert, grid)
    return PermittedSet(permits(rule, stats["discrepancy_sq"], stats["doubt"]), grid)


def permitted_volume(pset):
    mask = pset.mask if isinstance(pset, PermittedSet) else np.asarray(pset, dtype=bool)
    return float(np.count_nonzero(mask)) / mask.size


def _statistic(kind, stats):
    if kind in ("discrepancy", Discrepancy):
        return np.asarray(stats["discrepancy_sq"], dtype=float)
    if kind in ("doubt", Doubt):
        return np.asarray(stats["doubt"], dtype=float)
    raise UnsupportedRuleError(f"cannot solve a threshold for {kind!r}")


def volume_at(values, threshold):
    return float(np.count_nonzero(values <= threshold)) / values.size


def solve_threshold_for_volume(rule_kind, novice, expert, grid, target_volume,
                               tolerance=None, max_iter=400, stats=None, bracket_cap=1e12):
    """Bisection for the smallest threshold whose permitted volume reaches the target.

    ``rule_kind`` is ``"discrepancy"`` or ``"doubt"``. Volumes are multiples of
    ``1/n_cells``; the default tolerance is half of that. Returns the threshold
    whose volume is closest to the target (ties go to the upper end).
    """
    if not 0.0 <= target_volume <= 1.0:
        raise ValueError("target volume must lie in [0, 1]")
    if stats is None:
        stats = grid_statistics(novice, expert, grid)
    values = _statistic(rule_kind, stats).ravel()
    if tolerance is None:
        tolerance = 0.5 / values.size

    hi = 1.0
    while volume_at(values, hi) < target_volume:
        hi *= 2.0
        if hi > bracket_cap:
            best = volume_at(values, hi)
            raise InfeasibleTargetError(target_volume, best, hi)
    lo = 0.0
    v_lo = volume_at(values, lo)
    if v_lo >= target_volume:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if volume_at(values, mid) >= target_volume:
            hi = mid
        else:
            lo = mid
    v_hi, v_lo = volume_at(values, hi), volume_at(values, lo)
    if abs(v_hi - target_volume) <= tolerance or abs(v_hi - target_volume) <= abs(v_lo - target_volume):
        return hi
    return lo


def _cache_key(params, ctrl, grid, max_steps):
    blob = json.dumps({"params": asdict(params), "gains": list(ctrl.gains), "grid": grid.key(),
                       "max_steps": max_steps}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_BASIN_MEMO = {}


def expert_basin(ctrl, grid, max_steps=500, cache_dir=None):
    """Expert basin on the grid, memoized in-process and optionally on disk."""
    key = _cache_key(ctrl.params, ctrl, grid, max_steps)
    if key in _BASIN_MEMO:
        return _BASIN_MEMO[key].copy()
    path = os.path.join(cache_dir, f"expert_basin_{key}.npy") if cache_dir else None
    if path and os.path.exists(path):
        mask = np.load(path)
    else:
        mask = basin_of_attraction(ctrl, grid.points(), ctrl.params, max_steps=max_steps)
        if path:
            os.makedirs(cache_dir, exist_ok=True)
            np.save(path, mask)
    _BASIN_MEMO[key] = mask
    return mask.copy()


def novice_basin(novice, grid, params, max_steps=500, restrict_to=None, escape_window=None):
    """Basin of the novice acting alone with its saturated mean action.

    ``restrict_to`` limits the simulation to the cells where it is True
    (others are reported False); ``escape_window`` ends roll-outs that leave
    the window as non-converging. Returns ``(mask, volume)``.
    """
    pts = grid.points().reshape(-1, 2)
    cells = np.arange(len(pts)) if restrict_to is None else np.flatnonzero(np.ravel(restrict_to))

    def policy(x):
        return saturate(novice.mean_action(x)[..., 0], params)

    mask = np.zeros(len(pts), dtype=bool)
    if len(cells):
        mask[cells] = basin_of_attraction(policy, pts[cells], params, max_steps=max_steps,
                                          escape_window=escape_window)
    mask = mask.reshape(grid.shape)
    return mask, permitted_volume(mask)


def learning_performance(novice_basin_mask, expert_basin_mask):
    a = np.asarray(novice_basin_mask, dtype=bool)
    b = np.asarray(expert_basin_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("basin masks are not aligned")
    return float(np.count_nonzero(a & b)) / a.size


def failure_of_trajectory(traj, expert_basin_mask, grid):
    """True iff some visited state maps outside the expert basin or the grid window."""
    states = traj.states if hasattr(traj, "states") else np.asarray(traj, dtype=float)
    i, j, inside = grid.cell_index(states)
    return bool(np.any(~inside) or np.any(~np.asarray(expert_basin_mask)[i, j]))


def failure_rate(flags):
    flags = np.asarray(list(flags), dtype=bool)
    if flags.size == 0:
        raise ValueError("no repetitions")
    return float(flags.mean())


def nearest_dataset_distance(points, dataset_obs):
    """Euclidean distance from each point to its nearest dataset observation."""
    tree = cKDTree(np.asarray(dataset_obs, dtype=float).reshape(-1, 2))
    d, _ = tree.query(np.asarray(points, dtype=float).reshape(-1, 2))
    return d


def write_grid_csv(path, grid, mask_or_values, column="flag"):
    pts = grid.points().reshape(-1, 2)
    vals = np.asarray(mask_or_values).ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "theta_dot", column])
        for (th, wd), v in zip(pts, vals):
            out = int(v) if vals.dtype == bool else repr(float(v))
            w.writerow([repr(float(th)), repr(float(wd)), out])
