"""Inverted pendulum with a saturated feedback-linearizing expert.

Dynamics: theta_ddot = a*sin(theta) - b*theta_dot + c*u, theta = 0 upright.
States are arrays whose last axis is ``(theta, theta_dot)``; every function
here is vectorized over leading axes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_continuous_are

__all__ = [
    "PendulumState",
    "PendulumParams",
    "ExpertController",
    "Actor",
    "Trajectory",
    "SimulationBlowUpError",
    "dynamics_deriv",
    "saturate",
    "expert_action",
    "step",
    "wrap_angle",
    "is_converged",
    "simulate",
    "basin_of_attraction",
    "lqr_gain",
    "residual_system",
    "closed_loop_matrix",
    "CONVERGENCE_RADIUS",
]

CONVERGENCE_RADIUS = 0.05


class PendulumState(NamedTuple):
    theta: float
    theta_dot: float


class SimulationBlowUpError(ArithmeticError):
    """Integration produced a non-finite state."""


@dataclass(frozen=True)
class PendulumParams:
    a: float = 10.0
    b: float = 2.0
    c: float = 10.0
    u_min: float = -1.0
    u_max: float = 1.0
    dt: float = 0.05
    max_steps: int = 100

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


def residual_system(params):
    """(A, B) of the linear system left after cancelling a*sin(theta)."""
    A = np.array([[0.0, 1.0], [0.0, -params.b]])
    B = np.array([[0.0], [1.0]])
    return A, B


def lqr_gain(A, B, Q, R):
    """Continuous-time LQR gain K = R^-1 B^T P with P from the Riccati equation."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    P = solve_continuous_are(A, B, Q, R)
    return np.linalg.solve(R, B.T @ P)


def closed_loop_matrix(gains, params):
    k1, k2 = gains
    return np.array([[0.0, 1.0], [-k1, -params.b - k2]])


@dataclass(frozen=True)
class ExpertController:
    gains: tuple = (0.316, 0.175)
    params: PendulumParams = field(default_factory=PendulumParams)

    def __post_init__(self):
        eig = np.linalg.eigvals(closed_loop_matrix(self.gains, self.params))
        if not np.all(eig.real < 0):
            raise ValueError(f"gains {self.gains} do not stabilize the residual system")

    def __call__(self, states):
        return expert_action(states, self)


class Actor(str, Enum):
    NOVICE = "novice"
    EXPERT = "expert"


def dynamics_deriv(state, u, params):
    state = np.asarray(state, dtype=float)
    theta, theta_dot = state[..., 0], state[..., 1]
    return theta_dot, params.a * np.sin(theta) - params.b * theta_dot + params.c * u


def saturate(u, params):
    return np.clip(u, params.u_min, params.u_max)


def expert_action(state, ctrl):
    """Feedback-linearizing law, saturated to [u_min, u_max]."""
    state = np.asarray(state, dtype=float)
    p = ctrl.params
    k1, k2 = ctrl.gains
    theta, theta_dot = state[..., 0], state[..., 1]
    raw = -(p.a / p.c) * np.sin(theta) - (k1 * theta + k2 * theta_dot) / p.c
    return saturate(raw, p)


def _rk4(state, u, params):
    dt = params.dt

    def f(s):
        d0, d1 = dynamics_deriv(s, u, params)
        return np.stack([d0, d1], axis=-1)

    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(state, u, params):
    """One RK4 step of length ``params.dt`` with ``u`` held constant."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = _rk4(np.asarray(state, dtype=float), np.asarray(u, dtype=float), params)
    if not np.all(np.isfinite(out)):
        raise SimulationBlowUpError(f"non-finite state after step from {state}")
    return out


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def is_converged(state, radius=CONVERGENCE_RADIUS):
    state = np.asarray(state, dtype=float)
    return np.hypot(wrap_angle(state[..., 0]), state[..., 1]) < radius


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, 2), theta unwrapped
    actions: np.ndarray  # (T,)
    actors: list
    terminated_early: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 2)
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1)
        if not len(self.actions) == len(self.states) - 1 == len(self.actors):
            raise ValueError("trajectory needs len(actions) == len(states) - 1 == len(actors)")

    def __len__(self):
        return len(self.actions)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "theta", "theta_dot", "action", "actor"])
            for t, (s, a, who) in enumerate(zip(self.states[:-1], self.actions, self.actors)):
                w.writerow([t, repr(float(s[0])), repr(float(s[1])), repr(float(a)), Actor(who).value])
            last = self.states[-1]
            w.writerow([len(self.actions), repr(float(last[0])), repr(float(last[1])), "", ""])

    @classmethod
    def from_csv(cls, path):
        states, actions, actors = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                states.append((float(row["theta"]), float(row["theta_dot"])))
                if row["action"] != "":
                    actions.append(float(row["action"]))
                    actors.append(Actor(row["actor"]))
        return cls(np.array(states), np.array(actions), actors)


def simulate(policy, x0, params, stop=is_converged, actor=Actor.EXPERT):
    """Roll ``policy`` forward from ``x0`` for at most ``params.max_steps`` steps.

    ``policy`` maps a state ``(2,)`` to a scalar action, which is saturated
    before use. The roll-out ends early once ``stop(state)`` holds.
    """
    x = np.asarray(x0, dtype=float).reshape(2)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    states, actions = [x], []
    early = False
    for _ in range(params.max_steps):
        if stop is not None and stop(x):
            early = True
            break
        u = float(saturate(np.asarray(policy(x), dtype=float).reshape(-1)[0], params))
        x = step(x, u, params)
        states.append(x)
        actions.append(u)
    return Trajectory(np.array(states), np.array(actions), [actor] * len(actions), early)


def basin_of_attraction(policy, states, params, max_steps=500, radius=CONVERGENCE_RADIUS,
                        escape_window=None):
    """Which initial states the closed loop drives into the convergence ball.

    ``policy`` is vectorized: ``(N, 2) -> (N,)``. A state converges if some
    visited state (including the initial one) within ``max_steps`` steps lies
    within ``radius`` of the upright equilibrium. Cells that converge are
    retired immediately. With ``escape_window=((th_lo, th_hi), (w_lo, w_hi))``
    a roll-out that leaves the window is counted as not converging. Non-finite
    roll-outs never converge.
    """
    x = np.asarray(states, dtype=float)
    shape = x.shape[:-1]
    x = x.reshape(-1, 2)
    result = np.zeros(len(x), dtype=bool)
    active = np.arange(len(x))
    for k in range(max_steps + 1):
        done = is_converged(x, radius)
        result[active[done]] = True
        keep = ~done
        if escape_window is not None:
            (t0, t1), (w0, w1) = escape_window
            keep &= (x[:, 0] >= t0) & (x[:, 0] <= t1) & (x[:, 1] >= w0) & (x[:, 1] <= w1)
        x, active = x[keep], active[keep]
        if k == max_steps or not len(active):
            break
        u = saturate(np.asarray(policy(x), dtype=float).reshape(len(x)), params)
        with np.errstate(over="ignore", invalid="ignore"):
            x = _rk4(x, u, params)
        finite = np.all(np.isfinite(x), axis=1)
        x, active = x[finite], active[finite]
    return result.reshape(shape)
