"""DAgger with pluggable decision rules.

At every time step a decision rule chooses whether the novice's mean action
or the expert's action drives the system. Every visited observation is
labelled with the expert's action and aggregated into the dataset, and the
novice is retrained on everything collected so far.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .nncore import TrainConfig, TrainingDivergenceError
from .pendulum import (
    Actor,
    ExpertController,
    PendulumParams,
    SimulationBlowUpError,
    Trajectory,
    is_converged,
    saturate,
    step,
)
from .uncertainty import EnsemblePolicy, doubt_of, train_ensemble

log = logging.getLogger(__name__)

__all__ = [
    "Vanilla",
    "Discrepancy",
    "Doubt",
    "Ensemble",
    "rule_from_dict",
    "rule_to_dict",
    "Decision",
    "decide",
    "permits",
    "Dataset",
    "EpochRecord",
    "EnsembleConfig",
    "DaggerConfig",
    "derive_seed",
    "child_seeds",
    "run_epoch",
    "run_dagger",
    "write_epoch_records_csv",
]


# -- decision rules ---------------------------------------------------------

@dataclass(frozen=True)
class Vanilla:
    """Expert acts with probability beta0 * lam**epoch."""

    beta0: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in [0, 1]")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")

    def beta(self, epoch):
        return self.lam ** epoch * self.beta0

    @property
    def label(self):
        return f"vanilla_b{self.beta0:g}_l{self.lam:g}"


@dataclass(frozen=True)
class Discrepancy:
    """Novice acts iff its squared distance to the expert action is at most tau."""

    tau: float

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")

    @property
    def label(self):
        return f"discrepancy_tau{self.tau:g}"


@dataclass(frozen=True)
class Doubt:
    """Novice acts iff the ensemble variance of its action is at most chi."""

    chi: float

    def __post_init__(self):
        if not self.chi >= 0:
            raise ValueError("chi must be >= 0")

    @property
    def label(self):
        return f"doubt_chi{self.chi:g}"


@dataclass(frozen=True)
class Ensemble:
    """Novice acts iff both the discrepancy and the doubt test pass."""

    tau: float
    chi: float

    def __post_init__(self):
        if not (self.tau >= 0 and self.chi >= 0):
            raise ValueError("tau and chi must be >= 0")

    @property
    def label(self):
        return f"ensemble_tau{self.tau:g}_chi{self.chi:g}"


_RULES = {"vanilla": Vanilla, "discrepancy": Discrepancy, "doubt": Doubt, "ensemble": Ensemble}


def rule_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _RULES:
        raise ValueError(f"unknown decision rule kind {kind!r}")
    d.pop("label", None)
    return _RULES[kind](**{k: float(v) for k, v in d.items()})


def rule_to_dict(rule):
    kind = next(k for k, cls in _RULES.items() if isinstance(rule, cls))
    return {"kind": kind, **{k: v for k, v in rule.__dict__.items()}}


@dataclass
class Decision:
    chosen_action: np.ndarray
    actor: Actor
    discrepancy_sq: float
    doubt: float


def permits(rule, discrepancy_sq, doubt):
    """Deterministic novice-permission test, vectorized over states."""
    discrepancy_sq = np.asarray(discrepancy_sq)
    doubt = np.asarray(doubt)
    if isinstance(rule, Discrepancy):
        return discrepancy_sq <= rule.tau
    if isinstance(rule, Doubt):
        return doubt <= rule.chi
    if isinstance(rule, Ensemble):
        return (discrepancy_sq <= rule.tau) & (doubt <= rule.chi)
    raise TypeError(f"{type(rule).__name__} has no deterministic permitted set")


def decide(rule, novice_dist, expert_action, epoch, rng):
    a_nov = np.atleast_1d(np.asarray(novice_dist.mean, dtype=float))
    a_exp = np.atleast_1d(np.asarray(expert_action, dtype=float))
    if a_nov.shape != a_exp.shape:
        raise ValueError(f"novice action {a_nov.shape} and expert action {a_exp.shape} differ")
    disc = float(np.sum((a_nov - a_exp) ** 2))
    doubt = float(doubt_of(novice_dist))
    if isinstance(rule, Vanilla):
        novice = not rng.uniform() <= rule.beta(epoch)
    else:
        novice = bool(permits(rule, disc, doubt))
    if novice:
        return Decision(a_nov, Actor.NOVICE, disc, doubt)
    return Decision(a_exp, Actor.EXPERT, disc, doubt)


# -- data -------------------------------------------------------------------

class Dataset:
    """Append-only aggregate of (observation, expert action) pairs."""

    def __init__(self, obs_dim=2, act_dim=1):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self._obs = np.empty((0, obs_dim))
        self._act = np.empty((0, act_dim))

    @classmethod
    def from_arrays(cls, obs, act):
        obs = np.asarray(obs, dtype=float)
        act = np.asarray(act, dtype=float)
        if act.ndim == 1:
            act = act[:, None]
        if obs.ndim != 2 or act.ndim != 2:
            raise ValueError("observations and actions must be 2-D (n, dim)")
        ds = cls(obs.shape[1], act.shape[1])
        ds.extend(obs, act)
        return ds

    def extend(self, obs, act):
        obs = np.asarray(obs, dtype=float).reshape(-1, self.obs_dim)
        act = np.asarray(act, dtype=float).reshape(-1, self.act_dim)
        if len(obs) != len(act):
            raise ValueError("observations and actions differ in length")
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(act))):
            raise ValueError("dataset entries must be finite")
        self._obs = np.concatenate([self._obs, obs])
        self._act = np.concatenate([self._act, act])

    def aggregate(self, other):
        self.extend(other.observations, other.actions)

    @property
    def observations(self):
        return self._obs.copy()

    @property
    def actions(self):
        return self._act.copy()

    def arrays(self):
        return self._obs, self._act

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self._obs).tobytes())
        h.update(np.ascontiguousarray(self._act).tobytes())
        return h.hexdigest()

    def __len__(self):
        return len(self._obs)


@dataclass
class EpochRecord:
    epoch: int
    trajectory: Trajectory
    rule: object = None
    failure: bool = False
    blew_up: bool = False
    dataset_size: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def trajectory_len(self):
        return len(self.trajectory)

    @property
    def n_novice_actions(self):
        return sum(1 for a in self.trajectory.actors if a == Actor.NOVICE)

    @property
    def novice_action_fraction(self):
        n = self.trajectory_len
        return self.n_novice_actions / n if n else 0.0


def write_epoch_records_csv(records, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "trajectory_len", "novice_action_fraction", "failure_flag", "dataset_size"])
        for r in records:
            w.writerow([r.epoch, r.trajectory_len, repr(float(r.novice_action_fraction)),
                        int(bool(r.failure)), r.dataset_size])


# -- loop -------------------------------------------------------------------

def derive_seed(master, *keys):
    """Deterministic child seed sequence for a tuple of non-negative int keys."""
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))


# spawn-key tags; fixed forever so outputs stay reproducible
TAG_EPOCH, TAG_INIT, TAG_SHUFFLE = 1, 2, 3


def child_seeds(ss, n):
    """``n`` children of ``ss`` that, unlike ``ss.spawn``, do not depend on
    how many children were spawned before."""
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i,))
            for i in range(n)]


def _seed_int(ss):
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_initial_state(rng, box):
    (t0, t1), (w0, w1) = box
    return np.array([rng.uniform(t0, t1), rng.uniform(w0, w1)])


def run_epoch(novice, expert, env, rule, epoch, seed, ic_box=((-0.6, 0.6), (-1.5, 1.5)),
              x0=None):
    """Sample one rule-gated trajectory and its expert-labelled dataset delta.

    ``seed`` fixes both the initial condition and the rule's random draws; it
    should not depend on the rule so that all rules start from the same state.
    With ``novice=None`` or ``epoch == 0`` only the expert acts.
    A simulation blow-up ends the trajectory and is reported on the record.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ic_ss, decide_ss = child_seeds(ss, 2)
    decide_rng = np.random.default_rng(decide_ss)
    x = np.asarray(x0, dtype=float) if x0 is not None else sample_initial_state(
        np.random.default_rng(ic_ss), ic_box)
    expert_only = novice is None or epoch == 0

    states, actions, actors, labels = [x], [], [], []
    early = blew_up = False
    for _ in range(env.max_steps):
        if is_converged(x):
            early = True
            break
        a_exp = np.atleast_1d(expert(x))
        if expert_only:
            a, who = a_exp, Actor.EXPERT
        else:
            # the vanilla schedule counts gated epochs from 0, so epoch 1 uses beta0
            d = decide(rule, novice.predict(x), a_exp, epoch - 1, decide_rng)
            a, who = d.chosen_action, d.actor
        u = float(saturate(a[0], env))
        try:
            nxt = step(x, u, env)
        except SimulationBlowUpError:
            blew_up = True
            break
        labels.append(a_exp)
        actions.append(u)
        actors.append(who)
        states.append(nxt)
        x = nxt
    traj = Trajectory(np.array(states), np.array(actions), actors, early)
    act_dim = len(labels[0]) if labels else 1
    delta = Dataset.from_arrays(traj.states[:-1], np.array(labels).reshape(len(actions), act_dim))
    return EpochRecord(epoch=epoch, trajectory=traj, rule=rule, blew_up=blew_up), delta


@dataclass
class EnsembleConfig:
    hidden_sizes: tuple = (64, 64, 32, 32)
    n_members: int = 10
    activation: str = "relu"
    head: str = "point"
    dtype: str = "float32"
    # He scaling keeps member disagreement high away from the data
    init: str = "he"

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")


@dataclass
class DaggerConfig:
    epochs: int = 6
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=200, batch_size=16, learning_rate=1e-3, l2_coeff=1e-5))
    env: PendulumParams = field(default_factory=PendulumParams)
    gains: tuple = (0.316, 0.175)
    ic_box: tuple = ((-0.6, 0.6), (-1.5, 1.5))
    master_seed: int = 0
    repetition: int = 0
    warm_start: bool = False
    trajectories_per_epoch: int = 1
    # optional fixed initial state per epoch (0..epochs); overrides sampling
    initial_states: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one rule-gated epoch")
        if self.trajectories_per_epoch < 1:
            raise ValueError("trajectories_per_epoch must be >= 1")
        if self.initial_states and len(self.initial_states) < self.epochs + 1:
            raise ValueError("initial_states needs one state per epoch including epoch 0")


def fit_novice(dataset, config, epoch, previous=None, cache=None):
    """Train a novice on ``dataset``; seeds depend on (master, repetition, epoch) only."""
    e = config.ensemble
    obs, act = dataset.arrays()
    key = None
    if cache is not None and (previous is None or not config.warm_start):
        key = (dataset.fingerprint(), config.master_seed, config.repetition, epoch,
               repr(e), repr(config.train))
        if key in cache:
            return cache[key]
    init_seeds = [_seed_int(derive_seed(config.master_seed, config.repetition, TAG_INIT, epoch, m))
                  for m in range(e.n_members)]
    shuffle_seeds = [derive_seed(config.master_seed, config.repetition, TAG_SHUFFLE, epoch, m)
                     for m in range(e.n_members)]
    if config.warm_start and previous is not None:
        policy = previous
    else:
        sizes = [obs.shape[1], *e.hidden_sizes, act.shape[1]]
        policy = EnsemblePolicy.create(sizes, init_seeds, activation=e.activation,
                                       head=e.head, dtype=np.dtype(e.dtype), init=e.init)
    novice = train_ensemble(policy, (obs, act), config.train, member_seeds=shuffle_seeds)
    if key is not None:
        cache[key] = novice
    return novice


def run_dagger(config, rule, failure_fn=None, on_epoch=None, novice_cache=None):
    """Zeroth expert-only epoch followed by ``config.epochs`` rule-gated epochs.

    ``rule`` is a decision rule or a callable ``(epoch, novice, dataset) ->
    rule`` evaluated before each gated epoch. ``failure_fn(trajectory)`` flags
    failures; blow-ups always count as failures. ``on_epoch(record, novice,
    next_novice, dataset)`` is called after the novice has been retrained on
    the aggregate including that epoch. Returns one record per epoch.
    """
    expert = ExpertController(tuple(config.gains), config.env)
    obs_dim, act_dim = 2, 1
    dataset = Dataset(obs_dim, act_dim)
    records = []
    novice = None
    for epoch in range(config.epochs + 1):
        active_rule = rule(epoch, novice, dataset) if (callable(rule) and epoch > 0) else rule
        epoch_ss = derive_seed(config.master_seed, config.repetition, TAG_EPOCH, epoch)
        sub = child_seeds(epoch_ss, config.trajectories_per_epoch)
        delta_all = Dataset(obs_dim, act_dim)
        record = None
        for k, ss in enumerate(sub):
            x0 = config.initial_states[epoch] if (config.initial_states and k == 0) else None
            rec, delta = run_epoch(novice, expert, config.env, active_rule, epoch, ss,
                                   ic_box=config.ic_box, x0=x0)
            rec.failure = bool(rec.blew_up or (failure_fn is not None and failure_fn(rec.trajectory)))
            delta_all.aggregate(delta)
            if record is None:
                record = rec
            else:
                record.failure |= rec.failure
                record.blew_up |= rec.blew_up
        dataset.aggregate(delta_all)
        record.dataset_size = len(dataset)
        record.rule = active_rule if epoch > 0 else None
        try:
            next_novice = fit_novice(dataset, config, epoch, previous=novice, cache=novice_cache)
        except TrainingDivergenceError as err:
            log.warning("novice training diverged after epoch %d: %s", epoch, err)
            record.metrics["training_diverged"] = True
            next_novice = novice
        if on_epoch is not None:
            on_epoch(record, novice, next_novice, dataset)
        records.append(record)
        novice = next_novice
    return records
