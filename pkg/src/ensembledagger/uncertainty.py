"""Predictive uncertainty from deep ensembles and MC-dropout.

An :class:`EnsemblePolicy` wraps M independently initialised networks held as
one stacked :class:`~ensembledagger.nncore.DenseNet`. Point-estimate members
are combined by sample mean and unbiased sample variance; mean/log-variance
members are combined as an equally weighted Gaussian mixture.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nncore import (
    DenseNet,
    forward,
    init_net,
    sample_dropout_masks,
    split_gaussian,
    stack_nets,
    train,
)

__all__ = [
    "ConfigurationError",
    "PredictiveDistribution",
    "EnsemblePolicy",
    "ensemble_predict",
    "mc_dropout_predict",
    "doubt_of",
    "train_ensemble",
    "POLICY_FORMAT_VERSION",
]

POLICY_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass
class PredictiveDistribution:
    """Per-dimension mean and variance; leading axes index query points."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.variance < 0):
            raise ValueError("variance must be non-negative")

    @property
    def std(self):
        return np.sqrt(self.variance)


def doubt_of(dist):
    """Scalar doubt: mean of the per-dimension variances (vectorized over queries)."""
    var = dist.variance if isinstance(dist, PredictiveDistribution) else np.asarray(dist, float)
    return np.mean(var, axis=-1)


def _sample_variance(out):
    """Unbiased variance over axis 0; shifting by the first sample makes
    identical samples give exactly zero."""
    return (out - out[:1]).var(axis=0, ddof=1)


def _clamp_variance(var):
    # tiny negatives are rounding residue of the mixture formula
    return np.maximum(var, 0.0)


class EnsemblePolicy:
    """M networks of identical architecture queried jointly."""

    def __init__(self, members):
        if isinstance(members, DenseNet):
            if members.n_members is None:
                members = stack_nets([members])
            self.net = members
        else:
            members = list(members)
            if not members:
                raise ConfigurationError("ensemble needs at least one member")
            self.net = stack_nets(members)

    @classmethod
    def create(cls, sizes, seeds, activation="tanh", head="point", dtype=np.float64, init="glorot"):
        """Fresh ensemble with one independent initialisation per seed."""
        seeds = list(seeds)
        if not seeds:
            raise ConfigurationError("ensemble needs at least one member")
        return cls([init_net(sizes, seed=s, activation=activation, head=head, dtype=dtype, init=init)
                    for s in seeds])

    @property
    def n_members(self):
        return self.net.n_members

    @property
    def member_kind(self):
        return self.net.head

    @property
    def members(self):
        return [self.net.member(i) for i in range(self.n_members)]

    @property
    def action_dim(self):
        return self.net.output_dim

    def outputs(self, obs):
        """Raw member outputs, shape ``(M, N, out)`` for ``obs`` of shape ``(N, d)``."""
        return forward(self.net, obs)

    def predict(self, obs):
        return ensemble_predict(self, obs)

    def mean_action(self, obs):
        return self.predict(obs).mean

    def __call__(self, obs):
        return self.mean_action(obs)

    def to_dict(self):
        return {
            "format": "ensembledagger.policy",
            "version": POLICY_FORMAT_VERSION,
            "n_members": self.n_members,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "ensembledagger.policy":
            raise ConfigurationError("not a serialized ensemble policy")
        if d.get("version") != POLICY_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported policy format version {d.get('version')}")
        return cls(DenseNet.from_dict(d["net"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def ensemble_predict(policy, obs):
    """Combine member predictions at ``obs`` (shape ``(d,)`` or ``(N, d)``)."""
    if policy.n_members is None or policy.n_members < 1:
        raise ConfigurationError("empty ensemble")
    obs = np.asarray(obs)
    single = obs.ndim == 1
    out = policy.outputs(np.atleast_2d(obs)).astype(np.float64)
    M = out.shape[0]
    if policy.member_kind == "point":
        mean = out.mean(axis=0)
        var = _sample_variance(out) if M > 1 else np.zeros_like(mean)
    else:
        mu, sig2 = split_gaussian(out)
        mean = mu.mean(axis=0)
        var = _clamp_variance((sig2 + mu * mu).mean(axis=0) - mean * mean)
    if single:
        mean, var = mean[0], var[0]
    return PredictiveDistribution(mean, var)


def mc_dropout_predict(net, obs, n_samples, keep_prob, rng):
    """Mean and unbiased variance over ``n_samples`` dropout-masked passes."""
    if n_samples < 2:
        raise ConfigurationError("MC-dropout needs at least two samples")
    if net.n_members is not None:
        raise ConfigurationError("MC-dropout expects a single network")
    obs = np.asarray(obs)
    single = obs.ndim == 1
    x = np.atleast_2d(obs)
    masks = sample_dropout_masks(net, (n_samples, x.shape[0]), keep_prob, rng)
    if masks is None:
        out = np.broadcast_to(forward(net, x), (n_samples,) + (x.shape[0], net.sizes[-1]))
    else:
        out = forward(net, x[None], dropout_mask=masks)
    out = np.asarray(out, dtype=np.float64)
    if net.head == "gaussian":
        out = split_gaussian(out)[0]
    mean, var = out.mean(axis=0), _sample_variance(out)
    if single:
        mean, var = mean[0], var[0]
    return PredictiveDistribution(mean, var)


def train_ensemble(policy, dataset, config, member_seeds=None):
    """Train every member on the full dataset with its own shuffle stream.

    Members are updated jointly but independently: each sees its own
    permutation of the data and has its own ADAM moments.
    """
    if config.epochs < 0:
        raise ConfigurationError("negative epoch count")
    net = train(policy.net, dataset, config, member_seeds=member_seeds)
    return EnsemblePolicy(net)
