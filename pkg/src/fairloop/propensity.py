"""Propensity bookkeeping across policy iterations.

The distribution of samples labelled so far ("ever accepted under any
deployed policy") differs from the distribution the current policy rejects.
The importance weight

    w(x, i) = (a_cum_i / r_i) * (1 - pi_now(x, i)) / (1 - prod_k (1 - pi_k(x, i)))

moves expectations from the accepted onto the rejected population, with
``a_cum_i`` the empirical ever-accepted rate and ``r_i`` the current
rejection rate of group i.  For tractability the product runs over the
current policy plus a per-iteration subsample of at most ``subsample_size``
previous snapshots.

When the cumulative acceptance probability collapses (the overlap
assumption is violated, e.g. by the hard-threshold action rule) the
denominator is clamped at ``OVERLAP_FLOOR`` and the event is counted
instead of crashing the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import ConfigurationError, NoDataError
from .nets import Net, prob

OVERLAP_FLOOR = 1e-6


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen policy parameters at one learning iteration."""

    iteration: int
    net: Net

    def probs(self, enc: np.ndarray) -> np.ndarray:
        return prob(self.net, enc)


@dataclass
class PolicyHistory:
    """Append-only sequence of deployed policies."""

    subsample_size: int = 10
    snapshots: list[PolicySnapshot] = field(default_factory=list)

    def push(self, iteration: int, net: Net) -> None:
        if self.snapshots and iteration <= self.snapshots[-1].iteration:
            raise ConfigurationError("snapshot iterations must be strictly increasing")
        self.snapshots.append(PolicySnapshot(iteration, net.copy()))

    def __len__(self) -> int:
        return len(self.snapshots)

    def subsample_previous(self, rng: np.random.Generator) -> list[PolicySnapshot]:
        """Up to ``subsample_size`` distinct previous snapshots (the current
        policy, i.e. the last snapshot, always participates separately)."""
        prev = self.snapshots[:-1]
        if len(prev) <= self.subsample_size:
            return list(prev)
        idx = rng.choice(len(prev), size=self.subsample_size, replace=False)
        return [prev[i] for i in sorted(idx)]


def survival_product(prev_probs: np.ndarray | None) -> np.ndarray:
    """prod_k (1 - pi_k(x)) over the sampled previous snapshots; rows are
    snapshots, columns states.  ``None``/empty means no previous policies."""
    if prev_probs is None or len(prev_probs) == 0:
        return np.asarray(1.0)
    prev_probs = np.atleast_2d(np.asarray(prev_probs, dtype=np.float64))
    return np.prod(1.0 - prev_probs, axis=0)


def cumulative_accept_prob(pi_now: np.ndarray, prev_probs: np.ndarray | None = None) -> np.ndarray:
    """P(accepted at least once) under the current policy and the sampled
    previous snapshots: 1 - (1 - pi_now) * prod_k (1 - pi_k)."""
    pi_now = np.asarray(pi_now, dtype=np.float64)
    return 1.0 - survival_product(prev_probs) * (1.0 - pi_now)


def weight(
    pi_now: np.ndarray,
    prev_probs: np.ndarray | None,
    accept_rate_cum: float,
    reject_rate: float,
) -> tuple[np.ndarray, int]:
    """Importance weights for states with current acceptance probabilities
    ``pi_now``; returns (weights, overlap-floor event count).

    With ``reject_rate`` zero there is no rejected population and the
    weights are identically zero.
    """
    pi_now = np.asarray(pi_now, dtype=np.float64)
    if reject_rate <= 0.0:
        return np.zeros_like(pi_now), 0
    denom = cumulative_accept_prob(pi_now, prev_probs)
    floored = int(np.sum(denom < OVERLAP_FLOOR))
    denom = np.maximum(denom, OVERLAP_FLOOR)
    w = (accept_rate_cum / reject_rate) * (1.0 - pi_now) / denom
    return w, floored


def renyi_d2(weights: np.ndarray) -> float:
    """Second-moment divergence estimate: mean of squared weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise NoDataError("no weights for the divergence estimate")
    return float(np.mean(weights**2))


def self_normalize(weights: np.ndarray) -> np.ndarray:
    """Scale a group's weights to sum to one."""
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise NoDataError("weights sum to zero")
    return weights / total
