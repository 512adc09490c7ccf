"""Pool-based decision-process simulator.

The environment is a population pool of individuals, each carrying a group
id ``z`` and a feature point.  Every step one individual is drawn uniformly,
a binary accept/reject action is sampled from the policy, a binary label is
sampled from the environment's qualification model, the reward ``a*(y-c)``
is paid, and the individual's features move through the transition rule
before the individual returns to the pool.

Labels are selective: the true label is attached to a record only when the
action was accept.  Rejected records carry an imputed label sampled from the
predictor.  Ground-truth annotations (per-record label and the exact pool
disparity) are written only when the run is explicitly instrumented, and
nothing in the non-instrumented path reads them.

Feature points are interned in a :class:`StateRegistry`; policy, predictor
and qualification probabilities are cached per unique (group, point) state,
which makes the per-step cost a handful of array lookups.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class FairloopError(Exception):
    """Base error for the package."""


class ConfigurationError(FairloopError):
    """Invalid configuration value (cost outside (0,1), bad dims, ...)."""


class DomainError(FairloopError):
    """Feature point outside the environment's feature domain."""


class EstimationError(FairloopError):
    """A disparity estimator hit an empty conditioning cell."""


class DecompositionError(FairloopError):
    """Decomposition undefined (imputed-positive rate is zero for EO)."""


class NoDataError(FairloopError):
    """An estimator received no samples; callers substitute a worst case."""


class LoadError(FairloopError):
    """Environment data file failed validation."""


class GenerationError(FairloopError):
    """Random-instance generation could not satisfy its constraints."""


class NotionKind(Enum):
    """Fairness notion: which group utility is compared.

    qualification: E[Y | Z=i]; accuracy: E[1{Y=A} | Z=i];
    opportunity:   E[A | Y=1, Z=i] (true-positive rate).
    """

    QUALIFICATION = "qualification"
    ACCURACY = "accuracy"
    OPPORTUNITY = "opportunity"

    @classmethod
    def parse(cls, name: str) -> "NotionKind":
        try:
            return cls(name)
        except ValueError:
            raise ConfigurationError(f"unknown fairness notion {name!r}") from None


def reward(y: int, a: int, c: float) -> float:
    """Decision reward a*(y-c); support {0, 1-c, -c}."""
    if not 0.0 < c < 1.0:
        raise ConfigurationError(f"acceptance cost must be in (0,1), got {c}")
    return a * (y - c)


@dataclass
class EnvSpec:
    """Full generative description of one environment.

    ``support[z]`` lists the initial feature points of group ``z`` (points are
    hashable tuples), ``init_probs[z]`` their probabilities.  ``alpha_table``
    maps (z, point) to a qualification probability, or ``alpha_logistic``
    holds (weights, bias) applied to the encoded features plus the raw group
    scalar.  ``transition_fn(point, z, a, y)`` returns the next point and
    ``encode_fn(point)`` the real-valued feature vector.
    """

    name: str
    group_count: int
    group_prior: np.ndarray
    support: list[list[tuple]]
    init_probs: list[np.ndarray]
    cost_c: float
    feature_dim: int
    transition_fn: object
    encode_fn: object
    check_fn: object  # (point, z) -> None or raise DomainError
    alpha_table: dict | None = None
    alpha_logistic: tuple[np.ndarray, float] | None = None
    pool_size: int = 5000

    def __post_init__(self):
        self.group_prior = np.asarray(self.group_prior, dtype=np.float64)
        if abs(self.group_prior.sum() - 1.0) > 1e-9:
            raise LoadError(f"group prior sums to {self.group_prior.sum()}, not 1")
        if not 0.0 < self.cost_c < 1.0:
            raise ConfigurationError(f"cost {self.cost_c} outside (0,1)")
        for z, probs in enumerate(self.init_probs):
            s = float(np.sum(probs))
            if abs(s - 1.0) > 1e-9:
                raise LoadError(f"init distribution of group {z} sums to {s}, not 1")

    @property
    def input_dim(self) -> int:
        """Network input width: features plus one-hot group."""
        return self.feature_dim + self.group_count

    def alpha_of(self, point: tuple, z: int) -> float:
        if self.alpha_table is not None:
            try:
                return self.alpha_table[(z, point)]
            except KeyError:
                raise DomainError(f"no qualification entry for group {z} point {point}") from None
        w, b = self.alpha_logistic
        x = self.encode_fn(point)
        logit = float(x @ w[:-1] + z * w[-1] + b)
        return 1.0 / (1.0 + np.exp(-logit))


class StateRegistry:
    """Interns (group, point) states and caches per-state quantities."""

    def __init__(self, env: EnvSpec):
        self.env = env
        self.index: dict[tuple, int] = {}
        self.points: list[tuple] = []
        self.z = np.empty(0, dtype=np.int8)
        self.enc = np.empty((0, env.input_dim), dtype=np.float64)
        self.alpha = np.empty(0, dtype=np.float64)
        self._trans: dict[tuple, int] = {}
        for z in range(env.group_count):
            for point in env.support[z]:
                self.add(point, z)

    def __len__(self) -> int:
        return len(self.points)

    def add(self, point: tuple, z: int) -> int:
        key = (z, point)
        idx = self.index.get(key)
        if idx is not None:
            return idx
        self.env.check_fn(point, z)
        idx = len(self.points)
        self.index[key] = idx
        self.points.append(point)
        row = np.zeros(self.env.input_dim)
        row[: self.env.feature_dim] = self.env.encode_fn(point)
        row[self.env.feature_dim + z] = 1.0
        self.enc = np.vstack([self.enc, row[None, :]])
        self.z = np.append(self.z, np.int8(z))
        self.alpha = np.append(self.alpha, self.env.alpha_of(point, z))
        return idx

    def next_state(self, idx: int, a: int, y: int) -> int:
        key = (idx, a, y)
        nxt = self._trans.get(key)
        if nxt is None:
            z = int(self.z[idx])
            nxt = self.add(self.env.transition_fn(self.points[idx], z, a, y), z)
            self._trans[key] = nxt
        return nxt


class StateCache:
    """Per-state policy/predictor acceptance probabilities.

    ``refresh`` re-evaluates both functions over the whole registry (call it
    whenever parameters change); ``ensure`` extends the arrays lazily when
    the registry grew mid-rollout.
    """

    def __init__(self, registry: StateRegistry, policy_fn, predictor_fn):
        self.registry = registry
        self.policy_fn = policy_fn
        self.predictor_fn = predictor_fn
        self.pi = np.empty(0)
        self.phi = np.empty(0)
        self.refresh()

    def refresh(self) -> None:
        enc = self.registry.enc
        self.pi = np.asarray(self.policy_fn(enc), dtype=np.float64)
        self.phi = np.asarray(self.predictor_fn(enc), dtype=np.float64)

    def ensure(self) -> None:
        n = len(self.registry)
        if self.pi.size < n:
            enc = self.registry.enc[self.pi.size : n]
            self.pi = np.append(self.pi, self.policy_fn(enc))
            self.phi = np.append(self.phi, self.predictor_fn(enc))


@dataclass
class Individual:
    """One pool member; ``x`` is the encoded feature vector."""

    id: int
    z: int
    x: np.ndarray


@dataclass
class TransitionRecord:
    """One rollout step as seen by the learner.

    ``y_obs`` is present exactly when ``a == 1``.  ``y_true`` and
    ``delta_true`` are ground-truth annotations present only on instrumented
    runs; learners other than the oracle variant must not read them.
    """

    z: int
    x: np.ndarray
    a: int
    y_obs: int | None
    y_tilde: int
    reward: float
    x_next: np.ndarray
    pi_behavior: float
    delta_tilde_running: float
    t: int
    episode: int
    delta_accepted_running: float = 0.0
    y_true: int | None = None
    delta_true: float = float("nan")


class RolloutBuffer:
    """Column-oriented window of transition records.

    ``delta_true`` is the running empirical disparity with ground-truth
    labels (the oracle counterpart of ``delta_obs``); ``delta_true_pool``
    is the exact population disparity of the current pool.  Both are
    filled only on instrumented runs.
    """

    __slots__ = (
        "key", "z", "a", "y_obs", "y_tilde", "y_true", "reward", "next_key",
        "pi_behavior", "delta_obs", "delta_acc", "delta_true", "delta_true_pool",
        "t", "episode", "n",
    )

    def __init__(self, n: int):
        self.n = n
        self.key = np.empty(n, dtype=np.int32)
        self.z = np.empty(n, dtype=np.int8)
        self.a = np.empty(n, dtype=np.int8)
        self.y_obs = np.full(n, -1, dtype=np.int8)
        self.y_tilde = np.empty(n, dtype=np.int8)
        self.y_true = np.full(n, -1, dtype=np.int8)
        self.reward = np.empty(n, dtype=np.float64)
        self.next_key = np.empty(n, dtype=np.int32)
        self.pi_behavior = np.empty(n, dtype=np.float64)
        self.delta_obs = np.empty(n, dtype=np.float64)
        self.delta_acc = np.empty(n, dtype=np.float64)
        self.delta_true = np.full(n, np.nan, dtype=np.float64)
        self.delta_true_pool = np.full(n, np.nan, dtype=np.float64)
        self.t = np.empty(n, dtype=np.int64)
        self.episode = np.empty(n, dtype=np.int64)

    def row(self, i: int, registry: StateRegistry) -> TransitionRecord:
        env = registry.env
        d = env.feature_dim
        return TransitionRecord(
            z=int(self.z[i]),
            x=registry.enc[self.key[i], :d].copy(),
            a=int(self.a[i]),
            y_obs=None if self.y_obs[i] < 0 else int(self.y_obs[i]),
            y_tilde=int(self.y_tilde[i]),
            reward=float(self.reward[i]),
            x_next=registry.enc[self.next_key[i], :d].copy(),
            pi_behavior=float(self.pi_behavior[i]),
            delta_tilde_running=float(self.delta_obs[i]),
            t=int(self.t[i]),
            episode=int(self.episode[i]),
            delta_accepted_running=float(self.delta_acc[i]),
            y_true=None if self.y_true[i] < 0 else int(self.y_true[i]),
            delta_true=float(self.delta_true[i]),
        )


class Memory:
    """Cross-iteration buffer of accepted, labelled samples."""

    def __init__(self):
        self._cap = 1024
        self.key = np.empty(self._cap, dtype=np.int32)
        self.z = np.empty(self._cap, dtype=np.int8)
        self.y = np.empty(self._cap, dtype=np.int8)
        self.iteration = np.empty(self._cap, dtype=np.int32)
        self.n = 0

    def _grow(self, need: int) -> None:
        while self._cap < need:
            self._cap *= 2
        for name in ("key", "z", "y", "iteration"):
            old = getattr(self, name)
            new = np.empty(self._cap, dtype=old.dtype)
            new[: self.n] = old[: self.n]
            setattr(self, name, new)

    def append_batch(self, key, z, y, iteration: int) -> None:
        k = len(key)
        if self.n + k > self._cap:
            self._grow(self.n + k)
        sl = slice(self.n, self.n + k)
        self.key[sl] = key
        self.z[sl] = z
        self.y[sl] = y
        self.iteration[sl] = iteration
        self.n += k

    def group_count_of(self, z: int) -> int:
        return int(np.sum(self.z[: self.n] == z))


@dataclass
class RunState:
    """Mutable simulation state confined to one worker."""

    env: EnvSpec
    registry: StateRegistry
    pool_key: np.ndarray
    pool_z: np.ndarray
    ever_accepted: np.ndarray
    state_count: np.ndarray
    rng: np.random.Generator
    seed: int
    resource: float = 1000.0
    reward_sum: float = 0.0
    step: int = 0

    def individual(self, j: int) -> Individual:
        d = self.env.feature_dim
        return Individual(id=j, z=int(self.pool_z[j]), x=self.registry.enc[self.pool_key[j], :d].copy())

    def accepted_fraction(self, z: int) -> float:
        mask = self.pool_z == z
        if not mask.any():
            return 0.0
        return float(np.mean(self.ever_accepted[mask]))

    def counts_vector(self) -> np.ndarray:
        out = np.zeros(len(self.registry), dtype=np.int64)
        out[: self.state_count.size] = self.state_count
        return out


def init_run(env: EnvSpec, seed: int) -> RunState:
    rng = np.random.default_rng(seed)
    registry = StateRegistry(env)
    n = env.pool_size
    pool_z = rng.choice(env.group_count, size=n, p=env.group_prior).astype(np.int8)
    pool_key = np.empty(n, dtype=np.int32)
    for z in range(env.group_count):
        mask = pool_z == z
        m = int(mask.sum())
        if m == 0:
            continue
        picks = rng.choice(len(env.support[z]), size=m, p=env.init_probs[z])
        base = [registry.index[(z, env.support[z][i])] for i in range(len(env.support[z]))]
        pool_key[mask] = np.asarray(base, dtype=np.int32)[picks]
    state_count = np.bincount(pool_key, minlength=len(registry)).astype(np.int64)
    return RunState(
        env=env,
        registry=registry,
        pool_key=pool_key,
        pool_z=pool_z,
        ever_accepted=np.zeros(n, dtype=bool),
        state_count=state_count,
        rng=rng,
        seed=seed,
    )


class _PoolAggregates:
    """Exact per-group utility aggregates over the current pool.

    Updated in O(1) per transition; used for the instrumented ground-truth
    disparity trace and the oracle-penalty variant.
    """

    def __init__(self, run: RunState, pi: np.ndarray):
        reg = run.registry
        self.registry = reg
        counts = run.counts_vector().astype(np.float64)
        alpha = reg.alpha
        acc_util = pi * alpha + (1.0 - pi) * (1.0 - alpha)
        g = run.env.group_count
        self.g = g
        self.alpha = reg.alpha
        self.pi = pi
        self.acc_util = acc_util
        self.n = [0.0] * g
        self.s_alpha = [0.0] * g
        self.s_acc = [0.0] * g
        self.s_alphapi = [0.0] * g
        for z in range(g):
            mask = reg.z == z
            self.n[z] = float(counts[mask].sum())
            self.s_alpha[z] = float((counts * alpha)[mask].sum())
            self.s_acc[z] = float((counts * acc_util)[mask].sum())
            self.s_alphapi[z] = float((counts * alpha * pi)[mask].sum())

    def ensure(self, size: int, pi: np.ndarray) -> None:
        if self.pi.size < size:
            # the registry grew: its alpha array was reallocated
            self.alpha = self.registry.alpha
            self.pi = pi
            self.acc_util = pi * self.alpha + (1.0 - pi) * (1.0 - self.alpha)

    def move(self, z: int, s_old: int, s_new: int) -> None:
        alpha = self.alpha
        pi = self.pi
        self.s_alpha[z] += alpha[s_new] - alpha[s_old]
        self.s_acc[z] += self.acc_util[s_new] - self.acc_util[s_old]
        self.s_alphapi[z] += alpha[s_new] * pi[s_new] - alpha[s_old] * pi[s_old]

    def disparity(self, notion: NotionKind) -> float:
        if notion is NotionKind.QUALIFICATION:
            mu = [self.s_alpha[i] / self.n[i] for i in range(self.g)]
        elif notion is NotionKind.ACCURACY:
            mu = [self.s_acc[i] / self.n[i] for i in range(self.g)]
        else:
            mu = [
                self.s_alphapi[i] / self.s_alpha[i] if self.s_alpha[i] > 0 else 0.0
                for i in range(self.g)
            ]
        if self.g == 2:
            return mu[1] - mu[0]
        return max(mu) - min(mu)


def collect_rollout(
    run: RunState,
    cache: StateCache,
    notion: NotionKind,
    n_steps: int,
    *,
    episode_base: int = 0,
    episode_steps: int | None = None,
    memory: Memory | None = None,
    iteration: int = 0,
    semi_stochastic: bool = False,
    instrument: bool = False,
) -> RolloutBuffer:
    """Simulate ``n_steps`` pool draws under the cached policy/predictor.

    Running disparity counters reset at every episode boundary
    (``episode_steps`` per episode; default one episode for the whole
    call).  Accepted samples are appended to ``memory``.  With
    ``instrument`` the true label, the running ground-truth disparity and
    the exact pool disparity are written into every record.
    """
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    if episode_steps is None:
        episode_steps = n_steps
    if episode_steps < 1:
        raise ConfigurationError("episode_steps must be >= 1")
    env = run.env
    reg = run.registry
    cache.ensure()
    if run.pool_key.size == 0:
        raise ConfigurationError("pool is empty")

    buf = RolloutBuffer(n_steps)
    rng = run.rng
    pool_idx = rng.integers(0, run.pool_key.size, size=n_steps)
    u = rng.random((n_steps, 3))

    c = env.cost_c
    g = env.group_count
    # running observed / accepted-only / ground-truth counters, reset per episode
    obs_num = [0.0] * g
    obs_den = [0] * g
    acc_num = [0.0] * g
    acc_den = [0] * g
    tru_num = [0.0] * g
    tru_den = [0] * g
    obs_groups = 0
    acc_groups = 0
    tru_groups = 0
    episode = episode_base
    steps_in_episode = 0
    agg = _PoolAggregates(run, cache.pi) if instrument else None

    acc_keys: list[int] = []
    acc_z: list[int] = []
    acc_y: list[int] = []

    pool_key = run.pool_key
    pool_z = run.pool_z
    ever = run.ever_accepted
    counts = run.state_count
    opportunity = notion is NotionKind.OPPORTUNITY
    accuracy = notion is NotionKind.ACCURACY

    for i in range(n_steps):
        if steps_in_episode == episode_steps:
            episode += 1
            steps_in_episode = 0
            obs_num = [0.0] * g
            obs_den = [0] * g
            acc_num = [0.0] * g
            acc_den = [0] * g
            tru_num = [0.0] * g
            tru_den = [0] * g
            obs_groups = 0
            acc_groups = 0
            tru_groups = 0
        steps_in_episode += 1
        j = pool_idx[i]
        s = pool_key[j]
        z = pool_z[j]
        p_pi = cache.pi[s]
        if semi_stochastic and p_pi < 0.25:
            a = 0
        else:
            a = 1 if u[i, 0] < p_pi else 0
        y = 1 if u[i, 1] < reg.alpha[s] else 0
        yhat = 1 if u[i, 2] < cache.phi[s] else 0
        ytilde = y if a else yhat
        r = (y - c) if a else 0.0
        run.reward_sum += r
        run.resource += r

        s2 = reg.next_state(s, a, y)
        if s2 >= counts.size:
            counts = np.append(counts, np.zeros(len(reg) - counts.size, dtype=np.int64))
            run.state_count = counts
            cache.ensure()
            if agg is not None:
                agg.ensure(cache.pi.size, cache.pi)
        counts[s] -= 1
        counts[s2] += 1
        pool_key[j] = s2
        if a:
            ever[j] = True
            acc_keys.append(int(s))
            acc_z.append(int(z))
            acc_y.append(y)

        # observed (imputed-label) utility counters
        if opportunity:
            if ytilde == 1:
                obs_num[z] += a
                if obs_den[z] == 0:
                    obs_groups += 1
                obs_den[z] += 1
        elif accuracy:
            obs_num[z] += 1 if ytilde == a else 0
            if obs_den[z] == 0:
                obs_groups += 1
            obs_den[z] += 1
        else:
            obs_num[z] += ytilde
            if obs_den[z] == 0:
                obs_groups += 1
            obs_den[z] += 1
        # accepted-population utility counters (always 0 for opportunity)
        if a and not opportunity:
            acc_num[z] += y
            if acc_den[z] == 0:
                acc_groups += 1
            acc_den[z] += 1

        if obs_groups == g:
            if g == 2:
                d_obs = obs_num[1] / obs_den[1] - obs_num[0] / obs_den[0]
            else:
                mu = [obs_num[i] / obs_den[i] for i in range(g)]
                d_obs = max(mu) - min(mu)
        else:
            d_obs = 0.0
        if opportunity:
            d_acc = 0.0
        elif acc_groups == g:
            if g == 2:
                d_acc = acc_num[1] / acc_den[1] - acc_num[0] / acc_den[0]
            else:
                mu = [acc_num[i] / acc_den[i] for i in range(g)]
                d_acc = max(mu) - min(mu)
        else:
            d_acc = 0.0

        buf.key[i] = s
        buf.z[i] = z
        buf.a[i] = a
        buf.y_tilde[i] = ytilde
        buf.reward[i] = r
        buf.next_key[i] = s2
        buf.pi_behavior[i] = p_pi
        buf.delta_obs[i] = d_obs
        buf.delta_acc[i] = d_acc
        buf.t[i] = run.step
        buf.episode[i] = episode
        if a:
            buf.y_obs[i] = y
        if instrument:
            agg.move(z, s, s2)
            buf.y_true[i] = y
            buf.delta_true_pool[i] = agg.disparity(notion)
            # running empirical disparity with ground-truth labels
            if opportunity:
                if y == 1:
                    tru_num[z] += a
                    if tru_den[z] == 0:
                        tru_groups += 1
                    tru_den[z] += 1
            else:
                tru_num[z] += (1 if y == a else 0) if accuracy else y
                if tru_den[z] == 0:
                    tru_groups += 1
                tru_den[z] += 1
            if tru_groups == g:
                if g == 2:
                    buf.delta_true[i] = tru_num[1] / tru_den[1] - tru_num[0] / tru_den[0]
                else:
                    mu = [tru_num[q] / tru_den[q] for q in range(g)]
                    buf.delta_true[i] = max(mu) - min(mu)
            else:
                buf.delta_true[i] = 0.0
        run.step += 1

    if memory is not None and acc_keys:
        memory.append_batch(
            np.asarray(acc_keys, dtype=np.int32),
            np.asarray(acc_z, dtype=np.int8),
            np.asarray(acc_y, dtype=np.int8),
            iteration,
        )
    return buf


def sample_step(
    run: RunState,
    cache: StateCache,
    notion: NotionKind = NotionKind.QUALIFICATION,
    *,
    instrument: bool = False,
) -> TransitionRecord:
    """Single simulation step; see :func:`collect_rollout`."""
    buf = collect_rollout(run, cache, notion, 1, instrument=instrument)
    return buf.row(0, run.registry)
