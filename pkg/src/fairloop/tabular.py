"""Exhaustive tabular evaluator: ground truth for the estimator suite.

A :class:`TabularInstance` pins exact finite distributions for one decision
round: group prior, per-group feature marginals, qualification, predictor
and a history of policies.  :func:`enumerate_report` computes every
population quantity by literal summation over all (group, point, label,
action, prediction) outcomes, independent of the estimator formulas it is
used to check.  :func:`random_instance` generates instances under named
constraints, including the accepted-disparity counterexample construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import EnvSpec, GenerationError, NotionKind
from .metrics import DisparityReport, _spread

MAX_POINTS = 50


@dataclass
class TabularInstance:
    """Exact distributions on a finite support (at most 50 points/group).

    ``history[k][z]`` is the acceptance-probability row of the k-th deployed
    policy; the last entry is the current policy (``pi``).
    """

    group_prior: np.ndarray
    g: list[np.ndarray]
    alpha: list[np.ndarray]
    phi: list[np.ndarray]
    history: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.group_prior = np.asarray(self.group_prior, dtype=np.float64)
        self.g = [np.asarray(row, dtype=np.float64) for row in self.g]
        self.alpha = [np.asarray(row, dtype=np.float64) for row in self.alpha]
        self.phi = [np.asarray(row, dtype=np.float64) for row in self.phi]
        self.history = [[np.asarray(row, dtype=np.float64) for row in k] for k in self.history]
        if abs(self.group_prior.sum() - 1.0) > 1e-12:
            raise GenerationError("group prior not normalized")
        for z, row in enumerate(self.g):
            if row.size > MAX_POINTS:
                raise GenerationError(f"support of group {z} exceeds {MAX_POINTS} points")
            if abs(row.sum() - 1.0) > 1e-12:
                raise GenerationError(f"feature marginal of group {z} not normalized")
        for table in (self.alpha, self.phi, *self.history):
            for row in table:
                if ((np.asarray(row) < 0) | (np.asarray(row) > 1)).any():
                    raise GenerationError("probability entry outside [0,1]")

    @property
    def group_count(self) -> int:
        return self.group_prior.size

    @property
    def pi(self) -> list[np.ndarray]:
        return self.history[-1]

    def cumulative_accept(self, z: int) -> np.ndarray:
        keep = np.ones_like(self.g[z])
        for k in range(len(self.history)):
            keep = keep * (1.0 - self.history[k][z])
        return 1.0 - keep


_OUTCOMES = [(y, a, yh) for y in (0, 1) for a in (0, 1) for yh in (0, 1)]


def enumerate_report(instance: TabularInstance, notion: NotionKind) -> DisparityReport:
    """Every population quantity by full outcome enumeration."""
    ng = instance.group_count
    rep = DisparityReport(notion=notion, group_count=ng)
    rep.r = np.empty(ng)
    rep.eps = np.empty(ng)
    rep.phi_tilde = np.empty(ng)
    rep.kappa = np.full(ng, np.nan)
    rep.mu_true = np.empty(ng)
    rep.d2 = np.empty(ng)
    mu_obs = np.empty(ng)
    mu_acc = np.empty(ng)
    for z in range(ng):
        gx = instance.g[z]
        alpha = instance.alpha[z]
        pi = instance.pi[z]
        phi = instance.phi[z]
        tot = {}
        for name in (
            "a", "y", "ya", "acc_match", "ytilde", "obs_match", "a_and_ypos",
            "a_and_ytildepos", "rej", "rej_err",
        ):
            tot[name] = 0.0
        for y, a, yh in _OUTCOMES:
            p = (
                gx
                * (alpha if y else 1.0 - alpha)
                * (pi if a else 1.0 - pi)
                * (phi if yh else 1.0 - phi)
            )
            mass = float(p.sum())
            ytilde = y if a else yh
            tot["a"] += mass * a
            tot["y"] += mass * y
            tot["ya"] += mass * (y and a)
            tot["acc_match"] += mass * (1 if y == a else 0)
            tot["ytilde"] += mass * ytilde
            tot["obs_match"] += mass * (1 if ytilde == a else 0)
            tot["a_and_ypos"] += mass * (a and y)
            tot["a_and_ytildepos"] += mass * (a and ytilde)
            tot["rej"] += mass * (1 - a)
            tot["rej_err"] += mass * (1 - a) * (yh - y)
        rep.r[z] = tot["rej"]
        rep.eps[z] = tot["rej_err"] / tot["rej"] if tot["rej"] > 0 else 0.0
        rep.phi_tilde[z] = tot["ytilde"]
        if tot["ytilde"] > 0 and tot["y"] > 0:
            # direct route: ratio of real to imputed positive mass
            rep.kappa[z] = tot["y"] / tot["ytilde"]
        if notion is NotionKind.QUALIFICATION:
            rep.mu_true[z] = tot["y"]
            mu_obs[z] = tot["ytilde"]
            mu_acc[z] = tot["ya"] / tot["a"] if tot["a"] > 0 else np.nan
        elif notion is NotionKind.ACCURACY:
            rep.mu_true[z] = tot["acc_match"]
            mu_obs[z] = tot["obs_match"]
            mu_acc[z] = tot["ya"] / tot["a"] if tot["a"] > 0 else np.nan
        else:
            rep.mu_true[z] = tot["a_and_ypos"] / tot["y"]
            mu_obs[z] = tot["a_and_ytildepos"] / tot["ytilde"]
            # literal E[a | y=1, a=1]: mass(a=1,y=1,a=1) / mass(y=1,a=1)
            mu_acc[z] = tot["ya"] / tot["ya"] if tot["ya"] > 0 else np.nan
        # exact divergence of rejected vs ever-accepted feature distributions
        cum = instance.cumulative_accept(z)
        a_cum = float(np.sum(gx * cum))
        if tot["rej"] > 0 and a_cum > 0 and (cum > 0).all():
            d_a = gx * cum / a_cum
            d_r = gx * (1.0 - pi) / tot["rej"]
            w = np.divide(d_r, d_a, out=np.zeros_like(d_a), where=d_a > 0)
            rep.d2[z] = float(np.sum(d_a * w * w))
        else:
            rep.d2[z] = np.nan
    rep.mu_observed = mu_obs
    rep.delta_true = _spread(rep.mu_true)
    rep.delta_observed = _spread(mu_obs)
    rep.delta_accepted = _spread(mu_acc)
    return rep


def exact_weight_curves(instance: TabularInstance, z: int):
    """Exact (D_A, D_R, w) rows for group ``z`` via the distribution ratio."""
    gx = instance.g[z]
    pi = instance.pi[z]
    cum = instance.cumulative_accept(z)
    a_cum = float(np.sum(gx * cum))
    r = float(np.sum(gx * (1.0 - pi)))
    d_a = gx * cum / a_cum
    d_r = gx * (1.0 - pi) / r
    w = np.divide(d_r, d_a, out=np.zeros_like(d_a), where=d_a > 0)
    return d_a, d_r, w, a_cum, r


def accepted_decomposition(instance: TabularInstance, notion: NotionKind):
    """The (mu*c, d) split of the accepted-population disparity for the
    label-dependent notions; used to validate the counterexample recipe."""
    ng = instance.group_count
    c = np.empty(ng)
    d = np.empty(ng)
    mu = np.empty(ng)
    for z in range(ng):
        gx, alpha, pi = instance.g[z], instance.alpha[z], instance.pi[z]
        a_rate = float(np.sum(gx * pi))
        pos = float(np.sum(gx * alpha))
        if notion is NotionKind.QUALIFICATION:
            mu[z] = pos
            c[z] = float(np.sum(gx * alpha * pi)) / pos / a_rate
            d[z] = 0.0
        elif notion is NotionKind.ACCURACY:
            mu[z] = float(np.sum(gx * (pi * alpha + (1 - pi) * (1 - alpha))))
            c[z] = 1.0 / a_rate
            d[z] = -float(np.sum(gx * (1 - alpha) * (1 - pi))) / a_rate
        else:
            mu[z] = float(np.sum(gx * alpha * pi)) / pos
            c[z] = 0.0
            d[z] = 0.0
    return mu, c, d


def _uniform_rows(rng, groups, m, lo, hi):
    return [rng.uniform(lo, hi, size=m) for _ in range(groups)]


def random_instance(
    rng: np.random.Generator,
    *,
    groups: int = 2,
    points: int | None = None,
    k_history: int = 1,
    constraint: str | None = None,
    notion: NotionKind = NotionKind.QUALIFICATION,
    omega: float = 0.05,
    margin: float = 0.0,
    max_tries: int = 500,
) -> TabularInstance:
    """Draw an instance, optionally satisfying a named constraint set.

    Constraints: ``None``/"overlap" (probabilities bounded away from 0/1, so
    every point has positive cumulative acceptance), "prop1_counterexample"
    (qualification parity: zero accepted-population disparity with true
    disparity above 0.05, built by matching the accepted-label rates across
    groups), "conditions_hold" (the exact sufficient conditions hold at
    ``omega``) and "conditions_hold_bar" (they hold with slack ``margin``
    added to each |bias|, for the observable-bound variant).
    """
    m = points if points is not None else int(rng.integers(2, 9))
    lo, hi = 0.05, 0.95

    def draw_prior():
        p = rng.dirichlet(np.ones(groups) * 3.0)
        return p / p.sum()

    if constraint in (None, "overlap"):
        g = [rng.dirichlet(np.ones(m)) for _ in range(groups)]
        history = [
            _uniform_rows(rng, groups, m, lo, hi) for _ in range(max(1, k_history))
        ]
        return TabularInstance(
            group_prior=draw_prior(),
            g=g,
            alpha=_uniform_rows(rng, groups, m, lo, hi),
            phi=_uniform_rows(rng, groups, m, lo, hi),
            history=history,
        )

    if constraint == "prop1_counterexample":
        if notion is not NotionKind.QUALIFICATION:
            raise GenerationError("counterexample recipe is for qualification parity")
        for _ in range(max_tries):
            g0 = rng.dirichlet(np.ones(2))
            alpha0 = np.sort(rng.uniform(lo, hi, size=2))[::-1]
            pi0 = rng.uniform(lo, hi, size=2)
            mu0 = float(g0 @ alpha0)
            target = float(np.sum(g0 * alpha0 * pi0) / np.sum(g0 * pi0))
            g1 = rng.dirichlet(np.ones(2))
            shift = rng.uniform(0.08, 0.25)
            alpha1 = np.clip(alpha0 + shift, 0.0, 1.0)
            mu1 = float(g1 @ alpha1)
            if abs(mu1 - mu0) <= 0.055:
                continue
            pb = rng.uniform(lo, hi)
            # solve the group-1 acceptance prob at point a so that
            # P(Y=1 | accepted) matches group 0 exactly (linear in q)
            c1 = g1[0] * alpha1[0]
            c2 = (1 - g1[0]) * alpha1[1] * pb
            c3 = g1[0]
            c4 = (1 - g1[0]) * pb
            denom = c1 - target * c3
            if abs(denom) < 1e-9:
                continue
            q = (target * c4 - c2) / denom
            if not lo < q < hi:
                continue
            pi1 = np.array([q, pb])
            inst = TabularInstance(
                group_prior=draw_prior(),
                g=[g0, g1],
                alpha=[alpha0, alpha1],
                phi=_uniform_rows(rng, 2, 2, lo, hi),
                history=[[pi0, pi1]],
            )
            rep = enumerate_report(inst, NotionKind.QUALIFICATION)
            if abs(rep.delta_accepted) < 1e-12 and abs(rep.delta_true) > 0.05:
                return inst
        raise GenerationError("could not construct the counterexample instance")

    if constraint in ("conditions_hold", "conditions_hold_bar"):
        from . import metrics as _metrics

        scale = omega / 16.0 if constraint == "conditions_hold_bar" else omega / 10.0
        for _ in range(max_tries):
            base_g = rng.dirichlet(np.ones(m))
            base_alpha = rng.uniform(0.2, 0.8, size=m)
            base_pi = rng.uniform(0.2, 0.8, size=m)
            g, alpha, phi, pi = [], [], [], []
            for _z in range(groups):
                gz = np.clip(base_g + rng.uniform(-1, 1, m) * scale / m, 1e-4, None)
                g.append(gz / gz.sum())
                az = np.clip(base_alpha + rng.uniform(-1, 1, m) * scale, 0.01, 0.99)
                alpha.append(az)
                phi.append(np.clip(az + rng.uniform(-1, 1, m) * scale, 0.01, 0.99))
                pi.append(np.clip(base_pi + rng.uniform(-1, 1, m) * scale, 0.05, 0.95))
            inst = TabularInstance(
                group_prior=draw_prior(), g=g, alpha=alpha, phi=phi, history=[pi]
            )
            rep = _metrics.exact_report(inst, notion)
            if constraint == "conditions_hold":
                ok = _metrics.check_conditions_exact(
                    notion, omega, rep.r, rep.eps, rep.phi_tilde, rep.delta_observed
                )[2]
            else:
                ok = _metrics.check_conditions(
                    notion, omega, rep.r, np.abs(rep.eps) + margin, rep.phi_tilde, rep.delta_observed
                )[2]
            if ok:
                return inst
        raise GenerationError(f"could not satisfy constraint {constraint!r} at omega={omega}")

    raise GenerationError(f"unknown constraint {constraint!r}")


def sample_outcomes(instance: TabularInstance, n: int, rng: np.random.Generator):
    """Vectorized i.i.d. draws of (z, point, y, a, yhat) from the instance;
    returns column arrays shaped like a rollout buffer (selective y_obs)."""
    import types

    ng = instance.group_count
    z = rng.choice(ng, size=n, p=instance.group_prior)
    x = np.empty(n, dtype=np.int64)
    for i in range(ng):
        mask = z == i
        k = int(mask.sum())
        if k:
            x[mask] = rng.choice(instance.g[i].size, size=k, p=instance.g[i])
    u = rng.random((n, 3))
    alpha = np.empty(n)
    pi = np.empty(n)
    phi = np.empty(n)
    for i in range(ng):
        mask = z == i
        alpha[mask] = instance.alpha[i][x[mask]]
        pi[mask] = instance.pi[i][x[mask]]
        phi[mask] = instance.phi[i][x[mask]]
    a = (u[:, 0] < pi).astype(np.int8)
    y = (u[:, 1] < alpha).astype(np.int8)
    yhat = (u[:, 2] < phi).astype(np.int8)
    cols = types.SimpleNamespace()
    cols.z = z.astype(np.int8)
    cols.a = a
    cols.y_true = y
    cols.y_obs = np.where(a == 1, y, -1).astype(np.int8)
    cols.y_tilde = np.where(a == 1, y, yhat).astype(np.int8)
    cols.x = x
    return cols


def as_env(instance: TabularInstance, *, cost: float = 0.5, pool_size: int = 5000):
    """Wrap an instance as a static environment (identity transitions) plus
    per-state policy/predictor evaluators keyed on the one-hot encoding.
    Lets the pool simulator run an exact instance for cross-checks."""
    ng = instance.group_count
    sizes = [instance.g[z].size for z in range(ng)]
    dim = max(sizes)

    def encode(point):
        v = np.zeros(dim)
        v[point[0]] = 1.0
        return v

    def check(point, z):
        if not 0 <= point[0] < sizes[z]:
            from .mdp import DomainError

            raise DomainError(f"point {point} outside support of group {z}")

    env = EnvSpec(
        name="tabular",
        group_count=ng,
        group_prior=instance.group_prior,
        support=[[(i,) for i in range(sizes[z])] for z in range(ng)],
        init_probs=[instance.g[z] for z in range(ng)],
        cost_c=cost,
        feature_dim=dim,
        transition_fn=lambda point, z, a, y: point,
        encode_fn=encode,
        check_fn=check,
        alpha_table={
            (z, (i,)): float(instance.alpha[z][i]) for z in range(ng) for i in range(sizes[z])
        },
        pool_size=pool_size,
    )

    def table_fn(table):
        def fn(enc):
            pts = enc[:, :dim].argmax(axis=1)
            zs = enc[:, dim:].argmax(axis=1)
            return np.array([table[z][p] for z, p in zip(zs, pts)])

        return fn

    return env, table_fn(instance.pi), table_fn(instance.phi)
