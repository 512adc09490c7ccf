"""Disparity estimators, the observed-disparity decomposition, the
propensity-weighted error bound, and the sufficient-condition certificates.

Estimators run in two modes: over sampled transition records (anything with
``z``/``a``/``y_obs``/``y_tilde``/``y_true`` columns, e.g. a rollout buffer)
and, via :func:`exact_report`, over exact finite tables.  Both produce a
:class:`DisparityReport`.

Sign conventions: per-group prediction bias ``eps`` is signed (predicted
minus true, on the rejected population); the bound ``eps_bar`` applies to
its magnitude.  Binary disparities are reported signed (group 1 minus
group 0); with three or more groups the max-min spread is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    ConfigurationError,
    DecompositionError,
    EstimationError,
    NoDataError,
    NotionKind,
)


@dataclass
class DisparityReport:
    """Per-notion bundle of disparities, per-group terms and verdicts."""

    notion: NotionKind
    group_count: int
    delta_true: float = math.nan
    delta_accepted: float = math.nan
    delta_observed: float = math.nan
    mu_true: np.ndarray = field(default_factory=lambda: np.empty(0))
    mu_observed: np.ndarray = field(default_factory=lambda: np.empty(0))
    r: np.ndarray = field(default_factory=lambda: np.empty(0))
    eps: np.ndarray = field(default_factory=lambda: np.empty(0))
    eps_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    eps_bar: np.ndarray = field(default_factory=lambda: np.empty(0))
    phi_tilde: np.ndarray = field(default_factory=lambda: np.empty(0))
    kappa: np.ndarray = field(default_factory=lambda: np.empty(0))
    d2: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_accepted: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    v: float = math.nan
    disparity_ok: bool | None = None
    bias_ok: bool | None = None


def _spread(mu: np.ndarray) -> float:
    """Signed gap for two groups, max-min spread otherwise."""
    if mu.size == 2:
        return float(mu[1] - mu[0])
    return float(mu.max() - mu.min())


def _columns(records):
    if hasattr(records, "z"):
        return records
    import types

    cols = types.SimpleNamespace()
    cols.z = np.asarray([r.z for r in records], dtype=np.int64)
    cols.a = np.asarray([r.a for r in records], dtype=np.int64)
    cols.y_obs = np.asarray([-1 if r.y_obs is None else r.y_obs for r in records], dtype=np.int64)
    cols.y_tilde = np.asarray([r.y_tilde for r in records], dtype=np.int64)
    cols.y_true = np.asarray(
        [-1 if getattr(r, "y_true", None) is None else r.y_true for r in records], dtype=np.int64
    )
    return cols


def _group_count(z: np.ndarray, group_count: int | None) -> int:
    if group_count is not None:
        return group_count
    return int(z.max()) + 1 if z.size else 2


def _utilities(z, a, y, notion: NotionKind, g: int, label: str) -> np.ndarray:
    mu = np.empty(g)
    for i in range(g):
        mask = z == i
        if notion is NotionKind.OPPORTUNITY:
            mask = mask & (y == 1)
            if not mask.any():
                raise EstimationError(f"no records with {label}=1 for group {i}")
            mu[i] = np.mean(a[mask])
        elif notion is NotionKind.ACCURACY:
            if not mask.any():
                raise EstimationError(f"no records for group {i}")
            mu[i] = np.mean((y[mask] == a[mask]).astype(np.float64))
        else:
            if not mask.any():
                raise EstimationError(f"no records for group {i}")
            mu[i] = np.mean(y[mask])
    return mu


def disparity_true(records, notion: NotionKind, *, group_count: int | None = None) -> float:
    """Group utility gap with ground-truth labels (instrumented runs only)."""
    c = _columns(records)
    if (np.asarray(c.y_true) < 0).any():
        raise EstimationError("ground-truth labels are not available on every record")
    g = _group_count(c.z, group_count)
    return _spread(_utilities(c.z, c.a, np.asarray(c.y_true), notion, g, "Y"))


def disparity_observed(records, notion: NotionKind, *, group_count: int | None = None) -> float:
    """Same estimator over imputed labels (accept: true label, reject:
    predictor sample)."""
    c = _columns(records)
    g = _group_count(c.z, group_count)
    return _spread(_utilities(c.z, c.a, np.asarray(c.y_tilde), notion, g, "imputed Y"))


def disparity_accepted(records, notion: NotionKind, *, group_count: int | None = None) -> float:
    """Utility gap restricted to accepted records.  Identically zero for
    equality of opportunity regardless of the inputs."""
    if notion is NotionKind.OPPORTUNITY:
        return 0.0
    c = _columns(records)
    g = _group_count(c.z, group_count)
    keep = np.asarray(c.a) == 1
    z = np.asarray(c.z)[keep]
    y = np.asarray(c.y_obs)[keep]
    mu = np.empty(g)
    for i in range(g):
        mask = z == i
        if not mask.any():
            raise EstimationError(f"no accepted records for group {i}")
        # for accuracy the accepted-side utility 1{Y=A} reduces to Y
        mu[i] = np.mean(y[mask])
    return _spread(mu)


def decompose(records, notion: NotionKind, *, group_count: int | None = None) -> DisparityReport:
    """Full empirical report: rejection rates, rejected-population bias,
    imputed-positive rates and all three disparities.  Requires ground
    truth on every record (testing / instrumented mode)."""
    c = _columns(records)
    z = np.asarray(c.z)
    a = np.asarray(c.a)
    yt = np.asarray(c.y_true)
    yi = np.asarray(c.y_tilde)
    if (yt < 0).any():
        raise EstimationError("decompose needs ground-truth labels on every record")
    g = _group_count(z, group_count)
    rep = DisparityReport(notion=notion, group_count=g)
    rep.r = np.empty(g)
    rep.eps = np.empty(g)
    rep.phi_tilde = np.empty(g)
    rep.kappa = np.full(g, math.nan)
    rep.n_accepted = np.empty(g, dtype=np.int64)
    for i in range(g):
        mask = z == i
        if not mask.any():
            raise EstimationError(f"no records for group {i}")
        rej = mask & (a == 0)
        rep.r[i] = np.mean((a[mask] == 0).astype(np.float64))
        rep.eps[i] = np.mean((yi[rej] - yt[rej]).astype(np.float64)) if rej.any() else 0.0
        rep.phi_tilde[i] = np.mean((yi[mask] == 1).astype(np.float64))
        rep.n_accepted[i] = int(np.sum(mask & (a == 1)))
    if notion is NotionKind.OPPORTUNITY and (rep.phi_tilde <= 0).any():
        raise DecompositionError("imputed-positive rate is zero; kappa undefined")
    rep.mu_true = _utilities(z, a, yt, notion, g, "Y")
    rep.mu_observed = _utilities(z, a, yi, notion, g, "imputed Y")
    rep.delta_true = _spread(rep.mu_true)
    rep.delta_observed = _spread(rep.mu_observed)
    if notion is NotionKind.OPPORTUNITY:
        rep.kappa = 1.0 - rep.r * rep.eps / rep.phi_tilde
        rep.delta_accepted = 0.0
    else:
        rep.delta_accepted = disparity_accepted(records, notion, group_count=g)
    return rep


def exact_report(instance, notion: NotionKind) -> DisparityReport:
    """Closed-form report from exact tables via the per-group decomposition
    identities (observed utility = true utility shifted by the rejection
    bias).  ``instance`` needs ``group_prior``, ``g`` (feature marginals per
    group), ``alpha``, ``pi`` and ``phi`` rows per group.
    """
    gp = np.asarray(instance.group_prior, dtype=np.float64)
    ng = gp.size
    rep = DisparityReport(notion=notion, group_count=ng)
    rep.r = np.empty(ng)
    rep.eps = np.empty(ng)
    rep.phi_tilde = np.empty(ng)
    rep.kappa = np.full(ng, math.nan)
    rep.mu_true = np.empty(ng)
    mu_obs = np.empty(ng)
    mu_acc = np.empty(ng)
    for i in range(ng):
        gx = np.asarray(instance.g[i], dtype=np.float64)
        alpha = np.asarray(instance.alpha[i], dtype=np.float64)
        pi = np.asarray(instance.pi[i], dtype=np.float64)
        phi = np.asarray(instance.phi[i], dtype=np.float64)
        r = float(np.sum(gx * (1.0 - pi)))
        rep.r[i] = r
        rep.eps[i] = float(np.sum(gx * (1.0 - pi) * (phi - alpha)) / r) if r > 0 else 0.0
        rep.phi_tilde[i] = float(np.sum(gx * (pi * alpha + (1.0 - pi) * phi)))
        if notion is NotionKind.QUALIFICATION:
            rep.mu_true[i] = float(np.sum(gx * alpha))
            mu_obs[i] = rep.mu_true[i] + rep.r[i] * rep.eps[i]
            acc = float(np.sum(gx * pi))
            if acc <= 0:
                raise EstimationError(f"group {i} accepts nobody")
            mu_acc[i] = float(np.sum(gx * pi * alpha) / acc)
        elif notion is NotionKind.ACCURACY:
            rep.mu_true[i] = float(np.sum(gx * (pi * alpha + (1.0 - pi) * (1.0 - alpha))))
            mu_obs[i] = rep.mu_true[i] - rep.r[i] * rep.eps[i]
            acc = float(np.sum(gx * pi))
            if acc <= 0:
                raise EstimationError(f"group {i} accepts nobody")
            mu_acc[i] = float(np.sum(gx * pi * alpha) / acc)
        else:
            pos = float(np.sum(gx * alpha))
            if pos <= 0:
                raise EstimationError(f"group {i} has no positive labels")
            rep.mu_true[i] = float(np.sum(gx * alpha * pi) / pos)
            if rep.phi_tilde[i] <= 0:
                raise DecompositionError("imputed-positive rate is zero; kappa undefined")
            rep.kappa[i] = 1.0 - rep.r[i] * rep.eps[i] / rep.phi_tilde[i]
            mu_obs[i] = rep.mu_true[i] * rep.kappa[i]
            mu_acc[i] = 0.0
    rep.mu_observed = mu_obs
    rep.delta_true = _spread(rep.mu_true)
    rep.delta_observed = _spread(mu_obs)
    rep.delta_accepted = 0.0 if notion is NotionKind.OPPORTUNITY else _spread(mu_acc)
    return rep


def decomposition_identity(rep: DisparityReport) -> float:
    """Observed disparity reconstructed from the decomposition terms
    (binary groups): the counterpart of the directly-enumerated value."""
    if rep.group_count != 2:
        raise ConfigurationError("the equality decomposition is stated for binary groups")
    bias = rep.r[1] * rep.eps[1] - rep.r[0] * rep.eps[0]
    if rep.notion is NotionKind.QUALIFICATION:
        return rep.delta_true + bias
    if rep.notion is NotionKind.ACCURACY:
        return rep.delta_true - bias
    return float(rep.mu_true[1] * rep.kappa[1] - rep.mu_true[0] * rep.kappa[0])


def ipw_error_estimate(errors: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Self-normalized propensity-weighted mean of per-sample prediction
    errors; returns (estimate, standard error)."""
    errors = np.asarray(errors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if errors.size == 0:
        raise NoDataError("no samples for the weighted error estimate")
    total = weights.sum()
    if total <= 0:
        raise NoDataError("weights sum to zero")
    est = float(np.sum(weights * errors) / total)
    se = float(np.sqrt(np.sum(weights**2 * (errors - est) ** 2)) / total)
    return est, se


def error_bound(eps_hat: float, d2: float, n: int, pdim: float, delta_conf: float = 0.05) -> float:
    """High-probability bound on the rejected-population bias magnitude:
    |estimate| plus the divergence-scaled complexity term, saturated at the
    trivial bound of 1."""
    if n < 1:
        raise ConfigurationError("error_bound needs n >= 1")
    if d2 < 0 or pdim < 1 or not 0.0 < delta_conf < 1.0:
        raise ConfigurationError("bad error_bound parameters")
    complexity = (pdim * math.log(2.0 * n * math.e / pdim) + math.log(4.0 / delta_conf)) / n
    if complexity <= 0.0:
        # far outside the bound's regime (class dimension above sample size)
        return 1.0
    value = abs(eps_hat) + 2.0 ** 1.25 * math.sqrt(d2) * complexity**0.375
    return min(1.0, value)


def pdim_linear(input_dim: int) -> float:
    """Pseudo-dimension of the affine predictor class: input size plus one."""
    return float(input_dim + 1)


def pdim_relu(input_dim: int, hidden: int = 64) -> float:
    """W*L*log(W) scaling (unit constant) for the two-hidden-layer
    rectified-linear predictor."""
    w = input_dim * hidden + hidden + hidden * hidden + hidden + hidden + 1
    return float(w * 3 * math.log(w))


def check_conditions(
    notion: NotionKind,
    omega: float,
    r: np.ndarray,
    eps_bar: np.ndarray,
    phi_tilde: np.ndarray,
    delta_observed: float,
) -> tuple[bool, bool, bool]:
    """Observable sufficient conditions for |true disparity| <= omega using
    the per-group bias bounds.  Returns (disparity_ok, bias_ok, overall).
    For equality of opportunity the certificate is vacuous once
    v = max_i r_i*eps_bar_i/phi_tilde_i reaches 1."""
    if omega <= 0:
        raise ConfigurationError("omega must be positive")
    r = np.asarray(r, dtype=np.float64)
    eps_bar = np.abs(np.asarray(eps_bar, dtype=np.float64))
    if notion is NotionKind.OPPORTUNITY:
        phi_tilde = np.asarray(phi_tilde, dtype=np.float64)
        if (phi_tilde <= 0).any():
            return (False, False, False)
        terms = r * eps_bar / phi_tilde
        v = float(terms.max())
        if v >= 1.0:
            return (False, False, False)
        thr = (1.0 - v) * omega / 2.0
        bias_ok = bool(terms.sum() <= thr)
        disparity_ok = bool(abs(delta_observed) <= thr)
    else:
        bias_ok = bool(np.sum(r * eps_bar) <= omega / 2.0)
        disparity_ok = bool(abs(delta_observed) <= omega / 2.0)
    return (disparity_ok, bias_ok, disparity_ok and bias_ok)


def check_conditions_exact(
    notion: NotionKind,
    omega: float,
    r: np.ndarray,
    eps: np.ndarray,
    phi_tilde: np.ndarray,
    delta_observed: float,
) -> tuple[bool, bool, bool]:
    """Sufficient conditions with the true signed rejected-population bias
    (not observable in deployment; used by the exact-verification suite)."""
    if omega <= 0:
        raise ConfigurationError("omega must be positive")
    r = np.asarray(r, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if notion is NotionKind.OPPORTUNITY:
        phi_tilde = np.asarray(phi_tilde, dtype=np.float64)
        if (phi_tilde <= 0).any():
            return (False, False, False)
        terms = r * eps / phi_tilde
        v = float(terms.max())
        if v >= 1.0:
            return (False, False, False)
        thr = (1.0 - v) * omega / 2.0
        spread = abs(terms[1] - terms[0]) if terms.size == 2 else terms.max() - terms.min()
        bias_ok = bool(spread <= thr)
        disparity_ok = bool(abs(delta_observed) <= thr)
    else:
        terms = r * eps
        spread = abs(terms[1] - terms[0]) if terms.size == 2 else terms.max() - terms.min()
        bias_ok = bool(spread <= omega / 2.0)
        disparity_ok = bool(abs(delta_observed) <= omega / 2.0)
    return (disparity_ok, bias_ok, disparity_ok and bias_ok)


def multi_group_disparity(utilities: np.ndarray) -> float:
    """Max-min spread of per-group utilities (>= 2 groups)."""
    utilities = np.asarray(utilities, dtype=np.float64)
    if utilities.size < 2:
        raise ConfigurationError("need at least two groups")
    return float(utilities.max() - utilities.min())
