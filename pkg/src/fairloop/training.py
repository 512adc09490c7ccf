"""Training algorithms: clipped policy gradient with advantage
regularization, the divergence-regularized selective-labels variant, and
propensity-weighted predictor fitting.

Algorithm ids name the disparity signal driving the advantage penalty:

* ``ppo``                 -- reward only, no penalty;
* ``reg_accepted``        -- penalty on the accepted-population disparity at
                             threshold omega, plus a second term charging
                             per-step disparity increases (weight beta2);
* ``reg_oracle``          -- same penalty form on the exact pool disparity
                             (requires the instrumented simulator);
* ``reg_imputed``         -- penalty on the imputed-label disparity at
                             threshold omega/2, divergence regularizer
                             weighted by beta2, and propensity-weighted
                             predictor training;
* ``reg_imputed_semisto`` -- reg_imputed with the hard-threshold action rule
                             (reject below 0.25, sample above).

One learning iteration collects a 2048-step window, snapshots the deployed
policy, refits the predictor on the accepted-sample memory, then runs the
clipped-surrogate updates over shuffled minibatches.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics as M
from . import propensity as P
from .mdp import (
    ConfigurationError,
    EnvSpec,
    Memory,
    NotionKind,
    RunState,
    StateCache,
    collect_rollout,
    init_run,
)
from .nets import Adam, Net, NetError, backward, forward, forward_cached, init_net, prob, sigmoid

ALGORITHMS = ("ppo", "reg_accepted", "reg_oracle", "reg_imputed", "reg_imputed_semisto")


class TrainingAborted(NetError):
    """Raised when a loss turns non-finite; carries the partial artifacts
    so the harness can write a diagnostic checkpoint."""

    def __init__(self, message: str, *, policy=None, value=None, predictor=None, rows=None):
        super().__init__(message)
        self.policy = policy
        self.value = value
        self.predictor = predictor
        self.rows = rows or []


@dataclass
class TrainConfig:
    algorithm: str = "ppo"
    env: str = "lending"
    notion: str = "opportunity"
    omega: float = 0.05
    beta1: float = 0.0
    beta2: float = 0.0
    total_steps: int = 500_000
    n_steps: int = 2048
    minibatch: int = 64
    ppo_epochs: int = 10
    predictor_steps: int = 25
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr_policy: float = 1e-5
    lr_value: float = 1e-5
    lr_predictor: float = 1e-2
    predictor_decay: float = 0.95
    seed: int = 0
    pool_size: int = 5000
    episode_steps: int = 32
    normalize_advantage: bool = True
    max_grad_norm: float = 0.5
    predictor_arch: str = "linear"
    pdim: float | None = None
    delta_conf: float = 0.05
    instrument: bool = False
    subsample_snapshots: int = 10
    run_id: str = ""

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.omega <= 0:
            raise ConfigurationError("omega must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigurationError("beta weights must be nonnegative")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("clip_eps must be in (0,1)")
        if self.predictor_arch not in ("linear", "relu64"):
            raise ConfigurationError(f"unknown predictor architecture {self.predictor_arch!r}")
        if self.total_steps < self.n_steps:
            raise ConfigurationError("total_steps must be at least n_steps")
        if self.episode_steps < 1 or self.n_steps % self.episode_steps != 0:
            raise ConfigurationError("episode_steps must divide n_steps")
        NotionKind.parse(self.notion)
        if self.algorithm == "reg_oracle":
            self.instrument = True

    @property
    def notion_kind(self) -> NotionKind:
        return NotionKind.parse(self.notion)

    @property
    def trains_predictor(self) -> bool:
        return self.algorithm in ("reg_imputed", "reg_imputed_semisto") and self.predictor_steps > 0

    @property
    def uses_renyi(self) -> bool:
        return self.algorithm in ("reg_imputed", "reg_imputed_semisto") and self.beta2 > 0

    @property
    def semi_stochastic(self) -> bool:
        return self.algorithm == "reg_imputed_semisto"

    def to_dict(self) -> dict:
        return asdict(self)


def advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates over one window plus bootstrapped
    return targets for the value loss.  ``values[t]`` is the critic at the
    observation of step t; the final step bootstraps with
    ``bootstrap_value`` (the pool-average critic value, i.e. the exact
    expectation over the next uniform pool draw)."""
    n = rewards.size
    adv = np.empty(n)
    next_v = bootstrap_value
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + gamma * gae_lambda * acc
        adv[t] = acc
        next_v = values[t]
    return adv, adv + values


def shifted_next(col: np.ndarray, episode: np.ndarray | None = None) -> np.ndarray:
    """The column at step t+1; the final record of each episode (and of the
    window) reuses its own value."""
    out = np.empty_like(col)
    out[:-1] = col[1:]
    out[-1] = col[-1]
    if episode is not None:
        boundary = episode[:-1] != episode[1:]
        out[:-1][boundary] = col[:-1][boundary]
    return out


def regularize_advantage(
    adv: np.ndarray,
    signal: np.ndarray,
    omega: float,
    beta1: float,
    threshold_half: bool,
    *,
    beta2_increase: float = 0.0,
    signal_next: np.ndarray | None = None,
) -> np.ndarray:
    """Subtract the disparity penalty from the advantage.

    Penalty: beta1 * max(|signal| - thr, 0) with thr = omega/2 for the
    imputed-disparity algorithm and omega for the accepted/oracle baselines.
    The baselines add beta2 * max(|next| - |now|, 0) whenever |now| exceeds
    omega (charging actions that worsen disparity)."""
    thr = omega / 2.0 if threshold_half else omega
    pen = beta1 * np.maximum(np.abs(signal) - thr, 0.0)
    if beta2_increase > 0.0:
        if signal_next is None:
            signal_next = shifted_next(signal)
        inc = np.maximum(np.abs(signal_next) - np.abs(signal), 0.0)
        pen = pen + beta2_increase * np.where(np.abs(signal) > omega, inc, 0.0)
    return adv - pen


def ppo_clip_terms(
    policy: Net,
    enc: np.ndarray,
    actions: np.ndarray,
    old_prob_accept: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
):
    """Clipped-surrogate loss (negated, to minimize) with the per-logit
    gradient; also returns (per-sample surrogate, unclipped term, acts)."""
    logits, acts = forward_cached(policy, enc)
    p = sigmoid(logits)
    taken = np.where(actions == 1, p, 1.0 - p)
    old = np.where(actions == 1, old_prob_accept, 1.0 - old_prob_accept)
    if (old <= 0).any():
        raise NetError("behavior probability of a taken action is zero")
    ratio = taken / old
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    per = np.minimum(unclipped, clipped)
    loss = -float(np.mean(per))
    active = unclipped <= clipped
    sign = np.where(actions == 1, 1.0, -1.0)
    dlogit = -(active * adv * sign * p * (1.0 - p) / old) / enc.shape[0]
    return loss, dlogit, acts, per, unclipped, p


def renyi_terms(
    p_accept: np.ndarray,
    qbar: np.ndarray,
    z: np.ndarray,
    coeff: np.ndarray,
    const: np.ndarray,
    group_count: int,
    *,
    joint_expectation: bool = False,
):
    """Divergence regularizer over a minibatch: per-group mean of squared
    importance weights, scaled by the per-group coefficients.  ``qbar``
    carries the frozen survival product of the sampled previous snapshots;
    only the current policy's term is differentiated.  Returns the loss
    value and d(loss)/d(p_accept).

    With ``joint_expectation`` the group terms are halved and averaged over
    the whole minibatch (the pseudocode-style estimator used inside the
    policy update, which keeps the regularizer's gradient commensurate with
    the clipped-surrogate gradient); otherwise per-group conditional means
    (the loss-definition form, used for reporting)."""
    u = 1.0 - p_accept
    denom = 1.0 - qbar * u
    live = denom >= P.OVERLAP_FLOOR
    denom = np.maximum(denom, P.OVERLAP_FLOOR)
    c_arr = const[z]
    w = c_arr * u / denom
    dloss_dp = np.zeros_like(p_accept)
    loss = 0.0
    outer = 0.5 if joint_expectation else 1.0
    for i in range(group_count):
        mask = z == i
        n_i = p_accept.size if joint_expectation else int(mask.sum())
        if not mask.any() or coeff[i] == 0.0:
            continue
        loss += outer * coeff[i] * float(np.sum(w[mask] ** 2)) / n_i
        # dw/dp = -c / denom^2 inside the un-floored region
        dw_dp = np.where(live, -c_arr / denom**2, 0.0)
        dloss_dp[mask] += outer * coeff[i] * 2.0 * w[mask] * dw_dp[mask] / n_i
    return loss, dloss_dp, w


def weighted_bce_terms(
    predictor: Net, enc: np.ndarray, y: np.ndarray, z: np.ndarray, w: np.ndarray, group_count: int
):
    """Self-normalized propensity-weighted binary cross-entropy over a
    minibatch, normalized within each group; groups without samples (or
    with zero weight mass) are skipped."""
    logits, acts = forward_cached(predictor, enc)
    p = sigmoid(logits)
    wn = np.zeros_like(w)
    for i in range(group_count):
        mask = z == i
        tot = w[mask].sum()
        if tot > 0:
            wn[mask] = w[mask] / tot
    # stable bce: softplus(logit) - y*logit
    sp = np.logaddexp(0.0, logits)
    loss = float(np.sum(wn * (sp - y * logits)))
    dlogit = wn * (p - y)
    return loss, dlogit, acts


@dataclass
class TrainResult:
    config: TrainConfig
    policy: Net
    value: Net
    predictor: Net
    history: P.PolicyHistory
    memory: Memory
    rows: list[dict]
    run: RunState
    overlap_events: int


def default_pdim(config: TrainConfig, env: EnvSpec) -> float:
    if config.pdim is not None:
        return config.pdim
    if config.predictor_arch == "linear":
        return M.pdim_linear(env.input_dim)
    return M.pdim_relu(env.input_dim)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the flat gradient down to the given global norm."""
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad


def train(config: TrainConfig, env: EnvSpec, *, post_collect_hook=None, progress=None) -> TrainResult:
    """Run the full learning loop; returns networks, history and one
    metrics row per iteration.

    ``post_collect_hook(buf)`` is an instrumentation seam applied to each
    collected window (used by the label-firewall test to poison the
    ground-truth annotations)."""
    notion = config.notion_kind
    run = init_run(env, config.seed)
    rng = run.rng
    policy = init_net("tanh64", env.input_dim, rng, head_scale=0.01)
    value = init_net("tanh64", env.input_dim, rng, head_scale=1.0)
    predictor = init_net(config.predictor_arch, env.input_dim, rng, head_scale=0.01)
    adam_pi = Adam(config.lr_policy)
    adam_v = Adam(config.lr_value)
    adam_phi = Adam(config.lr_predictor)
    history = P.PolicyHistory(subsample_size=config.subsample_snapshots)
    memory = Memory()
    cache = StateCache(run.registry, lambda e: prob(policy, e), lambda e: prob(predictor, e))
    pdim = default_pdim(config, env)
    g = env.group_count
    iterations = math.ceil(config.total_steps / config.n_steps)
    rows: list[dict] = []
    overlap_total = 0
    t_start = time.perf_counter()

    for k in range(1, iterations + 1):
        cache.refresh()
        episodes_per_window = config.n_steps // config.episode_steps
        buf = collect_rollout(
            run,
            cache,
            notion,
            config.n_steps,
            episode_base=(k - 1) * episodes_per_window,
            episode_steps=config.episode_steps,
            memory=memory,
            iteration=k,
            semi_stochastic=config.semi_stochastic,
            instrument=config.instrument,
        )
        if post_collect_hook is not None:
            post_collect_hook(buf)
        history.push(k, policy)
        reg = run.registry

        # frozen per-state propensity quantities for this iteration
        prev = history.subsample_previous(rng)
        prev_probs = np.stack([s.probs(reg.enc) for s in prev]) if prev else None
        qbar_state = np.broadcast_to(P.survival_product(prev_probs), (len(reg),)).astype(np.float64)
        zs = np.asarray(reg.z, dtype=np.int64)

        r_win = np.empty(g)
        phi_tilde_win = np.empty(g)
        a_cum = np.empty(g)
        for i in range(g):
            mask = buf.z == i
            r_win[i] = float(np.mean(buf.a[mask] == 0)) if mask.any() else 0.0
            phi_tilde_win[i] = float(np.mean(buf.y_tilde[mask] == 1)) if mask.any() else 0.0
            a_cum[i] = run.accepted_fraction(i)

        w_state = np.zeros(len(reg))
        for i in range(g):
            mask = zs == i
            w_state[mask], _floored = P.weight(
                cache.pi[mask],
                prev_probs[:, mask] if prev_probs is not None else None,
                a_cum[i],
                r_win[i],
            )
        cum_state = P.cumulative_accept_prob(cache.pi, prev_probs)

        # diagnostics over the accepted-sample memory, at the deployed state
        n_mem = memory.n
        mem_key = memory.key[:n_mem]
        mem_z = memory.z[:n_mem]
        mem_y = memory.y[:n_mem]
        w_mem = w_state[mem_key]
        eps_hat = np.full(g, np.nan)
        eps_bar = np.ones(g)
        d2 = np.full(g, np.nan)
        n_acc = np.zeros(g, dtype=np.int64)
        for i in range(g):
            mask = mem_z == i
            n_acc[i] = int(mask.sum())
            if n_acc[i] == 0:
                continue  # worst-case bound stays at 1
            errors = cache.phi[mem_key[mask]] - mem_y[mask]
            try:
                eps_hat[i], _ = M.ipw_error_estimate(errors, w_mem[mask])
                d2[i] = P.renyi_d2(w_mem[mask])
                eps_bar[i] = M.error_bound(eps_hat[i], d2[i], n_acc[i], pdim, config.delta_conf)
            except (M.NoDataError, P.NoDataError):
                pass
        overlap_total += int(np.sum(cum_state[mem_key] < P.OVERLAP_FLOOR))
        max_weight = float(w_mem.max()) if n_mem else math.nan
        min_cum = float(cum_state[mem_key].min()) if n_mem else math.nan

        coeff = np.zeros(g)
        for i in range(g):
            if notion is NotionKind.OPPORTUNITY:
                coeff[i] = r_win[i] / phi_tilde_win[i] if phi_tilde_win[i] > 0 else 0.0
            else:
                coeff[i] = r_win[i]
        const = np.where(r_win > 0, a_cum / np.maximum(r_win, 1e-300), 0.0)
        w_buf = w_state[buf.key]
        renyi_value = 0.0
        for i in range(g):
            mask = buf.z == i
            if mask.any() and coeff[i] > 0:
                renyi_value += coeff[i] * float(np.mean(w_buf[mask] ** 2))

        # predictor refit on memory (selective-labels algorithms only)
        if config.trains_predictor and n_mem > 0:
            lr_phi = config.lr_predictor * config.predictor_decay ** (k - 1)
            for _ in range(config.predictor_steps):
                idx = rng.integers(0, n_mem, size=config.minibatch)
                enc_mb = reg.enc[mem_key[idx]]
                loss, dlogit, acts = weighted_bce_terms(
                    predictor, enc_mb, mem_y[idx].astype(np.float64), mem_z[idx], w_mem[idx], g
                )
                if not math.isfinite(loss):
                    raise TrainingAborted(
                        f"non-finite predictor loss at iteration {k}",
                        policy=policy, value=value, predictor=predictor, rows=rows,
                    )
                grad = clip_grad_norm(backward(predictor, acts, dlogit), config.max_grad_norm)
                adam_phi.step(predictor, grad, lr=lr_phi)

        # advantage targets from the critic at the deployed parameters
        v_state = forward(value, reg.enc)
        v_rec = v_state[buf.key]
        counts = run.counts_vector().astype(np.float64)
        v_pool = float(np.dot(counts, v_state) / counts.sum())
        adv, returns = advantages(buf.reward, v_rec, v_pool, config.gamma, config.gae_lambda)

        if config.algorithm in ("reg_accepted", "reg_oracle"):
            signal = buf.delta_true if config.algorithm == "reg_oracle" else buf.delta_acc
            signal_next = shifted_next(signal, buf.episode)
            threshold_half = False
            beta2_increase = config.beta2
        else:
            signal = buf.delta_obs
            if notion is NotionKind.QUALIFICATION:
                # one-step lookahead: today's action cannot move today's gap
                signal = shifted_next(signal, buf.episode)
            signal_next = None
            threshold_half = True
            beta2_increase = 0.0

        enc_buf = reg.enc[buf.key]
        qbar_buf = qbar_state[buf.key]
        for _epoch in range(config.ppo_epochs):
            perm = rng.permutation(config.n_steps)
            for lo in range(0, config.n_steps, config.minibatch):
                mb = perm[lo : lo + config.minibatch]
                adv_mb = adv[mb]
                if config.normalize_advantage:
                    adv_mb = (adv_mb - adv_mb.mean()) / (adv_mb.std() + 1e-8)
                pen_adv = regularize_advantage(
                    adv_mb,
                    signal[mb],
                    config.omega,
                    config.beta1,
                    threshold_half,
                    beta2_increase=beta2_increase,
                    signal_next=signal_next[mb] if signal_next is not None else None,
                )
                loss_pi, dlogit, acts, _per, _unc, p_mb = ppo_clip_terms(
                    policy, enc_buf[mb], buf.a[mb], buf.pi_behavior[mb], pen_adv, config.clip_eps
                )
                if config.uses_renyi:
                    loss_r, dloss_dp, _w = renyi_terms(
                        p_mb, qbar_buf[mb], buf.z[mb].astype(np.int64), coeff, const, g,
                        joint_expectation=True,
                    )
                    loss_pi += config.beta2 * loss_r
                    dlogit = dlogit + config.beta2 * dloss_dp * p_mb * (1.0 - p_mb)
                if not math.isfinite(loss_pi):
                    raise TrainingAborted(
                        f"non-finite policy loss at iteration {k}",
                        policy=policy, value=value, predictor=predictor, rows=rows,
                    )
                grad = clip_grad_norm(backward(policy, acts, dlogit), config.max_grad_norm)
                adam_pi.step(policy, grad)

                v_out, v_acts = forward_cached(value, enc_buf[mb])
                diff = v_out - returns[mb]
                loss_v = 0.5 * float(np.mean(diff**2))
                if not math.isfinite(loss_v):
                    raise TrainingAborted(
                        f"non-finite value loss at iteration {k}",
                        policy=policy, value=value, predictor=predictor, rows=rows,
                    )
                grad = clip_grad_norm(backward(value, v_acts, diff / mb.size), config.max_grad_norm)
                adam_v.step(value, grad)

        def _window(fn, needs_truth=False):
            if needs_truth and not config.instrument:
                return math.nan
            try:
                return float(fn(buf, notion, group_count=g))
            except (M.EstimationError, M.DecompositionError):
                return math.nan

        delta_obs_win = _window(M.disparity_observed)
        delta_acc_win = _window(M.disparity_accepted)
        delta_true_win = _window(M.disparity_true, needs_truth=True)
        flags = M.check_conditions(
            notion, config.omega, r_win, eps_bar, phi_tilde_win, delta_obs_win
        )
        row = {
            "phase": "train",
            "run_id": config.run_id,
            "step": k,
            "seed": config.seed,
            "reward_mean": float(np.mean(buf.reward)),
            "reward_cumulative": run.reward_sum,
            "resource": run.resource,
            "delta_true": delta_true_win,
            "delta_true_pool": float(buf.delta_true_pool[-1]),
            "delta_observed": delta_obs_win,
            "delta_accepted": delta_acc_win,
            "max_weight": max_weight,
            "min_cum_accept": min_cum,
            "renyi_value": renyi_value,
            "overlap_floor_events": overlap_total,
            "disparity_ok": flags[0],
            "bias_ok": flags[1],
            "overall_ok": flags[2],
            "wall_clock": time.perf_counter() - t_start,
        }
        for i in range(g):
            row[f"r{i}"] = float(r_win[i])
            row[f"eps_hat{i}"] = float(eps_hat[i])
            row[f"eps_bar{i}"] = float(eps_bar[i])
            row[f"d2_{i}"] = float(d2[i])
            row[f"phi_tilde{i}"] = float(phi_tilde_win[i])
            row[f"n_acc{i}"] = int(n_acc[i])
        rows.append(row)
        if progress is not None:
            progress(k, iterations, row)

    return TrainResult(
        config=config,
        policy=policy,
        value=value,
        predictor=predictor,
        history=history,
        memory=memory,
        rows=rows,
        run=run,
        overlap_events=overlap_total,
    )


def semi_stochastic_action(pi_prob: float, rng: np.random.Generator) -> int:
    """Hard-threshold action rule: reject outright below 0.25, otherwise
    sample the acceptance probability."""
    if not 0.0 <= pi_prob <= 1.0:
        raise ConfigurationError(f"probability {pi_prob} outside [0,1]")
    if pi_prob < 0.25:
        return 0
    return 1 if rng.random() < pi_prob else 0
