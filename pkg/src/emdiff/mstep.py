"""Amortization: maximum-likelihood distillation of searched trajectories
into the policy, optionally anchored to the pretrained policy by a
closed-form per-step KL penalty.

Losses are averaged per trajectory (optionally with trajectory weights) and
differentiated by hand into the policy's parameter arrays; updates use the
adaptive-moment optimizer owned by the caller so moments persist across
epochs.
"""

from dataclasses import dataclass

import numpy as np

from . import continuous as cont
from . import discrete as disc
from .errors import ConfigError, RunAbortedError, UnreachableTransitionError
from .numkit import softmax


@dataclass
class MStepConfig:
    lr: float = 1e-3
    steps: int = 1
    kl_coeff: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    kl_weighting: str = "uniform"  # or "discounted"
    gamma: float = 1.0             # used by discounted KL weighting only

    def __post_init__(self):
        if self.kl_coeff < 0:
            raise ConfigError("KL coefficient must be >= 0")
        if self.steps < 1:
            raise ConfigError("need at least one distillation step")
        if self.kl_weighting not in ("uniform", "discounted"):
            raise ConfigError(f"unknown kl_weighting {self.kl_weighting!r}")


def _traj_weights(batch, weights):
    if weights is None:
        return np.full(len(batch), 1.0 / len(batch))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(batch),) or np.any(w < 0):
        raise ConfigError("trajectory weights must be nonnegative, one per trajectory")
    return w / w.sum()


def _kl_step_weight(mcfg, T, t):
    if mcfg.kl_weighting == "discounted":
        return mcfg.gamma ** (T - t)
    return 1.0


def loss_and_grads(policy, pretrained, batch, mcfg, traj_weights=None):
    """Total loss, its pieces, and gradients wrt policy parameters.

    total = nll + kl_coeff * kl, where nll is the weighted negative
    log-likelihood of the batch transitions under the policy and kl the
    per-step KL to the pretrained policy evaluated at the batch states.
    """
    if isinstance(policy, cont.ContinuousPolicy):
        return _continuous_loss(policy, pretrained, batch, mcfg, traj_weights)
    return _discrete_loss(policy, pretrained, batch, mcfg, traj_weights)


def _continuous_loss(policy, pretrained, batch, mcfg, traj_weights):
    if policy.frozen:
        raise ConfigError("cannot distill into a frozen policy")
    w_traj = _traj_weights(batch, traj_weights)
    X_t, X_prev, T_arr, row_w, kl_w = [], [], [], [], []
    for tr, wb in zip(batch, w_traj):
        for t, xt, xprev in tr.transitions():
            X_t.append(xt)
            X_prev.append(xprev)
            T_arr.append(t)
            row_w.append(wb)
            kl_w.append(wb * _kl_step_weight(mcfg, tr.T, t))
    X_t = np.asarray(X_t)
    X_prev = np.asarray(X_prev)
    T_arr = np.asarray(T_arr)
    row_w = np.asarray(row_w)
    kl_w = np.asarray(kl_w)
    sig2 = policy.schedule.sig2[T_arr]

    mu_base = policy.analytic_mean(X_t, T_arr)
    inputs = policy.residual_input(X_t, T_arr)
    raw, cache = policy.residual.forward_cache(inputs)
    delta = sig2[:, None] * raw
    mu = mu_base + delta
    d = policy.dim
    diff = X_prev - mu
    logp = (-0.5 * d * np.log(2.0 * np.pi * sig2)
            - 0.5 * np.sum(diff * diff, axis=-1) / sig2)
    nll = -float(row_w @ logp)
    up = row_w[:, None] * (mu - X_prev) / sig2[:, None]

    delta0 = (sig2[:, None] * pretrained.residual.forward(inputs)
              if not pretrained.frozen else np.zeros_like(delta))
    gap = delta - delta0
    kl_rows = 0.5 * np.sum(gap * gap, axis=-1) / sig2
    kl = float(kl_w @ kl_rows)
    if mcfg.kl_coeff > 0:
        up = up + mcfg.kl_coeff * kl_w[:, None] * gap / sig2[:, None]

    # chain rule through the sig2 scaling of the residual shift
    grads, _ = policy.residual.backward(cache, up * sig2[:, None])
    total = nll + mcfg.kl_coeff * kl
    return total, nll, kl, grads


def _discrete_loss(policy, pretrained, batch, mcfg, traj_weights):
    w_traj = _traj_weights(batch, traj_weights)
    sc = policy.schedule
    den = policy.denoiser
    K, L = den.K, den.L
    m = disc.mask_token(K)
    rows_xt, rows_t, rows_prev, row_w, kl_w = [], [], [], [], []
    for tr, wb in zip(batch, w_traj):
        for t, xt, xprev in tr.transitions():
            observed = xt != m
            if np.any(observed & (xprev != xt)):
                raise UnreachableTransitionError(
                    "batch contains a carry-over violation")
            rows_xt.append(xt)
            rows_t.append(t)
            rows_prev.append(xprev)
            row_w.append(wb)
            kl_w.append(wb * _kl_step_weight(mcfg, tr.T, t))
    rows_xt = np.asarray(rows_xt)
    rows_t = np.asarray(rows_t)
    rows_prev = np.asarray(rows_prev)
    row_w = np.asarray(row_w)
    kl_w = np.asarray(kl_w)

    logits = den.logits(rows_xt, rows_t)              # (N, L, K)
    p0 = softmax(logits, axis=-1)
    logits0 = pretrained.denoiser.logits(rows_xt, rows_t)
    p0_pre = softmax(logits0, axis=-1)

    ab_s = sc.alpha_bar[rows_t - 1]
    ab_t = sc.alpha_bar[rows_t]
    stay = (1.0 - ab_s) / (1.0 - ab_t)
    emit = (ab_s - ab_t) / (1.0 - ab_t)

    masked = rows_xt == m
    to_mask = rows_prev == m
    emit_pos = masked & ~to_mask
    if np.any(masked & to_mask & (stay[:, None] <= 0)):
        raise UnreachableTransitionError("mask retained outside schedule support")

    tok = np.where(emit_pos, rows_prev, 0)
    p_tok = np.take_along_axis(p0, tok[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        log_emit = np.log(emit)[:, None]
        log_stay = np.log(stay)[:, None]
    logp = np.where(emit_pos, log_emit + np.log(np.maximum(p_tok, 1e-300)), 0.0)
    logp = logp + np.where(masked & to_mask, log_stay, 0.0)
    nll = -float(row_w @ logp.sum(axis=1))

    onehot = np.zeros_like(p0)
    np.put_along_axis(onehot, tok[..., None], 1.0, axis=-1)
    dlogits = np.where(emit_pos[..., None], p0 - onehot, 0.0) * row_w[:, None, None]

    # KL(p_theta || p_pre) per masked position, scaled by the emit mass
    logratio = np.log(p0) - np.log(p0_pre)
    kl_pos = np.sum(p0 * logratio, axis=-1)
    kl_rows = np.where(masked, emit[:, None] * kl_pos, 0.0)
    kl = float(kl_w @ kl_rows.sum(axis=1))
    if mcfg.kl_coeff > 0:
        dkl = p0 * (logratio - kl_pos[..., None])
        dlogits = dlogits + mcfg.kl_coeff * np.where(
            masked[..., None], (kl_w * emit)[:, None, None] * dkl, 0.0)

    grads = den.accumulate_logit_grad(rows_xt, rows_t, dlogits)
    total = nll + mcfg.kl_coeff * kl
    return total, nll, kl, grads


def update(policy, pretrained, batch, mcfg, opt, traj_weights=None,
           expected_snapshot=None):
    """Run the configured number of distillation steps on one batch.

    Asserts the batch was generated at `expected_snapshot` (defaults to the
    policy's current version) before any update; aborts on non-finite
    gradients. Returns a report with losses before and after.
    """
    if not batch:
        raise ConfigError("M-step needs a non-empty batch")
    want = policy.version if expected_snapshot is None else expected_snapshot
    bad = [tr.snapshot for tr in batch if tr.snapshot != want]
    if bad:
        raise ConfigError(
            f"stale batch: snapshot {bad[0]} does not match expected {want}")
    loss_before = None
    for _ in range(mcfg.steps):
        total, nll, kl, grads = loss_and_grads(policy, pretrained, batch,
                                               mcfg, traj_weights)
        if loss_before is None:
            loss_before = total
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise RunAbortedError(
                f"non-finite gradient at policy version {policy.version} "
                f"(loss={total!r}, nll={nll!r}, kl={kl!r})")
        opt.step(grads)
        policy.version += 1
    total, nll, kl, _ = loss_and_grads(policy, pretrained, batch, mcfg,
                                       traj_weights)
    return {"loss_before": float(loss_before), "loss_after": float(total),
            "nll": float(nll), "kl": float(kl)}
