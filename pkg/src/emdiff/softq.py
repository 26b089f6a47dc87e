"""Soft Q machinery.

Runtime path: the first-order approximation qhat = gamma^(t-1) * r(x0hat)
of the KL-regularized action value. Oracle path (enumerable discrete
instances only): exact soft value/Q tables built by backward recursion over
the prior chain, the exact tilted policy, and the analytic sandwich bounds
the approximation is meant to sit inside.
"""

from dataclasses import dataclass

import numpy as np

from . import continuous as cont
from . import discrete as disc
from .errors import ConfigError
from .numkit import log_sum_exp


@dataclass
class SoftQConfig:
    alpha: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")


def x0hat_reward(policy, reward, states, u):
    """r(x0hat(x_u)) for a batch of states at timestep u.

    Continuous: reward at the analytic posterior mean. Discrete: relaxed
    reward at the denoiser's clean-token distribution (exact at u = 0,
    where states are fully unmasked).
    """
    if isinstance(policy, cont.ContinuousPolicy):
        xhat = cont.x0hat(policy.mixture, states, policy.schedule.alpha_bar[u])
        return reward.value(xhat)
    p = disc.relaxed_x0(policy.denoiser, states, u)
    return reward.relaxed_value(p)


def approx_soft_q(cfg, t, r_hat):
    """qhat = gamma^(t-1) * r(x0hat(x_{t-1})), exact at t = 1."""
    return cfg.gamma ** (t - 1) * np.asarray(r_hat, dtype=float)


class ExactSoftTables:
    """Backward-recursion tables over an enumerable masked-diffusion instance.

    V[t, s] is the soft value of state s at timestep t; per (t, state) the
    successor lists carry the prior log transition probabilities and soft Q
    values. logZ[t, s] is the log normalizer of the tilted policy at s.
    """

    def __init__(self, schedule, denoiser, reward, cfg, cap=disc.ENUM_CAP):
        self.schedule = schedule
        self.denoiser = denoiser
        self.reward = reward
        self.cfg = cfg
        L, K, T = denoiser.L, denoiser.K, schedule.T
        self.states = disc.enumerate_states(L, K, cap)
        S = self.states.shape[0]
        unmasked = np.all(self.states != disc.mask_token(K), axis=1)
        self.reward_vec = np.full(S, np.nan)
        self.reward_vec[unmasked] = np.asarray(
            [reward.value(s) for s in self.states[unmasked]], dtype=float)
        self.V = np.zeros((T + 1, S))
        self.logZ = np.full((T + 1, S), np.nan)
        self.succ_idx = {}
        self.succ_logp = {}
        self.succ_q = {}
        a, g = cfg.alpha, cfg.gamma
        for t in range(1, T + 1):
            for s_ix in range(S):
                xt = self.states[s_ix]
                nxt, probs = disc.enumerate_transitions(
                    schedule, denoiser, xt, t - 1, t)
                nxt_ix = disc.state_index(nxt, K)
                if t == 1:
                    q = self.reward_vec[nxt_ix]
                else:
                    q = g * self.V[t - 1, nxt_ix]
                self.succ_idx[(t, s_ix)] = nxt_ix
                self.succ_logp[(t, s_ix)] = np.log(probs)
                self.succ_q[(t, s_ix)] = q
                lz = log_sum_exp(np.log(probs) + q / a)
                self.logZ[t, s_ix] = lz
                self.V[t, s_ix] = a * lz

    def state_ix(self, tokens):
        return int(disc.state_index(tokens, self.denoiser.K))

    def tilted_policy(self, tokens, t):
        """Exact eta*(x_{t-1} | x_t): prior reweighted by exp(Q/alpha)."""
        s_ix = self.state_ix(tokens)
        logw = (self.succ_logp[(t, s_ix)]
                + self.succ_q[(t, s_ix)] / self.cfg.alpha
                - self.logZ[t, s_ix])
        return self.states[self.succ_idx[(t, s_ix)]], np.exp(logw)

    def bellman_residual(self):
        """Max deviation when the tables are substituted back into the soft
        Bellman equations and terminal conditions."""
        a, g = self.cfg.alpha, self.cfg.gamma
        worst = 0.0
        T = self.schedule.T
        for t in range(1, T + 1):
            for s_ix in range(self.states.shape[0]):
                logp = self.succ_logp[(t, s_ix)]
                q = self.succ_q[(t, s_ix)]
                v = a * log_sum_exp(logp + q / a)
                worst = max(worst, abs(v - self.V[t, s_ix]))
                nxt_ix = self.succ_idx[(t, s_ix)]
                r_term = self.reward_vec[nxt_ix] if t == 1 else 0.0
                q_ref = r_term + g * self.V[t - 1, nxt_ix]
                worst = max(worst, float(np.max(np.abs(q - q_ref))))
        return worst


def expected_reward_dp(tables, gamma=None):
    """Discounted expected terminal reward under the prior chain,
    F[t, s] = E[gamma^(t-1) r(x_0) | x_t = s]; the alpha -> inf limit of V."""
    g = tables.cfg.gamma if gamma is None else gamma
    T = tables.schedule.T
    S = tables.states.shape[0]
    F = np.zeros((T + 1, S))
    for t in range(1, T + 1):
        for s_ix in range(S):
            nxt_ix = tables.succ_idx[(t, s_ix)]
            p = np.exp(tables.succ_logp[(t, s_ix)])
            if t == 1:
                val = tables.reward_vec[nxt_ix]
            else:
                val = g * F[t - 1, nxt_ix]
            F[t, s_ix] = float(p @ val)
    return F


def exp_reward_dp(tables, c):
    """E[exp(c * r(x_0)) | x_u = s] under the prior chain, per (u, state)."""
    T = tables.schedule.T
    S = tables.states.shape[0]
    F = np.full((T + 1, S), np.nan)
    unmasked = ~np.isnan(tables.reward_vec)
    F[0, unmasked] = np.exp(c * tables.reward_vec[unmasked])
    for u in range(1, T + 1):
        for s_ix in range(S):
            nxt_ix = tables.succ_idx[(u, s_ix)]
            p = np.exp(tables.succ_logp[(u, s_ix)])
            F[u, s_ix] = float(p @ F[u - 1, nxt_ix])
    return F


def check_bounds(tables, tol=1e-9):
    """Verify the sandwich bounds on the stored soft Q values for t >= 2.

    Expectations over prior rollouts are computed by exact enumeration, so
    the only slack needed is floating point. Returns a report dict; any row
    with ok=False is a bound violation.
    """
    a, g = tables.cfg.alpha, tables.cfg.gamma
    T = tables.schedule.T
    rows = []
    for t in range(2, T + 1):
        lo_F = exp_reward_dp(tables, g ** (t - 2) / a)
        up_F = exp_reward_dp(tables, 1.0 / a)
        seen = {}
        for s_ix in range(tables.states.shape[0]):
            nxt_ix = tables.succ_idx[(t, s_ix)]
            q = tables.succ_q[(t, s_ix)]
            for j, u_ix in enumerate(nxt_ix):
                key = int(u_ix)
                if key in seen and seen[key] == q[j]:
                    continue
                seen[key] = q[j]
                lower = a * g * np.log(lo_F[t - 1, u_ix])
                upper = a * g ** (t - 1) * np.log(up_F[t - 1, u_ix])
                ok = (lower - tol <= q[j] <= upper + tol)
                rows.append({"t": t, "state": key, "lower": float(lower),
                             "q": float(q[j]), "upper": float(upper),
                             "ok": bool(ok)})
    n_bad = sum(1 for r in rows if not r["ok"])
    return {"rows": rows, "violations": n_bad, "ok": n_bad == 0}
