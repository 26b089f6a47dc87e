"""Run metrics: the discounted trajectory ELBO (exact on enumerable
instances, importance-sampled elsewhere), reward statistics, diversity, and
mode coverage.

ELBO values are reported per trajectory, not per step.
"""

from dataclasses import dataclass

import numpy as np

from . import discrete as disc
from .errors import ConfigError


@dataclass
class ElboRecord:
    epoch: int
    elbo: float
    estimator: str       # "exact-tabular" | "surrogate-is" | "none"
    mean_reward: float
    reward_std: float
    diversity: float
    mode_coverage: float = float("nan")
    weight_entropy: float = float("nan")
    fallbacks: int = 0
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    n_samples: int = 0
    mc_error_free: bool = False


def elbo_exact_tabular(policy, tables, alpha, gamma):
    """Discounted trajectory bound under the exact tilted policy, by forward
    DP over the chain (no sampling, no Monte-Carlo error).

    Terms: sum over steps of gamma^(T-t) (r_t/alpha + log p_theta - log eta*)
    with eta* read from the tables and p_theta from `policy`.
    """
    sc = policy.schedule
    den = policy.denoiser
    T = sc.T
    S = tables.states.shape[0]
    start = np.full(den.L, disc.mask_token(den.K), dtype=np.int64)
    nu = np.zeros(S)
    nu[tables.state_ix(start)] = 1.0
    total = 0.0
    for t in range(T, 0, -1):
        nxt = np.zeros(S)
        disc_w = gamma ** (T - t)
        for s_ix in np.flatnonzero(nu > 0):
            succ_ix = tables.succ_idx[(t, s_ix)]
            log_eta = (tables.succ_logp[(t, s_ix)]
                       + tables.succ_q[(t, s_ix)] / tables.cfg.alpha
                       - tables.logZ[t, s_ix])
            eta = np.exp(log_eta)
            rows = disc.subs_position_probs(sc, den, tables.states[s_ix],
                                            t - 1, t)
            succ_states = tables.states[succ_ix]
            with np.errstate(divide="ignore"):
                logp_pos = np.log(
                    np.take_along_axis(
                        rows[None, :, :],
                        succ_states[:, :, None], axis=-1))[:, :, 0]
            log_p = logp_pos.sum(axis=1)
            r_term = tables.reward_vec[succ_ix] / alpha if t == 1 else 0.0
            contrib = eta * (r_term + log_p - log_eta)
            total += nu[s_ix] * disc_w * float(contrib.sum())
            np.add.at(nxt, succ_ix, nu[s_ix] * eta)
        nu = nxt
    return total


def elbo_by_path_enumeration(policy, tables, alpha):
    """Undiscounted ELBO by brute-force enumeration of whole trajectories.

    Independent of the forward-DP routine: walks every trajectory of the
    tilted chain and accumulates eta(tau) * [sum_t (r_t/alpha + log p/eta)].
    """
    sc = policy.schedule
    den = policy.denoiser
    T = sc.T
    start = np.full(den.L, disc.mask_token(den.K), dtype=np.int64)

    def walk(s_ix, t, weight, acc):
        if t == 0:
            return weight * acc
        succ_ix = tables.succ_idx[(t, s_ix)]
        log_eta = (tables.succ_logp[(t, s_ix)]
                   + tables.succ_q[(t, s_ix)] / tables.cfg.alpha
                   - tables.logZ[t, s_ix])
        rows = disc.subs_position_probs(sc, den, tables.states[s_ix],
                                        t - 1, t)
        total = 0.0
        for j, u_ix in enumerate(succ_ix):
            succ = tables.states[u_ix]
            with np.errstate(divide="ignore"):
                log_p = float(np.sum(np.log(rows[np.arange(den.L), succ])))
            term = (log_p - log_eta[j]
                    + (tables.reward_vec[u_ix] / alpha if t == 1 else 0.0))
            total += walk(int(u_ix), t - 1, weight * np.exp(log_eta[j]),
                          acc + term)
        return total

    return walk(tables.state_ix(start), T, 1.0, 0.0)


def elbo_surrogate(policy, batch, alpha, gamma):
    """Importance-sampled ELBO from a posterior-search batch.

    Per step, log eta* is approximated by the proposal log density plus the
    self-normalized weight correction log(w / mean w); log p_theta is
    re-evaluated under `policy` (vectorized over the whole batch), so the
    batch can score an updated model.
    """
    if not batch:
        raise ConfigError("surrogate ELBO needs a non-empty batch")
    T = batch[0].T
    X_t, X_prev, t_rows = [], [], []
    for tr in batch:
        for t, xt, xprev in tr.transitions():
            X_t.append(xt)
            X_prev.append(xprev)
            t_rows.append(t)
    X_t = np.asarray(X_t)
    X_prev = np.asarray(X_prev)
    t_rows = np.asarray(t_rows)
    if hasattr(policy, "mixture"):
        log_p = policy.logprob(X_t, X_prev, t_rows)
    else:
        log_p = disc.transition_logprob_batch(policy.schedule,
                                              policy.denoiser, X_t, X_prev,
                                              t_rows)
    log_p = log_p.reshape(len(batch), T)
    log_eta = np.array([[log.log_proposal + log.log_weight_corr
                         for log in tr.step_logs] for tr in batch])
    disc_w = gamma ** (T - t_rows.reshape(len(batch), T))
    rewards = np.array([tr.reward for tr in batch])
    per_traj = np.sum(disc_w * (log_p - log_eta), axis=1) \
        + gamma ** (T - 1) * rewards / alpha
    return float(per_traj.mean())


def levenshtein(a, b):
    """Edit distance between two token arrays (insert/delete/substitute)."""
    a = np.asarray(a)
    b = np.asarray(b)
    prev = np.arange(b.size + 1)
    for i in range(1, a.size + 1):
        cur = np.empty(b.size + 1, dtype=np.int64)
        cur[0] = i
        for j in range(1, b.size + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return int(prev[-1])


def _pairwise_levenshtein_same_length(A, B):
    """Edit distances for aligned pair arrays (P, L), DP vectorized over P."""
    P, L = A.shape
    prev = np.broadcast_to(np.arange(L + 1), (P, L + 1)).copy()
    for i in range(1, L + 1):
        cur = np.empty((P, L + 1), dtype=np.int64)
        cur[:, 0] = i
        for j in range(1, L + 1):
            cost = (A[:, i - 1] != B[:, j - 1]).astype(np.int64)
            cur[:, j] = np.minimum(np.minimum(prev[:, j] + 1,
                                              cur[:, j - 1] + 1),
                                   prev[:, j - 1] + cost)
        prev = cur
    return prev[:, -1]


def diversity(samples):
    """Mean pairwise distance: Euclidean for vectors, edit distance for
    token sequences."""
    arr = np.asarray(samples)
    n = arr.shape[0]
    if n < 2:
        raise ConfigError("diversity needs at least two samples")
    iu, ju = np.triu_indices(n, k=1)
    if np.issubdtype(arr.dtype, np.floating):
        diff = arr[iu] - arr[ju]
        return float(np.sqrt(np.sum(diff * diff, axis=-1)).mean())
    return float(_pairwise_levenshtein_same_length(arr[iu], arr[ju]).mean())


def mode_coverage(samples, mixture, radius_scale=2.0, radii=None):
    """Fraction of mixture components with at least one sample within the
    per-component radius (default twice the component std)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if radii is None:
        radii = radius_scale * mixture.stds
    hit = 0
    for k in range(mixture.n_components):
        d = np.linalg.norm(x - mixture.means[k], axis=1)
        hit += bool(np.any(d <= radii[k]))
    return hit / mixture.n_components


def ngram_frequency_correlation(samples, reference, K, n=2):
    """Pearson correlation between n-gram frequency vectors of two sequence
    sets, the desk-scale naturalness proxy."""
    def freqs(seqs):
        counts = np.zeros((K + 1) ** n)
        for s in np.atleast_2d(np.asarray(seqs, dtype=np.int64)):
            for i in range(s.size - n + 1):
                code = 0
                for j in range(n):
                    code = code * (K + 1) + int(s[i + j])
                counts[code] += 1
        total = counts.sum()
        return counts / total if total else counts
    f1, f2 = freqs(samples), freqs(reference)
    s1, s2 = f1.std(), f2.std()
    if s1 == 0 or s2 == 0:
        return float("nan")
    return float(np.corrcoef(f1, f2)[0, 1])
