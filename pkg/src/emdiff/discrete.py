"""Masked discrete diffusion over length-L sequences with vocabulary K.

Tokens are 0..K-1 and the mask token is K. The forward process masks each
position independently; the reverse process uses the substitution
parameterization: unmasked tokens carry over deterministically and masked
positions mix between staying masked and emitting the denoiser's clean-token
prediction. Per-position next-state rows are laid out over K+1 classes with
the mask class last, matching the relaxed reward encoding.
"""

import itertools

import numpy as np

from .errors import ConfigError, OracleUnavailableError, UnreachableTransitionError
from .numkit import Mlp, softmax
from .optim import Adam
from .trajectory import Trajectory

ENUM_CAP = 20_000


def mask_token(K):
    return K


def state_index(tokens, K):
    """Mixed-radix encoding of a token array over {0..K} (little-endian)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    radix = (K + 1) ** np.arange(tokens.shape[-1], dtype=np.int64)
    return tokens @ radix


def enumerate_states(L, K, cap=ENUM_CAP):
    """All (K+1)^L token arrays, ordered by state_index."""
    n = (K + 1) ** L
    if n > cap:
        raise OracleUnavailableError(
            f"(K+1)^L = {n} exceeds enumeration cap {cap}")
    states = np.zeros((n, L), dtype=np.int64)
    idx = np.arange(n)
    for pos in range(L):
        states[:, pos] = (idx // (K + 1) ** pos) % (K + 1)
    return states


def forward_mask_sample(schedule, x0, t, rng, K):
    """Mask each position of a clean sequence independently at level t."""
    x0 = np.asarray(x0, dtype=np.int64)
    if t == 0:
        return x0.copy()
    schedule.check_t(t)
    keep = rng.uniform(x0.shape) < schedule.alpha_bar[t]
    return np.where(keep, x0, mask_token(K))


class TabularDenoiser:
    """Full table of clean-token logits, one (L, K) block per masked state.

    The table is t-independent: under the absorbing forward process the
    clean posterior depends only on which positions are observed.
    """

    kind = "tabular"

    def __init__(self, L, K, cap=ENUM_CAP):
        self.L = int(L)
        self.K = int(K)
        self.n_states = (K + 1) ** L
        if self.n_states > cap:
            raise OracleUnavailableError(
                f"tabular denoiser needs (K+1)^L <= {cap}")
        self.table = np.zeros((self.n_states, self.L, self.K))

    def params(self):
        return [self.table]

    def copy(self):
        other = TabularDenoiser(self.L, self.K)
        other.table = self.table.copy()
        return other

    def logits(self, tokens_batch, t_batch=None):
        idx = state_index(tokens_batch, self.K)
        return self.table[idx]

    def accumulate_logit_grad(self, tokens_batch, t_batch, dlogits):
        grad = np.zeros_like(self.table)
        idx = state_index(tokens_batch, self.K)
        np.add.at(grad, idx, dlogits)
        return [grad]


class MlpDenoiser:
    """MLP from the one-hot sequence encoding plus t/T to per-position logits."""

    kind = "mlp"

    def __init__(self, L, K, T, widths=(64,), rng=None):
        self.L = int(L)
        self.K = int(K)
        self.T = int(T)
        self.net = Mlp([L * (K + 1) + 1, *widths, L * K], activation="tanh",
                       rng=rng)

    def params(self):
        return self.net.params()

    def copy(self):
        other = MlpDenoiser(self.L, self.K, self.T)
        other.net = self.net.copy()
        return other

    def _encode(self, tokens_batch, t_batch):
        tokens_batch = np.atleast_2d(np.asarray(tokens_batch, dtype=np.int64))
        n = tokens_batch.shape[0]
        onehot = np.zeros((n, self.L, self.K + 1))
        rows = np.arange(n)[:, None]
        cols = np.arange(self.L)[None, :]
        onehot[rows, cols, tokens_batch] = 1.0
        frac = np.broadcast_to(np.asarray(t_batch, dtype=float),
                               (n,))[:, None] / self.T
        return np.concatenate([onehot.reshape(n, -1), frac], axis=1)

    def logits(self, tokens_batch, t_batch):
        single = np.asarray(tokens_batch).ndim == 1
        x = self._encode(tokens_batch, t_batch)
        out = self.net.forward(x).reshape(-1, self.L, self.K)
        return out[0] if single else out

    def accumulate_logit_grad(self, tokens_batch, t_batch, dlogits):
        x = self._encode(tokens_batch, t_batch)
        _, cache = self.net.forward_cache(x)
        up = np.asarray(dlogits, dtype=float).reshape(x.shape[0], -1)
        grads, _ = self.net.backward(cache, up)
        return grads


def x0_probs(denoiser, tokens, t):
    """Clean-token distribution per position, (..., L, K).

    Unmasked positions are forced to a point mass on the observed token,
    which is what makes carry-over exact.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    logits = denoiser.logits(tokens, t)
    probs = softmax(logits, axis=-1)
    K = denoiser.K
    observed = tokens != mask_token(K)
    onehot = np.zeros(probs.shape)
    np.put_along_axis(onehot, np.where(observed, tokens, 0)[..., None], 1.0,
                      axis=-1)
    return np.where(observed[..., None], onehot, probs)


def relaxed_x0(denoiser, tokens, t):
    """x0 distribution padded with a zero mask column, (..., L, K+1)."""
    p = x0_probs(denoiser, tokens, t)
    pad = np.zeros(p.shape[:-1] + (1,))
    return np.concatenate([p, pad], axis=-1)


def subs_position_probs(schedule, denoiser, tokens, s, t):
    """Per-position reverse-transition rows over K+1 classes, (L, K+1).

    Unmasked positions put mass 1 on their token; masked positions keep the
    mask with probability (1-abar_s)/(1-abar_t) and otherwise emit from the
    denoiser prediction.
    """
    if s >= t:
        raise ConfigError(f"reverse step needs s < t, got s={s} t={t}")
    schedule.check_t(t)
    tokens = np.asarray(tokens, dtype=np.int64)
    K = denoiser.K
    ab_s, ab_t = schedule.alpha_bar[s], schedule.alpha_bar[t]
    stay = (1.0 - ab_s) / (1.0 - ab_t)
    emit = (ab_s - ab_t) / (1.0 - ab_t)
    probs = x0_probs(denoiser, tokens, t)
    rows = np.concatenate([emit * probs,
                           np.full(probs.shape[:-1] + (1,), stay)], axis=-1)
    observed = tokens != mask_token(K)
    onehot = np.zeros(rows.shape)
    np.put_along_axis(onehot, np.where(observed, tokens, 0)[..., None], 1.0,
                      axis=-1)
    return np.where(observed[..., None], onehot, rows)


def subs_reverse_step(schedule, denoiser, tokens, s, t, rng):
    """Sample x_s | x_t under the substitution parameterization."""
    rows = subs_position_probs(schedule, denoiser, tokens, s, t)
    tokens = np.asarray(tokens, dtype=np.int64)
    out = tokens.copy()
    masked = np.flatnonzero(tokens == mask_token(denoiser.K))
    u = rng.uniform(masked.size)
    for j, pos in enumerate(masked):
        cdf = np.cumsum(rows[pos])
        cdf[-1] = 1.0
        out[pos] = np.searchsorted(cdf, u[j], side="right")
    return out


def transition_logprob(schedule, denoiser, xt, xprev, s, t):
    """log p(x_s = xprev | x_t = xt); raises on unreachable transitions."""
    xt = np.asarray(xt, dtype=np.int64)
    xprev = np.asarray(xprev, dtype=np.int64)
    K = denoiser.K
    m = mask_token(K)
    observed = xt != m
    if np.any(observed & (xprev != xt)):
        raise UnreachableTransitionError("carry-over violated: unmasked token changed")
    ab_s = schedule.alpha_bar[s]
    if ab_s >= 1.0 and np.any((~observed) & (xprev == m)):
        raise UnreachableTransitionError("mask retained outside schedule support")
    rows = subs_position_probs(schedule, denoiser, xt, s, t)
    p = np.take_along_axis(rows, xprev[:, None], axis=-1)[:, 0]
    if np.any(p[~observed] <= 0):
        raise UnreachableTransitionError("zero-probability transition")
    return float(np.sum(np.log(p[~observed])))


def transition_logprob_batch(schedule, denoiser, Xt, Xprev, t_arr):
    """Vectorized log p(x_s | x_t) over aligned row arrays (N, L).

    Rows are assumed reverse-reachable (as produced by the sampler); use
    transition_logprob for validated single transitions.
    """
    Xt = np.asarray(Xt, dtype=np.int64)
    Xprev = np.asarray(Xprev, dtype=np.int64)
    t_arr = np.asarray(t_arr)
    K = denoiser.K
    m = mask_token(K)
    p0 = x0_probs(denoiser, Xt, t_arr)
    ab_s = schedule.alpha_bar[t_arr - 1]
    ab_t = schedule.alpha_bar[t_arr]
    stay = (1.0 - ab_s) / (1.0 - ab_t)
    emit = (ab_s - ab_t) / (1.0 - ab_t)
    masked = Xt == m
    to_mask = Xprev == m
    emit_pos = masked & ~to_mask
    tok = np.where(emit_pos, Xprev, 0)
    p_tok = np.take_along_axis(p0, tok[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        log_emit = np.log(emit)[:, None]
        log_stay = np.log(stay)[:, None]
    logp = np.where(emit_pos, log_emit + np.log(np.maximum(p_tok, 1e-300)),
                    0.0)
    logp = logp + np.where(masked & to_mask, log_stay, 0.0)
    return logp.sum(axis=1)


def enumerate_transitions(schedule, denoiser, xt, s, t):
    """All reachable next states with probabilities, for the exact oracle."""
    rows = subs_position_probs(schedule, denoiser, xt, s, t)
    xt = np.asarray(xt, dtype=np.int64)
    supports = []
    for pos in range(denoiser.L):
        vals = np.flatnonzero(rows[pos] > 0)
        supports.append([(int(v), rows[pos, v]) for v in vals])
    states, probs = [], []
    for combo in itertools.product(*supports):
        state = np.array([v for v, _ in combo], dtype=np.int64)
        states.append(state)
        probs.append(float(np.prod([p for _, p in combo])))
    return np.stack(states), np.asarray(probs)


class DiscretePolicy:
    """Denoiser plus schedule, presented with the same surface as the
    continuous policy so the alignment loop is world-agnostic."""

    def __init__(self, schedule, denoiser):
        self.schedule = schedule
        self.denoiser = denoiser
        self.version = 0

    @property
    def L(self):
        return self.denoiser.L

    @property
    def K(self):
        return self.denoiser.K

    def params(self):
        return self.denoiser.params()

    def pretrained_copy(self):
        return DiscretePolicy(self.schedule, self.denoiser.copy())

    def logprob(self, xt, xprev, t):
        return transition_logprob(self.schedule, self.denoiser, xt, xprev,
                                  t - 1, t)

    def step(self, xt, t, rng):
        return subs_reverse_step(self.schedule, self.denoiser, xt, t - 1, t, rng)

    def rollout(self, rng, n):
        """n reverse chains from the all-mask state, vectorized across n."""
        if n < 1:
            raise ConfigError("rollout needs n >= 1")
        T = self.schedule.T
        X = np.full((n, self.L), mask_token(self.K), dtype=np.int64)
        states = [X]
        for t in range(T, 0, -1):
            rows = subs_position_probs(self.schedule, self.denoiser, X,
                                       t - 1, t)
            cdf = np.cumsum(rows, axis=-1)
            cdf[..., -1] = 1.0
            u = rng.child(t).uniform(X.shape)
            choice = (u[..., None] > cdf).sum(axis=-1)
            X = np.where(X == mask_token(self.K), choice, X).astype(np.int64)
            states.append(X)
        return [Trajectory(states=[s[i] for s in states], T=T,
                           snapshot=self.version) for i in range(n)]


def _mask_patterns(L):
    return np.array(list(itertools.product([False, True], repeat=L)))


def pretrain(denoiser, schedule, sequences, weights=None, epochs=200, lr=0.05,
             rng=None, batch_size=None):
    """Fit the denoiser by the schedule-weighted masked cross-entropy.

    The per-step weight is (abar_{t-1} - abar_t)/(1 - abar_t) and loss is
    taken on masked positions only. With a tabular denoiser and small L the
    expectation over mask patterns is enumerated exactly, making the fit
    deterministic; otherwise patterns are sampled.

    Returns the per-epoch loss history (empty if epochs == 0).
    """
    sequences = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    if sequences.size == 0:
        raise ConfigError("pretraining needs a non-empty dataset")
    n, L = sequences.shape
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
    K = denoiser.K
    T = schedule.T
    exact = denoiser.kind == "tabular" and 2**L <= 1024
    opt = Adam(denoiser.params(), lr=lr)
    history = []
    for epoch in range(epochs):
        if exact:
            loss, grads = _pretrain_pass_exact(denoiser, schedule, sequences,
                                               weights)
        else:
            if rng is None:
                raise ConfigError("sampled pretraining needs an rng")
            loss, grads = _pretrain_pass_sampled(denoiser, schedule, sequences,
                                                 weights, rng.child(epoch),
                                                 batch_size or n)
        opt.step(grads)
        history.append(loss)
    return history


def _step_weights(schedule):
    ab = schedule.alpha_bar
    t = np.arange(1, schedule.T + 1)
    return (ab[t - 1] - ab[t]) / (1.0 - ab[t])


def _ce_rows(denoiser, xt_batch, t_batch, x0_batch, row_weights):
    """Weighted cross-entropy on masked positions, with logit gradients."""
    logits = denoiser.logits(xt_batch, t_batch)
    probs = softmax(logits, axis=-1)
    masked = xt_batch == mask_token(denoiser.K)
    onehot = np.zeros_like(probs)
    rows = np.arange(xt_batch.shape[0])[:, None]
    cols = np.arange(denoiser.L)[None, :]
    onehot[rows, cols, x0_batch] = 1.0
    logp = np.log(np.take_along_axis(probs, x0_batch[..., None], axis=-1))[..., 0]
    w = row_weights[:, None] * masked
    loss = -np.sum(w * logp)
    dlogits = w[..., None] * (probs - onehot)
    grads = denoiser.accumulate_logit_grad(xt_batch, t_batch, dlogits)
    return loss, grads


def _pretrain_pass_exact(denoiser, schedule, sequences, weights):
    L = sequences.shape[1]
    patterns = _mask_patterns(L)
    wt = _step_weights(schedule)
    xt_rows, t_rows, x0_rows, w_rows = [], [], [], []
    for t in range(1, schedule.T + 1):
        ab = schedule.alpha_bar[t]
        # P(pattern) = prod over positions of keep/mask probabilities
        pat_p = np.prod(np.where(patterns, 1.0 - ab, ab), axis=1)
        for pat, pp in zip(patterns, pat_p):
            if pp == 0 or not pat.any():
                continue
            xt = np.where(pat, mask_token(denoiser.K), sequences)
            xt_rows.append(xt)
            t_rows.append(np.full(len(sequences), t))
            x0_rows.append(sequences)
            w_rows.append(weights * wt[t - 1] * pp)
    xt_batch = np.concatenate(xt_rows)
    t_batch = np.concatenate(t_rows)
    x0_batch = np.concatenate(x0_rows)
    w_batch = np.concatenate(w_rows)
    return _ce_rows(denoiser, xt_batch, t_batch, x0_batch, w_batch)


def _pretrain_pass_sampled(denoiser, schedule, sequences, weights, rng,
                           batch_size):
    n = sequences.shape[0]
    pick = rng.gen.choice(n, size=batch_size, p=weights)
    x0_batch = sequences[pick]
    t_batch = rng.gen.integers(1, schedule.T + 1, size=batch_size)
    ab = schedule.alpha_bar[t_batch][:, None]
    keep = rng.uniform(x0_batch.shape) < ab
    xt_batch = np.where(keep, x0_batch, mask_token(denoiser.K))
    wt = _step_weights(schedule)[t_batch - 1]
    return _ce_rows(denoiser, xt_batch, t_batch, x0_batch,
                    wt / batch_size)
