"""Trajectory container shared by both worlds."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepLog:
    """Per-step bookkeeping kept by the posterior search, consumed by the
    importance-sampling ELBO estimator."""

    t: int
    log_prior: float      # log p_snapshot(x_{t-1} | x_t) at the kept particle
    log_proposal: float   # log proposal density at the kept particle
    log_weight_corr: float  # log(w_kept / mean(w)): tilt correction
    qhat: float           # soft-Q approximation at the kept particle
    weight_entropy: float


@dataclass
class Trajectory:
    """Denoising states x_T ... x_0 with terminal reward.

    states[i] is the state at timestep T - i; continuous states are float
    vectors, discrete states int token arrays (mask token = vocab size).
    """

    states: list
    T: int
    reward: float = 0.0
    snapshot: int = 0
    step_logs: list = field(default_factory=list)

    def state_at(self, t):
        return self.states[self.T - t]

    def transitions(self):
        """Yield (t, x_t, x_{t-1}) for t = T..1."""
        for i in range(self.T):
            yield self.T - i, self.states[i], self.states[i + 1]

    @property
    def terminal(self):
        return self.states[-1]


def stack_terminals(trajectories):
    return np.stack([tr.terminal for tr in trajectories])
