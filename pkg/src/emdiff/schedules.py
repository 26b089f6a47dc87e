"""Noise schedules for both diffusion families.

Arrays are indexed by timestep t = 0..T with the t = 0 entry pinned to the
no-noise convention (alpha_bar[0] = 1), so formulas can reference t-1
without bounds juggling.
"""

import numpy as np

from .errors import ConfigError


class ContinuousSchedule:
    """Variance schedule for the Gaussian chain.

    beta[t] is the per-step noise rate, alpha_bar[t] the cumulative signal
    survival, sig2[t] the reverse-step sampling variance. sig2 = beta: the
    wide reverse variance is exact for unit-variance Gaussian data, whereas
    the narrow posterior variance provably under-disperses coarse chains
    (and is zero at t = 1).
    """

    def __init__(self, T, beta):
        self.T = int(T)
        self.beta = np.concatenate([[0.0], np.asarray(beta, dtype=float)])
        alpha = 1.0 - self.beta
        self.alpha = alpha
        self.alpha_bar = np.cumprod(alpha)
        self.sig2 = self.beta.copy()

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside 1..{self.T}")


class DiscreteSchedule:
    """Masking schedule: alpha_bar[t] = 1 - t/T is the probability a token
    is still unmasked at step t."""

    def __init__(self, T):
        self.T = int(T)
        self.alpha_bar = 1.0 - np.arange(self.T + 1) / self.T

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside 1..{self.T}")


def make_continuous_schedule(T, beta_min=1e-4, beta_max=0.02):
    """Linear beta schedule over T steps."""
    if T < 2:
        raise ConfigError("continuous schedule needs T >= 2")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"invalid beta range ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T)
    return ContinuousSchedule(T, beta)


def make_discrete_schedule(T):
    """Uniform discretization of the linear masking schedule."""
    if T < 2:
        raise ConfigError("discrete schedule needs T >= 2")
    return DiscreteSchedule(T)
