import numpy as np
import pytest

from emdiff.errors import ConfigError
from emdiff.schedules import (ContinuousSchedule, make_continuous_schedule,
                              make_discrete_schedule)


def test_single_step_product():
    sc = ContinuousSchedule(1, [0.5])
    assert sc.alpha_bar[1] == pytest.approx(0.5)


def test_constant_beta_hand_product():
    sc = ContinuousSchedule(3, [0.1, 0.1, 0.1])
    assert sc.alpha_bar[3] == pytest.approx(0.9**3, abs=1e-15)


def test_alpha_bar_strictly_decreasing():
    sc = make_continuous_schedule(50, 1e-4, 0.02)
    assert sc.alpha_bar[0] == 1.0
    assert np.all(np.diff(sc.alpha_bar) < 0)


def test_sampling_variance_positive():
    sc = make_continuous_schedule(50, 1e-4, 0.02)
    assert np.all(sc.sig2[1:] > 0)


def test_continuous_range_validation():
    with pytest.raises(ConfigError):
        make_continuous_schedule(10, 0.0, 0.5)
    with pytest.raises(ConfigError):
        make_continuous_schedule(10, 0.5, 0.1)
    with pytest.raises(ConfigError):
        make_continuous_schedule(1, 1e-4, 0.02)


def test_discrete_linear_survival():
    sc = make_discrete_schedule(4)
    np.testing.assert_allclose(sc.alpha_bar, [1.0, 0.75, 0.5, 0.25, 0.0],
                               atol=1e-15)


def test_discrete_boundaries_and_increments():
    sc = make_discrete_schedule(7)
    assert sc.alpha_bar[0] == 1.0
    assert sc.alpha_bar[7] == 0.0
    np.testing.assert_allclose(np.diff(sc.alpha_bar), -1.0 / 7, atol=1e-15)
    assert np.all(np.diff(sc.alpha_bar) < 0)


def test_discrete_needs_two_steps():
    with pytest.raises(ConfigError):
        make_discrete_schedule(1)
