import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gainlab.core import ConfigError
from gainlab.envs import (
    CartTiltConfig,
    CartTiltEnv,
    DivergenceError,
    LandscapeConfig,
    LandscapeEnv,
    cart_energy,
    cart_step,
    env_reset,
    landscape_step,
    make_env,
    triangular_basis,
)


# ------------------------------------------------------------------ landscape


def test_landscape_peak_and_hazard():
    cfg = LandscapeConfig()
    obs = landscape_step([0.8, 0.5], cfg)
    assert obs.channels.primary == pytest.approx(1.0, abs=1e-12)
    assert obs.channels.penalties[0] == pytest.approx(0.5, abs=1e-12)
    assert obs.violated == (False,)
    assert obs.done


def test_landscape_origin_is_safe():
    obs = landscape_step([0.0, 0.0], LandscapeConfig())
    assert obs.channels.penalties == (0.0,)
    assert obs.channels.primary == pytest.approx(math.exp(-(0.64 + 0.25) / 0.08))


def test_landscape_threshold_is_strict():
    obs = landscape_step([0.9, 0.5], LandscapeConfig())
    assert obs.channels.penalties[0] == pytest.approx(0.75, abs=1e-12)
    assert obs.violated == (False,)
    assert landscape_step([0.95, 0.5], LandscapeConfig()).violated == (True,)


def test_landscape_clips_to_unit_square():
    a = landscape_step([1.7, -0.3], LandscapeConfig())
    b = landscape_step([1.0, 0.0], LandscapeConfig())
    assert a == b


def test_landscape_env_protocol():
    env = make_env("landscape")
    assert isinstance(env, LandscapeEnv)
    np.testing.assert_array_equal(env.initial_theta(), [0.2, 0.2])
    action, grad = env.act(np.array([0.3, 0.4]), 0)
    np.testing.assert_array_equal(grad, [1.0, 1.0])
    assert env.step(action).state == (0.3, 0.4)
    assert env.constraint_spec().tau == (0.75,)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_landscape_channels_bounded(a, b):
    obs = landscape_step([a, b], LandscapeConfig())
    assert 0 <= obs.channels.primary <= 1
    assert 0 <= obs.channels.penalties[0] <= 1


# ------------------------------------------------------------------ cart


def test_cart_hanging_rest_is_equilibrium():
    cfg = CartTiltConfig()
    state = (0.0, 0.0, 0.0, 0.0)
    for t in range(50):
        state = cart_step(state, 0.0, cfg, t).state
    assert state == (0.0, 0.0, 0.0, 0.0)


def test_cart_one_step_matches_linearised_dynamics():
    # rod with centre of mass l below the pivot, inertia m (2l)^2 / 12 about its centre
    cfg = CartTiltConfig(friction=0.0)
    M, m, l, F = cfg.m_cart, cfg.m_pole, cfg.half_length, 5.0
    A = np.array([[M + m, -m * l], [-m * l, 4.0 / 3.0 * m * l * l]])
    xdd, phidd = np.linalg.solve(A, [F, 0.0])
    obs = cart_step((0.0, 0.0, 0.0, 0.0), F, cfg)
    x, xd, phi, phid = obs.state
    assert xd == pytest.approx(xdd * cfg.dt, rel=0.01)
    assert phid == pytest.approx(phidd * cfg.dt, rel=0.01)
    # the rod lags behind, so the cart moves a little faster than a rigid body would
    assert xd == pytest.approx(F / (M + m) * cfg.dt, rel=0.25)
    assert abs(phi) > 0 and obs.channels.penalties[0] == abs(phi)
    assert obs.channels.primary == xd


def test_cart_energy_conserved_without_friction():
    cfg = CartTiltConfig(friction=0.0)
    state = (0.0, 0.0, 0.3, 0.0)
    e0 = cart_energy(state, cfg)
    for t in range(1000):
        state = cart_step(state, 0.0, cfg, t).state
    assert abs(cart_energy(state, cfg) - e0) <= 0.01 * e0


def test_cart_force_is_clipped():
    cfg = CartTiltConfig()
    a = cart_step((0.0, 0.0, 0.0, 0.0), 1e6, cfg)
    b = cart_step((0.0, 0.0, 0.0, 0.0), cfg.force_limit, cfg)
    assert a == b


def test_cart_fall_terminates_episode():
    cfg = CartTiltConfig()
    obs = cart_step((0.0, 0.0, 1.0, 0.0), 0.0, cfg, 3)
    assert obs.done and obs.violated == (True,)
    env = CartTiltEnv(cfg)
    assert env.is_failure(np.array([[0, 0, 0.9, 0], [0, 0, 0.1, 0]])).tolist() == [True, False]


def test_cart_non_finite_state_raises():
    with pytest.raises(DivergenceError):
        cart_step((0.0, math.inf, 0.0, 0.0), 0.0, CartTiltConfig())


def test_cart_reset_jitter_and_determinism():
    env = CartTiltEnv()
    phis = [env_reset(env, [0, e, 1]).state[2] for e in range(200)]
    assert max(map(abs, phis)) <= 0.01
    assert np.std(phis) > 0
    a = env_reset(env, [7, 3, 1]).state
    b = env_reset(env, [7, 3, 1]).state
    assert a == b


def test_cart_policy_parametrisation():
    env = CartTiltEnv()
    assert env.n_params == 8
    force, grad = env.act(np.ones(8), 10)
    assert force == pytest.approx(env.cfg.force_limit)
    assert grad.sum() == pytest.approx(1.0)
    force, _ = env.act(np.full(8, 5.0), 0)
    assert force == env.cfg.force_limit


def test_triangular_basis_partition_of_unity():
    B = triangular_basis(8, 70)
    assert B.shape == (70, 8)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= 0)
    np.testing.assert_array_equal(triangular_basis(1, 5), 1.0)


# ------------------------------------------------------------------ factory


def test_make_env_rejects_unknown():
    with pytest.raises(ConfigError) as exc:
        make_env("pendulum")
    assert exc.value.field == "env.name"
    with pytest.raises(ConfigError) as exc:
        make_env("cart", mass=2.0)
    assert exc.value.field == "env.mass"


@pytest.mark.parametrize("name,params,field", [
    ("cart", {"tau_tilt": 0.0}, "env.tau_tilt"),
    ("cart", {"dt": -1.0}, "env.dt"),
    ("landscape", {"tau": 1.5}, "env.tau"),
    ("landscape", {"mode": "trajectory"}, "env.mode"),
])
def test_make_env_validates_fields(name, params, field):
    with pytest.raises(ConfigError) as exc:
        make_env(name, **params)
    assert exc.value.field == field


def test_make_env_accepts_list_params():
    env = make_env("landscape", reward_center=[0.7, 0.4])
    assert env.cfg.reward_center == (0.7, 0.4)
