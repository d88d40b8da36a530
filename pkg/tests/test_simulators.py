import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsfine.errors import NonFinite, ShapeMismatch
from tsfine.simulators import (CascadedTanks, ParamVector, SimulatorSpec, StateSpaceModel,
                               Trajectory, VanDerPol, gen_prbs, get_model, noise_block,
                               register_model, simulate, simulate_batch, simulate_tanks,
                               simulate_vdp, tanks_spec, vdp_spec)


def euler_states(model, theta, x0, u, dt, n):
    """Plain-python reference rollout of the noise-free recursion."""
    xs = [np.array(x0, dtype=float)]
    for k in range(n - 1):
        x = xs[-1][None]
        xs.append(model.step(x, np.array([theta], float), u[k], dt)[0])
    return np.array(xs)


def test_param_vector_and_trajectory_validation():
    assert len(ParamVector([1.0, 2.0], ((0, 3), (0, 3)))) == 2
    with pytest.raises(ValueError):
        ParamVector([5.0], ((0, 1),))
    with pytest.raises(ValueError):
        ParamVector([np.nan])
    with pytest.raises(ShapeMismatch):
        Trajectory(np.zeros(3), np.zeros(4), 0.1)
    with pytest.raises(ValueError):
        Trajectory(np.zeros(2), np.array([0.0, np.inf]), 0.1)


def test_spec_validation():
    with pytest.raises(ValueError):
        vdp_spec(dt=0.0)
    with pytest.raises(ValueError):
        SimulatorSpec("vdp", 0.1, 10, (0.0, -1.0), 0.0, (1, 0), ((0, 1),))
    with pytest.raises(ValueError):
        SimulatorSpec("vdp", 0.1, 10, (0.0, 1.0), 0.0, (1, 0), ((0, 1),), noise_scaling="ito")


def test_vdp_harmonic_energy_growth_is_exact_euler_factor():
    # with nu = 0 each Euler step multiplies x1^2 + x2^2 by exactly 1 + dt^2
    spec = vdp_spec(horizon=50)
    xs = euler_states(VanDerPol(), [0.0], spec.x0, np.zeros(50), spec.dt, 50)
    energy = 0.5 * np.sum(xs ** 2, axis=1)
    expected = energy[0] * (1 + spec.dt ** 2) ** np.arange(50)
    np.testing.assert_allclose(energy, expected, rtol=1e-12)
    # the output channel carries x1 of the same recursion
    y = simulate([0.0], spec, 0, noise=False).outputs
    np.testing.assert_allclose(y, xs[:, 0], rtol=0, atol=0)


def test_vdp_energy_drift_vanishes_with_step_size():
    t_end = 49 * 0.05
    drifts = []
    for dt in (0.05, 0.005, 1e-4):
        n = int(round(t_end / dt)) + 1
        xs = euler_states(VanDerPol(), [0.0], (1.0, 0.0), np.zeros(n), dt, n)
        e = 0.5 * np.sum(xs ** 2, axis=1)
        drifts.append(abs(e[-1] / e[0] - 1))
    assert drifts[0] > drifts[1] > drifts[2]
    assert drifts[1] < 0.03 and drifts[2] < 1e-3


def test_vdp_limit_cycle_amplitude():
    y = simulate([3.0], vdp_spec(horizon=2000), 0, noise=False).outputs
    assert 1.9 <= np.abs(y[600:]).max() <= 2.3


def test_vdp_euler_convergence_order():
    # noise-free sup-norm change when halving dt shrinks roughly linearly
    t_end = 5.0
    def path(dt):
        n = int(round(t_end / dt)) + 1
        return simulate([1.0], vdp_spec(horizon=n, dt=dt), 0, noise=False).outputs
    a, b, c = path(0.01), path(0.005), path(0.0025)
    e1 = np.abs(a - b[::2]).max()
    e2 = np.abs(b - c[::2]).max()
    assert 1.6 < e1 / e2 < 2.4


def test_seed_determinism_and_noise_variance():
    spec = vdp_spec()
    a = simulate([1.3], spec, 42)
    b = simulate([1.3], spec, 42)
    assert np.array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.outputs, simulate([1.3], spec, 43).outputs)
    # second step: x2 = dt * (nu*(1-x1^2)*x2 - x1 + w), x1 unchanged, so
    # y at k=2 is x1 + dt*x2 and its spread is dt^2 * sd_w
    ys = simulate_batch(np.full((4000, 1), 1.0), spec, np.arange(4000), noise=True)
    sd = np.std(ys[:, 2])
    assert abs(sd - spec.dt ** 2 * math.sqrt(0.02)) < 0.05 * spec.dt ** 2 * math.sqrt(0.02)


def test_sqrt_dt_noise_scaling_option():
    base = vdp_spec()
    alt = SimulatorSpec("vdp", base.dt, base.horizon, base.process_var, 0.0, base.x0, base.bounds,
                        noise_scaling="sqrt_dt")
    np.testing.assert_allclose(alt.process_sd, [0.0, math.sqrt(base.dt * 0.02)])
    np.testing.assert_allclose(base.process_sd, [0.0, base.dt * math.sqrt(0.02)])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(-0.5, 0.5), st.integers(0, 2**40))
def test_common_random_numbers(nu, delta, seed):
    # theta enters only through the drift, so the difference of two noisy
    # runs on one seed equals the difference of the noise-free runs while
    # the recursion is linear in the noise; check the noise draw itself
    spec = vdp_spec(horizon=40)
    eps = noise_block(seed, 40, 3)
    assert np.array_equal(eps, noise_block(seed, 40, 3))
    a = simulate([nu], spec, seed).outputs
    b = simulate([nu + delta if nu + delta >= 0 else 0.0], spec, seed).outputs
    # first two outputs do not depend on nu at all
    assert np.array_equal(a[:2], b[:2])


def test_nonfinite_reports_step():
    class Blowup(StateSpaceModel):
        n_states = 1

        def drift(self, x, theta, u):
            return x * x * 1e10
    register_model("blowup", Blowup())
    spec = SimulatorSpec("plugin", 1.0, 30, (0.0,), 0.0, (1.0,), ((0, 1),), plugin="blowup")
    with pytest.raises(NonFinite) as info:
        simulate([0.5], spec, 0, noise=False)
    assert info.value.step is not None and 0 < info.value.step < 30
    y = simulate_batch([[0.5]], spec, [0], noise=False, on_nonfinite="nan")
    assert np.all(np.isnan(y))


def test_tanks_zero_input_equilibrium():
    u = np.zeros(400)
    z = simulate_tanks([0.6, 0.6, 0.6, 1.0], u, tanks_spec().noiseless(), 0)
    assert np.all(z.outputs == 0.0)


def test_tanks_steady_state_and_input_check():
    m = CascadedTanks()
    th = np.array([[0.5, 0.7, 0.6, 1.1]])
    x = np.zeros((1, 2))
    for _ in range(4000):
        x = m.step(x, th, 1.2, 0.5)
    assert abs(x[0, 0] - (1.1 * 1.2 / 0.5) ** 2) < 1e-9
    # lower tank: k2 sqrt(h1) = k3 sqrt(h2)
    assert abs(x[0, 1] - (0.7 * math.sqrt(x[0, 0]) / 0.6) ** 2) < 1e-9
    with pytest.raises(ValueError):
        simulate_tanks([0.6] * 4, -np.ones(400), tanks_spec(), 0)


def test_tanks_levels_nonnegative_in_box():
    u = gen_prbs((0, 3), 30, 400, 7)
    rng = np.random.default_rng(0)
    th = rng.uniform([0.4, 0.4, 0.4, 0.8], [0.8, 0.8, 0.8, 1.2], (50, 4))
    y = simulate_batch(th, tanks_spec().noiseless(), 0, u, noise=False)
    assert np.all(y >= 0)


def test_tanks_determinism():
    u = gen_prbs((0, 3), 30, 400, 1)
    a = simulate([0.6, 0.5, 0.7, 1.0], tanks_spec(), 9, u)
    b = simulate([0.6, 0.5, 0.7, 1.0], tanks_spec(), 9, u)
    assert np.array_equal(a.outputs, b.outputs)


def test_prbs_blocks():
    u = gen_prbs((0, 3), 30, 400, 123)
    assert u.size == 400
    changes = np.count_nonzero(np.diff(u)) + 1
    assert changes == math.ceil(400 / 30) == 14
    assert np.all((u >= 0) & (u <= 3))
    assert np.all(gen_prbs((1, 2), 50, 50, 0) == gen_prbs((1, 2), 50, 50, 0)[0])
    assert np.array_equal(gen_prbs((0, 3), 30, 400, 5), gen_prbs((0, 3), 30, 400, 5))


def test_identity_plugin_passes_inputs():
    spec = SimulatorSpec("plugin", 1.0, 20, (0.0,), 0.0, (0.0,), ((0, 1),), plugin="identity")
    u = np.linspace(-1, 1, 20)
    assert np.array_equal(simulate([0.3], spec, 0, u).outputs, u)
    assert isinstance(get_model(spec), StateSpaceModel)


def test_simulate_vdp_kind_check():
    with pytest.raises(ValueError):
        simulate_vdp(1.0, np.zeros(400), tanks_spec(), 0)
    assert simulate_vdp(1.0, np.zeros(300), vdp_spec(), 0).outputs.shape == (300,)
