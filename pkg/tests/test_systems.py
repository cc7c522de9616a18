import numpy as np
import pytest
from scipy.linalg import expm

from kcfcert.errors import NumericalError, ValidationError
from kcfcert.systems import (
    ControlSystem,
    ExperimentProtocol,
    collect,
    dc_motor,
    dc_motor_rhs,
    integrate_step,
    random_input_sequence,
    simulate_trajectory,
    synthetic_bilinear,
    synthetic_linear,
    system_from_meta,
)


class TestIntegrateStep:
    def test_fourth_order_against_matrix_exponential(self):
        a = np.array([[-0.5, 1.2], [-1.0, -0.3]])
        b = np.array([[0.7], [0.2]])
        x0 = np.array([0.4, -0.6])
        u = np.array([0.9])

        def exact(dt):
            phi = expm(a * dt)
            forced = np.linalg.solve(a, (phi - np.eye(2)) @ (b @ u))
            return phi @ x0 + forced

        def rhs(x, uu):
            return a @ x + b @ uu

        err = {dt: np.linalg.norm(integrate_step(rhs, x0, u, dt) - exact(dt))
               for dt in (0.1, 0.05)}
        assert err[0.1] < 1e-6
        # one halving of dt shrinks the local error by about 2^5
        assert 20.0 < err[0.1] / err[0.05] < 48.0

    def test_zero_field_is_identity(self):
        out = integrate_step(lambda x, u: np.zeros_like(x), np.array([1.0, 2.0]),
                             np.array([0.0]), 0.01)
        assert np.array_equal(out, [1.0, 2.0])


class TestDcMotor:
    def test_rhs_at_origin(self):
        for u in (-2.0, 0.0, 1.3):
            assert np.allclose(dc_motor_rhs(np.zeros(2), np.array([u])),
                               [191.083, -333.333])

    def test_rhs_formula(self):
        x = np.array([1.5, -20.0])
        u = np.array([1.0])
        f = 2.0 * np.tanh(1.0)
        want = [-39.3153 * 1.5 - 0.805732 * (-20.0) * f + 191.083,
                -1.65986 * (-20.0) + 57.3696 * 1.5 * f - 333.333]
        assert np.allclose(dc_motor_rhs(x, u), want, atol=1e-12)

    def test_input_term_variants(self):
        plain = dc_motor("tanh")
        warped = dc_motor("tanh-cos")
        assert plain.tag == "dc-motor-tanh"
        assert warped.tag == "dc-motor-tanh-cos"
        x = np.array([1.0, 10.0])
        u = np.array([2.0])
        assert not np.allclose(plain.rhs(x, u), warped.rhs(x, u))
        with pytest.raises(ValidationError):
            dc_motor("linear")

    def test_operating_boxes(self):
        system = dc_motor()
        assert np.array_equal(system.state_box, [[-5.0, 15.0], [-250.0, 125.0]])
        assert np.array_equal(system.input_box, [[-2.0, 2.0]])


class TestSyntheticSystems:
    def test_linear_step(self):
        system = synthetic_linear(np.array([[0.5, 0.1], [0.0, 0.9]]),
                                  np.array([[1.0], [0.0]]))
        got = system.step([1.0, 2.0], [0.3], dt=123.0)  # dt ignored by exact maps
        assert np.allclose(got, [0.5 + 0.2 + 0.3, 1.8])

    def test_bilinear_step(self):
        blocks = [np.array([[0.0, 1.0], [0.0, 0.0]])]
        system = synthetic_bilinear(np.eye(2) * 0.8, blocks)
        got = system.step([1.0, 2.0], [0.5], dt=1.0)
        assert np.allclose(got, [0.8 + 0.5 * 2.0, 1.6])

    def test_rebuild_from_meta(self):
        for system in (synthetic_linear(np.array([[0.5]]), np.array([[1.0]])),
                       synthetic_bilinear(np.eye(2), [np.eye(2)]),
                       dc_motor("tanh-cos")):
            meta = {"system": system.tag, "system_params": dict(system.params)}
            rebuilt = system_from_meta(meta)
            assert rebuilt.tag == system.tag
            x = np.full(system.n, 0.1)
            u = np.full(system.m, 0.2)
            assert np.allclose(rebuilt.step(x, u, 0.01), system.step(x, u, 0.01))
        with pytest.raises(ValidationError):
            system_from_meta({"system": "unknown"})

    def test_exactly_one_dynamics_callable(self):
        with pytest.raises(ValidationError):
            ControlSystem(n=1, m=1, state_box=[[-1, 1]], input_box=[[-1, 1]],
                          tag="bad")
        with pytest.raises(ValidationError):
            ControlSystem(n=1, m=1, state_box=[[-1, 1]], input_box=[[-1, 1]],
                          tag="bad", rhs=lambda x, u: x,
                          discrete_map=lambda x, u: x)

    def test_box_ordering_validated(self):
        with pytest.raises(ValidationError):
            ControlSystem(n=1, m=1, state_box=[[1, -1]], input_box=[[-1, 1]],
                          tag="bad", rhs=lambda x, u: x)


class TestRandomInputSequence:
    def test_piecewise_constant_with_hold(self):
        system = dc_motor()
        rng = np.random.default_rng(30)
        u = random_input_sequence(system, 200, 40, rng)
        assert u.shape == (1, 200)
        changes = np.nonzero(np.diff(u[0]))[0] + 1
        assert np.array_equal(changes, [40, 80, 120, 160])
        assert np.all(u >= -2.0) and np.all(u <= 2.0)

    def test_truncation_of_last_hold(self):
        system = synthetic_linear(np.array([[0.5]]), np.array([[1.0]]))
        u = random_input_sequence(system, 10, 4, np.random.default_rng(31))
        assert u.shape == (1, 10)
        assert u[0, 8] == u[0, 9]  # final partial block still constant

    def test_hold_validation(self):
        system = dc_motor()
        with pytest.raises(ValidationError):
            random_input_sequence(system, 10, 0, np.random.default_rng(0))


class TestSimulateTrajectory:
    def test_shapes_and_initial_state(self):
        system = synthetic_linear(np.array([[0.5]]), np.array([[1.0]]))
        traj = simulate_trajectory(system, [0.25], np.zeros((1, 7)), 1.0)
        assert traj.shape == (1, 8)
        assert traj[0, 0] == 0.25

    def test_guard_aborts_divergence(self):
        system = synthetic_linear(np.array([[3.0]]), np.array([[0.0]]))
        with pytest.raises(NumericalError) as err:
            simulate_trajectory(system, [1.0], np.zeros((1, 50)), 1.0)
        assert "step" in str(err.value)


class TestProtocol:
    def test_step_counts(self):
        protocol = ExperimentProtocol(duration=50.0, dt=0.005, hold=0.2, x0=[0.0, 0.0])
        assert protocol.n_steps == 10000
        assert protocol.hold_steps == 40

    def test_validation(self):
        with pytest.raises(ValidationError):
            ExperimentProtocol(duration=1.0, dt=0.0, hold=0.1, x0=[0.0])
        with pytest.raises(ValidationError):
            ExperimentProtocol(duration=1.0, dt=0.3, hold=0.3, x0=[0.0])
        with pytest.raises(ValidationError):
            ExperimentProtocol(duration=1.0, dt=0.1, hold=0.25, x0=[0.0])
        with pytest.raises(ValidationError):
            ExperimentProtocol(duration=1.0, dt=0.1, hold=0.1, x0=[0.0],
                               train_fraction=1.0)
        with pytest.raises(ValidationError):
            ExperimentProtocol(duration=1.0, dt=0.1, hold=0.1, x0=[0.0],
                               split="interleaved")


class TestCollect:
    def test_snapshots_chain_along_one_trajectory(self):
        system = dc_motor()
        protocol = ExperimentProtocol(duration=2.0, dt=0.005, hold=0.2,
                                      x0=[0.0, 0.0], seed=0)
        data = collect(system, protocol)
        assert data.n_snapshots == 400
        assert np.array_equal(data.x[:, 1:], data.xplus[:, :-1])
        assert np.array_equal(data.x[:, 0], [0.0, 0.0])

    def test_split_counts_and_modes(self):
        system = synthetic_linear(np.array([[0.5]]), np.array([[1.0]]))
        protocol = ExperimentProtocol(duration=10.0, dt=1.0, hold=1.0, x0=[0.1],
                                      seed=7, train_fraction=0.8)
        data = collect(system, protocol)
        assert (data.n_train, data.n_test) == (8, 2)
        contiguous = collect(system, ExperimentProtocol(
            duration=10.0, dt=1.0, hold=1.0, x0=[0.1], seed=7, split="contiguous"))
        assert np.array_equal(contiguous.train_mask,
                              [1, 1, 1, 1, 1, 1, 1, 1, 0, 0])

    def test_deterministic_given_seed(self):
        system = dc_motor()
        protocol = ExperimentProtocol(duration=1.0, dt=0.005, hold=0.2,
                                      x0=[0.0, 0.0], seed=11)
        first = collect(system, protocol)
        second = collect(system, protocol)
        assert np.array_equal(first.x, second.x)
        assert np.array_equal(first.u, second.u)
        assert np.array_equal(first.train_mask, second.train_mask)

    def test_meta_records_protocol(self):
        system = dc_motor("tanh-cos")
        protocol = ExperimentProtocol(duration=1.0, dt=0.005, hold=0.2,
                                      x0=[0.0, 0.0], seed=3)
        meta = collect(system, protocol).meta
        assert meta["system"] == "dc-motor-tanh-cos"
        assert meta["integrator"] == "rk4"
        assert meta["dt"] == 0.005 and meta["hold"] == 0.2
        assert meta["seed"] == 3 and meta["train_fraction"] == 0.8

    def test_initial_state_dimension(self):
        system = dc_motor()
        protocol = ExperimentProtocol(duration=1.0, dt=0.005, hold=0.2, x0=[0.0])
        with pytest.raises(ValidationError):
            collect(system, protocol)
