"""Single-qubit simulator: closed forms, shot statistics and parameter-shift exactness"""

import math

import numpy as np
import pytest

from lab_errors import ParameterError, QuantumStateError, UsageError
from quantum_sim import (
    PROBABILITY_FLOOR, ZERO_STATE, HeadMode, QuantumHead, Statevector, amplitude_to_angle, evaluate_observable,
    evolve, expectation_z, hadamard, hybrid_head, param_shift_grad, ry, run_circuit, sample_shots,
)
from tensor_autodiff import Tape, Tensor, add, backward_pass, parameter, scale, take_rows

H_MATRIX = np.array([[1, 1], [1, -1]]) / math.sqrt(2)


def ry_matrix(theta):
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -s], [s, c]])


def exact_head(mode=HeadMode.ANGLE, w=0.0):
    return QuantumHead(mode=mode, weight=parameter([w], name="head.w"))


class TestGates:
    def test_hadamard_on_zero(self):
        state = evolve(ZERO_STATE, hadamard())
        np.testing.assert_allclose(state.as_array(), [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)

    def test_half_turn(self):
        np.testing.assert_allclose(evolve(ZERO_STATE, ry(math.pi)).as_array(), [0, 1], atol=1e-15)

    @pytest.mark.parametrize("theta", np.linspace(-math.pi, math.pi, 9))
    def test_h_then_ry_matches_matrix_product(self, theta):
        expected = ry_matrix(theta) @ H_MATRIX @ np.array([1.0, 0.0])
        closed = np.array([math.cos(theta / 2) - math.sin(theta / 2),
                           math.cos(theta / 2) + math.sin(theta / 2)]) / math.sqrt(2)
        state = run_circuit([hadamard(), ry(theta)])
        np.testing.assert_allclose(state.as_array(), expected, atol=1e-14)
        np.testing.assert_allclose(state.as_array(), closed, atol=1e-14)

    def test_norm_preserved(self, rng):
        state = ZERO_STATE
        for theta in rng.uniform(-math.pi, math.pi, 50):
            state = evolve(evolve(state, hadamard()), ry(theta))
        assert state.norm_squared() == pytest.approx(1.0, abs=1e-12)

    def test_unnormalized_input_rejected(self):
        with pytest.raises(QuantumStateError):
            evolve(Statevector(1.0, 1.0), hadamard())


class TestExpectation:
    def test_basis_and_superposition(self):
        assert expectation_z(ZERO_STATE) == 1.0
        assert expectation_z(evolve(ZERO_STATE, hadamard())) == pytest.approx(0.0, abs=1e-15)

    def test_pi_over_six(self):
        assert expectation_z(run_circuit([hadamard(), ry(math.pi / 6)])) == pytest.approx(-0.5, abs=1e-12)

    def test_closed_forms_over_grid(self):
        head = exact_head(HeadMode.ANGLE)
        for theta in np.linspace(-math.pi, math.pi, 1000):
            assert evaluate_observable(head, {"theta": theta}, "z") == pytest.approx(-math.sin(theta), abs=1e-12)
            assert evaluate_observable(head, {"theta": theta}, "p1") == pytest.approx((1 + math.sin(theta)) / 2,
                                                                                     abs=1e-12)

    def test_amplitude_closed_form(self, rng):
        head = exact_head(HeadMode.AMPLITUDE)
        for phi, w in rng.uniform(-math.pi, math.pi, size=(200, 2)):
            p1 = evaluate_observable(head, {"phi": phi, "w": w}, "p1")
            assert p1 == pytest.approx(math.sin(phi + w / 2) ** 2, abs=1e-12)

    def test_unknown_observable(self):
        with pytest.raises(UsageError):
            evaluate_observable(exact_head(), {"theta": 0.0}, "x")


class TestShots:
    def test_zero_state_never_yields_one(self, rng):
        assert sample_shots(ZERO_STATE, 5000, rng).counts1 == 0

    def test_fixed_seed_repeats(self):
        state = run_circuit([hadamard()])
        a = sample_shots(state, 1000, np.random.default_rng(9))
        b = sample_shots(state, 1000, np.random.default_rng(9))
        assert a == b

    @pytest.mark.parametrize("p1", [0.1, 0.5, 0.9])
    def test_concentration(self, p1):
        state = run_circuit([ry(2 * math.asin(math.sqrt(p1)))])
        shots = 10_000
        rng = np.random.default_rng(int(p1 * 100))
        inside = sum(abs(sample_shots(state, shots, rng).frequency1 - p1) < 5 / math.sqrt(shots)
                     for _ in range(1000))
        assert inside >= 990

    @pytest.mark.parametrize("shots", [0, -3, 2.5])
    def test_shot_count_validated(self, shots, rng):
        with pytest.raises(ParameterError):
            sample_shots(ZERO_STATE, shots, rng)

    def test_head_rejects_negative_shots(self):
        with pytest.raises(ParameterError):
            QuantumHead(shots=-1)


class TestAmplitudeEmbedding:
    def test_axes(self):
        assert amplitude_to_angle(1.0, 0.0) == 0.0
        assert amplitude_to_angle(0.0, 1.0) == pytest.approx(math.pi / 2)

    def test_diagonal(self):
        phi = amplitude_to_angle(1.0, 1.0)
        assert phi == pytest.approx(math.pi / 4)
        np.testing.assert_allclose(run_circuit([ry(2 * phi)]).as_array(), [1 / math.sqrt(2)] * 2, atol=1e-15)

    def test_scale_invariant(self):
        assert amplitude_to_angle(3.0, 4.0) == pytest.approx(amplitude_to_angle(0.3, 0.4), abs=1e-15)

    def test_degenerate_pair_maps_to_zero(self):
        head = exact_head(HeadMode.AMPLITUDE)
        assert amplitude_to_angle(0.0, 0.0) == 0.0
        assert head.angles_for([0.0, 0.0])["phi"] == 0.0
        assert head.degenerate_inputs == 1


class TestHybridHead:
    def test_angle_zero_is_even(self):
        out = hybrid_head(Tensor([0.0]), exact_head(HeadMode.ANGLE))
        assert math.exp(out.data[1]) == pytest.approx(0.5, abs=1e-12)

    def test_angle_half_pi_is_clamped(self):
        out = hybrid_head(Tensor([math.pi / 2]), exact_head(HeadMode.ANGLE))
        assert math.exp(out.data[1]) == pytest.approx(1 - PROBABILITY_FLOOR, abs=1e-12)
        assert np.all(np.isfinite(out.data))

    def test_amplitude_quarter_turn(self):
        out = hybrid_head(Tensor([1.0, 1.0]), exact_head(HeadMode.AMPLITUDE))
        probs = np.exp(out.data)
        assert probs[1] == pytest.approx(0.5, abs=1e-12)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_arity_checked(self):
        with pytest.raises(UsageError):
            hybrid_head(Tensor([1.0]), exact_head(HeadMode.AMPLITUDE))

    def test_theta_gradient_through_tape(self):
        theta = 0.3
        x = parameter([[theta]])
        with Tape():
            row = take_rows(hybrid_head(x, exact_head(HeadMode.ANGLE)), 0)
            log_p1 = take_rows(row, 1)
            backward_pass(log_p1)
        # d log P1 / dθ = (cos θ / 2) / P1
        expected = (math.cos(theta) / 2) / ((1 + math.sin(theta)) / 2)
        assert x.grad[0, 0] == pytest.approx(expected, abs=1e-10)

    def test_amplitude_gradients_match_finite_differences(self, rng):
        head = exact_head(HeadMode.AMPLITUDE, w=0.4)
        rows = parameter(rng.normal(size=(3, 2)))
        labels = np.array([0, 1, 1])

        def loss_value():
            out = hybrid_head(Tensor(rows.data), head)
            return float(-out.data[np.arange(3), labels].sum())

        with Tape():
            out = hybrid_head(rows, head)
            picked = [take_rows(take_rows(out, i), int(labels[i])) for i in range(3)]
            total = scale(add(add(picked[0], picked[1]), picked[2]), -1.0)
            backward_pass(total)

        h = 1e-5
        numeric = np.zeros_like(rows.data)
        for index in np.ndindex(rows.shape):
            saved = rows.data[index]
            rows.data[index] = saved + h
            plus = loss_value()
            rows.data[index] = saved - h
            minus = loss_value()
            rows.data[index] = saved
            numeric[index] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(rows.grad, numeric, atol=1e-6)

        saved = head.weight.data.copy()
        head.weight.data = saved + h
        plus = loss_value()
        head.weight.data = saved - h
        minus = loss_value()
        head.weight.data = saved
        assert head.weight.grad[0] == pytest.approx((plus - minus) / (2 * h), abs=1e-6)


class TestParameterShift:
    def test_z_slope_at_zero(self):
        assert param_shift_grad(exact_head(), "θ", {"theta": 0.0}, "z") == pytest.approx(-1.0, abs=1e-12)

    def test_w_stationary_at_origin(self):
        head = exact_head(HeadMode.AMPLITUDE)
        assert param_shift_grad(head, "w", {"phi": 0.0, "w": 0.0}) == pytest.approx(0.0, abs=1e-12)

    def test_unknown_angle(self):
        with pytest.raises(UsageError):
            param_shift_grad(exact_head(HeadMode.ANGLE), "w", {"theta": 0.0})

    def test_exact_against_analytic_and_finite_differences(self):
        rng = np.random.default_rng(42)
        angle_head = exact_head(HeadMode.ANGLE)
        amp_head = exact_head(HeadMode.AMPLITUDE)
        h = 1e-5
        for _ in range(100):
            theta, phi, w = rng.uniform(-math.pi, math.pi, 3)
            # angle mode: <Z> = -sin θ, P1 = (1 + sin θ)/2
            assert param_shift_grad(angle_head, "theta", {"theta": theta}, "z") == pytest.approx(
                -math.cos(theta), abs=1e-12)
            assert param_shift_grad(angle_head, "theta", {"theta": theta}, "p1") == pytest.approx(
                math.cos(theta) / 2, abs=1e-12)
            # amplitude mode: P1 = sin²(φ + w/2)
            at = {"phi": phi, "w": w}
            assert param_shift_grad(amp_head, "phi", at) == pytest.approx(math.sin(2 * phi + w), abs=1e-12)
            assert param_shift_grad(amp_head, "w", at) == pytest.approx(math.sin(2 * phi + w) / 2, abs=1e-12)
            for name in ("phi", "w"):
                plus, minus = dict(at), dict(at)
                plus[name] += h
                minus[name] -= h
                fd = (evaluate_observable(amp_head, plus) - evaluate_observable(amp_head, minus)) / (2 * h)
                assert param_shift_grad(amp_head, name, at) == pytest.approx(fd, abs=1e-6)

    def test_shot_mode_shares_seed_between_shifts(self):
        head = QuantumHead(mode=HeadMode.ANGLE, shots=2000, seed=3)
        a = param_shift_grad(head, "theta", {"theta": 0.2}, "p1", shot_seed=17)
        b = param_shift_grad(head, "theta", {"theta": 0.2}, "p1", shot_seed=17)
        assert a == b
        assert a == pytest.approx(math.cos(0.2) / 2, abs=0.1)
