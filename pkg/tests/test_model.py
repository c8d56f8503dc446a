import math

import numpy as np
import pytest

import obsv_lab.expr as ex
from obsv_lab.model import (
    CascadeSystem,
    InvalidSystemError,
    SystemFormatError,
    as_control_affine,
    linearize_at,
    load_system,
    observability_matrix,
    preset,
    preset_names,
    validate,
)


def gauss_preset():
    return preset("fish-1d-gauss")


# ---------------------------------------------------------------------------
# validation


def test_validate_clean_presets():
    for name in preset_names():
        assert validate(preset(name)) == []


def test_validate_zero_b_entry():
    sys = CascadeSystem(
        n=1,
        gamma=(ex.parse("sin(x)", {"x"}),),
        F=(ex.parse("-z1", {"z1"}),),
        b=(0.0,),
    )
    msgs = validate(sys)
    assert any("b_1" in m for m in msgs)


def test_validate_gamma_wrong_variable():
    sys = CascadeSystem(
        n=1,
        gamma=(ex.parse("sin(z1)", {"z1"}),),
        F=(ex.parse("-z1", {"z1"}),),
        b=(1.0,),
    )
    msgs = validate(sys)
    assert any("gamma_1" in m and "z1" in m for m in msgs)


def test_validate_length_mismatch():
    sys = CascadeSystem(
        n=2,
        gamma=(ex.parse("sin(x)", {"x"}),),
        F=(ex.parse("-z1", {"z1"}), ex.parse("-z2", {"z2"})),
        b=(1.0, 1.0),
    )
    assert any("gamma" in m for m in validate(sys))


def test_as_control_affine_rejects_invalid():
    sys = CascadeSystem(
        n=1,
        gamma=(ex.parse("sin(x)", {"x"}),),
        F=(ex.parse("-z1", {"z1"}),),
        b=(0.0,),
    )
    with pytest.raises(InvalidSystemError):
        as_control_affine(sys)


# ---------------------------------------------------------------------------
# control-affine form


def test_control_affine_shapes():
    sys = CascadeSystem(
        n=2,
        gamma=(ex.parse("sin(x)", {"x"}), ex.parse("exp(-x^2)", {"x"})),
        F=(ex.parse("-z1 + 0.5*z2", {"z1", "z2"}), ex.parse("-z2", {"z1", "z2"})),
        b=(1.0, -2.0),
    )
    ca = as_control_affine(sys)
    assert ca.dim == 4
    assert ca.m == 1
    assert ca.p == 2
    assert ca.state_vars == ("x1", "x2", "z1", "z2")
    # drift starts with the velocities
    assert ca.drift[0] == ex.Var("z1")
    assert ca.drift[1] == ex.Var("z2")
    # input field is (0, 0, b1, b2)
    env = {v: 0.0 for v in ca.state_vars}
    assert [ex.evaluate(g, env) for g in ca.input_fields[0]] == [0.0, 0.0, 1.0, -2.0]


def test_outputs_are_gain_times_velocity():
    ca = as_control_affine(gauss_preset())
    env = {"x1": 0.5, "z1": 2.0}
    assert ex.evaluate(ca.outputs[0], env) == pytest.approx(
        math.exp(-0.25) * 2.0, rel=1e-14
    )
    assert ex.free_vars(ca.outputs[0]) == {"x1", "z1"}


def test_second_block_gain_uses_its_own_position():
    sys = CascadeSystem(
        n=2,
        gamma=(ex.parse("sin(x)", {"x"}), ex.parse("cos(x)", {"x"})),
        F=(ex.parse("-z1", {"z1", "z2"}), ex.parse("-z2", {"z1", "z2"})),
        b=(1.0, 1.0),
    )
    ca = as_control_affine(sys)
    env = {"x1": 0.3, "x2": 1.1, "z1": 1.0, "z2": 2.0}
    assert ex.evaluate(ca.outputs[1], env) == pytest.approx(math.cos(1.1) * 2.0)


# ---------------------------------------------------------------------------
# linearization


def test_linearize_gauss_at_rest():
    ca = as_control_affine(gauss_preset())
    lin = linearize_at(ca, (0.0, 0.0))
    np.testing.assert_allclose(lin.A, [[0.0, 1.0], [0.0, -1.0]], atol=1e-14)
    np.testing.assert_allclose(lin.B, [[0.0], [1.0]], atol=1e-14)
    np.testing.assert_allclose(lin.C, [[0.0, 1.0]], atol=1e-14)


def test_linearize_rest_output_row_is_gain_value():
    # at (x*, 0) the output row reduces to (0, gamma(x*))
    ca = as_control_affine(preset("periodic-sin"))
    for xstar in (-1.0, 0.4, 2.0):
        lin = linearize_at(ca, (xstar, 0.0))
        np.testing.assert_allclose(lin.C, [[0.0, math.sin(xstar)]], atol=1e-14)


def test_linearize_matches_finite_differences():
    sys = CascadeSystem(
        n=2,
        gamma=(ex.parse("sin(x)", {"x"}), ex.parse("tanh(x)", {"x"})),
        F=(
            ex.parse("-z1 + 0.3*sin(z2)", {"z1", "z2"}),
            ex.parse("-2*z2 + 0.1*z1", {"z1", "z2"}),
        ),
        b=(1.0, 0.5),
    )
    ca = as_control_affine(sys)
    x0 = np.array([0.3, -0.7, 0.9, 0.4])
    lin = linearize_at(ca, x0)
    h = 1e-6

    def drift_vec(x):
        env = dict(zip(ca.state_vars, x))
        return np.array([ex.evaluate(f, env) for f in ca.drift])

    for j in range(4):
        step = np.zeros(4)
        step[j] = h
        fd = (drift_vec(x0 + step) - drift_vec(x0 - step)) / (2 * h)
        np.testing.assert_allclose(lin.A[:, j], fd, rtol=1e-6, atol=1e-8)


def test_linearize_wrong_dimension():
    ca = as_control_affine(gauss_preset())
    with pytest.raises(ValueError):
        linearize_at(ca, (0.0, 0.0, 0.0))


def test_observability_matrix_known_pairs():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert np.linalg.matrix_rank(observability_matrix(A, np.array([[1.0, 0.0]]))) == 2
    # velocity-only measurement of a double integrator misses position
    assert np.linalg.matrix_rank(observability_matrix(A, np.array([[0.0, 1.0]]))) == 1


# ---------------------------------------------------------------------------
# file format


GOOD_FILE = """
# two-block cascade
n = 2
gamma[1] = exp(-x^2)
gamma[2] = sin(x)   # trailing comment
F[1] = -z1 + 0.5*z2
F[2] = -z2
b = [1, -0.5]
"""


def test_load_system_round_trip():
    sys = load_system(GOOD_FILE)
    assert sys.n == 2
    assert sys.b == (1.0, -0.5)
    assert validate(sys) == []
    assert ex.evaluate(sys.gamma[1], {"x": 0.0}) == 0.0


def test_load_system_missing_entry():
    text = "n = 2\ngamma[1] = sin(x)\ngamma[2] = sin(x)\nF[1] = -z1\nb = [1, 1]\n"
    with pytest.raises(SystemFormatError) as exc:
        load_system(text)
    assert "F[2]" in str(exc.value)


def test_load_system_duplicate_key():
    text = "n = 1\ngamma[1] = sin(x)\ngamma[1] = cos(x)\nF[1] = -z1\nb = [1]\n"
    with pytest.raises(SystemFormatError):
        load_system(text)


def test_load_system_bad_expression_reports_line():
    text = "n = 1\ngamma[1] = sin(q)\nF[1] = -z1\nb = [1]\n"
    with pytest.raises(SystemFormatError) as exc:
        load_system(text)
    assert exc.value.line_no == 2


def test_load_system_wrong_b_arity():
    text = "n = 2\ngamma[1] = sin(x)\ngamma[2] = sin(x)\nF[1] = -z1\nF[2] = -z2\nb = [1]\n"
    with pytest.raises(SystemFormatError):
        load_system(text)


def test_load_system_zero_b_is_validation_error():
    text = "n = 1\ngamma[1] = sin(x)\nF[1] = -z1\nb = [0]\n"
    with pytest.raises(InvalidSystemError) as exc:
        load_system(text)
    assert any("b_1" in v for v in exc.value.violations)


def test_load_system_stray_key():
    text = "n = 1\ngamma[1] = sin(x)\nF[1] = -z1\nb = [1]\nq = 3\n"
    with pytest.raises(SystemFormatError):
        load_system(text)
