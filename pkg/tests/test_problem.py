import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab import problem as P

EXAMPLE_CONFIG = """
[dims]
n = 1
d = 1
k = 1

[horizon]
T = 1.0

[control]
lo = 0.0
hi = 1.0

[coefficients]
b1 = "x1 * u1"
sigma1_1 = "x1"
f = "x1 - y"
phi = "x1"
"""


def test_parse_example_config_matches_builtin():
    spec, initial = P.parse_problem(EXAMPLE_CONFIG)
    assert initial is None
    assert (spec.n, spec.d, spec.k) == (1, 1, 1)
    assert spec.horizon == 1.0
    b, sg = P.eval_coefficients(spec, 0.0, np.array([2.0]), np.array([0.5]))
    assert b == pytest.approx(1.0)
    assert sg[0, 0] == pytest.approx(2.0)


def test_eval_coefficients_zero_state(spec31):
    b, sg = P.eval_coefficients(spec31, 0.0, np.array([0.0]), np.array([1.0]))
    assert b[0] == 0.0 and sg[0, 0] == 0.0


def test_eval_coefficients_control_outside_box(spec31):
    with pytest.raises(P.ControlBoxError):
        P.eval_coefficients(spec31, 0.0, np.array([1.0]), np.array([2.0]))


def test_syntax_error_carries_position():
    bad = EXAMPLE_CONFIG.replace('"x1 * u1"', '"x1 *"')
    with pytest.raises(P.ExpressionSyntaxError) as err:
        P.parse_problem(bad)
    assert err.value.line is not None
    assert err.value.col is not None


def test_empty_control_box_rejected():
    bad = EXAMPLE_CONFIG.replace("lo = 0.0", "lo = 1.0").replace("hi = 1.0", "hi = 0.0")
    with pytest.raises(P.ConfigError, match="empty control box"):
        P.parse_problem(bad)


def test_unknown_key_rejected():
    bad = EXAMPLE_CONFIG.replace("[horizon]", "[horizon]\nbogus = 3")
    with pytest.raises(P.ConfigError, match="unknown key"):
        P.parse_problem(bad)


def test_missing_sigma_entry_rejected():
    bad = EXAMPLE_CONFIG.replace('sigma1_1 = "x1"\n', "")
    with pytest.raises(P.ConfigError, match="sigma1_1"):
        P.parse_problem(bad)


def test_undeclared_variable_rejected():
    bad = EXAMPLE_CONFIG.replace('"x1 - y"', '"x2 - y"')
    with pytest.raises(P.ExpressionSyntaxError, match="x2"):
        P.parse_problem(bad)


def test_phi_cannot_see_controls():
    bad = EXAMPLE_CONFIG.replace('phi = "x1"', 'phi = "x1 * u1"')
    with pytest.raises(P.ExpressionSyntaxError, match="u1"):
        P.parse_problem(bad)


def test_initial_section_round_trip():
    spec, initial = P.parse_problem(
        EXAMPLE_CONFIG + "\n[initial]\nt = 0.25\nx = -1.0\n"
    )
    assert initial[0] == 0.25
    assert initial[1][0] == -1.0


@pytest.mark.parametrize("name", P.builtin_names())
def test_render_parse_round_trip(name):
    spec = P.builtin_problem(name)
    text = P.render_problem(spec)
    spec2, _ = P.parse_problem(text)
    assert P.render_problem(spec2) == text
    # evaluators agree pointwise
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (50, spec.n))
    u = rng.uniform(spec.control_lo, spec.control_hi, (50, spec.k))
    y = rng.uniform(-2, 2, 50)
    z = rng.uniform(-2, 2, (50, spec.d))
    assert np.allclose(spec.drift(0.3, x, u), spec2.drift(0.3, x, u))
    assert np.allclose(spec.diffusion(0.3, x, u), spec2.diffusion(0.3, x, u))
    assert np.allclose(spec.driver(0.3, x, y, z, u), spec2.driver(0.3, x, y, z, u))
    assert np.allclose(spec.terminal(x), spec2.terminal(x))


def test_project_control_examples(spec31):
    assert P.project_control(1.7, spec31) == pytest.approx(1.0)
    assert P.project_control(0.5, spec31) == pytest.approx(0.5)
    box2 = P.spec_from_expressions(
        1, 1, 2, 1.0, [0.0, 0.0], [1.0, 1.0], ["x1"], ["x1"], "y", "x1"
    )
    out = P.project_control(np.array([-1.0, 2.0]), box2)
    assert np.array_equal(out, [0.0, 1.0])


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
@settings(max_examples=200, deadline=None)
def test_project_control_idempotent(u1, u2):
    spec = P.spec_from_expressions(
        1, 1, 2, 1.0, [-0.5, 0.0], [0.5, 2.0], ["x1"], ["x1"], "y", "x1"
    )
    u = np.array([u1, u2])
    once = P.project_control(u, spec)
    assert np.array_equal(P.project_control(once, spec), once)
    assert np.all(once >= spec.control_lo) and np.all(once <= spec.control_hi)


@given(
    st.floats(-5, 5, allow_nan=False),
    st.floats(-5, 5, allow_nan=False),
    st.floats(-5, 5, allow_nan=False),
)
@settings(max_examples=100, deadline=None)
def test_expression_quadratic_eval(a, b, c):
    text = f"{a!r} + {b!r} * x1 + {c!r} * x1 ^ 2"
    expr = P.parse_expression(text, ["x1"])
    xs = np.linspace(-3, 3, 7)
    expected = a + b * xs + c * xs**2
    got = expr.evaluate({"x1": xs})
    assert np.allclose(got, expected, rtol=1e-12, atol=1e-9)


def test_expression_functions_and_precedence():
    e = P.parse_expression("2 + 3 * 4 ^ 2", [])
    assert e.evaluate({}) == 50.0
    e = P.parse_expression("-2 ^ 2", [])
    assert e.evaluate({}) == -4.0
    e = P.parse_expression("min(3, max(1, 2)) * exp(0)", [])
    assert e.evaluate({}) == 2.0
    e = P.parse_expression("abs(0 - 3) + sqrt(4)", [])
    assert e.evaluate({}) == 5.0


def test_expression_domain_errors():
    for text in ("log(x1)", "sqrt(x1)", "1 / x1"):
        expr = P.parse_expression(text, ["x1"])
        with pytest.raises(P.DomainError):
            expr.evaluate({"x1": np.array([-1.0, 1.0]) * (0.0 if "/" in text else 1.0)})


def test_probe_h1_example31_per_coefficient(spec31):
    report = P.probe_assumptions(spec31, "H1", 10000, 5.0, seed=3)
    assert report.ratios["b"] <= 1.0 + 1e-9
    assert report.ratios["sigma"] <= 1.0 + 1e-9
    assert report.passed  # hint C = 2 on the builtin


@pytest.mark.parametrize("assumption", ["H1", "H2"])
@pytest.mark.parametrize("seed", [0, 7, 123])
def test_probes_pass_with_hint_two(spec31, assumption, seed):
    for radius in (1.0, 10.0):
        report = P.probe_assumptions(spec31, assumption, 4000, radius, seed=seed)
        assert report.passed, (assumption, seed, radius, report.ratios)


def test_probe_h3(spec31):
    report = P.probe_assumptions(spec31, "H3", 4000, 5.0, seed=1)
    assert report.passed
    assert report.ratios["f_y"] == pytest.approx(1.0)


def test_probe_quadratic_drift_fails_hint_one():
    spec = P.spec_from_expressions(
        1, 1, 1, 1.0, [0.0], [1.0], ["x1 ^ 2"], ["x1"], "x1 - y", "x1",
        lipschitz_hint=1.0,
    )
    report = P.probe_assumptions(spec, "H1", 20000, 5.0, seed=1)
    assert 8.0 <= report.ratios["b"] <= 10.0 + 1e-9
    assert not report.passed


def test_probe_single_sample(spec31):
    report = P.probe_assumptions(spec31, "H1", 1, 2.0, seed=9)
    assert report.samples == 1
    assert report.max_difference_ratio >= 0.0


def test_probe_determinism(spec31):
    a = P.probe_assumptions(spec31, "H2", 500, 3.0, seed=11)
    b = P.probe_assumptions(spec31, "H2", 500, 3.0, seed=11)
    assert a.max_difference_ratio == b.max_difference_ratio
    assert a.max_growth_ratio == b.max_growth_ratio


def test_fd_gradients_match_analytic_richardson():
    # second-order convergence of the central differences on a smooth builtin
    spec = P.builtin_problem("smooth1d")
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, (100, 1))
    u = rng.uniform(0, 1, (100, 1))
    y = rng.uniform(-2, 2, 100)
    z = rng.uniform(-2, 2, (100, 1))

    cases = [
        (
            lambda h: P._fd_jacobian_x(spec.drift, 1, h)(0.3, x, u)[..., 0],
            spec.drift_x(0.3, x, u)[..., 0],
        ),
        (
            lambda h: P._fd_driver_grad(spec.driver, "z", 1, h)(0.3, x, y, z, u),
            spec.driver_z(0.3, x, y, z, u),
        ),
        (
            lambda h: P._fd_terminal_grad(spec.terminal, 1, h)(x),
            spec.terminal_x(x),
        ),
    ]
    for fd, exact in cases:
        err_h = np.max(np.abs(fd(1e-3) - exact))
        err_h2 = np.max(np.abs(fd(5e-4) - exact))
        assert err_h / err_h2 == pytest.approx(4.0, rel=0.35)
        # and the production step size is accurate in absolute terms
        assert np.max(np.abs(fd(1e-5) - exact)) <= 1e-8


def test_unknown_builtin():
    with pytest.raises(P.ConfigError, match="unknown builtin"):
        P.builtin_problem("nope")


def test_builtin_start():
    t0, x0, u0 = P.builtin_start("example31")
    assert t0 == 0.0
    assert np.array_equal(x0, [0.0])
    assert np.array_equal(u0, [0.0])
