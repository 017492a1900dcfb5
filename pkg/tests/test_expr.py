import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbsvie.expr import BinOp, Call, Expression, ExpressionError, Neg, Num, Var, parse_expression


def test_power_at_three():
    assert parse_expression("x^2")(x=3.0) == 9.0


def test_max_plus_scaled_y():
    assert parse_expression("max(x,0) + 0.5*y")(x=-1.0, y=2.0) == 1.0


def test_log_domain_error():
    with pytest.raises(ExpressionError, match="domain"):
        parse_expression("log(x)")(x=-1.0)


def test_sqrt_domain_error():
    with pytest.raises(ExpressionError):
        parse_expression("sqrt(x)")(x=np.array([1.0, -1.0]))


@pytest.mark.parametrize(
    "text, env, expected",
    [
        ("1 + 2*3", {}, 7.0),
        ("(1 + 2)*3", {}, 9.0),
        ("2^3^2", {}, 512.0),
        ("-2^2", {}, -4.0),
        ("2^-1", {}, 0.5),
        ("8 / 4 / 2", {}, 1.0),
        ("10 - 3 - 2", {}, 5.0),
        ("step(x)", {"x": 0.0}, 1.0),
        ("step(x)", {"x": -1e-300}, 0.0),
        ("pos(x) - neg(x)", {"x": -2.5}, -2.5),
        ("min(x, y, z)", {"x": 3.0, "y": -1.0, "z": 2.0}, -1.0),
        ("exp(0) + cos(0) + sin(0) + abs(-1)", {}, 3.0),
        ("1e-3 * 1E3", {}, 1.0),
        (".5 + 1.", {}, 1.5),
    ],
)
def test_evaluation_table(text, env, expected):
    assert parse_expression(text).evaluate(env) == pytest.approx(expected, rel=1e-15)


def test_unset_variables_are_zero():
    assert parse_expression("t + s + x + y + z + 1")() == 1.0


def test_broadcasting_over_grid():
    e = parse_expression("x*y + t")
    out = e(x=np.arange(3.0)[:, None], y=np.arange(4.0)[None, :], t=1.0)
    assert out.shape == (3, 4)
    assert out[2, 3] == 7.0


@pytest.mark.parametrize(
    "text, offset",
    [("x +", 3), ("x + * 2", 4), ("foo(x)", 0), ("x $ 2", 2), ("(x", 2), ("max(x)", 0), ("sin(x, y)", 0)],
)
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExpressionError) as exc:
        parse_expression(text)
    assert exc.value.offset == offset


def test_offset_counts_bytes():
    # 'σ' is two bytes in UTF-8
    with pytest.raises(ExpressionError) as exc:
        parse_expression("xσ")
    assert exc.value.offset == 1
    with pytest.raises(ExpressionError) as exc:
        parse_expression("σ + x")
    assert exc.value.offset == 0


def test_unknown_identifier():
    with pytest.raises(ExpressionError, match="unknown identifier 'w'"):
        parse_expression("x + w")


def test_variables_and_dependence():
    e = parse_expression("exp(-x^2) * y + sin(z)")
    assert e.variables == {"x", "y", "z"}
    assert e.depends_on("y") and not e.depends_on("t")


def test_print_minimal_parentheses():
    assert str(parse_expression("(x + 1) * (y - (z - 2))")) == "(x + 1.0) * (y - (z - 2.0))"
    assert str(parse_expression("(-x)^2")) == "(-x)^2.0"
    assert str(parse_expression("x^(y^z)")) == "x^y^z"


# --- round trip -------------------------------------------------------------

_leaf = st.one_of(
    st.builds(Num, st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False)),
    st.builds(Var, st.sampled_from(["t", "s", "x", "y", "z"])),
)


def _extend(children):
    return st.one_of(
        st.builds(Neg, children),
        st.builds(BinOp, st.sampled_from(["+", "-", "*", "/", "^"]), children, children),
        st.builds(lambda a: Call("sin", (a,)), children),
        st.builds(lambda a, b: Call("max", (a, b)), children, children),
        st.builds(lambda a: Call("step", (a,)), children),
    )


_trees = st.recursive(_leaf, _extend, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(_trees)
def test_print_parse_round_trip(tree):
    e = Expression.from_ast(tree)
    assert parse_expression(str(e)) == e


@settings(max_examples=100, deadline=None)
@given(_trees, st.floats(-3, 3), st.floats(-3, 3))
def test_round_trip_preserves_values(tree, xv, yv):
    e = Expression.from_ast(tree)
    env = {"x": xv, "y": yv, "z": 0.5, "t": 0.25, "s": 0.75}
    a = np.asarray(e.evaluate(env), dtype=float)
    b = np.asarray(parse_expression(str(e)).evaluate(env), dtype=float)
    assert np.array_equal(a, b, equal_nan=True)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_arithmetic_matches_python(a, b):
    e = parse_expression("x*y - x + 3*y")
    assert e(x=a, y=b) == pytest.approx(a * b - a + 3 * b, rel=1e-12, abs=1e-9)


def test_numeric_literal_roundtrip_is_exact():
    v = math.pi / 7
    e = Expression.from_ast(Num(v))
    assert parse_expression(str(e)).ast == Num(v)
