import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from dbarsolve.expressions import (ExpressionError, dbar, form_from_exprs, parse, potential_form,
                                   to_source)


@pytest.mark.parametrize("text", [
    "z3", "z0", "conj(z1, z2)", "sin(z1)", "z1 ** -1", "z1 ** 0.5", "z1 / z2", "z1 / 0",
    "abs(z1)", "lambda: 1", "z1 <", "'a'", "True", "x", "z1.real", "z1 @ z2",
])
def test_grammar_rejections(text):
    with pytest.raises(ExpressionError):
        parse(text, 2)


def test_division_by_constant_and_literals():
    e = parse("conj(z1) / 4 + 0.1 * z2 + 2j", 2)
    z, zb = sympy.symbols("z1:3"), sympy.symbols("zb1:3")
    assert sympy.simplify(e - (zb[0] / 4 + sympy.Rational(1, 10) * z[1] + 2 * sympy.I)) == 0


def test_conj_of_expression():
    # conj(i z1 + 2) = -i conj(z1) + 2
    e = parse("conj(I*z1 + 2)", 1)
    zb = sympy.Symbol("zb1")
    assert sympy.expand(e - (-sympy.I * zb + 2)) == 0


def test_wirtinger_independence():
    e = parse("z1 * conj(z1)**2 + exp(conj(z2))", 2)
    assert sympy.expand(dbar(e, 0, 2) - 2 * sympy.Symbol("z1") * sympy.Symbol("zb1")) == 0
    assert dbar(e, 1, 2) == sympy.exp(sympy.Symbol("zb2"))


def test_numpy_component_broadcasts():
    f = form_from_exprs(["conj(z1) * z2", "3"])
    a = np.array([1 + 1j, 2.0])
    assert f(0, a, 2.0) == pytest.approx(np.conj(a) * 2.0)
    out = f(1, a, np.zeros((3, 1)))
    assert out.shape == (3, 2) and np.all(out == 3)


def test_explicit_derivatives_override():
    f = form_from_exprs(["conj(z2)", "conj(z1)"], {(0, 1): "5"})
    assert f.derivative(0, 1)(0.1, 0.2) == pytest.approx(5)
    assert f.derivative(1, 0)(0.1, 0.2) == pytest.approx(1)


@pytest.mark.parametrize("u,n", [
    ("conj(z1)*conj(z2)", 2),
    ("z1*z2*conj(z1)*conj(z2)", 2),
    ("exp(z1)*conj(z2)**2 + conj(z1)*z3", 3),
])
def test_potential_forms_are_closed(u, n, rng):
    f = potential_form(u, n)
    pts = rng.uniform(-0.5, 0.5, (n, 6)) + 1j * rng.uniform(-0.5, 0.5, (n, 6))
    assert f.closedness_defect(pts) < 1e-12
    # symbolic check too
    for j in range(n):
        for i in range(n):
            assert sympy.simplify(f.symbolic(j, i) - f.symbolic(i, j)) == 0


def test_higher_derivatives_symbolic():
    f = potential_form("conj(z1)**2 * conj(z2)**2 * z1", 2)
    d = f.derivative(0, 1, 1)       # d^2 f_1 / d zbar_2^2
    # f_1 = 2 conj(z1) conj(z2)^2 z1 -> 4 conj(z1) z1
    assert d(0.3 + 0.1j, 5.0) == pytest.approx(4 * abs(0.3 + 0.1j) ** 2)


_atoms = st.sampled_from(["z1", "z2", "conj(z1)", "conj(z2)", "1", "2j", "0.5"])


def _exprs():
    return st.recursive(_atoms, lambda inner: st.one_of(
        st.tuples(inner, st.sampled_from(["+", "-", "*"]), inner).map(lambda t: f"({t[0]} {t[1]} {t[2]})"),
        st.tuples(inner, st.integers(0, 3)).map(lambda t: f"({t[0]})**{t[1]}"),
        inner.map(lambda s: f"exp({s} / 4)"),
        inner.map(lambda s: f"conj({s})"),
    ), max_leaves=6)


@settings(max_examples=60, deadline=None)
@given(_exprs())
def test_source_roundtrip(text):
    e = parse(text, 2)
    again = parse(to_source(e), 2)
    assert sympy.simplify(sympy.expand(e - again)) == 0


@settings(max_examples=40, deadline=None)
@given(_exprs(), _exprs())
def test_numba_fill_matches_numpy(a, b):
    f = form_from_exprs([a, b])
    w = np.array([0.3 - 0.2j, -0.1 + 0.4j])
    out = np.empty(2, dtype=complex)
    f.fill(w, out)
    ref = [complex(f(j, w[0], w[1])) for j in range(2)]
    assert out == pytest.approx(np.array(ref), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(_exprs())
def test_conj_matches_numeric(text):
    f = form_from_exprs([f"conj({text})", text])
    w = (0.2 + 0.7j, -0.4 + 0.1j)
    assert complex(f(0, *w)) == pytest.approx(np.conj(complex(f(1, *w))), rel=1e-12, abs=1e-12)
