import json
import math

import numpy as np
import pytest
from scipy import integrate

from dbarsolve import geometry as geo
from dbarsolve import solver as sv
from dbarsolve.expressions import form_from_exprs, potential_form
from dbarsolve.transforms import Form01


def test_config_validation(disk):
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(2, disk, np.zeros((3, 3)))
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(1, disk, [0.1], mode="fast")
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(1, disk, [0.1], resolution=4)
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(1, disk, [0.1], replicates=1)
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(1, disk, [0.1], eps_schedule=(0.05, 0.1))
    with pytest.raises(sv.ConfigError):
        sv.SolveConfig(1, disk, [0.1], eps_schedule=(0.3,), inner_m=4)
    cfg = sv.SolveConfig(2, disk, [0.1, 0.2j, 0.3, 0.0])
    assert cfg.points.shape == (2, 2)
    assert cfg.step == pytest.approx(2 / 64)


def test_lp_norms():
    v = np.array([1.0, -2.0, 2.0, 1.0])
    out = sv.lp_norms(v, 4.0, (2.0, math.inf))
    assert out[2.0] == pytest.approx(math.sqrt(10))
    assert out[math.inf] == 2.0
    assert math.isnan(sv.lp_norms(np.array([]), 1.0, (2.0,))[2.0])


def test_solver_dimension_checks(disk):
    f = form_from_exprs(["conj(z1)"])
    with pytest.raises(sv.ConfigError):
        sv.solve_dim2(f, sv.SolveConfig(1, disk, [0.1]))
    g = potential_form("conj(z1)*conj(z2)", 2)
    with pytest.raises(sv.ConfigError):
        sv.solve_recursive(form_from_exprs(["1"]), sv.SolveConfig(1, disk, [0.1]))
    with pytest.raises(sv.ConfigError):
        sv.solve_dim1(g, sv.SolveConfig(2, disk, [[0.1, 0.2]]))


@pytest.mark.parametrize("expr", ["1", "conj(z1)", "exp(z1)*conj(z1)**2"])
def test_dim1_residual(disk, expr):
    f = form_from_exprs([expr])
    pts = np.array([0.2 + 0.1j, -0.4j, 0.5])
    r = sv.solve_dim1(f, sv.SolveConfig(1, disk, pts, resolution=32))
    assert not r.flagged.any()
    assert r.residual_max < 1e-2


def test_dim1_value_is_cauchy_transform(disk):
    # T[1] = conj(z) on the unit disk
    r = sv.solve_dim1(form_from_exprs(["1"]), sv.SolveConfig(1, disk, [0.3 + 0.2j], resolution=32,
                                                                 residuals=False))
    assert r.values[0] == pytest.approx(0.3 - 0.2j, abs=1e-8)


def test_boundary_points_are_flagged(disk):
    f = form_from_exprs(["1"])
    r = sv.solve_dim1(f, sv.SolveConfig(1, disk, [0.0, 0.99], resolution=32))
    assert list(r.flagged) == [False, True]
    assert any("boundary" in w for w in r.warnings)
    assert np.isnan(r.residual[1, 0])


@pytest.fixture(scope="module")
def dim2_setup():
    D = geo.unit_disk()
    f = potential_form("conj(z1)*conj(z2) + exp(z1)*conj(z2)**2", 2)
    pts = np.array([[0.1 + 0.2j, -0.3 + 0.1j], [0.2, 0.3j]])
    return D, f, pts


def test_dim2_residual(dim2_setup):
    D, f, pts = dim2_setup
    r = sv.solve_dim2(f, sv.SolveConfig(2, D, pts, resolution=32))
    assert r.residual_max < 0.1
    assert not r.warnings
    d = r.to_dict()
    assert d["schema_version"] == sv.SCHEMA_VERSION
    json.dumps(d)


def test_recursive_n2_equals_dim2(dim2_setup):
    D, f, pts = dim2_setup
    cfg = sv.SolveConfig(2, D, pts, resolution=24, residuals=False)
    a = sv.solve_dim2(f, cfg)
    b = sv.solve_recursive(f, cfg)
    assert b.values == pytest.approx(a.values, rel=1e-10)


def test_non_closed_form_warns(disk):
    f = form_from_exprs(["conj(z2)", "2*conj(z1)"])
    r = sv.solve_dim2(f, sv.SolveConfig(2, disk, [[0.1, 0.2]], resolution=16, residuals=False))
    assert any("not dbar-closed" in w for w in r.warnings)


def _psi(z):
    return np.maximum(np.abs(z) ** 2 - 1, 0) ** 3


@pytest.fixture(scope="module")
def extension_form():
    # closed on D^2 only: d f1/d zbar2 = 1 + psi(z1) z1, d f2/d zbar1 = 1
    return Form01(
        [lambda a, b: np.conj(b) * (1 + _psi(a) * a), lambda a, b: np.conj(a) + 0 * b],
        {(0, 1): lambda a, b: 1 + _psi(a) * a + 0 * b,
         (1, 0): lambda a, b: np.ones(np.broadcast(a, b).shape, complex)})


def test_extension_terms_two_and_three():
    t2 = sv.extension_terms([0, 1], {0: sv._comp(0), 1: sv._comp(1)})
    assert [t.coefficient for t in t2] == [1, 1, -1, -1]
    assert t2[3].slots == ((0, sv.COMPLEMENT), (1, sv.OMEGA))
    t3 = sv.extension_terms(range(3), {j: sv._comp(j) for j in range(3)})
    assert len(t3) == 1 + 3 * len(t2)


def test_extension_residual(extension_form):
    Om, D = geo.disk(2.0), geo.unit_disk()
    pts = np.array([[0.2 + 0.1j, -0.3j], [-0.4, 0.1 + 0.3j]])
    r = sv.solve_extension(extension_form, D, sv.SolveConfig(2, Om, pts, resolution=32))
    assert r.residual_max < 5e-2


def test_extension_complement_term_matters(extension_form, monkeypatch):
    # dropping the complement term breaks the residual, so the term is exercised
    Om, D = geo.disk(2.0), geo.unit_disk()
    orig = sv.extension_terms
    monkeypatch.setattr(sv, "extension_terms", lambda v, c: orig(v, c)[:3])
    r = sv.solve_extension(extension_form, D, sv.SolveConfig(2, Om, [[0.2 + 0.1j, -0.3j]],
                                                             resolution=32))
    assert r.residual_max > 0.1


def test_extension_requires_compact_inner(extension_form):
    with pytest.raises(sv.ConfigError):
        sv.solve_extension(extension_form, geo.disk(2.0), sv.SolveConfig(2, geo.unit_disk(), [[0, 0]]))


def test_extension_skips_vanishing_terms():
    f = potential_form("conj(z1)*conj(z2)", 2)
    r = sv.solve_extension(f, geo.unit_disk(), sv.SolveConfig(2, geo.disk(2.0), [[0.1, 0.2j]],
                                                              resolution=24))
    assert any("vanishing" in w for w in r.warnings)
    assert sum(t["vanished"] for t in r.terms) == 1
    assert r.residual_max < 5e-2


# -- mollification ---------------------------------------------------------------

def test_bump_moments():
    assert sv.bump_moment(0) == 1.0
    assert sv.bump_moment(1) == pytest.approx(0.26131, abs=1e-5)
    assert sv.bump_moment(2) == pytest.approx(0.10219, abs=1e-5)


def test_mollifier_rule_moments():
    y, w = sv.mollifier_rule()
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.dot(w, np.abs(y) ** 2) == pytest.approx(sv.bump_moment(1), rel=1e-8)
    assert abs(np.dot(w, y)) < 1e-14


@pytest.mark.parametrize("eps", [0.1, 0.05])
def test_chi_eps_mass(eps):
    v = integrate.dblquad(lambda r, t: sv.chi_eps(r * np.exp(1j * t), eps) * r,
                          0, 2 * np.pi, 0, eps, epsabs=1e-13)[0]
    assert v == pytest.approx(1.0, abs=1e-8)


def test_symbolic_mollification_of_polynomial():
    # |z1|^2 conj(z2)^2 : averaging adds eps^2 m1 to |z1|^2
    f = potential_form("conj(z1)*z1*conj(z2)**2", 2)
    fe = sv.mollify(f, 0.1)
    w = (0.3 + 0.1j, -0.2 + 0.4j)
    shift = 0.01 * sv.bump_moment(1)
    assert complex(fe(0, *w)) == pytest.approx(complex(f(0, *w)), abs=1e-14)
    expected = complex(f(1, *w)) + 2 * shift * np.conj(w[1])
    assert complex(fe(1, *w)) == pytest.approx(expected, rel=1e-12)
    assert 2 * shift == pytest.approx(0.005226, abs=1e-6)


def test_symbolic_matches_numeric_mollification():
    f = form_from_exprs(["exp(z1)*conj(z1)**2"])
    sym = sv.mollify(f, 0.1)
    num = sv.mollify(Form01(f.components), 0.1)
    w = np.array([0.2 + 0.3j, -0.1j])
    assert sym(0, w) == pytest.approx(num(0, w), rel=1e-8)


def test_mollify_arguments():
    f = form_from_exprs(["conj(z1)"])
    with pytest.raises(sv.ConfigError):
        sv.mollify(f, 0.0)
    with pytest.raises(sv.ConfigError):
        sv.mollify(f, 0.3, m=4)


def test_rough_data_mollification_improves(disk):
    f = form_from_exprs(["conj(z1)"])
    rough = sv.sampled_form(f, disk, 0.2)
    region = geo.shrink(disk, 4)
    errs = [sv.mollification_error(sv.mollify(rough, e, m=4), rough, region)
            for e in (0.1, 0.05, 0.025)]
    assert errs[0] > errs[1] > errs[2] > 0


# -- problem files -------------------------------------------------------------

def test_load_problem_roundtrip(tmp_path):
    data = {"domain": {"shape": "disk", "radius": 1.0},
            "potential": "conj(z1)*conj(z2)", "n": 2,
            "points": [[[0.1, 0.2], [0.0, -0.3]]], "resolution": 24,
            "p_list": [2, "inf"], "eps_schedule": [0.1, 0.05], "inner_m": 4}
    path = tmp_path / "p.json"
    path.write_text(json.dumps(data))
    prob = sv.load_problem(str(path))
    assert prob.solver == "dim2"
    assert prob.config.points[0, 0] == 0.1 + 0.2j
    assert math.isinf(prob.config.p_list[-1])
    out = sv.solve_mollified(prob)
    assert [e for e, _ in out] == [0.1, 0.05]
    assert all(r.residual_max < 0.1 for _, r in out)


@pytest.mark.parametrize("bad", [
    {"potential": "conj(z1)", "n": 1, "points": [[0.1]]},
    {"domain": {"shape": "disk"}, "points": [[0.1]]},
    {"domain": {"shape": "disk"}, "components": ["conj(z1)"], "points": [["x"]]},
])
def test_load_problem_errors(bad):
    with pytest.raises(sv.ConfigError):
        sv.load_problem(bad)


def test_extension_problem_needs_inner():
    prob = sv.load_problem({"domain": {"shape": "disk", "radius": 2.0}, "components": ["1", "1"],
                            "points": [[0.1, 0.1]], "solver": "extension"})
    with pytest.raises(sv.ConfigError):
        sv.solve_problem(prob)


def test_extension_recursive_n3():
    f = potential_form("conj(z1)*conj(z2)*conj(z3)", 3)
    cfg = sv.SolveConfig(3, geo.disk(2.0), [[0.2 + 0.1j, -0.3j, 0.4]], resolution=16,
                         samples=40000, replicates=8)
    r = sv.solve_extension_recursive(f, geo.unit_disk(), cfg)
    assert np.all(r.residual <= 3 * r.residual_stderr + 0.05)
    assert len(r.terms) == 13
