import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import beta as beta_fn

from dbarsolve import analysis as an
from dbarsolve import geometry as geo


@pytest.mark.parametrize("a,b,case,value", [
    (0.5, 0.5, "alpha<1", 4.0),
    (1.5, 0.25, "alpha>1", 8.0),
    (1.0, 0.5, "alpha=1", 4.0),
])
def test_c_alpha_beta_examples(a, b, case, value):
    c = an.c_alpha_beta(a, b)
    assert c.case == case
    assert c.value == pytest.approx(value)


@pytest.mark.parametrize("a,b", [(0.0, 0.5), (2.0, 0.1), (1.5, 0.5), (0.5, 1.0), (0.5, 0.0)])
def test_c_alpha_beta_range(a, b):
    with pytest.raises(an.PreconditionError):
        an.c_alpha_beta(a, b)


def test_c_blows_up_at_alpha_one():
    vals = [an.c_alpha_beta(1 - t, 0.3).value for t in (1e-1, 1e-2, 1e-3)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] > 1e3


@pytest.mark.parametrize("a,b", [(0.25, 0.1), (0.5, 0.5), (1.0, 0.3), (1.25, 0.7), (1.5, 0.25)])
def test_weighted_integral_disk_center(disk, a, b):
    exact = 2 * math.pi * beta_fn(2 - a, 1 - b)
    assert an.weighted_integral(disk, 0.0, a, b, 256) == pytest.approx(exact, rel=1e-3)


def test_weighted_integral_unweighted_area(lshape):
    # radially exact; the angular error comes from the edge profiles and decays fast
    errs = [abs(an.weighted_integral(lshape, 0.3 + 0.3j, 0.0, 0.0, r, levels=(2, 2)) - lshape.area)
            for r in (64, 128, 256)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-7


def test_lemma_check_ratios(disk):
    rep = an.lemma_L1_check(disk, 0.75, 0.4, 6, resolution=128)
    assert rep.integrals.shape == (6,)
    assert np.all(rep.ratios > 0) and np.isfinite(rep.sup_ratio)
    assert rep.refinement_change < 0.1
    assert not rep.divergent
    rows = list(rep.rows())
    assert len(rows) == 6 and rows[0]["case"] == "alpha<1"


def test_lemma_ratio_grows_with_beta(disk):
    z = [0.5 + 0.3j]
    ints = [an.lemma_L1_check(disk, 0.5, b, z, 128, refine=False).integrals[0] for b in (0.1, 0.4, 0.7)]
    assert ints[0] < ints[1] < ints[2]


def test_lemma_small_alpha_finite(lshape):
    rep = an.lemma_L1_check(lshape, 1e-3, 0.5, 4, resolution=128)
    assert np.all(np.isfinite(rep.integrals))


# -- Schur ----------------------------------------------------------------------

@pytest.mark.parametrize("a,b,p", [(0.5, 0.25, 1.0), (0.5, 0.25, 2.5), (0.5, 0.6, 2.0), (1.5, 0.4, 1.5)])
def test_schur_regime(a, b, p):
    with pytest.raises(an.PreconditionError):
        an.check_schur_regime(a, b, p)


def test_schur_degenerate_kernel_norm_is_area(disk):
    # alpha = beta = 0: the kernel is constant 1, with L^p norm |Omega|
    rep = an.schur_check(disk, 0.0, 0.0, 1.5, resolution=24)
    assert rep.norm_p == pytest.approx(math.pi, rel=1e-6)
    assert rep.norm_pprime == pytest.approx(math.pi, rel=1e-6)
    assert rep.holds


def test_kernel_matrix_adjoint(disk, rng):
    rule = an.schur_mesh(disk, 16)
    d = geo.delta(disk, rule.nodes)
    K = an.KernelMatrix(rule.nodes, rule.weights, d, 0.5, 0.3)
    x, y = rng.random(len(K)), rng.random(len(K))
    # <K x, y>_q = <x, K^T y>_q with node weights
    lhs = np.dot(K.matvec(x) * rule.weights, y)
    rhs = np.dot(x * rule.weights, K.rmatvec(y))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_schur_small(disk):
    rep = an.schur_check(disk, 0.5, 0.25, 1.5, resolution=32, lemma_resolution=128)
    assert rep.holds and rep.norm_ok
    d = rep.to_dict()
    assert d["norm_ok"] and len(d["worst_first"]) == 2


# -- exponent schedule --------------------------------------------------------

def test_schedule_single_group():
    s = an.exponent_schedule([1], 2)
    assert s.m == [pytest.approx(27.0)]
    assert s.ok


def test_schedule_two_groups_exact():
    assert an.exact_schedule([1, 1], 3) == [(Fraction(1, 128), Fraction(1, 128)),
                                           (Fraction(1, 256), Fraction(1, 256))]
    s = an.exponent_schedule([1, 1], 3)
    assert s.m == [pytest.approx(128), pytest.approx(256)]
    assert all(m > 2 for m in s.m)


def test_schedule_preconditions():
    with pytest.raises(an.PreconditionError):
        an.exponent_schedule([2, 2], 4)
    with pytest.raises(an.PreconditionError):
        an.exponent_schedule([0], 3)
    with pytest.raises(an.PreconditionError):
        an.exponent_schedule([1], 3, eps=Fraction(1, 10))


def test_schedule_rows():
    rows = list(an.exponent_schedule([1, 2], 4).rows())
    assert [r["k"] for r in rows] == [1, 2]


def test_compositions_count():
    # compositions of t number 2^(t-1)
    assert [len(list(an.compositions(t))) for t in range(1, 6)] == [1, 2, 4, 8, 16]
    assert len(list(an.all_group_sizes(5))) == 15


def test_all_schedules_validate():
    assert an.validate_all_schedules(5) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5).flatmap(lambda n: st.tuples(st.just(n), st.sampled_from(list(an.all_group_sizes(n))),
                                                      st.integers(1, 1000))))
def test_schedule_inside_eps_interval(args):
    n, groups, k = args
    big = (n + 1) ** (n + 1)
    eps = Fraction(1, 2 * big) + Fraction(k, 1000) * Fraction(1, 2 * big)
    assert an.exponent_schedule(groups, n, eps).ok


def test_validation_error_lists_failures():
    err = an.ValidationError([(2, "m_s > 2")])
    assert err.failures == [(2, "m_s > 2")] and "s=2" in str(err)


# -- norm ratios ---------------------------------------------------------------

def test_evaluation_grid(disk):
    pts = an.evaluation_grid(disk)
    assert pts.shape == (25, 2)
    assert np.all(geo.delta(disk, pts.ravel()) >= 0.25)


def test_norm_ratio_scale_invariance_and_zero_skip(disk):
    pts = an.evaluation_grid(disk, per_factor=2)
    fam = ("conj(z1)*conj(z2)", "z1*z2")
    a = an.norm_ratio_experiment(disk, fam, resolution=24, points=pts)
    b = an.norm_ratio_experiment(disk, fam, resolution=24, points=pts, scale=2.0)
    assert len(a) == 1
    for p in a[0].ratios:
        assert b[0].ratios[p] == pytest.approx(a[0].ratios[p], rel=1e-10)
    assert b[0].norms_f[2] == pytest.approx(2 * a[0].norms_f[2])


# -- kernel sweep ---------------------------------------------------------------

def test_sweep_n2(disk):
    res = an.kernel_bound_sweep(disk, 2, samples=5000, z_blocks=10)
    assert res.ok and res.shapes == 2
    assert 0 < res.worst_value_slack <= 1


def test_sweep_range(disk):
    with pytest.raises(an.PreconditionError):
        an.kernel_bound_sweep(disk, 5)


def test_write_csv(tmp_path, disk):
    rep = an.lemma_L1_check(disk, 0.5, 0.5, 2, resolution=64, refine=False)
    path = tmp_path / "l1.csv"
    an.write_csv(path, rep.rows(), an.L1_COLUMNS)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and float(rows[0]["bound"]) == 4.0
