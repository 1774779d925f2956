import csv
import math

import numpy as np
import pytest

from dbarsolve import geometry as geo
from dbarsolve import kernelcalc as kc
from dbarsolve import transforms as tr
from dbarsolve.expressions import form_from_exprs


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_cauchy_of_conj_powers(disk, k):
    # on the unit disk T[conj(w)^k] = conj(z)^(k+1) / (k+1) exactly
    for z in (0.3 + 0.2j, -0.5j, 0.1):
        rule = geo.polar_rule(disk, z, 64)
        got = tr.cauchy(lambda w: np.conj(w) ** k, rule, z, disk)
        assert got == pytest.approx(np.conj(z) ** (k + 1) / (k + 1), abs=1e-10)


def test_cauchy_grid_rule(disk):
    z = 0.4 - 0.3j
    rule = geo.build_rule(disk, 128, refine_at=z)
    assert tr.cauchy(lambda w: np.ones_like(w), rule, z) == pytest.approx(np.conj(z), rel=1e-4)


def test_cauchy_rejects_exterior(disk):
    rule = geo.build_rule(disk, 16)
    with pytest.raises(geo.DomainError):
        tr.cauchy(lambda w: w, rule, 2.0, disk)


def test_cauchy_complement_is_holomorphic():
    outer, inner = geo.disk(2.0), geo.unit_disk()
    rule = geo.complement_rule(outer, inner, 64)
    g = lambda w: np.conj(w) ** 2 + np.exp(w)
    h = 1e-4
    z = 0.1 + 0.2j
    vals = [tr.cauchy_complement(g, inner, rule, z + s) for s in (h, -h, 1j * h, -1j * h)]
    dbar = 0.5 * ((vals[0] - vals[1]) / (2 * h) + 1j * (vals[2] - vals[3]) / (2 * h))
    assert abs(dbar) < 1e-6
    with pytest.raises(geo.DomainError):
        tr.cauchy_complement(g, inner, rule, 1.5)


def test_form_derivative_lookup():
    f = tr.Form01([lambda a, b: a * 0 + b, lambda a, b: a + b * 0], {(0, 1): lambda a, b: 0 * a})
    assert f.n == 2
    assert f.derivative(0) is f.components[0]
    with pytest.raises(KeyError):
        f.derivative(1, 0)
    assert np.all(f(0, np.zeros(3), 2.0) == 2.0)


def test_closedness_defect():
    closed = form_from_exprs(["conj(z2)", "conj(z1)"])
    bad = form_from_exprs(["conj(z2)", "2*conj(z1)"])
    pts = np.array([[0.1, 0.2j, -0.3], [0.5, 0.1, 0.2j]])
    assert closed.closedness_defect(pts) == 0
    assert bad.closedness_defect(pts) == pytest.approx(1)


def test_grid_weight_product(disk):
    grid = tr.ProductGrid.around(disk, [0.1, -0.2j], 32)
    assert grid.weight_sum_product([0, 1]) == pytest.approx(math.pi**2, rel=1e-5)


def test_fused_matches_generic(disk):
    f = form_from_exprs(["conj(z2) + exp(z1)*conj(z2)**2", "conj(z1) + 2*exp(z1)*conj(z2)*conj(z1)*0"])
    z = np.array([0.2 + 0.1j, -0.3j])
    grid = tr.ProductGrid.around(disk, z, 24)
    trees = [t for t in kc.solution_trees(2) if t.k == 1]
    fused = tr.kernel_transforms(trees, f, grid, z)
    for t, res in zip(trees, fused):
        plain = tr.kernel_transform(t, lambda *w, j=t.root: f(j, *w), grid, z)
        assert res.value == pytest.approx(plain.value, rel=1e-10)


def test_pair_transform_converges(disk):
    f = lambda a, b: np.conj(b) * np.exp(a)
    z = np.array([0.2 + 0.1j, -0.3j])
    tree = kc.KernelTree(0).extend(1)[0]
    vals = [tr.kernel_transform(tree, f, tr.ProductGrid.around(disk, z, r), z).value for r in (16, 32, 64)]
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])


def test_monte_carlo_agrees_with_tensor(disk):
    f = lambda a, b: np.conj(b) + a
    z = np.array([0.2 + 0.1j, -0.3j])
    tree = kc.KernelTree(0).extend(1)[1]
    tensor = tr.kernel_transform(tree, f, tr.ProductGrid.around(disk, z, 32), z).value
    grid = tr.ProductGrid(disk, [], mode="mc", samples=200_000, seed=3, replicates=10)
    mc = tr.kernel_transform(tree, f, grid, z)
    assert mc.stderr > 0
    assert abs(mc.value - tensor) < 4 * mc.stderr + 2e-3


def test_monte_carlo_reproducible(disk):
    f = lambda a, b: np.conj(a) * b
    z = np.array([0.1, 0.2j])
    tree = kc.KernelTree(1).extend(0)[0]
    grid = tr.ProductGrid(disk, [], mode="mc", samples=20_000, seed=11, replicates=4)
    a = tr.kernel_transform(tree, f, grid, z, term=2)
    b = tr.kernel_transform(tree, f, grid, z, term=2)
    assert a.value == b.value


def test_monte_carlo_needs_star_domain(lshape):
    f = lambda a, b: a * 0 + 1
    z = np.array([1.5 + 0.5j, 0.5 + 0.5j])
    grid = tr.ProductGrid(lshape, [], mode="mc", samples=1000)
    with pytest.raises(geo.DomainError):
        tr.kernel_transform(kc.KernelTree(0).extend(1)[0], f, grid, z)


def test_patch_exponent():
    for k in range(1, 6):
        a = tr.patch_exponent(k)
        assert 2 * k / (k + 1) < a < 2


def test_trace_dump(tmp_path, disk):
    trace = []
    z = np.array([0.1, 0.2])
    grid = tr.ProductGrid.around(disk, z, 8)
    tree = kc.KernelTree(0).extend(1)[0]
    tr.kernel_transform(tree, lambda a, b: a * 0 + 1, grid, z, trace=trace)
    path = tmp_path / "trace.csv"
    tr.write_trace(path, trace)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["node", "kernel_re", "kernel_im", "weight"]
    assert len(rows) - 1 == len(trace) > 0
