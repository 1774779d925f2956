import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbarsolve import geometry as geo
from dbarsolve import kernelcalc as kc


def test_tau_examples(disk):
    assert kc.tau(0.5, 0.5, 0.5j, 0.5j, disk) == 0
    assert kc.tau(0, 0.5, 0, 0.5j, disk) == pytest.approx(0.25)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=0.95), min_size=4, max_size=4))
def test_tau_symmetric(p):
    d = geo.unit_disk()
    assert kc.tau(p[0], p[1], p[2], p[3], d) == pytest.approx(kc.tau(p[2], p[3], p[0], p[1], d))


def test_a_kernel_zero_when_coordinates_coincide(disk):
    z = np.array([0.2, 0.1j])
    w = np.array([0.2, 0.5j])
    assert kc.a_kernel(0, 1, z, w, disk) == 0


def _dbar_fd(fun, w, slot, h=1e-6):
    """d/d conj(w_slot) of a scalar function of w by central differences."""
    vals = []
    for s in (h, -h, 1j * h, -1j * h):
        ww = w.astype(complex).copy()
        ww[slot] += s
        vals.append(fun(ww))
    return 0.5 * ((vals[0] - vals[1]) / (2 * h) + 1j * (vals[2] - vals[3]) / (2 * h))


@pytest.mark.parametrize("upper", [0, 1])
def test_a_kernel_matches_defining_quotient(disk, upper):
    z = np.array([0.0, 0.0])
    w = np.array([0.5, 0.3 + 0.4j])
    other = 1 - upper

    def quotient(ww):
        d = geo.delta(disk, ww[upper:upper + 1])[0]
        t = kc.tau(z[0], ww[0], z[1], ww[1], disk)
        return np.conj(z[upper] - ww[upper]) * d / t

    fd = _dbar_fd(quotient, w, upper)
    # A^j_{i,j} differentiates in the superscript slot
    a = kc.a_kernel(other, upper, z, w, disk) if upper == 1 else kc.a_kernel(0, 1, z, w, disk, upper=0)
    assert a == pytest.approx(fd, abs=1e-6)


def test_pair_bound(disk, rng):
    for _ in range(500):
        z = geo.interior_samples(disk, 2, rng)
        w = geo.interior_samples(disk, 2, rng)
        d = geo.delta(disk, w)
        ai = abs(z - w) ** 2 * d
        t = ai.sum()
        a = kc.a_kernel(0, 1, z, w, disk)
        # A = (z_i - w_i) S^i and |S^i| <= (delta_j + c0 |w_j - z_j|) / (|w_i - z_i| tau)
        assert abs(a) <= (d[1] + disk.c0 * abs(w[1] - z[1])) / t * (1 + 1e-12)
        s = kc.s_pair(0, 1, z, w, disk)
        assert abs(s.value) <= (d[1] + abs(w[1] - z[1])) / (abs(w[0] - z[0]) * t) * (1 + 1e-12)
        assert abs(s.droot) <= (d[0] + abs(w[0] - z[0])) * (d[1] + abs(w[1] - z[1])) / t**2 * (1 + 1e-12)


def test_singular_evaluation(disk):
    z = np.array([0.1, 0.2])
    with pytest.raises(kc.SingularEvaluation):
        kc.evaluate(kc.KernelTree(0), z, z.copy(), disk)
    with pytest.raises(kc.SingularEvaluation):
        kc.s_pair(0, 1, z, z.copy(), disk)


@pytest.mark.parametrize("n, count", [(1, 1), (2, 4), (3, 13), (4, 40)])
def test_solution_tree_counts(n, count):
    trees = kc.solution_trees(n)
    assert len(trees) == count
    assert all(t.coefficient == 1 for t in trees)
    assert all(t.k <= n - 1 for t in trees)


def test_tree_invariants():
    for t in kc.all_tree_shapes(4):
        seen = [t.root] + [i for g in t.groups for i in g]
        assert len(set(seen)) == len(seen)
        assert t.parents[0] == t.root
        for s in range(1, len(t.groups)):
            assert t.parents[s] in t.groups[s - 1]


def test_tree_roundtrip():
    for t in kc.all_tree_shapes(4):
        back = kc.KernelTree.from_json(t.to_json())
        assert (back.root, back.groups, back.parents) == (t.root, t.groups, t.parents)


def test_from_dict_validation():
    with pytest.raises(ValueError):
        kc.KernelTree.from_dict({"root": 0, "groups": [[1]], "parents": [1]})
    with pytest.raises(ValueError):
        kc.KernelTree.from_dict({"root": 0, "groups": [[0]], "parents": [0]})


def test_pair_kernel_matches_tree(disk, rng):
    z = geo.interior_samples(disk, 2, rng)
    w = geo.interior_samples(disk, 2, rng)
    keep, new = kc.KernelTree(0).extend(1)
    kv = kc.evaluate(keep, z, w, disk)
    sp = kc.s_pair(0, 1, z, w, disk)
    assert kv.value == pytest.approx(sp.value)
    assert kv.droot == pytest.approx(sp.droot)
    # "new" roots the pair at the added variable
    assert kc.evaluate(new, z, w, disk).value == pytest.approx(kc.s_pair(1, 0, z, w, disk).value)


def test_vectorized_matches_scalar(lshape, rng):
    for tree in kc.all_tree_shapes(3):
        z = geo.interior_samples(lshape, 3, rng)
        W = np.stack([geo.interior_samples(lshape, 50, rng) for _ in range(3)])
        D, G = geo.delta_and_dbar(lshape, W.ravel())
        kinds, vars_ = tree.step_arrays()
        vals, drs, ok = kc.tree_values(kinds, vars_, tree.base, z, W, D.reshape(W.shape),
                                       G.reshape(W.shape))
        assert ok.all()
        for m in range(0, 50, 7):
            kv = kc.evaluate(tree, z, W[:, m], lshape)
            assert vals[m] == pytest.approx(kv.value, rel=1e-12)
            assert drs[m] == pytest.approx(kv.droot, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("tree", kc.all_tree_shapes(3), ids=lambda t: t.to_json())
def test_envelopes_hold(tree, disk, rng):
    for _ in range(300):
        z = geo.interior_samples(disk, 3, rng)
        w = geo.interior_samples(disk, 3, rng)
        kv = kc.evaluate(tree, z, w, disk)
        vb, db = kc.bound_envelope(tree, z, w, disk)
        assert abs(kv.value) <= vb * (1 + 1e-12)
        assert abs(kv.droot) <= db * (1 + 1e-12)


def test_droot_matches_finite_differences(disk, rng):
    tree = kc.all_tree_shapes(3)[7]
    for _ in range(100):
        z = geo.interior_samples(disk, 3, rng, min_delta=0.1)
        w = geo.interior_samples(disk, 3, rng, min_delta=0.05)
        if np.min(np.abs(z - w)) < 0.05 or np.min(np.abs(w)) < 0.01:
            continue
        fd = _dbar_fd(lambda ww: kc.evaluate(tree, z, ww, disk).value, w, tree.root)
        assert fd == pytest.approx(kc.evaluate(tree, z, w, disk).droot, rel=1e-5)
