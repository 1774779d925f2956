"""Closed-form recursive kernels and their bound envelopes.

Every kernel is carried as a pair ``(value, droot)`` where ``droot`` is the
derivative in ``conj(w_root)``.  A kernel is built from the one-variable
Cauchy kernel ``1/(z_j - w_j)`` by a sequence of extensions, each adding one
new integration variable ``n``:

* ``keep``: the root stays ``j`` and ``n`` joins the first group;
* ``new``: ``n`` becomes the root and the old root moves into a fresh first
  group, pushing the old groups one level down.

The pair ``(value, droot)`` is closed under both extensions, so the whole
family needs only first derivatives of the distance function.

Notation used throughout: ``a_i = |z_i - w_i|^2 delta(w_i)``,
``tau_ij = a_i + a_j`` and ``E_i = delta(w_i) + conj(w_i - z_i) dbar delta(w_i)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import C0, PlanarDomain, delta_and_dbar

TAU_FLOOR = 1e-30
DIAG_FLOOR = 1e-15

KEEP, NEW = 0, 1


class SingularEvaluation(ArithmeticError):
    """A kernel was evaluated where a denominator vanishes."""


@dataclass(frozen=True)
class KernelValue:
    value: complex
    droot: complex


@dataclass(frozen=True)
class KernelTree:
    """Index structure of one recursive kernel.

    ``steps`` is the extension history starting from the Cauchy kernel in
    ``base``; ``root``, ``groups`` and ``parents`` are derived from it.
    Variables are 0-based internally; serialization uses the same indices.
    """

    base: int
    steps: tuple = ()
    coefficient: int = 1
    root: int = field(init=False)
    groups: tuple = field(init=False)
    parents: tuple = field(init=False)

    def __post_init__(self):
        root, groups, parents = self.base, [], []
        for kind, n in self.steps:
            if n == root or any(n in g for g in groups):
                raise ValueError(f"variable {n} already in the tree")
            if kind == KEEP:
                if groups:
                    groups[0] = tuple(sorted(groups[0] + (n,)))
                else:
                    groups, parents = [(n,)], [root]
            elif kind == NEW:
                groups = [(root,)] + groups
                parents = [n] + parents
                root = n
            else:
                raise ValueError(f"unknown step kind {kind}")
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "groups", tuple(groups))
        object.__setattr__(self, "parents", tuple(parents))

    @property
    def k(self) -> int:
        return len(self.steps)

    @property
    def variables(self) -> tuple:
        """Integration variables, root first."""
        return (self.root,) + tuple(i for g in self.groups for i in g)

    def extend(self, n: int) -> tuple["KernelTree", "KernelTree"]:
        """The two extensions by variable ``n``: root kept, and ``n`` as root."""
        return (KernelTree(self.base, self.steps + ((KEEP, n),), self.coefficient),
                KernelTree(self.base, self.steps + ((NEW, n),), self.coefficient))

    def shape(self) -> tuple:
        """Relabeling-invariant shape: group sizes plus parent positions."""
        pos = {self.root: (0, 0)}
        for s, g in enumerate(self.groups):
            for i in g:
                pos[i] = (s + 1, 0)
        return tuple((len(g), pos[p][0]) for g, p in zip(self.groups, self.parents))

    def to_dict(self) -> dict:
        return {"root": self.root, "groups": [list(g) for g in self.groups],
                "parents": list(self.parents), "coefficient": self.coefficient}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "KernelTree":
        """Rebuild a tree from ``{root, groups, parents}``.

        The canonical history starts from the deepest group's parent, adds each
        group by root-keeping steps and switches roots with one new-root step
        per level.
        """
        root = int(data["root"])
        groups = [tuple(int(i) for i in g) for g in data.get("groups", [])]
        parents = [int(p) for p in data.get("parents", [])]
        if len(groups) != len(parents):
            raise ValueError("groups and parents must have equal length")
        if groups and parents[0] != root:
            raise ValueError("first parent must be the root")
        for s in range(1, len(groups)):
            if parents[s] not in groups[s - 1]:
                raise ValueError(f"parent {parents[s]} not in group {s - 1}")
        seen = [root] + [i for g in groups for i in g]
        if len(set(seen)) != len(seen) or any(len(g) == 0 for g in groups):
            raise ValueError("groups must be nonempty, disjoint and exclude the root")
        if not groups:
            return cls(root, (), int(data.get("coefficient", 1)))
        base = parents[-1]
        steps = [(KEEP, i) for i in groups[-1]]
        for s in range(len(groups) - 2, -1, -1):
            steps.append((NEW, parents[s]))
            # the previous root sits in groups[s]; the rest were added by keeps
            steps.extend((KEEP, i) for i in groups[s] if i != parents[s + 1])
        tree = cls(base, tuple(steps), int(data.get("coefficient", 1)))
        assert tree.root == root
        return tree

    @classmethod
    def from_json(cls, text: str) -> "KernelTree":
        return cls.from_dict(json.loads(text))

    def step_arrays(self):
        kinds = np.array([s[0] for s in self.steps], dtype=np.int64)
        vars_ = np.array([s[1] for s in self.steps], dtype=np.int64)
        return kinds, vars_


def solution_trees(n: int) -> list[KernelTree]:
    """All kernel trees of the n-variable solution operator, with multiplicity.

    Going from ``n-1`` to ``n`` variables every tree is kept and also extended
    both ways by the new variable, and the plain Cauchy kernel in the new
    variable is added; the count obeys ``N(n) = 3 N(n-1) + 1``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    trees = [KernelTree(0)]
    for m in range(1, n):
        nxt = [KernelTree(m)]
        for t in trees:
            keep, new = t.extend(m)
            nxt.extend([t, keep, new])
        trees = nxt
    return trees


def all_tree_shapes(n: int, max_k: int | None = None) -> list[KernelTree]:
    """One tree per distinct kernel on variables ``0..n-1`` (up to ``max_k`` extensions)."""
    max_k = n - 1 if max_k is None else max_k
    out, seen = [], set()
    frontier = [KernelTree(j) for j in range(n)]
    while frontier:
        nxt = []
        for t in frontier:
            key = (t.root, t.groups, t.parents)
            if key in seen:
                continue
            seen.add(key)
            if t.k >= 1:
                out.append(t)
            if t.k < max_k:
                for m in range(n):
                    if m not in t.variables:
                        nxt.extend(t.extend(m))
        frontier = nxt
    return out


# -- scalar building blocks ------------------------------------------------

def _dd(domain, w):
    d, g = delta_and_dbar(domain, np.array([w]))
    return d[0], g[0]


def tau(zi, wi, zj, wj, domain: PlanarDomain) -> float:
    """``|zi - wi|^2 delta(wi) + |zj - wj|^2 delta(wj)``."""
    di, _ = _dd(domain, wi)
    dj, _ = _dd(domain, wj)
    return abs(zi - wi) ** 2 * di + abs(zj - wj) ** 2 * dj


def _pair_parts(i, j, z, w, domain):
    di, gi = _dd(domain, w[i])
    dj, gj = _dd(domain, w[j])
    ai = abs(z[i] - w[i]) ** 2 * di
    aj = abs(z[j] - w[j]) ** 2 * dj
    t = ai + aj
    if t < TAU_FLOOR:
        raise SingularEvaluation(f"tau_{i},{j} = {t} below threshold")
    ei = di + np.conj(w[i] - z[i]) * gi
    ej = dj + np.conj(w[j] - z[j]) * gj
    return di, dj, ai, aj, t, ei, ej


def a_kernel(i: int, j: int, z, w, domain: PlanarDomain, upper: int | None = None) -> complex:
    """A-kernel of the pair ``(i, j)`` with superscript ``upper`` (default ``j``).

    ``A^j_{i,j} = -a_i E_j / tau_ij^2``; the ``i`` variant swaps roles.
    """
    upper = j if upper is None else upper
    if upper not in (i, j):
        raise ValueError("superscript must be one of the pair")
    _, _, ai, aj, t, ei, ej = _pair_parts(i, j, z, w, domain)
    if upper == j:
        return -ai * ej / t**2
    return -aj * ei / t**2


def s_pair(i: int, j: int, z, w, domain: PlanarDomain) -> KernelValue:
    """Pair kernel ``S^i_{i,j}`` (integrating against ``f_i``) and its ``conj(w_i)`` derivative."""
    di, dj, ai, aj, t, ei, ej = _pair_parts(i, j, z, w, domain)
    value = np.conj(w[i] - z[i]) * di * ej / t**2
    droot = (aj - ai) * ei * ej / t**3
    return KernelValue(value, droot)


def cauchy_kernel(j: int, z, w) -> KernelValue:
    d = z[j] - w[j]
    if abs(d) < DIAG_FLOOR:
        raise SingularEvaluation("w_j coincides with z_j")
    return KernelValue(1.0 / d, 0j)


def extend_value(kv: KernelValue, kind: int, j: int, n: int, z, w, domain) -> KernelValue:
    """Apply one extension to a kernel value rooted at ``j`` (scalar reference path)."""
    if abs(z[n] - w[n]) < DIAG_FLOOR:
        raise SingularEvaluation("w_n coincides with z_n")
    _, dn, aj, an, t, ej, en = _pair_parts(j, n, z, w, domain)
    zj = z[j] - w[j]
    if kind == KEEP:
        a = -aj * en / t**2
        ds = (an - aj) * ej * en / t**3
        return KernelValue(a * kv.value, zj * ds * kv.value + a * kv.droot)
    s = np.conj(w[n] - z[n]) * dn * ej / t**2
    ds = (aj - an) * en * ej / t**3
    value = s * zj * kv.value + aj / ((z[n] - w[n]) * t) * kv.droot
    droot = ds * zj * kv.value + aj * en / t**2 * kv.droot
    return KernelValue(value, droot)


def _points(z) -> np.ndarray:
    z = np.asarray(z)
    return z if z.dtype.kind == "c" else z.astype(complex)


def evaluate(tree: KernelTree, z, w, domain: PlanarDomain) -> KernelValue:
    """Kernel value and root derivative at one point ``(z, w)`` of the product domain."""
    z, w = _points(z), _points(w)
    kv = cauchy_kernel(tree.base, z, w)
    root = tree.base
    for kind, n in tree.steps:
        kv = extend_value(kv, kind, root, n, z, w, domain)
        if kind == NEW:
            root = n
    return kv


def bound_envelope(tree: KernelTree, z, w, domain: PlanarDomain) -> tuple[float, float]:
    """Upper bounds for ``|value|`` and ``|droot|`` of a tree with ``k >= 1``."""
    if tree.k < 1:
        raise ValueError("envelope is defined for trees with at least one extension")
    z, w = _points(z), _points(w)
    d, _ = delta_and_dbar(domain, w)
    r = np.abs(w - z)
    j = tree.root
    if r[j] < DIAG_FLOOR:
        raise SingularEvaluation("w_j coincides with z_j")
    a = r**2 * d
    prod = 1.0
    for g, p in zip(tree.groups, tree.parents):
        for i in g:
            t = a[p] + a[i]
            if t < TAU_FLOOR:
                raise SingularEvaluation(f"tau_{p},{i} below threshold")
            prod *= (d[i] + C0 * r[i]) / t
    scale = 2.0 ** (tree.k - 1)
    value_bound = scale / r[j] * prod
    deriv_bound = scale * max((d[j] + C0 * r[j]) / (a[j] + a[i]) for i in tree.groups[0]) * prod
    return float(value_bound), float(deriv_bound)


# -- vectorized evaluation ---------------------------------------------------

@numba.njit(cache=True, inline="always")
def _tree_point(kinds, vars_, base, z, w, d, g):
    """(value, droot, ok) at one sample; ``w, d, g`` hold every variable's slot."""
    root = base
    dz = z[root] - w[root]
    if abs(dz) < DIAG_FLOOR:
        return 0j, 0j, False
    val = 1.0 / dz
    dr = 0j
    for s in range(kinds.shape[0]):
        n = vars_[s]
        j = root
        zj = z[j] - w[j]
        zn = z[n] - w[n]
        if abs(zn) < DIAG_FLOOR:
            return 0j, 0j, False
        aj = (zj.real * zj.real + zj.imag * zj.imag) * d[j]
        an = (zn.real * zn.real + zn.imag * zn.imag) * d[n]
        t = aj + an
        if t < TAU_FLOOR:
            return 0j, 0j, False
        ej = d[j] - np.conj(zj) * g[j]
        en = d[n] - np.conj(zn) * g[n]
        t2 = t * t
        if kinds[s] == 0:
            a = -aj * en / t2
            ds = (an - aj) * ej * en / (t2 * t)
            dr = zj * ds * val + a * dr
            val = a * val
        else:
            sn = -np.conj(zn) * d[n] * ej / t2
            ds = (aj - an) * en * ej / (t2 * t)
            nv = sn * zj * val + aj / (zn * t) * dr
            dr = ds * zj * val + aj * en / t2 * dr
            val = nv
            root = n
    return val, dr, True


@numba.njit(cache=True)
def tree_values(kinds, vars_, base, z, W, D, G):
    """Kernel values for M samples; ``W, D, G`` have shape (n, M). Returns values, droots, ok."""
    n, m = W.shape
    vals = np.zeros(m, dtype=np.complex128)
    drs = np.zeros(m, dtype=np.complex128)
    ok = np.zeros(m, dtype=np.bool_)
    w = np.empty(n, dtype=np.complex128)
    d = np.empty(n)
    g = np.empty(n, dtype=np.complex128)
    for i in range(m):
        for v in range(n):
            w[v] = W[v, i]
            d[v] = D[v, i]
            g[v] = G[v, i]
        vals[i], drs[i], ok[i] = _tree_point(kinds, vars_, base, z, w, d, g)
    return vals, drs, ok


@numba.njit(cache=True)
def pair_block_sums(kinds, vars_, base, z, va, wa, da, ga, qa, vb, wb, db, gb, qb, F):
    """Weighted sum of kernel * F over a tensor block.

    ``F`` has shape (len(wa), len(wb)); rows index variable ``va``, columns
    ``vb``.  Returns per-row partial sums (so the final reduction order is
    fixed), plus the skipped weight and skipped envelope mass.
    """
    na = wa.shape[0]
    nb = wb.shape[0]
    n = z.shape[0]
    rows = np.zeros(na, dtype=np.complex128)
    skipped_w = 0.0
    skipped_n = 0
    w = z.copy()
    d = np.ones(n)
    g = np.zeros(n, dtype=np.complex128)
    for a in range(na):
        w[va] = wa[a]
        d[va] = da[a]
        g[va] = ga[a]
        acc = 0j
        for b in range(nb):
            w[vb] = wb[b]
            d[vb] = db[b]
            g[vb] = gb[b]
            val, dr, ok = _tree_point(kinds, vars_, base, z, w, d, g)
            if ok:
                acc += val * F[a, b] * qb[b]
            else:
                skipped_w += qa[a] * qb[b]
                skipped_n += 1
        rows[a] = acc * qa[a]
    return rows, skipped_w, skipped_n
