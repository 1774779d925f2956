"""Cauchy transforms and multi-variable kernel transforms.

All integrals are against area measure: the one-variable transform is
``(1/pi) int g(w) / (z - w) dA(w)`` and a kernel with ``k + 1`` integration
variables carries the factor ``1/pi^(k+1)``.  Slots of ``f`` that are not
integrated are frozen at the matching coordinates of ``z``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy.stats import qmc

from . import kernelcalc as kc
from .geometry import (DomainError, PlanarDomain, QuadratureRule, build_rule, contains, delta,
                       delta_and_dbar, is_star_center, polar_rule, ray_exit)

Component = Callable[..., np.ndarray]


@dataclass
class Form01:
    """A (0,1)-form ``sum_j f_j dzbar_j`` on the n-fold product of a domain.

    Each component is a callable ``f_j(w_0, ..., w_{n-1})`` that broadcasts
    over numpy arrays.  ``derivatives`` optionally maps ``(j, i)`` to
    ``d f_j / d zbar_i``.
    """

    components: list
    derivatives: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.components)

    def __call__(self, j: int, *w) -> np.ndarray:
        out = self.components[j](*w)
        return np.broadcast_to(np.asarray(out, dtype=complex), np.broadcast(*w).shape)

    def derivative(self, j: int, *idx: int) -> Component:
        """``d^k f_j / d zbar_{i1} ... d zbar_{ik}``; no indices gives ``f_j`` itself."""
        if not idx:
            return self.components[j]
        key = (j, idx[0]) if len(idx) == 1 else (j,) + tuple(sorted(idx))
        try:
            return self.derivatives[key]
        except KeyError:
            raise KeyError(f"derivative of component {j} in zbar_{list(idx)} not supplied") from None

    def closedness_defect(self, points: np.ndarray) -> float:
        """Largest ``|d f_i/d zbar_j - d f_j/d zbar_i|`` over sample points (shape (n, M))."""
        worst = 0.0
        for i, j in itertools.combinations(range(self.n), 2):
            if (i, j) in self.derivatives and (j, i) in self.derivatives:
                a = np.asarray(self.derivatives[(i, j)](*points), dtype=complex)
                b = np.asarray(self.derivatives[(j, i)](*points), dtype=complex)
                worst = max(worst, float(np.max(np.abs(a - b), initial=0.0)))
        return worst

    def scaled(self, c: complex) -> "Form01":
        comps = [_scale(f, c) for f in self.components]
        ders = {k: _scale(f, c) for k, f in self.derivatives.items()}
        return Form01(comps, ders)


def _scale(f, c):
    return lambda *w: c * np.asarray(f(*w))


def zero_form(n: int) -> Form01:
    zero = lambda *w: np.zeros(np.broadcast(*w).shape, dtype=complex)
    return Form01([zero] * n, {(j, i): zero for j in range(n) for i in range(n) if i != j})


# -- one-variable transforms ---------------------------------------------

def cauchy(g: Callable, rule: QuadratureRule, z: complex, domain: Optional[PlanarDomain] = None) -> complex:
    """``(1/pi) int g(w) / (z - w) dA(w)`` by the quadrature rule.

    The rule should carry a polar patch around ``z``.  When ``domain`` is
    given, ``z`` must be an interior point of it.
    """
    z = complex(z)
    if domain is not None and not contains(domain, np.array([z]), closed=False)[0]:
        raise DomainError(f"{z} is not an interior point")
    vals = np.asarray(g(rule.nodes), dtype=complex)
    return complex(np.dot(rule.weights, np.broadcast_to(vals, rule.nodes.shape) / (z - rule.nodes)) / np.pi)


def cauchy_complement(g: Callable, inner: PlanarDomain, rule: QuadratureRule, z: complex) -> complex:
    """Cauchy transform over ``Omega`` minus the closure of ``inner``, for ``z`` in ``inner``.

    ``rule`` must be a quadrature rule on the complement region (see
    ``build_rule(..., exclude=inner)``).  The result is holomorphic in ``z``.
    """
    z = complex(z)
    if not contains(inner, np.array([z]), closed=False)[0]:
        raise DomainError(f"{z} is not inside the inner domain")
    vals = np.broadcast_to(np.asarray(g(rule.nodes), dtype=complex), rule.nodes.shape)
    return complex(np.dot(rule.weights, vals / (z - rule.nodes)) / np.pi)


# -- product grids -------------------------------------------------------

@dataclass
class ProductGrid:
    """Quadrature data for the factors of a product domain.

    ``factors[i]`` is the rule used when variable ``i`` is integrated (refined
    at ``z_i``).  In Monte Carlo mode ``samples`` points are drawn per term,
    split over ``replicates`` independent batches, with ``seed`` fixing the
    stream.
    """

    domain: PlanarDomain
    factors: list
    mode: str = "tensor"
    samples: int = 10**6
    seed: int = 0
    replicates: int = 20
    patch_radius: Optional[Sequence[float]] = None

    @classmethod
    def around(cls, domain: PlanarDomain, z, resolution: int, mode: str = "tensor",
               samples: int = 10**6, seed: int = 0, patch_radius=None, replicates: int = 20,
               rule: str = "polar"):
        z = np.asarray(z, dtype=complex)
        if patch_radius is None:
            patch_radius = [min(0.1, d / 2) for d in delta(domain, z)]
        if rule == "polar":
            factors = [polar_rule(domain, zi, resolution) for zi in z]
        else:
            factors = [build_rule(domain, resolution, zi, ri) for zi, ri in zip(z, patch_radius)]
        return cls(domain, factors, mode, samples, seed, replicates, list(patch_radius))

    def weight_sum_product(self, variables: Sequence[int]) -> float:
        return float(np.prod([self.factors[v].total_weight for v in variables]))


@dataclass
class TransformResult:
    value: complex
    stderr: float = 0.0
    nodes: int = 0
    skipped_nodes: int = 0
    skipped_measure: float = 0.0
    skipped_bound: float = 0.0
    replicates: Optional[np.ndarray] = None


def _frozen_args(z, slots: dict, shape):
    """Arguments for f: integrated slots from ``slots``, the rest frozen at z."""
    return [slots[i] if i in slots else np.full(shape, z[i]) if shape else z[i] for i in range(len(z))]


def kernel_transform(tree: kc.KernelTree, f: Callable, grid: ProductGrid, z,
                     mode: Optional[str] = None, term: int = 0, trace: Optional[list] = None) -> TransformResult:
    """``(1/pi^(k+1)) int S(z, w) f(w) dA(w)`` over the tree's integration variables.

    ``f`` is one component of a form, called with all n slots.  ``term``
    distinguishes random streams of different terms in Monte Carlo mode.
    When ``trace`` is a list, (node, kernel value, weight) rows are appended
    to it (tensor mode only).
    """
    z = np.asarray(z, dtype=complex)
    mode = mode or grid.mode
    if tree.k == 0:
        j = tree.base
        rule = grid.factors[j]

        def g(w):
            args = _frozen_args(z, {j: w}, w.shape)
            return np.broadcast_to(np.asarray(f(*args), dtype=complex), w.shape)

        if trace is not None:
            for node, wt in zip(rule.nodes, rule.weights):
                trace.append((node, 1.0 / (z[j] - node), wt))
        return TransformResult(cauchy(g, rule, z[j]), nodes=len(rule))
    if mode == "mc":
        return _mc_transform(tree, f, grid, z, term)
    if tree.k == 1:
        return _pair_tensor(tree, f, grid, z, trace)
    return _generic_tensor(tree, f, grid, z, trace)


def _pair_tensor(tree, f, grid, z, trace, block=256):
    va, vb = tree.variables
    ra, rb = grid.factors[va], grid.factors[vb]
    domain = grid.domain
    da, ga = delta_and_dbar(domain, ra.nodes)
    db, gb = delta_and_dbar(domain, rb.nodes)
    kinds, vars_ = tree.step_arrays()
    total = 0j
    skipped_w, skipped_n, fmax = 0.0, 0, 0.0
    for s in range(0, len(ra), block):
        wa = ra.nodes[s:s + block]
        args = _frozen_args(z, {va: wa[:, None], vb: rb.nodes[None, :]}, None)
        F = np.ascontiguousarray(np.broadcast_to(np.asarray(f(*args), dtype=complex),
                                                 (len(wa), len(rb))))
        rows, sw, sn = kc.pair_block_sums(kinds, vars_, tree.base, z, va, wa, da[s:s + block],
                                          ga[s:s + block], ra.weights[s:s + block], vb, rb.nodes,
                                          db, gb, rb.weights, F)
        total += rows.sum()
        skipped_w += sw
        skipped_n += sn
        if sn:
            fmax = max(fmax, float(np.abs(F).max()))
    if trace is not None:
        _trace_pairs(tree, z, ra, rb, domain, trace)
    value = complex(total / np.pi**2)
    bound = 0.0
    if skipped_n:
        bound = _skipped_bound(tree, z, grid, skipped_w, fmax)
    return TransformResult(value, 0.0, len(ra) * len(rb), skipped_n, skipped_w, bound)


def _skipped_bound(tree, z, grid, skipped_w, fmax):
    # the envelope is not finite at a skipped node; bound the skipped cell by
    # the largest envelope seen on the patch boundary ring, a conservative proxy
    rho = min(r.patch_radius or 0.1 for r in grid.factors)
    w = z.copy()
    for v in tree.variables:
        w[v] = z[v] + rho / 4
    vb, _ = kc.bound_envelope(tree, z, w, grid.domain)
    return float(vb * fmax * skipped_w / np.pi ** (tree.k + 1))


def _trace_pairs(tree, z, ra, rb, domain, trace):
    va, vb = tree.variables
    W = np.empty((len(z), len(ra) * len(rb)), dtype=complex)
    W[:] = z[:, None]
    W[va] = np.repeat(ra.nodes, len(rb))
    W[vb] = np.tile(rb.nodes, len(ra))
    D, G = _dd_rows(domain, W, tree.variables)
    kinds, vars_ = tree.step_arrays()
    vals, _, _ = kc.tree_values(kinds, vars_, tree.base, z, W, D, G)
    wts = np.repeat(ra.weights, len(rb)) * np.tile(rb.weights, len(ra))
    for i in range(W.shape[1]):
        trace.append((tuple(W[list(tree.variables), i]), vals[i], wts[i]))


def _dd_rows(domain, W, variables):
    D = np.ones(W.shape)
    G = np.zeros(W.shape, dtype=complex)
    for v in variables:
        D[v], G[v] = delta_and_dbar(domain, W[v])
    return D, G


def _generic_tensor(tree, f, grid, z, trace, chunk=1 << 18):
    variables = tree.variables
    rules = [grid.factors[v] for v in variables]
    sizes = [len(r) for r in rules]
    total_nodes = int(np.prod(sizes))
    kinds, vars_ = tree.step_arrays()
    dds = [delta_and_dbar(grid.domain, r.nodes) for r in rules]
    total = 0j
    skipped_w, skipped_n, fmax = 0.0, 0, 0.0
    for s in range(0, total_nodes, chunk):
        idx = np.unravel_index(np.arange(s, min(s + chunk, total_nodes)), sizes)
        m = len(idx[0])
        W = np.empty((len(z), m), dtype=complex)
        W[:] = z[:, None]
        D = np.ones((len(z), m))
        G = np.zeros((len(z), m), dtype=complex)
        wt = np.ones(m)
        for v, r, ix, (d, g) in zip(variables, rules, idx, dds):
            W[v] = r.nodes[ix]
            D[v] = d[ix]
            G[v] = g[ix]
            wt *= r.weights[ix]
        vals, _, ok = kc.tree_values(kinds, vars_, tree.base, z, W, D, G)
        F = np.broadcast_to(np.asarray(f(*W), dtype=complex), (m,))
        total += np.sum(np.where(ok, vals * F * wt, 0))
        if not ok.all():
            skipped_w += float(wt[~ok].sum())
            skipped_n += int((~ok).sum())
            fmax = max(fmax, float(np.abs(F).max()))
        if trace is not None:
            for i in range(m):
                trace.append((tuple(W[list(variables), i]), vals[i], wt[i]))
    value = complex(total / np.pi ** len(variables))
    bound = _skipped_bound(tree, z, grid, skipped_w, fmax) if skipped_n else 0.0
    return TransformResult(value, 0.0, total_nodes, skipped_n, skipped_w, bound)


# -- fused tensor path -----------------------------------------------------

@numba.njit(parallel=True, cache=False)
def _fused_pair_rows(roots, z, va, wa, da, ga, qa, vb, wb, db, gb, qb, fill, ncomp):
    """Per-row weighted sums of pair kernels against form components.

    Every pair tree on variables ``(va, vb)`` is ``conj(w_r - z_r) delta_r E_o / tau^2``
    with root ``r`` and other variable ``o``, integrated against ``f_r``; the
    shared quantities are computed once per node pair.  ``fill(w, out)``
    evaluates every component at ``w``.  Rows are independent, so the
    parallel loop is deterministic.
    """
    ntree = roots.shape[0]
    na = wa.shape[0]
    nb = wb.shape[0]
    rows = np.zeros((na, ntree), dtype=np.complex128)
    skipped = np.zeros(na)
    for a in numba.prange(na):
        w = z.copy()
        fv = np.zeros(ncomp, dtype=np.complex128)
        acc = np.zeros(ntree, dtype=np.complex128)
        w[va] = wa[a]
        za = z[va] - wa[a]
        aa = (za.real * za.real + za.imag * za.imag) * da[a]
        ea = da[a] - np.conj(za) * ga[a]
        miss = 0.0
        for b in range(nb):
            zb = z[vb] - wb[b]
            ab = (zb.real * zb.real + zb.imag * zb.imag) * db[b]
            t = aa + ab
            if t < kc.TAU_FLOOR:
                miss += qb[b]
                continue
            w[vb] = wb[b]
            fill(w, fv)
            eb = db[b] - np.conj(zb) * gb[b]
            q = qb[b] / (t * t)
            sa = -np.conj(za) * da[a] * eb * q
            sb = -np.conj(zb) * db[b] * ea * q
            for k in range(ntree):
                r = roots[k]
                if r == va:
                    acc[k] += sa * fv[r]
                else:
                    acc[k] += sb * fv[r]
        for k in range(ntree):
            rows[a, k] = acc[k] * qa[a]
        skipped[a] = miss * qa[a]
    return rows, skipped


def _fused_pairs(trees, form, grid, z):
    """Tensor sums for pair trees sharing one variable pair, in a single sweep."""
    va, vb = sorted(trees[0].variables)
    ra, rb = grid.factors[va], grid.factors[vb]
    da, ga = delta_and_dbar(grid.domain, ra.nodes)
    db, gb = delta_and_dbar(grid.domain, rb.nodes)
    roots = np.array([t.root for t in trees], dtype=np.int64)
    rows, skipped = _fused_pair_rows(roots, z, va, ra.nodes, da, ga, ra.weights, vb, rb.nodes, db,
                                     gb, rb.weights, form.fill, form.n)
    totals = rows.sum(axis=0) / np.pi**2
    miss = float(skipped.sum())
    return [TransformResult(complex(v), 0.0, len(ra) * len(rb), 0, miss, 0.0) for v in totals]


def kernel_transforms(trees: Sequence[kc.KernelTree], form: Form01, grid: ProductGrid, z,
                      mode: Optional[str] = None) -> list:
    """Transforms of several trees, each against the form component of its root.

    Pair trees on the same two variables share one fused sweep when the form
    has a compiled point evaluator (``form.fill``); everything else goes
    through ``kernel_transform``.
    """
    z = np.asarray(z, dtype=complex)
    mode = mode or grid.mode
    out = [None] * len(trees)
    fused = {}
    for idx, tree in enumerate(trees):
        if tree.k == 1 and mode != "mc" and getattr(form, "fill", None) is not None:
            fused.setdefault(frozenset(tree.variables), []).append(idx)
        else:
            comp = lambda *w, j=tree.root: form(j, *w)
            out[idx] = kernel_transform(tree, comp, grid, z, mode=mode, term=idx)
    for idxs in fused.values():
        for idx, res in zip(idxs, _fused_pairs([trees[i] for i in idxs], form, grid, z)):
            out[idx] = res
    return out


# -- Monte Carlo ---------------------------------------------------------

def patch_exponent(k: int) -> float:
    """Radial density exponent for the patch stratum.

    Sampling ``|w_i - z_i|`` with density ``~ r^-a`` in every factor gives a
    finite-variance estimator for a kernel with ``k + 1`` variables iff
    ``a > 2k/(k+1)``; we take the midpoint between that threshold and 2.
    """
    return 0.5 * (2.0 * k / (k + 1) + 2.0)


MC_ROOT_EXPONENT = 1.5
MC_MIX = (0.4, 0.3, 0.3)  # child laws: center layer, boundary layer, plain power
MC_ROTATIONS = 4


def _radius_power(u, R, a):
    return R * u ** (1.0 / (2.0 - a))


def _density_power(r, R, a):
    return (2.0 - a) * r ** (-a) / (2 * np.pi * R ** (2.0 - a))


def _radius_center(u, R, eps):
    # radial law with cdf 1 - eps / sqrt(eps^2 + r^2), truncated to [0, R]
    F = 1.0 - eps / np.sqrt(eps**2 + R**2)
    q = 1.0 - u * F
    return eps * np.sqrt(np.maximum(1.0 / q**2 - 1.0, 0.0))


def _density_center(r, R, eps):
    F = 1.0 - eps / np.sqrt(eps**2 + R**2)
    return eps / (2 * np.pi * (eps**2 + r**2) ** 1.5 * F)


def _radius_boundary(u, R, eta):
    # s = R - r with cdf 1 - eta / (eta + s), truncated to [0, R]
    G = R / (eta + R)
    s = eta / (1.0 - u * G) - eta
    return np.clip(R - s, 0.0, R)


def _density_boundary(r, R, eta):
    G = R / (eta + R)
    s = R - r
    with np.errstate(divide="ignore"):
        return eta / ((eta + s) ** 2 * G) / (2 * np.pi * r)


def _mc_transform(tree, f, grid, z, term):
    """Importance sampling in polar coordinates, following the tree.

    The root variable is drawn as ``z_j + r e^{it}`` with ``t`` uniform and
    radial density ``~ r^-a`` up to the boundary along the ray.  Every other
    variable ``i`` is coupled by its kernel factor to a parent ``p`` at the
    scale ``eps = |w_p - z_p| sqrt(delta(w_p) / delta(z_i))``, where the two
    terms of the denominator ``tau_{p,i}`` balance; it is drawn from a mixture
    of a law concentrated at that scale and the plain ``r^-a`` law.  Rays must
    leave the domain once, so the domain has to be star-shaped about every
    ``z_i``.  Uniforms come from a Latin hypercube per replicate, and
    replicates give the standard error.  Random numbers depend only on
    ``(seed, term)``, so nearby ``z`` see the same relative offsets and
    finite differences of the estimate stay smooth.
    """
    domain = grid.domain
    variables = tree.variables
    for v in variables:
        if not is_star_center(domain, z[v]):
            raise DomainError(f"domain is not star-shaped about {z[v]}; Monte Carlo mode needs it")
    turns = MC_ROTATIONS
    per = max(2, grid.samples // (grid.replicates * turns))
    rng = np.random.default_rng([grid.seed, term])
    reps = np.zeros(grid.replicates, dtype=complex)
    for rep in range(grid.replicates):
        u = qmc.LatinHypercube(d=3 * len(variables), seed=rng).random(per).T
        # each point is used at ``turns`` rotations of the root angle
        u = np.tile(u, (1, turns))
        u[1] = np.mod(u[1] + np.repeat(np.arange(turns) / turns, per), 1.0)
        reps[rep] = _mc_contributions(tree, f, domain, z, u)[0].mean()
    value = complex(reps.mean())
    se = float(np.sqrt((reps.real.var(ddof=1) + reps.imag.var(ddof=1)) / grid.replicates))
    return TransformResult(value, se, per * turns * grid.replicates, replicates=reps)


def _mc_contributions(tree, f, domain, z, u):
    """Per-sample estimates (already divided by ``pi^(k+1)``) and the sample points.

    ``u`` holds three uniforms per integration variable (radius, angle,
    mixture choice) and one column per sample.
    """
    variables = tree.variables
    a = patch_exponent(tree.k)
    parent = {i: p for g, p in zip(tree.groups, tree.parents) for i in g}
    dz = delta(domain, z)
    count = u.shape[1]
    W = np.empty((len(z), count), dtype=complex)
    W[:] = z[:, None]
    D = {}
    wt = np.ones(count)
    old = np.seterr(all="ignore")
    for slot, v in enumerate(variables):
        t = 2 * np.pi * u[3 * slot + 1]
        R = ray_exit(domain, z[v], t)
        if v == tree.root:
            r = _radius_power(u[3 * slot], R, MC_ROOT_EXPONENT)
            dens = _density_power(r, R, MC_ROOT_EXPONENT)
        else:
            p = parent[v]
            ap = np.abs(W[p] - z[p]) ** 2 * D[p]
            eps = np.maximum(np.sqrt(ap / dz[v]), 1e-300)
            eta = np.maximum(ap / R**2, 1e-300)
            c1, c2, c3 = MC_MIX
            pick = u[3 * slot + 2]
            uu = u[3 * slot]
            r = np.where(pick < c1, _radius_center(uu, R, eps),
                         np.where(pick < c1 + c2, _radius_boundary(uu, R, eta), _radius_power(uu, R, a)))
            dens = (c1 * _density_center(r, R, eps) + c2 * _density_boundary(r, R, eta)
                    + c3 * _density_power(r, R, a))
        W[v] = z[v] + r * np.exp(1j * t)
        D[v] = np.maximum(delta(domain, W[v]), 0.0)
        wt = wt / dens
    np.seterr(**old)
    Dr, G = _dd_rows(domain, W, variables)
    inside = np.all(Dr > 0, axis=0) & np.isfinite(wt)
    kinds, vars_ = tree.step_arrays()
    vals, _, ok = kc.tree_values(kinds, vars_, tree.base, z, W, Dr, G)
    F = np.broadcast_to(np.asarray(f(*W), dtype=complex), (count,))
    keep = ok & inside
    contrib = np.where(keep, vals * F * np.where(keep, wt, 0.0), 0) / np.pi ** len(variables)
    return contrib, W


def write_trace(path, trace: list) -> None:
    """Dump (node, kernel value, weight) rows to CSV."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["node", "kernel_re", "kernel_im", "weight"])
        for node, val, wt in trace:
            if isinstance(node, tuple):
                node = ";".join(f"{c.real:.17g}{c.imag:+.17g}j" for c in node)
            else:
                node = f"{node.real:.17g}{node.imag:+.17g}j"
            out.writerow([node, f"{val.real:.17g}", f"{val.imag:.17g}", f"{wt:.17g}"])
