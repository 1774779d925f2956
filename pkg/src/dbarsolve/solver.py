"""Solution operators for ``dbar u = f`` on products of a planar domain.

Three constructions are assembled here:

* the kernel-tree operator ``T^n = sum_j sum_J S^j_J[f_j]`` (one variable is
  the Cauchy transform, two variables the pair-kernel formula, larger ``n``
  by repeated kernel extension);
* the extension-domain operator for ``D`` compactly inside ``Omega``, which
  only needs ``f`` to be closed on ``D^n`` and is written with iterated
  Cauchy transforms over ``Omega`` and over ``Omega`` minus the closure of ``D``;
* mollification of forms by a radial bump, used to approximate rough data on
  the inner regions ``Omega_m``.

Residuals ``|du/dzbar_j - f_j|`` are measured with central differences.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import sympy
from scipy import integrate
from scipy.stats import qmc

from . import kernelcalc as kc
from .expressions import CompiledForm, form_from_exprs, form_from_sympy, _symbols
from .geometry import (PlanarDomain, complement_rule, contains, delta, domain_from_dict,
                       polar_rule)
from .transforms import (Form01, ProductGrid, _density_power, _radius_power, kernel_transform,
                         kernel_transforms, patch_exponent)

SCHEMA_VERSION = 1
TENSOR_MAX_N = 4
MC_MAX_N = 6
CLOSEDNESS_TOL = 1e-6


class ConfigError(ValueError):
    """The solver configuration is inconsistent."""


@dataclass
class SolveConfig:
    """Evaluation setup shared by all solvers.

    ``points`` has one row per evaluation point of ``Omega^n``.  ``mode`` is
    ``"auto"`` (tensor quadrature up to two integration variables, Monte
    Carlo beyond), ``"tensor"`` or ``"mc"``.
    """

    n: int
    domain: PlanarDomain
    points: np.ndarray
    resolution: int = 64
    mode: str = "auto"
    samples: int = 10**6
    seed: int = 0
    replicates: int = 20
    p_list: tuple = (2.0, 4.0, math.inf)
    eps_schedule: tuple = ()
    inner_m: Optional[float] = None
    fd_step: Optional[float] = None
    residuals: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex)
        if pts.ndim == 1:
            pts = pts.reshape(-1, self.n) if self.n > 1 else pts[:, None]
        if pts.ndim != 2 or pts.shape[1] != self.n:
            raise ConfigError(f"points must have shape (count, {self.n})")
        self.points = pts
        if self.mode not in ("auto", "tensor", "mc"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.resolution < 8:
            raise ConfigError("resolution must be at least 8")
        if self.replicates < 2:
            raise ConfigError("at least two replicates are needed for error bars")
        eps = tuple(float(e) for e in self.eps_schedule)
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps schedule must be positive and strictly decreasing")
        if eps and self.inner_m is not None and max(eps) >= 1.0 / self.inner_m:
            raise ConfigError("eps values must stay below 1/m")
        self.eps_schedule = eps

    @property
    def step(self) -> float:
        return self.fd_step if self.fd_step is not None else max(1e-3, 2.0 / self.resolution)

    @property
    def margin(self) -> float:
        """Smallest admissible boundary distance of an evaluation coordinate."""
        return max(2.0 / self.resolution, 2.0 * self.step)


@dataclass
class SolveReport:
    method: str
    n: int
    points: np.ndarray
    values: np.ndarray
    residual: np.ndarray
    residual_stderr: np.ndarray
    value_stderr: np.ndarray
    flagged: np.ndarray
    norms: dict
    timing: float
    nodes: int
    skipped_measure: float = 0.0
    skipped_bound: float = 0.0
    warnings: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def residual_max(self) -> float:
        ok = ~self.flagged
        if not ok.any() or np.all(np.isnan(self.residual[ok])):
            return math.nan
        return float(np.nanmax(self.residual[ok]))

    def to_dict(self) -> dict:
        def cplx(a):
            return [[float(v.real), float(v.imag)] for v in np.ravel(a)]

        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "n": self.n,
            "points": [cplx(p) for p in self.points],
            "values": cplx(self.values),
            "value_stderr": [float(v) for v in self.value_stderr],
            "residual": [[_num(v) for v in row] for row in self.residual],
            "residual_stderr": [[_num(v) for v in row] for row in self.residual_stderr],
            "residual_max": _num(self.residual_max),
            "flagged": [bool(v) for v in self.flagged],
            "norms": {k: {_pkey(p): float(v) for p, v in d.items()} for k, d in self.norms.items()},
            "timing_seconds": self.timing,
            "nodes": int(self.nodes),
            "skipped_measure": self.skipped_measure,
            "skipped_bound": self.skipped_bound,
            "warnings": list(self.warnings),
            "terms": self.terms,
            "config": self.config,
        }


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _pkey(p):
    return "inf" if math.isinf(p) else f"{p:g}"


# -- norms -----------------------------------------------------------------

def lp_norms(values: np.ndarray, volume: float, p_list: Sequence[float]) -> dict:
    """Discrete ``L^p`` norms of samples spread evenly over a region of the given volume.

    ``p = inf`` is the sample maximum (a proxy for the sup norm).
    """
    a = np.abs(np.asarray(values))
    if a.size == 0:
        return {p: math.nan for p in p_list}
    out = {}
    for p in p_list:
        if math.isinf(p):
            out[p] = float(a.max())
        else:
            out[p] = float((volume * np.mean(a**p)) ** (1.0 / p))
    return out


def form_magnitude(form: Form01, points: np.ndarray) -> np.ndarray:
    """Pointwise ``(sum_j |f_j|^2)^(1/2)`` at rows of ``points``."""
    cols = [points[:, k] for k in range(points.shape[1])]
    tot = np.zeros(points.shape[0])
    for j in range(form.n):
        tot += np.abs(form(j, *cols)) ** 2
    return np.sqrt(tot)


# -- evaluation of the kernel-tree operator ------------------------------------

def _canonical(trees):
    return sorted(trees, key=lambda t: (t.k, t.root, t.variables, t.steps))


def _term_mode(tree: kc.KernelTree, mode: str) -> str:
    if tree.k == 0:
        return "tensor"
    if mode == "auto":
        return "tensor" if tree.k + 1 <= 2 else "mc"
    return mode


@dataclass
class _Value:
    value: complex
    replicates: Optional[np.ndarray]
    nodes: int
    skipped_measure: float
    skipped_bound: float


class _TreeOperator:
    """``z -> sum_t c_t S_t[f_root(t)](z)`` over a fixed, canonically ordered tree list."""

    def __init__(self, trees, form: Form01, config: SolveConfig):
        self.trees = _canonical(trees)
        self.form = form
        self.config = config
        self.modes = [_term_mode(t, config.mode) for t in self.trees]

    def __call__(self, z) -> _Value:
        cfg = self.config
        z = np.asarray(z, dtype=complex)
        grid = ProductGrid.around(cfg.domain, z, cfg.resolution, mode="tensor", samples=cfg.samples,
                                  seed=cfg.seed, replicates=cfg.replicates)
        tensor_idx = [i for i, m in enumerate(self.modes) if m == "tensor"]
        results = [None] * len(self.trees)
        if tensor_idx:
            res = kernel_transforms([self.trees[i] for i in tensor_idx], self.form, grid, z, mode="tensor")
            for i, r in zip(tensor_idx, res):
                results[i] = r
        for i, m in enumerate(self.modes):
            if m == "mc":
                tree = self.trees[i]
                comp = lambda *w, j=tree.root: self.form(j, *w)
                results[i] = kernel_transform(tree, comp, grid, z, mode="mc", term=i)
        total = 0j
        reps = None
        for tree, r in zip(self.trees, results):
            total += tree.coefficient * r.value
            if r.replicates is not None:
                reps = (0 if reps is None else reps) + tree.coefficient * (r.replicates - r.value)
        if reps is not None:
            reps = reps + total
        return _Value(total, reps, sum(r.nodes for r in results),
                      sum(r.skipped_measure for r in results), sum(r.skipped_bound for r in results))


def _stderr(reps) -> float:
    if reps is None:
        return 0.0
    reps = np.asarray(reps)
    return float(np.sqrt((reps.real.var(ddof=1) + reps.imag.var(ddof=1)) / len(reps)))


def _flag_points(points, config: SolveConfig, region: PlanarDomain) -> np.ndarray:
    d = delta(region, points.ravel()).reshape(points.shape)
    inside = contains(region, points.ravel(), closed=False).reshape(points.shape)
    return ~np.all(inside & (d >= config.margin), axis=1)


def _run(operator, form: Form01, config: SolveConfig, method: str, region: PlanarDomain,
         extra_warnings=(), terms=None) -> SolveReport:
    """Values, residuals and norms of ``operator`` at the configured points."""
    t0 = time.perf_counter()
    pts = config.points
    P, n = pts.shape
    flagged = _flag_points(pts, config, region)
    inside = np.all(contains(region, pts.ravel(), closed=False).reshape(pts.shape), axis=1)
    values = np.full(P, np.nan + 0j)
    vse = np.zeros(P)
    resid = np.full((P, n), np.nan)
    rse = np.full((P, n), np.nan)
    nodes, smeas, sbound = 0, 0.0, 0.0
    h = config.step
    for q in range(P):
        z = pts[q]
        if not inside[q]:
            continue
        base = operator(z)
        values[q] = base.value
        vse[q] = _stderr(base.replicates)
        nodes += base.nodes
        smeas += base.skipped_measure
        sbound += base.skipped_bound
        if flagged[q] or not config.residuals:
            continue
        for j in range(n):
            stencil = []
            for d in (h, -h, 1j * h, -1j * h):
                zz = z.copy()
                zz[j] += d
                stencil.append(operator(zz))
            xp, xm, yp, ym = stencil
            dbar = 0.5 * ((xp.value - xm.value) / (2 * h) + 1j * (yp.value - ym.value) / (2 * h))
            target = complex(form(j, *z))
            resid[q, j] = abs(dbar - target)
            if xp.replicates is not None:
                rd = 0.5 * ((xp.replicates - xm.replicates) / (2 * h)
                            + 1j * (yp.replicates - ym.replicates) / (2 * h))
                rse[q, j] = _stderr(rd)
            else:
                rse[q, j] = 0.0
    ok = inside
    vol = region.area ** n
    norms = {"u": lp_norms(values[ok], vol, config.p_list),
             "f": lp_norms(form_magnitude(form, pts[ok]), vol, config.p_list)}
    warn = list(extra_warnings)
    if flagged.any():
        warn.append(f"{int(flagged.sum())} point(s) closer than {config.margin:g} to the boundary: "
                    "excluded from residual statistics")
    if abs(smeas) > 0 and sbound > 0.01 * max(np.nanmax(np.abs(values[ok]), initial=0.0), 1e-300):
        warn.append(f"skipped-node bound {sbound:.3g} exceeds 1% of the result")
    return SolveReport(method, n, pts, values, resid, rse, vse, flagged, norms,
                       time.perf_counter() - t0, nodes, smeas, sbound, warn, terms or [],
                       _config_dict(config))


def _config_dict(config: SolveConfig) -> dict:
    return {"resolution": config.resolution, "mode": config.mode, "samples": config.samples,
            "seed": config.seed, "replicates": config.replicates, "fd_step": config.step,
            "domain": config.domain.to_dict()}


def _closedness_warnings(form: Form01, config: SolveConfig) -> list:
    if form.n < 2:
        return []
    cols = [config.points[:, k] for k in range(form.n)]
    try:
        pts = np.array(cols)
        defect = form.closedness_defect(pts)
    except KeyError:
        return []
    if isinstance(form, CompiledForm):
        defect = max(defect, form.closedness_defect(pts))
    if defect > CLOSEDNESS_TOL:
        return [f"form is not dbar-closed at the evaluation points (defect {defect:.3g})"]
    return []


def _check_n(form: Form01, config: SolveConfig, n: Optional[int] = None):
    if form.n != config.n:
        raise ConfigError(f"form has {form.n} components but the config is for n={config.n}")
    if n is not None and form.n != n:
        raise ConfigError(f"this solver needs n={n}, got n={form.n}")


def _tree_terms(trees) -> list:
    return [dict(t.to_dict(), history=[list(s) for s in t.steps]) for t in _canonical(trees)]


def solve_trees(trees, form: Form01, config: SolveConfig, method: str = "trees") -> SolveReport:
    """Evaluate the operator given by an explicit tree list (each against its root's component)."""
    _check_n(form, config)
    op = _TreeOperator(trees, form, config)
    return _run(op, form, config, method, config.domain, _closedness_warnings(form, config),
                _tree_terms(trees))


def solve_dim1(f: Form01, config: SolveConfig) -> SolveReport:
    """``u = S_1[f_1]``, the Cauchy transform over the domain."""
    _check_n(f, config, 1)
    return solve_trees([kc.KernelTree(0)], f, config, "dim1")


def dim2_trees() -> list:
    """``S_1[f_1] + S^1_{1,2}[f_1] + S_2[f_2] + S^2_{1,2}[f_2]`` as kernel trees.

    The pair kernel with root 2 is the new-root extension of the Cauchy
    kernel in variable 1, the one with root 1 its root-keeping extension.
    """
    c0, c1 = kc.KernelTree(0), kc.KernelTree(1)
    keep, new = c0.extend(1)
    return [c0, keep, c1, new]


def solve_dim2(f: Form01, config: SolveConfig) -> SolveReport:
    """The two-variable operator built from Cauchy transforms and the pair kernels."""
    _check_n(f, config, 2)
    return solve_trees(dim2_trees(), f, config, "dim2")


def solve_recursive(f: Form01, config: SolveConfig) -> SolveReport:
    """The ``n``-variable kernel-tree operator for ``2 <= n``.

    Tensor mode is limited to ``n <= 4``, Monte Carlo (and ``auto``) to
    ``n <= 6``.
    """
    n = f.n
    _check_n(f, config)
    if n < 2:
        raise ConfigError("solve_recursive needs n >= 2")
    if config.mode == "tensor" and n > TENSOR_MAX_N:
        raise ConfigError(f"tensor mode supports n <= {TENSOR_MAX_N}")
    if n > MC_MAX_N:
        raise ConfigError(f"n = {n} exceeds the Monte Carlo limit {MC_MAX_N}")
    return solve_trees(kc.solution_trees(n), f, config, "recursive")


# -- extension-domain operator ---------------------------------------------

OMEGA, COMPLEMENT = "omega", "complement"


@dataclass(frozen=True)
class IteratedTerm:
    """``coefficient * S_{s1} S_{s2} ... [g]`` with ``g = sum c f_j^{(idx)}``.

    ``slots`` lists ``(variable, region)``, region being the whole domain or
    the complement of the inner closure.  ``combo`` holds ``(c, j, idx)``
    triples, ``idx`` the sorted dbar-derivative multi-index of ``f_j``.
    """

    coefficient: int
    slots: tuple
    combo: tuple

    def to_dict(self) -> dict:
        return {"coefficient": self.coefficient,
                "slots": [[v, r] for v, r in self.slots],
                "integrand": [[c, j, list(idx)] for c, j, idx in self.combo]}


def _comp(j):
    return ((1, j, ()),)


def _d(combo, i):
    return tuple((c, j, tuple(sorted(idx + (i,)))) for c, j, idx in combo)


def _sub(a, b):
    return a + tuple((-c, j, idx) for c, j, idx in b)


def _prefix(slot, sign, terms):
    return [IteratedTerm(sign * t.coefficient, (slot,) + t.slots, t.combo) for t in terms]


def extension_terms(variables: Sequence[int], comps: dict) -> list:
    """Expand the extension-domain operator on ``variables`` into iterated terms.

    ``comps[v]`` is the integrand combination standing for the form
    component in variable ``v``.  Two variables use the four-term formula
    ``S_a[g_a] + S_b[g_b] - S_a S_b[d g_b/d zbar_a] - S^D_a S_b[d g_a/d zbar_b - d g_b/d zbar_a]``;
    more variables add the last one by one recursion level.
    """
    vs = list(variables)
    if len(vs) == 1:
        return [IteratedTerm(1, ((vs[0], OMEGA),), comps[vs[0]])]
    if len(vs) == 2:
        a, b = vs
        ga, gb = comps[a], comps[b]
        return [IteratedTerm(1, ((a, OMEGA),), ga),
                IteratedTerm(1, ((b, OMEGA),), gb),
                IteratedTerm(-1, ((a, OMEGA), (b, OMEGA)), _d(gb, a)),
                IteratedTerm(-1, ((a, COMPLEMENT), (b, OMEGA)), _sub(_d(ga, b), _d(gb, a)))]
    *rest, last = vs
    lower = {v: comps[v] for v in rest}
    shifted = {v: _d(comps[v], last) for v in rest}
    bracket = {v: _sub(_d(comps[v], last), _d(comps[last], v)) for v in rest}
    return ([IteratedTerm(1, ((last, OMEGA),), comps[last])]
            + extension_terms(rest, lower)
            + _prefix((last, OMEGA), -1, extension_terms(rest, shifted))
            + _prefix((last, COMPLEMENT), 1, extension_terms(rest, bracket)))


def _combo_callable(form: Form01, combo) -> Callable:
    parts = [(c, form.derivative(j, *idx)) for c, j, idx in combo]

    def g(*w):
        shape = np.broadcast(*w).shape
        out = np.zeros(shape, dtype=complex)
        for c, fn in parts:
            out += c * np.broadcast_to(np.asarray(fn(*w), dtype=complex), shape)
        return out

    return g


def _combo_vanishes(form: Form01, combo, domain: PlanarDomain, rng) -> bool:
    """True if the integrand is identically zero.

    Exact for expression forms; otherwise decided pointwise on random
    points of the product domain.
    """
    if not combo:
        return True
    if isinstance(form, CompiledForm):
        total = sum(c * form.symbolic(j, *idx) for c, j, idx in combo)
        return sympy.expand(total) == 0
    from .geometry import interior_samples
    pts = [interior_samples(domain, 256, rng) for _ in range(form.n)]
    g = _combo_callable(form, combo)(*pts)
    scale = 1.0 + max(float(np.abs(form(j, *pts)).max()) for j in range(form.n))
    return float(np.abs(g).max()) <= 1e-12 * scale


@lru_cache(maxsize=16)
def _complement_rule(domain: PlanarDomain, inner: PlanarDomain, resolution: int):
    return complement_rule(domain, inner, resolution)


class _IteratedOperator:
    """Sum of iterated Cauchy terms, evaluated by tensor quadrature or Monte Carlo."""

    def __init__(self, terms, form, config: SolveConfig, inner: PlanarDomain, tensor_limit=2):
        self.form = form
        self.config = config
        self.inner = inner
        rng = np.random.default_rng(12345)
        self.vanished = [t for t in terms if _combo_vanishes(form, t.combo, config.domain, rng)]
        self.terms = [t for t in terms if t not in self.vanished]
        self.g = [_combo_callable(form, t.combo) for t in self.terms]
        self.tensor_limit = tensor_limit

    def _mode(self, term):
        if self.config.mode == "auto":
            return "tensor" if len(term.slots) <= self.tensor_limit else "mc"
        return self.config.mode

    def __call__(self, z) -> _Value:
        z = np.asarray(z, dtype=complex)
        total, reps, nodes = 0j, None, 0
        for idx, (term, g) in enumerate(zip(self.terms, self.g)):
            if self._mode(term) == "mc":
                r = self._mc(term, g, z, idx)
                nodes += self.config.samples
                v = complex(r.mean())
                reps = (0 if reps is None else reps) + term.coefficient * (r - v)
            else:
                v, cnt = self._tensor(term, g, z)
                nodes += cnt
            total += term.coefficient * v
        if reps is not None:
            reps = reps + total
        return _Value(total, reps, nodes, 0.0, 0.0)

    def _rule(self, slot, z):
        v, region = slot
        cfg = self.config
        if region == OMEGA:
            return polar_rule(cfg.domain, z[v], cfg.resolution)
        return _complement_rule(cfg.domain, self.inner, cfg.resolution)

    def _tensor(self, term, g, z, chunk=1 << 20):
        rules = [self._rule(s, z) for s in term.slots]
        vars_ = [s[0] for s in term.slots]
        factors = [r.weights / (z[v] - r.nodes) for v, r in zip(vars_, rules)]
        sizes = [len(r) for r in rules]
        # outer slots enumerated in chunks, innermost slot vectorized
        inner_n = sizes[-1]
        outer = sizes[:-1]
        n_outer = int(np.prod(outer)) if outer else 1
        per = max(1, chunk // inner_n)
        total = 0j
        for s in range(0, n_outer, per):
            ids = np.arange(s, min(s + per, n_outer))
            sub = np.unravel_index(ids, outer) if outer else ()
            args = [np.full((len(ids), inner_n), zi) for zi in z]
            wt = np.ones(len(ids), dtype=complex)
            for v, r, fac, ix in zip(vars_[:-1], rules[:-1], factors[:-1], sub):
                args[v] = np.broadcast_to(r.nodes[ix][:, None], (len(ids), inner_n))
                wt = wt * fac[ix]
            args[vars_[-1]] = np.broadcast_to(rules[-1].nodes[None, :], (len(ids), inner_n))
            vals = g(*args)
            total += np.sum(wt * (vals @ factors[-1]))
        return total / np.pi ** len(vars_), int(np.prod(sizes))

    def _mc(self, term, g, z, idx):
        """Replicate estimates: polar ``r^-a`` sampling about ``z_v`` on the domain slots
        (with quarter-turn rotations), uniform sampling on the complement slots."""
        cfg = self.config
        dom = cfg.domain
        m = len(term.slots)
        a = patch_exponent(1)
        turns = 4
        per = max(2, cfg.samples // (cfg.replicates * turns))
        rng = np.random.default_rng([cfg.seed, 7919, idx])
        x0, y0, x1, y1 = dom.bbox
        box = (x1 - x0) * (y1 - y0)
        reps = np.zeros(cfg.replicates, dtype=complex)
        for rep in range(cfg.replicates):
            u = qmc.LatinHypercube(d=2 * m, seed=rng).random(per).T
            u = np.tile(u, (1, turns))
            shift = np.repeat(np.arange(turns) / turns, per)
            count = per * turns
            args = [np.full(count, zi) for zi in z]
            wt = np.ones(count, dtype=complex)
            for slot, (v, region) in enumerate(term.slots):
                if region == OMEGA:
                    from .geometry import ray_exit
                    t = 2 * np.pi * np.mod(u[2 * slot + 1] + shift, 1.0)
                    R = ray_exit(dom, z[v], t)
                    r = _radius_power(u[2 * slot], R, a)
                    w = z[v] + r * np.exp(1j * t)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        wt = wt / _density_power(r, R, a) / (z[v] - w)
                else:
                    w = (x0 + (x1 - x0) * u[2 * slot]) + 1j * (y0 + (y1 - y0) * u[2 * slot + 1])
                    keep = (contains(dom, w, closed=False)
                            & ~contains(self.inner, w, closed=True))
                    w = np.where(keep, w, z[v] + 2.0)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        wt = np.where(keep, wt * box / (z[v] - w), 0.0)
                args[v] = w
            okw = np.isfinite(wt)
            vals = g(*args)
            reps[rep] = np.where(okw, np.where(okw, wt, 0) * vals, 0).mean()
        return reps / np.pi**m


def _require_derivatives(form: Form01, terms):
    for t in terms:
        for _, j, idx in t.combo:
            if idx:
                try:
                    form.derivative(j, *idx)
                except KeyError as exc:
                    raise ConfigError(f"extension solver needs {exc.args[0]}") from None


def _check_inner(domain: PlanarDomain, inner: PlanarDomain):
    from .geometry import _shapely_domain
    if not _shapely_domain(domain).buffer(-1e-9).contains(_shapely_domain(inner)):
        raise ConfigError("the inner domain must lie compactly inside the outer one")


def solve_extension(f: Form01, inner: PlanarDomain, config: SolveConfig) -> SolveReport:
    """Two-variable operator that needs ``f`` closed on ``inner^2`` only.

    ``config.domain`` is the outer domain; residuals are taken at points of
    ``inner^2``.  ``f`` must supply ``d f_2 / d zbar_1`` and ``d f_1 / d zbar_2``.
    """
    _check_n(f, config, 2)
    return _solve_ext(f, inner, config, "extension")


def solve_extension_recursive(f: Form01, inner: PlanarDomain, config: SolveConfig) -> SolveReport:
    """One recursion level over the two-variable extension operator (``n = 3``).

    All second derivatives that appear are needed; expression forms
    provide them symbolically.
    """
    _check_n(f, config, 3)
    return _solve_ext(f, inner, config, "extension_recursive")


def _solve_ext(f, inner, config, method):
    _check_inner(config.domain, inner)
    terms = extension_terms(range(f.n), {j: _comp(j) for j in range(f.n)})
    _require_derivatives(f, terms)
    op = _IteratedOperator(terms, f, config, inner)
    warn = []
    if op.vanished:
        warn.append(f"{len(op.vanished)} term(s) have identically vanishing integrands and were skipped")
    info = [dict(t.to_dict(), vanished=t in op.vanished) for t in terms]
    return _run(op, f, config, method, inner, warn, info)


def extension_value(f: Form01, inner: PlanarDomain, config: SolveConfig, z, skip_vanishing=True):
    """Value of the extension operator at one point (no residuals)."""
    terms = extension_terms(range(f.n), {j: _comp(j) for j in range(f.n)})
    op = _IteratedOperator(terms, f, config, inner)
    if not skip_vanishing:
        op.terms = terms
        op.g = [_combo_callable(f, t.combo) for t in terms]
    return op(np.asarray(z, dtype=complex)).value


# -- mollification -------------------------------------------------------------

def _bump(r2):
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    m = r2 < 1.0
    out[m] = np.exp(1.0 / (r2[m] - 1.0))
    return out


@lru_cache(maxsize=None)
def bump_moment(k: int) -> float:
    """``int_{|y|<1} chi(y) |y|^(2k) dA`` for the normalized bump ``chi``."""
    def radial(r, p):
        return float(_bump(r * r)) * r ** (2 * p + 1)

    mass = 2 * np.pi * integrate.quad(radial, 0.0, 1.0, args=(0,), epsabs=0, epsrel=1e-13, limit=200)[0]
    if k == 0:
        return 1.0
    val = 2 * np.pi * integrate.quad(radial, 0.0, 1.0, args=(k,), epsabs=0, epsrel=1e-13, limit=200)[0]
    return val / mass


def chi(z) -> np.ndarray:
    """The normalized radial bump ``C exp(1/(|z|^2 - 1))`` on the unit disk."""
    z = np.asarray(z, dtype=complex)
    return _bump(np.abs(z) ** 2) / _bump_mass()


@lru_cache(maxsize=None)
def _bump_mass() -> float:
    return 2 * np.pi * integrate.quad(lambda r: float(_bump(r * r)) * r, 0.0, 1.0,
                                      epsabs=0, epsrel=1e-13, limit=200)[0]


def chi_eps(z, eps: float) -> np.ndarray:
    """``eps^(-2n) prod_i chi(z_i / eps)``; ``z`` has the factor index last."""
    z = np.asarray(z, dtype=complex)
    if z.ndim == 0:
        z = z[None]
    return np.prod(chi(z / eps) / eps**2, axis=-1)


@lru_cache(maxsize=8)
def mollifier_rule(radial: int = 32, angular: int = 32):
    """Nodes ``y`` in the unit disk and weights ``chi(y) dA`` (summing to 1)."""
    x, wx = np.polynomial.legendre.leggauss(radial)
    r = 0.5 * (x + 1)
    wr = 0.5 * wx * r * _bump(r * r) / _bump_mass()
    t = 2 * np.pi * (np.arange(angular) + 0.5) / angular
    y = (r[:, None] * np.exp(1j * t)[None, :]).ravel()
    w = np.repeat(wr, angular) * (2 * np.pi / angular)
    return y, w / w.sum()


@dataclass
class MollifiedForm(Form01):
    eps: float = 0.0
    source: Optional[Form01] = None


def _taylor_exp(x, order):
    return sum(x**k / sympy.factorial(k) for k in range(order + 1))


def mollify_expressions(form: CompiledForm, eps: float, order: int = 14) -> CompiledForm:
    """Exact mollification of expression forms by radial moments.

    Each variable is shifted by ``eps * y_i``; exponentials are expanded in
    the shift to ``order``, and monomials ``y^a conj(y)^b`` are replaced by
    their bump expectations, which vanish unless ``a == b``.  Polynomials are
    reproduced exactly; exponential factors up to the truncation order.
    """
    n = form.n
    z, zb = _symbols(n)
    y = sympy.symbols(f"y1:{n + 1}")
    yb = sympy.symbols(f"yb1:{n + 1}")
    e = sympy.Symbol("eps_")
    sub = {}
    for k in range(n):
        sub[z[k]] = z[k] + e * y[k]
        sub[zb[k]] = zb[k] + e * yb[k]
    out = []
    for expr in form.exprs:
        shifted = expr.xreplace(sub)
        shifted = shifted.replace(
            sympy.exp, lambda arg: sympy.exp(arg.subs(e, 0)) * _taylor_exp(sympy.expand(arg - arg.subs(e, 0)), order))
        poly = sympy.Poly(sympy.expand(shifted), *y, *yb)
        acc = 0
        for monom, coeff in poly.terms():
            pa, pb = monom[:n], monom[n:]
            if any(p != q for p, q in zip(pa, pb)):
                continue
            if sum(pa) + sum(pb) > order:
                continue
            weight = 1
            for p in pa:
                weight *= sympy.Float(bump_moment(p), 30)
            acc += coeff * weight
        acc = sympy.expand(acc.subs(e, sympy.Rational(repr(float(eps)))))
        out.append(sympy.nsimplify(acc, rational=False) if acc.free_symbols else acc)
    return form_from_sympy([sympy.N(a, 17) for a in out])


def mollify(f: Form01, eps: float, m: Optional[float] = None, radial: int = 32, angular: int = 32) -> Form01:
    """``f^eps = chi_eps * f`` componentwise.

    Expression forms are mollified exactly (see ``mollify_expressions``);
    any other form by a product quadrature over the bump's support, whose
    per-factor rule has ``radial x angular`` nodes.  ``eps`` must be below
    ``1/m`` when an inner index ``m`` is given; the result is then smooth on
    ``Omega_m^n`` and only samples ``f`` inside ``Omega^n``.
    """
    eps = float(eps)
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if m is not None and eps >= 1.0 / m:
        raise ConfigError(f"eps = {eps} must be below 1/m = {1.0 / m}")
    if isinstance(f, CompiledForm):
        return mollify_expressions(f, eps)
    y, wy = mollifier_rule(radial, angular)
    n = f.n
    offsets = np.array(list(itertools.product(range(len(y)), repeat=n)))
    shifts = [eps * y[offsets[:, k]] for k in range(n)]
    weights = np.prod([wy[offsets[:, k]] for k in range(n)], axis=0)

    def smooth(j):
        def comp(*w):
            shape = np.broadcast(*w).shape
            flat = [np.broadcast_to(np.asarray(x, dtype=complex), shape).ravel() for x in w]
            out = np.empty(len(flat[0]), dtype=complex)
            for s in range(len(out)):
                args = [flat[k][s] + shifts[k] for k in range(n)]
                out[s] = np.dot(weights, f(j, *args))
            return out.reshape(shape)
        return comp

    return MollifiedForm([smooth(j) for j in range(n)], {}, eps=eps, source=f)


def sampled_form(f: Form01, domain: PlanarDomain, spacing: float) -> Form01:
    """Piecewise-constant samples of ``f`` on a square lattice (rough data).

    Each coordinate is snapped to the center of its lattice cell before ``f``
    is evaluated.
    """
    x0, y0, _, _ = domain.bbox

    def snap(w):
        w = np.asarray(w, dtype=complex)
        gx = x0 + (np.floor((w.real - x0) / spacing) + 0.5) * spacing
        gy = y0 + (np.floor((w.imag - y0) / spacing) + 0.5) * spacing
        return gx + 1j * gy

    comps = [lambda *w, j=j: f(j, *[snap(x) for x in w]) for j in range(f.n)]
    return Form01(comps)


def mollification_error(f: Form01, g: Form01, region, p: float = 2.0) -> float:
    """``||f - g||_{L^p(region^n)}`` by the region's quadrature rule (tensor over factors)."""
    rule = region.rule
    n = f.n
    if n == 1:
        w = rule.nodes
        diff = sum(np.abs(f(j, w) - g(j, w)) ** 2 for j in range(n)) ** 0.5
        return float(np.dot(rule.weights, diff**p) ** (1 / p))
    idx = np.array(list(itertools.product(range(len(rule)), repeat=n)))
    W = [rule.nodes[idx[:, k]] for k in range(n)]
    wt = np.prod([rule.weights[idx[:, k]] for k in range(n)], axis=0)
    diff = sum(np.abs(f(j, *W) - g(j, *W)) ** 2 for j in range(n)) ** 0.5
    return float(np.dot(wt, diff**p) ** (1 / p))


# -- problem files ---------------------------------------------------------------

@dataclass
class Problem:
    form: Form01
    config: SolveConfig
    solver: str
    inner: Optional[PlanarDomain] = None
    potential: Optional[str] = None


def load_problem(source, overrides: Optional[dict] = None) -> Problem:
    """Read a problem description (JSON text, path, or dict).

    Keys: ``domain`` (as for ``load_domain``), either ``components`` (list
    of expression strings) or ``potential`` with ``n``, ``points`` (list of
    lists of ``[re, im]``), and optionally ``solver``, ``inner``,
    ``resolution``, ``mode``, ``samples``, ``seed``, ``replicates``,
    ``p_list``, ``fd_step``, ``eps_schedule``, ``inner_m``.
    """
    if isinstance(source, dict):
        data = dict(source)
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text) as fh:
                text = fh.read()
        data = json.loads(text)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "domain" not in data:
        raise ConfigError("problem needs a 'domain'")
    domain = domain_from_dict(data["domain"])
    if "components" in data:
        form = form_from_exprs(data["components"], _parse_derivs(data.get("derivatives")))
    elif "potential" in data:
        from .expressions import potential_form
        form = potential_form(data["potential"], int(data["n"]))
    else:
        raise ConfigError("problem needs 'components' or 'potential'")
    n = form.n
    try:
        pts = [[complex(*c) if isinstance(c, (list, tuple)) else complex(c) for c in row]
               for row in data["points"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'points': {exc}") from None
    p_list = tuple(math.inf if str(p) in ("inf", "Infinity") else float(p)
                   for p in data.get("p_list", (2, 4, "inf")))
    cfg = SolveConfig(n=n, domain=domain, points=np.array(pts, dtype=complex),
                      resolution=int(data.get("resolution", 64)), mode=data.get("mode", "auto"),
                      samples=int(data.get("samples", 10**6)), seed=int(data.get("seed", 0)),
                      replicates=int(data.get("replicates", 20)), p_list=p_list,
                      eps_schedule=tuple(data.get("eps_schedule", ())),
                      inner_m=data.get("inner_m"), fd_step=data.get("fd_step"))
    inner = domain_from_dict(data["inner"]) if "inner" in data else None
    solver = data.get("solver")
    if solver is None:
        solver = {1: "dim1", 2: "dim2"}.get(n, "recursive")
    return Problem(form, cfg, solver, inner, data.get("potential"))


def _parse_derivs(d):
    if not d:
        return None
    out = {}
    for key, text in d.items():
        j, i = (int(x) for x in str(key).split(","))
        out[(j, i)] = text
    return out


SOLVERS = {
    "dim1": solve_dim1,
    "dim2": solve_dim2,
    "recursive": solve_recursive,
}


def solve_problem(problem: Problem) -> SolveReport:
    if problem.solver in SOLVERS:
        return SOLVERS[problem.solver](problem.form, problem.config)
    if problem.solver in ("extension", "extension_recursive"):
        if problem.inner is None:
            raise ConfigError("extension solvers need an 'inner' domain")
        fn = solve_extension if problem.solver == "extension" else solve_extension_recursive
        return fn(problem.form, problem.inner, problem.config)
    raise ConfigError(f"unknown solver {problem.solver!r}")


def solve_mollified(problem: Problem) -> list[tuple[float, SolveReport]]:
    """Solve with ``f^eps`` for every ``eps`` of the configured schedule."""
    out = []
    for eps in problem.config.eps_schedule:
        g = mollify(problem.form, eps, problem.config.inner_m)
        out.append((eps, solve_problem(Problem(g, problem.config, problem.solver, problem.inner))))
    return out
