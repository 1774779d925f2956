"""Numerical checks of the estimates behind the solution operators.

* the weighted singular integral ``int |w - z|^-alpha delta(w)^-beta dA(w)``
  against its explicit constant ``C_{alpha,beta}``;
* the Schur test for ``T g(zeta) = int delta(lam)^-beta |lam - zeta|^-alpha g(lam) dA``;
* the exponent schedule used to chain Hoelder inequalities over kernel groups;
* norm ratios of the two-variable operator over a family of closed forms;
* sampled kernel bound envelopes for every tree shape.

None of this proves anything; the functions corroborate or falsify.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numba
import numpy as np
import shapely.ops

from . import kernelcalc as kc
from .geometry import (C0, PlanarDomain, delta, delta_and_dbar, interior_samples,
                       polar_rule, _shapely_domain)


class PreconditionError(ValueError):
    """Parameters outside the range where an estimate applies."""


class ValidationError(ValueError):
    """An exponent schedule violates one of its inequalities."""

    def __init__(self, failures):
        self.failures = list(failures)
        text = "; ".join(f"s={s}: {name}" for s, name in self.failures)
        super().__init__(f"schedule fails: {text}")


# -- the constant C_{alpha,beta} ------------------------------------------------

@dataclass(frozen=True)
class AlphaBetaCase:
    alpha: float
    beta: float
    case: str
    value: float


def _c_formula(alpha: float, beta: float) -> tuple[str, float]:
    if alpha == 1:
        return "alpha=1", 1.0 / (1.0 - beta) ** 2
    if alpha < 1:
        return "alpha<1", 1.0 / ((1.0 - alpha) * (1.0 - beta))
    return "alpha>1", 1.0 / ((alpha - 1.0) * (2.0 - alpha - beta))


def c_alpha_beta(alpha: float, beta: float) -> AlphaBetaCase:
    """The constant bounding ``int |w-z|^-alpha delta^-beta dA`` up to the domain factor.

    Examples
    --------
    >>> c_alpha_beta(0.5, 0.5).value
    4.0
    >>> c_alpha_beta(1.5, 0.25).value
    8.0
    """
    if not (0 < alpha < 2 and 0 < beta < 1 and 2 - alpha - beta > 0):
        raise PreconditionError(f"need 0<alpha<2, 0<beta<1, alpha+beta<2; got ({alpha}, {beta})")
    case, value = _c_formula(alpha, beta)
    return AlphaBetaCase(float(alpha), float(beta), case, float(value))


# -- weighted singular integral----------------------------------------------------

LEVEL_BITS = 14  # graded levels are set so the innermost panel carries ~2^-14 of the mass


def singular_levels(alpha: float, beta: float) -> tuple[int, int]:
    """Center and boundary grading depths for ``r^-alpha`` and ``delta^-beta``.

    The innermost panel of a halving grading with ``L`` levels holds a share
    ``2^(-L (2 - alpha))`` of a point singularity and ``2^(-L (1 - beta))``
    of a boundary layer; both are pinned to ``2^-LEVEL_BITS``.  Never fewer
    than six boundary levels, and at most 30: deeper panels sit closer to the
    boundary than ``delta`` can be evaluated in floating point.
    """
    center = int(math.ceil(LEVEL_BITS / (2.0 - alpha)))
    boundary = max(6, int(math.ceil(LEVEL_BITS / (1.0 - beta))))
    return min(center, 40), min(boundary, 30)


def weighted_integral(domain: PlanarDomain, z: complex, alpha: float, beta: float,
                      resolution: int, levels: Optional[tuple] = None) -> float:
    """``int_domain |w - z|^-alpha delta(w)^-beta dA(w)`` by a polar rule about ``z``."""
    cl, bl = levels if levels is not None else singular_levels(alpha, beta)
    rule = polar_rule(domain, complex(z), resolution, center_levels=cl, boundary_levels=bl)
    w = rule.nodes
    vals = np.abs(w - z) ** (-alpha) * delta(domain, w) ** (-beta)
    return float(np.dot(rule.weights, vals))


@dataclass
class L1Report:
    alpha: float
    beta: float
    case: str
    bound: float
    z: np.ndarray
    integrals: np.ndarray
    ratios: np.ndarray
    resolution: int
    coarse_ratios: Optional[np.ndarray] = None
    divergent: bool = False

    @property
    def sup_ratio(self) -> float:
        """The empirical domain constant: sup over samples of integral / bound."""
        return float(self.ratios.max())

    @property
    def refinement_change(self) -> float:
        """Largest relative change of the ratio against the coarse resolution."""
        if self.coarse_ratios is None:
            return math.nan
        return float(np.max(np.abs(self.ratios - self.coarse_ratios) / self.coarse_ratios))

    def rows(self):
        for zz, v, r in zip(self.z, self.integrals, self.ratios):
            yield {"alpha": self.alpha, "beta": self.beta, "p": "", "case": self.case,
                   "z": f"{zz.real:.6g}{zz.imag:+.6g}j", "numeric": v,
                   "bound": self.bound, "ratio": r}


def lemma_L1_check(domain: PlanarDomain, alpha: float, beta: float, z_samples,
                   resolution: int = 256, refine: bool = True, seed: int = 0) -> L1Report:
    """Integrate the weighted singularity at sample points and compare with ``C_{alpha,beta}``.

    Parameters
    ----------
    z_samples : int or array_like
        Sample points, or a count of uniform interior samples drawn with ``seed``.
    refine : bool
        Also integrate at ``resolution // 2``; a ratio that grows by more than
        a factor two under refinement sets ``divergent``.
    """
    c = c_alpha_beta(alpha, beta)
    if np.isscalar(z_samples):
        rng = np.random.default_rng(seed)
        z = interior_samples(domain, int(z_samples), rng, min_delta=1e-3 * domain.max_delta)
    else:
        z = np.asarray(z_samples, dtype=complex).ravel()
    vals = np.array([weighted_integral(domain, zz, alpha, beta, resolution) for zz in z])
    rep = L1Report(c.alpha, c.beta, c.case, c.value, z, vals, vals / c.value, resolution)
    if refine:
        coarse = np.array([weighted_integral(domain, zz, alpha, beta, resolution // 2) for zz in z])
        rep.coarse_ratios = coarse / c.value
        rep.divergent = bool(np.any(rep.ratios > 2.0 * rep.coarse_ratios))
    return rep


# -- Schur test ----------------------------------------------------------------------

@numba.njit(parallel=True, cache=True)
def _kernel_apply(nodes, dpow, diag, alpha, x, colw, transpose):
    """``y_i = sum_k M_ik colw_k x_k`` (or with ``M^T``) for ``M_ik = dpow_k |z_i - z_k|^-alpha``.

    The diagonal entry is ``diag_k`` (the self-cell integral divided by the cell weight).
    """
    n = nodes.shape[0]
    y = np.zeros(n)
    for i in numba.prange(n):
        acc = 0.0
        for k in range(n):
            if k == i:
                m = diag[i]
            else:
                dz = nodes[i] - nodes[k]
                r = math.sqrt(dz.real * dz.real + dz.imag * dz.imag)
                m = r ** (-alpha) * (dpow[i] if transpose else dpow[k])
            acc += m * colw[k] * x[k]
        y[i] = acc
    return y


class KernelMatrix:
    """The discretized ``delta(lam)^-beta |lam - zeta|^-alpha`` on a quadrature mesh.

    Entries are computed on the fly; ``matvec`` applies ``g -> T g`` at
    the nodes and ``rmatvec`` the transpose with respect to ``dA``.
    """

    def __init__(self, nodes, weights, d, alpha, beta):
        self.nodes = np.ascontiguousarray(nodes, dtype=complex)
        self.weights = np.asarray(weights, dtype=float)
        self.alpha, self.beta = float(alpha), float(beta)
        self.dpow = d ** (-self.beta)
        # self cell replaced by a disk of equal area: int_{|x|<rho} |x|^-alpha dA / area
        rho = np.sqrt(self.weights / math.pi)
        self.diag = self.dpow * 2.0 * rho ** (-self.alpha) / (2.0 - self.alpha)

    def __len__(self):
        return len(self.nodes)

    def matvec(self, g: np.ndarray) -> np.ndarray:
        """``(T g)(zeta_i) = sum_k M_ik g_k q_k``."""
        return _kernel_apply(self.nodes, self.dpow, self.diag, self.alpha,
                             np.asarray(g, dtype=float), self.weights, False)

    def rmatvec(self, h: np.ndarray) -> np.ndarray:
        """``sum_i M_ik h_i q_i`` for every ``k``."""
        # M_ik = dpow_k |.|^-alpha, so the transpose weights the row index
        return _kernel_apply(self.nodes, self.dpow, self.diag, self.alpha,
                             np.asarray(h, dtype=float), self.weights, True)


def lp_operator_norm(K: KernelMatrix, p: float, iterations: int = 200, tol: float = 1e-10) -> float:
    """Power iteration for ``||T||_{L^p -> L^p}`` of a nonnegative kernel.

    In coordinates ``x = q^(1/p) g`` the operator becomes a nonnegative
    matrix ``B`` on ``l^p`` and the nonlinear power method
    ``x <- psi_p'(B^T psi_p(B x))`` with ``psi_s(y) = y^(s-1)`` converges to
    the maximizer from a positive start.
    """
    q = K.weights
    pp = p / (p - 1.0)
    x = np.ones(len(K))
    x /= np.sum(x**p) ** (1 / p)
    est = 0.0
    for _ in range(iterations):
        bx = q ** (1 / p) * K.matvec(x / q ** (1 / p))
        new = float(np.sum(bx**p) ** (1 / p))
        y = bx ** (p - 1)
        # B^T in the same coordinates
        bty = q ** (1 / pp) * K.rmatvec(y * q ** (1 / p - 1))
        x = bty ** (pp - 1)
        x /= np.sum(x**p) ** (1 / p)
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return est


def _mesh_center(domain: PlanarDomain) -> complex:
    if domain.kind == "disk":
        return complex(domain.center)
    pt = shapely.ops.polylabel(_shapely_domain(domain), tolerance=1e-6 * domain.diameter)
    return complex(pt.x, pt.y)


def schur_mesh(domain: PlanarDomain, resolution: int, boundary_levels: int = 6):
    """Quadrature mesh for the Schur test: polar about an interior point, graded toward the boundary."""
    return polar_rule(domain, _mesh_center(domain), resolution, center_levels=2,
                      boundary_levels=boundary_levels)


def domain_constant(domain: PlanarDomain, pairs, resolution: int = 256, samples: int = 20,
                    min_delta: Optional[float] = None, seed: int = 0) -> float:
    """Empirical ``C_Omega``: sup of integral / ``C_{alpha,beta}`` over sample points and pairs.

    Samples are uniform interior points plus points at distance
    ``min_delta`` from the boundary, because the integral grows toward it.
    """
    rng = np.random.default_rng(seed)
    z = list(interior_samples(domain, samples, rng, min_delta=1e-3 * domain.max_delta))
    if min_delta is not None:
        c = _mesh_center(domain)
        for t in np.linspace(0, 2 * math.pi, 8, endpoint=False):
            e = np.exp(1j * t)
            # walk out along the ray until delta drops to min_delta
            lo, hi = 0.0, domain.diameter
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                p = c + mid * e
                inside = bool(delta(domain, np.array([p]))[0] > min_delta) and \
                    bool(_shapely_domain(domain).contains(shapely.Point(p.real, p.imag)))
                lo, hi = (mid, hi) if inside else (lo, mid)
            z.append(c + lo * e)
    best = 0.0
    for a, b in pairs:
        case, cab = _c_formula(a, b)
        for zz in z:
            best = max(best, weighted_integral(domain, zz, a, b, resolution) / cab)
    return best


@dataclass
class SchurReport:
    alpha: float
    beta: float
    p: float
    resolution: int
    nodes: int
    c_omega: float
    c_ab: float
    c_apb: float
    margin_first: float
    margin_second: float
    worst_first: complex
    worst_second: complex
    norm_p: float
    norm_pprime: float
    bound: float
    holds: bool = field(default=False)

    @property
    def norm_ok(self) -> bool:
        return max(self.norm_p, self.norm_pprime) <= self.bound

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k in ("worst_first", "worst_second"):
            d[k] = [d[k].real, d[k].imag]
        d["norm_ok"] = self.norm_ok
        return d


MARGIN_ROUNDING = 1e-12  # equality cases (constant kernels) lose a few ulps


def check_schur_regime(alpha: float, beta: float, p: float) -> None:
    if not (1 < p <= 2 and p * beta < 1 and alpha + p * beta < 2):
        raise PreconditionError(f"need 1<p<=2, p*beta<1, alpha+p*beta<2; got "
                                f"alpha={alpha}, beta={beta}, p={p}")
    if not (0 <= alpha < 2 and 0 <= beta < 1):
        raise PreconditionError("need 0 <= alpha < 2 and 0 <= beta < 1")


def schur_check(domain: PlanarDomain, alpha: float, beta: float, p: float,
                resolution: int = 64, c_omega: Optional[float] = None,
                lemma_resolution: int = 256, seed: int = 0) -> SchurReport:
    """Verify the two Schur weight inequalities on a mesh and estimate the operator norm.

    With ``r = delta^(-beta/p')`` the inequalities checked at every node are

    * ``sum_i M_ik r_i^p' q_i <= C_Omega C_{alpha,beta} r_k^p'``
    * ``sum_k M_ik r_k^p q_k <= C_Omega C_{alpha,p beta} r_i^p``

    where ``M_ik = delta(lam_k)^-beta |zeta_i - lam_k|^-alpha``.  Margins are
    ``min (1 - lhs / rhs)``; both inequalities hold when they are nonnegative
    up to rounding.
    ``c_omega`` defaults to :func:`domain_constant` including points as close
    to the boundary as the mesh gets.
    """
    check_schur_regime(alpha, beta, p)
    pp = p / (p - 1.0)
    rule = schur_mesh(domain, resolution)
    d = delta(domain, rule.nodes)
    K = KernelMatrix(rule.nodes, rule.weights, d, alpha, beta)
    _, c_ab = _c_formula(alpha, beta)
    _, c_apb = _c_formula(alpha, p * beta)
    if c_omega is None:
        if alpha == 0 and beta == 0:
            c_omega = domain.area
        else:
            c_omega = domain_constant(domain, [(alpha, beta), (alpha, p * beta)],
                                      lemma_resolution, min_delta=float(d.min()), seed=seed)
    r = d ** (-beta / pp)
    lhs1 = K.rmatvec(r**pp)
    rhs1 = c_omega * c_ab * r**pp
    lhs2 = K.matvec(r**p)
    rhs2 = c_omega * c_apb * r**p
    m1 = 1.0 - lhs1 / rhs1
    m2 = 1.0 - lhs2 / rhs2
    norm_p = lp_operator_norm(K, p)
    norm_pp = lp_operator_norm(K, pp)
    bound = c_omega * c_apb
    rep = SchurReport(float(alpha), float(beta), float(p), resolution, len(K), float(c_omega),
                      float(c_ab), float(c_apb), float(m1.min()), float(m2.min()),
                      complex(rule.nodes[np.argmin(m1)]), complex(rule.nodes[np.argmin(m2)]),
                      norm_p, norm_pp, float(bound))
    rep.holds = rep.margin_first >= -MARGIN_ROUNDING and rep.margin_second >= -MARGIN_ROUNDING
    return rep


# -- exponent schedule -----------------------------------------------------------------

@dataclass
class ExponentSchedule:
    """Hoelder exponents for a chain of kernel groups of sizes ``k_1 .. k_l``.

    ``m[s]`` and ``eps_s[s]`` are 0-based lists for groups ``s = 1 .. l``;
    ``checks`` lists ``(s, name, value, ok)`` for every inequality tested.
    """

    n: int
    groups: tuple
    eps: float
    m: list
    eps_s: list
    checks: list

    @property
    def ok(self) -> bool:
        return all(c[3] for c in self.checks)

    def rows(self):
        for s, (k, m, e) in enumerate(zip(self.groups, self.m, self.eps_s), start=1):
            yield {"s": s, "k": k, "m": m, "eps_s": e}


def compositions(total: int):
    """Ordered tuples of positive integers summing to ``total``."""
    if total == 0:
        yield ()
        return
    for first in range(1, total + 1):
        for rest in compositions(total - first):
            yield (first,) + rest


def all_group_sizes(n: int):
    """Every admissible group-size tuple for ``n`` variables (sum at most ``n - 1``)."""
    for total in range(1, n):
        yield from compositions(total)


def schedule_bounds(n: int) -> tuple[float, float]:
    """The admissible interval ``(1/(2N), 1/N]`` for epsilon, ``N = (n+1)^(n+1)``."""
    big = float((n + 1) ** (n + 1))
    return 1.0 / (2 * big), 1.0 / big


def exponent_schedule(groups: Sequence[int], n: int, eps=None) -> ExponentSchedule:
    """Compute and validate the exponent schedule.

    ``1/m_s = (l + 1 - s) k_{s+1} ... k_l eps`` and ``eps_s = k_s / m_s``.
    For ``s >= 2``, with ``1/m'_{s-1} = 1 - 1/m_{s-1}``, the checks are

    * ``eps_s + 1/m'_{s-1} <= 1 - eps``
    * ``2 eps_s + 2/m'_{s-1} - 1`` in ``(1 - 1/(n+1), 1 - 1/(n+1)^(n+1))``
    * ``3 eps_s + 3/m'_{s-1} - 1 <= 2 - 3 eps``

    together with the closed form ``eps_s + 1/m'_{s-1} = 1 - k_s ... k_l eps``.
    For ``s = 1`` only ``eps_1 <= 1 - eps`` applies.  Every ``m_s > 2``.
    Arithmetic is exact (``eps`` is converted to a ``Fraction``), since
    several of the inequalities are attained with equality when ``k_s = 1``.

    Raises
    ------
    ValidationError
        Listing each failing ``(s, inequality)``.
    """
    groups = tuple(int(k) for k in groups)
    if not groups or any(k < 1 for k in groups):
        raise PreconditionError("group sizes must be positive")
    if sum(groups) > n - 1:
        raise PreconditionError(f"group sizes sum to {sum(groups)} > n - 1 = {n - 1}")
    big = (n + 1) ** (n + 1)
    e = Fraction(1, big) if eps is None else Fraction(eps)
    if not Fraction(1, 2 * big) < e <= Fraction(1, big):
        raise PreconditionError(f"eps must lie in (1/{2 * big}, 1/{big}]")
    ell = len(groups)
    tail = [math.prod(groups[s:]) for s in range(ell + 1)]  # tail[s] = k_{s+1}..k_l (0-based s)
    inv_m = [(ell - s) * tail[s + 1] * e for s in range(ell)]
    eps_s = [k * v for k, v in zip(groups, inv_m)]
    checks = []
    for s in range(ell):
        checks.append((s + 1, "m_s > 2", float(1 / inv_m[s]), inv_m[s] < Fraction(1, 2)))
    checks.append((1, "eps_1 <= 1 - eps", float(eps_s[0]), eps_s[0] <= 1 - e))
    for s in range(1, ell):
        inv_mp = 1 - inv_m[s - 1]
        first = eps_s[s] + inv_mp
        checks.append((s + 1, "eps_s + 1/m'_{s-1} = 1 - k_s..k_l eps", float(first),
                       first == 1 - tail[s] * e))
        checks.append((s + 1, "eps_s + 1/m'_{s-1} <= 1 - eps", float(first), first <= 1 - e))
        second = 2 * eps_s[s] + 2 * inv_mp - 1
        checks.append((s + 1, "2 eps_s + 2/m'_{s-1} - 1 in (1 - 1/(n+1), 1 - 1/N)", float(second),
                       1 - Fraction(1, n + 1) < second < 1 - Fraction(1, big)))
        third = 3 * eps_s[s] + 3 * inv_mp - 1
        checks.append((s + 1, "3 eps_s + 3/m'_{s-1} - 1 <= 2 - 3 eps", float(third), third <= 2 - 3 * e))
    sched = ExponentSchedule(n, groups, float(e), [float(1 / v) for v in inv_m],
                             [float(v) for v in eps_s], checks)
    failures = [(c[0], c[1]) for c in checks if not c[3]]
    if failures:
        raise ValidationError(failures)
    return sched


def exact_schedule(groups: Sequence[int], n: int) -> list[tuple[Fraction, Fraction]]:
    """``(1/m_s, eps_s)`` in exact arithmetic at the right endpoint of epsilon."""
    eps = Fraction(1, (n + 1) ** (n + 1))
    ell = len(groups)
    out = []
    for s in range(ell):
        inv = (ell - s) * math.prod(groups[s + 1:]) * eps
        out.append((inv, groups[s] * inv))
    return out


def validate_all_schedules(max_n: int = 5) -> list[tuple]:
    """Run :func:`exponent_schedule` for every composition with ``n <= max_n``
    at the right endpoint and at the midpoint of the epsilon interval.

    Returns ``(n, groups, which, error)`` for each failure (empty when all pass).
    """
    failures = []
    for n in range(2, max_n + 1):
        big = (n + 1) ** (n + 1)
        hi, mid = Fraction(1, big), Fraction(3, 4 * big)
        for groups in all_group_sizes(n):
            for which, eps in (("endpoint", hi), ("midpoint", mid)):
                try:
                    exponent_schedule(groups, n, eps)
                except ValidationError as exc:
                    failures.append((n, groups, which, str(exc)))
    return failures


# -- norm ratios -----------------------------------------------------------------------

DEFAULT_FAMILY = (
    "conj(z1)*conj(z2)",
    "conj(z1)*conj(z2) + exp(z1)*conj(z2)**2",
    "conj(z1)**2*conj(z2)",
    "z1*z2*conj(z1)*conj(z2)",
    "conj(z1)**2 + conj(z2)**2",
    "z2*conj(z1) + z1*conj(z2)",
    "exp(z2)*conj(z1)**3",
    "conj(z1)*conj(z2)**3",
    "z1**2*conj(z2) + conj(z1)",
    "exp(z1 + z2)*conj(z1)*conj(z2)",
)


def evaluation_grid(domain: PlanarDomain, per_factor: int = 5, min_delta: float = 0.25,
                    seed: int = 0) -> np.ndarray:
    """Product grid of points in ``domain^2``, each coordinate at distance >= ``min_delta``."""
    rng = np.random.default_rng(seed)
    pts = interior_samples(domain, per_factor, rng, min_delta=min_delta)
    return np.array(list(itertools.product(pts, pts)), dtype=complex)


@dataclass
class NormRatioRow:
    label: str
    resolution: int
    norms_u: dict
    norms_f: dict
    ratios: dict

    @property
    def max_ratio(self) -> float:
        return max(self.ratios.values())


def norm_ratio_experiment(domain: PlanarDomain, family=DEFAULT_FAMILY, p_list=(2, 4, math.inf),
                          resolution: int = 64, points: Optional[np.ndarray] = None,
                          scale: complex = 1.0) -> list[NormRatioRow]:
    """``||T f||_p / ||f||_p`` for closed two-variable forms given by potentials.

    Norms are discrete, over ``points`` (default :func:`evaluation_grid`),
    with ``p = inf`` the grid maximum.  Forms that vanish on the grid are
    skipped.  Entries of ``family`` are potential strings or ``Form01``.
    """
    from .expressions import potential_form
    from .solver import SolveConfig, form_magnitude, lp_norms, solve_dim2

    if points is None:
        points = evaluation_grid(domain)
    volume = domain.area**2
    rows = []
    for item in family:
        if isinstance(item, str):
            label, f = item, potential_form(item, 2)
        else:
            label, f = getattr(item, "label", repr(item)), item
        if scale != 1.0:
            f = f.scaled(scale)
        fm = form_magnitude(f, points)
        nf = lp_norms(fm, volume, p_list)
        if max(nf.values()) == 0:
            continue
        cfg = SolveConfig(2, domain, points, resolution=resolution, residuals=False)
        u = solve_dim2(f, cfg).values
        nu = lp_norms(u, volume, p_list)
        rows.append(NormRatioRow(label, resolution, nu, nf, {p: nu[p] / nf[p] for p in p_list}))
    return rows


# -- kernel bound sweep ----------------------------------------------------------------

@dataclass
class BoundViolation:
    tree: dict
    z: list
    w: list
    value: float
    bound: float
    channel: str


@dataclass
class SweepResult:
    n: int
    shapes: int
    samples: int
    worst_value_slack: float  # max |value| / bound over all samples
    worst_deriv_slack: float
    violations: list
    probe_worst: float
    per_shape: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"n": self.n, "shapes": self.shapes, "samples": self.samples,
                "worst_value_ratio": self.worst_value_slack,
                "worst_deriv_ratio": self.worst_deriv_slack,
                "probe_worst_ratio": self.probe_worst,
                "violations": [v.__dict__ for v in self.violations],
                "per_shape": self.per_shape}


def envelopes(tree: kc.KernelTree, z: np.ndarray, W: np.ndarray, D: np.ndarray):
    """Vectorized value and root-derivative envelopes; ``W, D`` have shape (n, M)."""
    r = np.abs(W - z[:, None])
    a = r**2 * D
    prod = np.ones(W.shape[1])
    for g, p in zip(tree.groups, tree.parents):
        for i in g:
            prod = prod * (D[i] + C0 * r[i]) / (a[p] + a[i])
    scale = 2.0 ** (tree.k - 1)
    j = tree.root
    vb = scale / r[j] * prod
    dmax = np.max([(D[j] + C0 * r[j]) / (a[j] + a[i]) for i in tree.groups[0]], axis=0)
    return vb, scale * dmax * prod


def _check_block(tree, z, W, domain, slack):
    D, G = delta_and_dbar(domain, W.ravel())
    D, G = D.reshape(W.shape), G.reshape(W.shape)
    kinds, vars_ = tree.step_arrays()
    vals, drs, ok = kc.tree_values(kinds, vars_, tree.base, z, W, D, G)
    vb, db = envelopes(tree, z, W, D)
    rv = np.where(ok, np.abs(vals) / vb, 0.0)
    rd = np.where(ok, np.abs(drs) / db, 0.0)
    return rv, rd


def _witness(tree, z, W, idx, value, bound, channel):
    return BoundViolation(tree.to_dict(), [[c.real, c.imag] for c in z],
                          [[c.real, c.imag] for c in W[:, idx]], float(value), float(bound), channel)


def kernel_bound_sweep(domain: PlanarDomain, n: int, samples: int = 100_000, seed: int = 0,
                       floor: float = 1e-3, slack: float = 1e-12, z_blocks: int = 100,
                       max_violations: int = 20) -> SweepResult:
    """Sample every kernel tree shape on ``domain^n`` against its envelopes.

    For each shape, ``z_blocks`` base points ``z`` each get
    ``samples / z_blocks`` uniform ``w``; samples with some
    ``|z_i - w_i| < floor`` are redrawn.  A directed probe then sends each
    ``w_i`` (and all of them together) to ``z_i`` along a ray down to
    ``floor``.  Every ratio ``|kernel| / envelope`` must stay below
    ``1 + slack``.
    """
    if not 2 <= n <= 4:
        raise PreconditionError("kernel_bound_sweep enumerates shapes for 2 <= n <= 4")
    shapes = kc.all_tree_shapes(n, n - 1)
    per = max(1, samples // z_blocks)
    worst_v = worst_d = probe = 0.0
    violations, summary = [], []
    for si, tree in enumerate(shapes):
        rng = np.random.default_rng([seed, si])
        tv = td = 0.0
        for b in range(z_blocks):
            z = interior_samples(domain, n, rng)
            W = np.stack([interior_samples(domain, per, rng) for _ in range(n)])
            for i in range(n):
                bad = np.abs(W[i] - z[i]) < floor
                while bad.any():
                    W[i, bad] = interior_samples(domain, int(bad.sum()), rng)
                    bad = np.abs(W[i] - z[i]) < floor
            rv, rd = _check_block(tree, z, W, domain, slack)
            tv, td = max(tv, rv.max()), max(td, rd.max())
            for ratios, channel in ((rv, "value"), (rd, "droot")):
                for idx in np.nonzero(ratios > 1 + slack)[0][:max_violations]:
                    violations.append(_witness(tree, z, W, idx, ratios[idx], 1.0, channel))
        pr = _directed_probe(tree, domain, n, rng, floor, slack, violations)
        summary.append({"tree": tree.to_dict(), "value_ratio": float(tv),
                        "deriv_ratio": float(td), "probe_ratio": float(pr)})
        worst_v, worst_d, probe = max(worst_v, tv), max(worst_d, td), max(probe, pr)
    return SweepResult(n, len(shapes), per * z_blocks, float(worst_v), float(worst_d),
                       violations[:max_violations], float(probe), summary)


def _directed_probe(tree, domain, n, rng, floor, slack, violations, steps=25):
    z = interior_samples(domain, n, rng, min_delta=0.1 * domain.max_delta)
    base = interior_samples(domain, n, rng)
    t = np.geomspace(0.5 * domain.max_delta, floor, steps)
    worst = 0.0
    movers = [[v] for v in tree.variables] + [list(tree.variables)]
    for mv in movers:
        W = np.repeat(base[:, None], steps, axis=1)
        for v in mv:
            e = np.exp(2j * math.pi * rng.uniform())
            W[v] = z[v] + t * e
        rv, rd = _check_block(tree, z, W, domain, slack)
        for ratios, channel in ((rv, "value"), (rd, "droot")):
            worst = max(worst, float(ratios.max()))
            for idx in np.nonzero(ratios > 1 + slack)[0]:
                violations.append(_witness(tree, z, W, idx, ratios[idx], 1.0, channel))
    return worst


# -- output ----------------------------------------------------------------------------

L1_COLUMNS = ("alpha", "beta", "p", "case", "z", "numeric", "bound", "ratio")


def write_csv(path, rows, columns: Sequence[str]) -> None:
    """Write dict rows with a fixed header (missing keys left empty)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
