"""A small expression language for form components.

Expressions are built from ``z1 .. zn``, ``conj(zj)``, ``exp``, ``+``, ``-``,
``*``, integer powers, division by constants, parentheses and numeric constants (``1j`` or ``I`` for
the imaginary unit).  They are parsed with Python's ``ast`` module, checked
against that grammar, and handed to sympy, which provides the Wirtinger
derivatives (``zj`` and ``conj(zj)`` are independent symbols) and the code
printer.  Each expression compiles to a numpy function that broadcasts over
arrays; a whole form additionally compiles to one numba function that fills
all components at a point, used by the fused quadrature loops.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass

import numba
import numpy as np
import sympy
from sympy.printing.numpy import NumPyPrinter

from .transforms import Form01


class ExpressionError(ValueError):
    """The expression is not in the supported grammar."""


_VAR = re.compile(r"^z(\d+)$")


def _symbols(n):
    z = sympy.symbols(f"z1:{n + 1}")
    zb = sympy.symbols(f"zb1:{n + 1}")
    return z, zb


class _Builder(ast.NodeVisitor):
    def __init__(self, n):
        self.n = n
        self.z, self.zb = _symbols(n)

    def build(self, node):
        method = getattr(self, "visit_" + type(node).__name__, None)
        if method is None:
            raise ExpressionError(f"unsupported syntax: {type(node).__name__}")
        return method(node)

    def visit_Expression(self, node):
        return self.build(node.body)

    def visit_Constant(self, node):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float, complex)):
            raise ExpressionError(f"unsupported constant {node.value!r}")
        v = node.value
        if isinstance(v, complex):
            return _number(v.real) + sympy.I * _number(v.imag)
        return _number(v)

    def visit_Name(self, node):
        if node.id in ("I", "j"):
            return sympy.I
        m = _VAR.match(node.id)
        if not m:
            raise ExpressionError(f"unknown name {node.id!r}")
        k = int(m.group(1))
        if not 1 <= k <= self.n:
            raise ExpressionError(f"variable {node.id} outside z1..z{self.n}")
        return self.z[k - 1]

    def visit_UnaryOp(self, node):
        x = self.build(node.operand)
        if isinstance(node.op, ast.USub):
            return -x
        if isinstance(node.op, ast.UAdd):
            return x
        raise ExpressionError("unsupported unary operator")

    def visit_BinOp(self, node):
        a, b = self.build(node.left), self.build(node.right)
        if isinstance(node.op, ast.Add):
            return a + b
        if isinstance(node.op, ast.Sub):
            return a - b
        if isinstance(node.op, ast.Mult):
            return a * b
        if isinstance(node.op, ast.Div):
            if not (b.is_number and b != 0):
                raise ExpressionError("only division by a nonzero constant is supported")
            return a / b
        if isinstance(node.op, ast.Pow):
            if not (b.is_Integer and b >= 0):
                raise ExpressionError("only nonnegative integer powers are supported")
            return a**b
        raise ExpressionError("unsupported binary operator")

    def visit_Call(self, node):
        if not isinstance(node.func, ast.Name) or len(node.args) != 1 or node.keywords:
            raise ExpressionError("unsupported call")
        name = node.func.id
        if name == "exp":
            return sympy.exp(self.build(node.args[0]))
        if name == "conj":
            arg = node.args[0]
            if isinstance(arg, ast.Name) and _VAR.match(arg.id):
                k = int(_VAR.match(arg.id).group(1))
                if not 1 <= k <= self.n:
                    raise ExpressionError(f"variable {arg.id} outside z1..z{self.n}")
                return self.zb[k - 1]
            return _conj(self.build(arg), self)
        raise ExpressionError(f"unknown function {name!r}")


def _number(v):
    # exact decimal value of the literal, so 0.1 stays 1/10
    return sympy.Integer(v) if isinstance(v, int) else sympy.Rational(repr(float(v)))


def _conj(expr, builder):
    """Conjugate an expression in which z and zb are independent symbols."""
    swap = {}
    for z, zb in zip(builder.z, builder.zb):
        swap[z], swap[zb] = zb, z
    swapped = expr.xreplace(swap)
    # conjugate numeric coefficients only
    return swapped.replace(lambda e: e.is_Number or e == sympy.I, lambda e: sympy.conjugate(e))


def parse(text: str, n: int) -> sympy.Expr:
    """Parse one component expression in ``n`` variables."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    return _Builder(n).build(tree)


def dbar(expr: sympy.Expr, i: int, n: int) -> sympy.Expr:
    """``d/d conj(z_i)`` (0-based ``i``)."""
    _, zb = _symbols(n)
    return sympy.diff(expr, zb[i])


def _source(expr, n) -> str:
    code = NumPyPrinter({"fully_qualified_modules": True}).doprint(expr)
    return code


def _prelude(n, indent="    ", numba_mode=False):
    lines = []
    for k in range(n):
        src = f"w[{k}]" if numba_mode else f"w{k}"
        lines.append(f"{indent}z{k + 1} = {src}")
        lines.append(f"{indent}zb{k + 1} = numpy.conj({src})")
    return "\n".join(lines)


def compile_numpy(expr, n):
    args = ", ".join(f"w{k}" for k in range(n))
    body = _source(expr, n)
    src = (f"def component({args}):\n{_prelude(n)}\n"
           f"    shape = numpy.broadcast({args}).shape if {n} > 1 else numpy.shape(w0)\n"
           f"    return numpy.broadcast_to(numpy.asarray({body}, dtype=complex), shape)\n")
    env = {"numpy": np}
    exec(compile(src, "<expression>", "exec"), env)
    return env["component"]


def compile_numba(exprs, n):
    lines = ["def fill(w, out):", _prelude(n, numba_mode=True)]
    for k, e in enumerate(exprs):
        lines.append(f"    out[{k}] = complex({_source(e, n)})")
    src = "\n".join(lines) + "\n"
    env = {"numpy": np}
    exec(compile(src, "<form>", "exec"), env)
    return numba.njit(cache=False)(env["fill"])


@dataclass
class CompiledForm(Form01):
    """A ``Form01`` built from expressions, carrying its source and a numba evaluator.

    Derivatives of any order are produced symbolically on first use.
    """

    sources: tuple = ()
    exprs: tuple = ()
    fill: object = None

    def scaled(self, c: complex) -> "CompiledForm":
        c = complex(c)
        return form_from_exprs([f"({c!r})*({s})" for s in self.sources])

    def symbolic(self, j: int, *idx: int) -> sympy.Expr:
        e = self.exprs[j]
        for i in idx:
            e = dbar(e, i, self.n)
        return e

    def derivative(self, j: int, *idx: int):
        if not idx:
            return self.components[j]
        key = (j, idx[0]) if len(idx) == 1 else (j,) + tuple(sorted(idx))
        if key not in self.derivatives:
            self.derivatives[key] = compile_numpy(self.symbolic(j, *idx), self.n)
        return self.derivatives[key]


def to_source(expr) -> str:
    """Print a sympy expression back in the input grammar."""
    return re.sub(r"zb(\d+)", r"conj(z\1)", sympy.sstr(expr))


def form_from_sympy(exprs) -> CompiledForm:
    return form_from_exprs([to_source(e) for e in exprs])


def form_from_exprs(sources, derivatives: dict | None = None) -> CompiledForm:
    """Build a form from component strings.

    Derivatives ``d f_j / d zbar_i`` are taken symbolically unless given
    explicitly as ``{(j, i): text}`` (0-based).
    """
    sources = tuple(str(s) for s in sources)
    n = len(sources)
    exprs = tuple(parse(s, n) for s in sources)
    comps = [compile_numpy(e, n) for e in exprs]
    ders = {}
    for j, e in enumerate(exprs):
        for i in range(n):
            if i == j:
                continue
            if derivatives and (j, i) in derivatives:
                d = parse(derivatives[(j, i)], n)
            else:
                d = dbar(e, i, n)
            ders[(j, i)] = compile_numpy(d, n)
    return CompiledForm(comps, ders, sources, exprs, compile_numba(exprs, n))


def potential_form(potential: str, n: int) -> CompiledForm:
    """The form ``dbar u`` of an explicit potential ``u`` (so it is closed)."""
    u = parse(potential, n)
    return form_from_sympy([dbar(u, j, n) for j in range(n)])
