"""Compilation of expression trees to vectorized array functions.

Two backends share one code generator: plain numpy for solvers and
residual checks, and jax.numpy for the collocation path where gradients
of the whole transcription are taken by automatic differentiation.
Generated functions take positional array (or scalar) arguments in the
order given at compile time and broadcast like the underlying backend.

Unlike :func:`canopt.expr.evaluate`, compiled functions follow IEEE
semantics (log of a nonpositive value yields nan/-inf instead of raising);
callers that care check for non-finite results.
"""

from __future__ import annotations

from typing import Callable, Sequence

from . import expr as ex

__all__ = ["compile_expr"]


def _emit(e: ex.Expr, names: dict[str, str]) -> str:
    if isinstance(e, ex.Const):
        return repr(e.value)
    if isinstance(e, ex.Var):
        try:
            return names[e.name]
        except KeyError:
            raise ex.ExprError(f"cannot compile unbound variable '{e.name}'") from None
    if isinstance(e, ex.Neg):
        return f"(-{_emit(e.arg, names)})"
    if isinstance(e, ex.Call):
        args = [_emit(a, names) for a in e.args]
        if e.fn == "h":
            return f"_step({args[0]})"
        if e.fn == "min":
            return f"_xp.minimum({args[0]}, {args[1]})"
        if e.fn == "max":
            return f"_xp.maximum({args[0]}, {args[1]})"
        if e.fn == "abs":
            return f"_xp.abs({args[0]})"
        if e.fn == "pow":
            return f"({args[0]}) ** ({args[1]})"
        return f"_xp.{e.fn}({args[0]})"
    assert isinstance(e, ex.BinOp)
    a = _emit(e.left, names)
    b = _emit(e.right, names)
    op = {"+": "+", "-": "-", "*": "*", "/": "/", "^": "**"}[e.op]
    return f"({a} {op} {b})"


def compile_expr(e: ex.Expr, argnames: Sequence[str], backend: str = "numpy") -> Callable:
    """Compile ``e`` into ``f(*args)`` with one array/scalar per name in ``argnames``."""
    if backend == "numpy":
        import numpy as xp
    elif backend == "jax":
        import jax.numpy as xp
    else:
        raise ValueError(f"unknown backend '{backend}'")

    def _step(s):
        # Unit step with the closed-left convention h(0) = 1.
        return xp.where(s >= 0, 1.0, 0.0)

    names = {n: f"_a{i}" for i, n in enumerate(argnames)}
    ex.check_bound(e, frozenset(argnames))
    body = _emit(e, names)
    src = f"def _f({', '.join(names.values())}):\n    return _xp.asarray({body})\n"
    namespace = {"_xp": xp, "_step": _step}
    exec(src, namespace)  # noqa: S102 - source is generated from a closed AST
    fn = namespace["_f"]
    fn.__doc__ = f"compiled: {ex.to_text(e)}"
    return fn
