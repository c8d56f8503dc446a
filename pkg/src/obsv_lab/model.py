"""Cascade system model and its control-affine form.

A cascade system couples n position/velocity pairs:

    dx_i/dt = z_i
    dz_i/dt = F_i(z) + b_i * u
    y_i     = gamma_i(x_i) * z_i

Positions never enter the dynamics and are read out only through the
velocity gain gamma_i.  State order is fixed as (x_1..x_n, z_1..z_n)
throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .expr import Expr, ParseError

GAMMA_VAR = "x"


class InvalidSystemError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class SystemFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class CascadeSystem:
    n: int
    gamma: tuple[Expr, ...]  # each an expression in the single variable x
    F: tuple[Expr, ...]      # each an expression in z1..zn
    b: tuple[float, ...]

    def state_names(self) -> tuple[str, ...]:
        return tuple(f"x{i}" for i in range(1, self.n + 1)) + tuple(
            f"z{i}" for i in range(1, self.n + 1)
        )

    def output_names(self) -> tuple[str, ...]:
        return tuple(f"y{i}" for i in range(1, self.n + 1))


@dataclass(frozen=True)
class ControlAffineSystem:
    """dx/dt = drift(x) + sum_i u_i * input_fields[i](x), y = outputs(x)."""

    state_vars: tuple[str, ...]
    drift: tuple[Expr, ...]
    input_fields: tuple[tuple[Expr, ...], ...]
    outputs: tuple[Expr, ...]

    @property
    def dim(self) -> int:
        return len(self.state_vars)

    @property
    def m(self) -> int:
        return len(self.input_fields)

    @property
    def p(self) -> int:
        return len(self.outputs)


@dataclass
class LinearizationResult:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    point: tuple[float, ...]


def z_names(n: int) -> tuple[str, ...]:
    return tuple(f"z{i}" for i in range(1, n + 1))


def validate(sys: CascadeSystem) -> list[str]:
    """Return a list of violation messages; empty means well formed."""
    out = []
    if sys.n < 1:
        out.append(f"n = {sys.n} must be at least 1")
        return out
    for name, seq in (("gamma", sys.gamma), ("F", sys.F), ("b", sys.b)):
        if len(seq) != sys.n:
            out.append(f"{name} has {len(seq)} entries, expected n = {sys.n}")
    zs = set(z_names(sys.n))
    for i, g in enumerate(sys.gamma, start=1):
        extra = ex.free_vars(g) - {GAMMA_VAR}
        if extra:
            out.append(f"gamma_{i} uses non-x variable {sorted(extra)[0]}")
    for i, f in enumerate(sys.F, start=1):
        extra = ex.free_vars(f) - zs
        if extra:
            out.append(f"F_{i} uses unknown variable {sorted(extra)[0]}")
    for i, bi in enumerate(sys.b, start=1):
        if bi == 0.0:
            out.append(f"b_{i} = 0")
        elif not np.isfinite(bi):
            out.append(f"b_{i} is not finite")
    return out


def as_control_affine(sys: CascadeSystem) -> ControlAffineSystem:
    """Rewrite the cascade in control-affine form with state (x_1..x_n, z_1..z_n)."""
    violations = validate(sys)
    if violations:
        raise InvalidSystemError(violations)
    n = sys.n
    names = sys.state_names()
    drift = tuple(ex.Var(f"z{i}") for i in range(1, n + 1)) + tuple(sys.F)
    field = tuple(ex.const(0.0) for _ in range(n)) + tuple(ex.const(bi) for bi in sys.b)
    outputs = tuple(
        ex.mul(ex.substitute(g, GAMMA_VAR, ex.Var(f"x{i}")), ex.Var(f"z{i}"))
        for i, g in enumerate(sys.gamma, start=1)
    )
    return ControlAffineSystem(
        state_vars=names,
        drift=drift,
        input_fields=(field,),
        outputs=outputs,
    )


def linearize_at(sys: ControlAffineSystem | CascadeSystem, x0) -> LinearizationResult:
    """Jacobian linearization around x0 with zero input."""
    if isinstance(sys, CascadeSystem):
        sys = as_control_affine(sys)
    x0 = tuple(float(v) for v in x0)
    if len(x0) != sys.dim:
        raise ValueError(f"state has {len(x0)} entries, expected {sys.dim}")
    env = dict(zip(sys.state_vars, x0))
    d = sys.dim
    A = np.empty((d, d))
    for i, f in enumerate(sys.drift):
        for j, v in enumerate(sys.state_vars):
            A[i, j] = ex.evaluate(ex.diff(f, v), env)
    B = np.empty((d, sys.m))
    for l, field in enumerate(sys.input_fields):
        for i, g in enumerate(field):
            B[i, l] = ex.evaluate(g, env)
    C = np.empty((sys.p, d))
    for i, h in enumerate(sys.outputs):
        for j, v in enumerate(sys.state_vars):
            C[i, j] = ex.evaluate(ex.diff(h, v), env)
    return LinearizationResult(A=A, B=B, C=C, point=x0)


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Stack [C; CA; ...; CA^(d-1)] for the linear rank test."""
    d = A.shape[0]
    blocks = [C]
    for _ in range(d - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


# ---------------------------------------------------------------------------
# Presets

def _cascade_1d(gamma_src: str) -> CascadeSystem:
    return CascadeSystem(
        n=1,
        gamma=(ex.parse(gamma_src, {GAMMA_VAR}),),
        F=(ex.parse("-z1", {"z1"}),),
        b=(1.0,),
    )


_PRESETS: dict[str, tuple[str, str]] = {
    # name -> (gamma source, description)
    "fish-1d-gauss": (
        "exp(-x^2)",
        "1-D damped cascade with a Gaussian velocity gain; aperiodic, so "
        "globally observable, but the gain goes flat far from the origin",
    ),
    "fish-1d-hyperbolic": (
        "1/(x+2)",
        "1-D damped cascade with a hyperbolic velocity gain; the local rank "
        "test degenerates everywhere along this gain family",
    ),
    "periodic-sin": (
        "sin(x)",
        "1-D damped cascade with a sinusoidal velocity gain; period-shifted "
        "states produce identical outputs, so the system is not observable",
    ),
    "sin-drift": (
        "2 + sin(x) + 0.1*x",
        "1-D damped cascade whose gain adds a linear drift to a sinusoid, "
        "breaking periodicity while staying bounded away from zero locally",
    ),
}


def preset(name: str) -> CascadeSystem:
    try:
        gamma_src, _ = _PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(sorted(_PRESETS))}"
        ) from None
    return _cascade_1d(gamma_src)


def preset_names() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def preset_description(name: str) -> str:
    return _PRESETS[name][1]


# ---------------------------------------------------------------------------
# File format: line oriented "key = value" with # comments.
#   n = 2
#   gamma[1] = exp(-x^2)
#   F[1] = -z1
#   b = [1, 0.5]


def load_system(text: str) -> CascadeSystem:
    entries: dict[str, tuple[int, str]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemFormatError(line_no, f"expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key in entries:
            raise SystemFormatError(line_no, f"duplicate key {key!r}")
        if not value:
            raise SystemFormatError(line_no, f"empty value for {key!r}")
        entries[key] = (line_no, value)

    def take(key: str) -> tuple[int, str]:
        try:
            return entries.pop(key)
        except KeyError:
            raise SystemFormatError(0, f"missing required key {key!r}") from None

    line_no, n_text = take("n")
    try:
        n = int(n_text)
    except ValueError:
        raise SystemFormatError(line_no, f"n must be an integer, got {n_text!r}") from None
    if n < 1:
        raise SystemFormatError(line_no, f"n must be positive, got {n}")

    gamma = []
    for i in range(1, n + 1):
        line_no, src = take(f"gamma[{i}]")
        try:
            gamma.append(ex.parse(src, {GAMMA_VAR}))
        except ParseError as err:
            raise SystemFormatError(line_no, f"gamma[{i}]: {err}") from err

    zs = z_names(n)
    F = []
    for i in range(1, n + 1):
        line_no, src = take(f"F[{i}]")
        try:
            F.append(ex.parse(src, zs))
        except ParseError as err:
            raise SystemFormatError(line_no, f"F[{i}]: {err}") from err

    line_no, b_text = take("b")
    if not (b_text.startswith("[") and b_text.endswith("]")):
        raise SystemFormatError(line_no, "b must look like [v1, v2, ...]")
    parts = [p.strip() for p in b_text[1:-1].split(",") if p.strip()]
    if len(parts) != n:
        raise SystemFormatError(line_no, f"b has {len(parts)} entries, expected {n}")
    try:
        b = tuple(float(p) for p in parts)
    except ValueError:
        raise SystemFormatError(line_no, f"b entries must be numbers: {b_text}") from None

    if entries:
        stray_key = next(iter(entries))
        raise SystemFormatError(entries[stray_key][0], f"unexpected key {stray_key!r}")

    sys = CascadeSystem(n=n, gamma=tuple(gamma), F=tuple(F), b=b)
    violations = validate(sys)
    if violations:
        raise InvalidSystemError(violations)
    return sys


def load_system_file(path) -> CascadeSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return load_system(fh.read())
