"""Control problem data model.

A control problem is described by drift b(s,x,u), diffusion sigma(s,x,u),
driver f(s,x,y,z,u), terminal phi(x), a box control set, and a horizon.
Coefficients are either registry built-ins (with analytic derivatives
attached) or expressions parsed from a small arithmetic DSL; in the latter
case derivatives fall back to central finite differences.

Config file format (UTF-8, ini-like; see also the CLI help)::

    [dims]
    n = 1
    d = 1
    k = 1
    lipschitz_hint = 2.0     # optional

    [horizon]
    T = 1.0

    [control]
    lo = 0.0                 # k comma-separated values
    hi = 1.0

    [initial]                # optional; pipeline start point
    t = 0.0
    x = 0.0                  # n comma-separated values

    [coefficients]
    b1 = "x1 * u1"           # n entries b1..bn
    sigma1_1 = "x1"          # n*d entries sigma{i}_{j}
    f = "x1 - y"
    phi = "x1"

Expressions may use s, x1..xn, y, z1..zd, u1..uk (per slot: b/sigma see
s,x,u; f sees everything; phi sees x only), numeric literals, + - * / ^,
unary minus, and exp, log, sin, cos, sqrt, abs, min, max.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ProblemError",
    "ConfigError",
    "ExpressionSyntaxError",
    "DomainError",
    "ControlBoxError",
    "CoefficientExpr",
    "ProblemSpec",
    "AssumptionProbeReport",
    "parse_expression",
    "parse_problem",
    "render_problem",
    "builtin_problem",
    "builtin_names",
    "builtin_start",
    "project_control",
    "eval_coefficients",
    "probe_assumptions",
]


class ProblemError(Exception):
    """Base class for problem-definition and evaluation failures."""


class ConfigError(ProblemError):
    """Malformed problem config; carries 1-based line and column."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(message + where)


class ExpressionSyntaxError(ConfigError):
    """Syntax error inside a coefficient expression."""


class DomainError(ProblemError):
    """A coefficient was evaluated outside its mathematical domain."""


class ControlBoxError(ProblemError):
    """A control value lies outside the declared control box."""


# --------------------------------------------------------------------------
# Expression DSL
# --------------------------------------------------------------------------

_FUNCTIONS_1 = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[+\-*/^(),]))"
)


def _tokenize(text, line, col0):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            # skip pure whitespace tail
            if text[pos:].strip() == "":
                break
            raise ExpressionSyntaxError(
                f"unexpected character {text[pos]!r}", line, col0 + pos
            )
        if m.group("num") is not None:
            tokens.append(("num", float(m.group(0)), col0 + m.start()))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), col0 + m.start()))
        else:
            op = m.group("op")
            if op == "**":
                op = "^"
            tokens.append((op, op, col0 + m.start()))
        pos = m.end()
    tokens.append(("end", None, col0 + len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser for the coefficient DSL."""

    def __init__(self, tokens, line):
        self.tokens = tokens
        self.i = 0
        self.line = line

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        raise ExpressionSyntaxError(msg, self.line, tok[2])

    def expect(self, kind):
        tok = self.take()
        if tok[0] != kind:
            self.error(f"expected {kind!r}", tok)
        return tok

    def parse(self):
        node = self.expression()
        if self.peek()[0] != "end":
            self.error("trailing input after expression")
        return node

    def expression(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "-":
            self.take()
            return ("neg", self.unary())
        if self.peek()[0] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "^":
            self.take()
            # right-associative exponent
            return ("bin", "^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        if tok[0] == "num":
            return ("num", tok[1])
        if tok[0] == "name":
            if self.peek()[0] == "(":
                self.take()
                args = [self.expression()]
                while self.peek()[0] == ",":
                    self.take()
                    args.append(self.expression())
                self.expect(")")
                name = tok[1]
                if name in _FUNCTIONS_1 or name in ("log", "sqrt"):
                    if len(args) != 1:
                        self.error(f"{name} takes one argument", tok)
                elif name in ("min", "max"):
                    if len(args) != 2:
                        self.error(f"{name} takes two arguments", tok)
                else:
                    self.error(f"unknown function {name!r}", tok)
                return ("call", name, args)
            return ("var", tok[1], tok[2])
        if tok[0] == "(":
            node = self.expression()
            self.expect(")")
            return node
        if tok[0] == "end":
            self.error("unexpected end of expression", tok)
        self.error(f"unexpected token {tok[1]!r}", tok)


def _collect_vars(node, out):
    if node[0] == "var":
        out.add(node[1])
    elif node[0] == "bin":
        _collect_vars(node[2], out)
        _collect_vars(node[3], out)
    elif node[0] == "neg":
        _collect_vars(node[1], out)
    elif node[0] == "call":
        for a in node[2]:
            _collect_vars(a, out)


def _eval_node(node, env, source):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -_eval_node(node[1], env, source)
    if kind == "bin":
        op = node[1]
        a = _eval_node(node[2], env, source)
        b = _eval_node(node[3], env, source)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if np.any(b == 0):
                raise DomainError(f"division by zero in {source!r}")
            return a / b
        # '^'
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.power(a, b)
        if not np.all(np.isfinite(r)):
            raise DomainError(f"invalid power in {source!r}")
        return r
    # call
    name, args = node[1], node[2]
    vals = [_eval_node(a, env, source) for a in args]
    if name == "log":
        if np.any(vals[0] <= 0):
            raise DomainError(f"log of a nonpositive value in {source!r}")
        return np.log(vals[0])
    if name == "sqrt":
        if np.any(vals[0] < 0):
            raise DomainError(f"sqrt of a negative value in {source!r}")
        return np.sqrt(vals[0])
    if name == "min":
        return np.minimum(vals[0], vals[1])
    if name == "max":
        return np.maximum(vals[0], vals[1])
    return _FUNCTIONS_1[name](vals[0])


@dataclass
class CoefficientExpr:
    """A parsed scalar coefficient expression."""

    source: str
    tree: tuple
    variables: frozenset

    def evaluate(self, env):
        """Evaluate on an environment of (broadcastable) numpy arrays."""
        return _eval_node(self.tree, env, self.source)


def parse_expression(text, allowed_vars, line=1, col0=0):
    """Parse one DSL expression, restricted to `allowed_vars`.

    Raises ExpressionSyntaxError (with line/column) on malformed input and
    on references to variables outside the allowed set.
    """
    tokens = _tokenize(text, line, col0)
    tree = _Parser(tokens, line).parse()
    used = set()
    _collect_vars(tree, used)
    bad = used - set(allowed_vars)
    if bad:
        # report the first offending occurrence with its column
        for tok in tokens:
            if tok[0] == "name" and tok[1] in bad:
                raise ExpressionSyntaxError(
                    f"variable {tok[1]!r} not available here", line, tok[2]
                )
        raise ExpressionSyntaxError(f"undeclared variables {sorted(bad)}", line, col0)
    return CoefficientExpr(text, tree, frozenset(used))


# --------------------------------------------------------------------------
# Problem specification
# --------------------------------------------------------------------------


def _state_vars(n):
    return [f"x{i + 1}" for i in range(n)]


def _noise_vars(d):
    return [f"z{j + 1}" for j in range(d)]


def _control_vars(k):
    return [f"u{i + 1}" for i in range(k)]


@dataclass
class ProblemSpec:
    """A stochastic recursive control problem on one probability space.

    Evaluators are vectorized over leading batch axes: `drift(s, x, u)`
    maps (..., n) states and (..., k) controls to (..., n); `diffusion`
    to (..., n, d); `driver(s, x, y, z, u)` and `terminal(x)` to (...,).
    All evaluators are deterministic and safe to share between workers.
    """

    n: int
    d: int
    k: int
    horizon: float
    control_lo: np.ndarray
    control_hi: np.ndarray
    drift: callable
    diffusion: callable
    driver: callable
    terminal: callable
    # expression sources, kept for render_problem round-trips
    b_sources: list = None
    sigma_sources: list = None
    f_source: str = None
    phi_source: str = None
    # variable names each coefficient group actually references (None when
    # the evaluators are opaque callables); lets solvers hoist invariants
    b_variables: frozenset = None
    sigma_variables: frozenset = None
    f_variables: frozenset = None
    # optional analytic gradients; finite differences otherwise
    drift_x: callable = None
    diffusion_x: callable = None
    driver_x: callable = None
    driver_y: callable = None
    driver_z: callable = None
    terminal_x: callable = None
    lipschitz_hint: float = 1.0
    name: str = ""
    h_grad: float = 1e-5

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.k < 1:
            raise ProblemError("dimensions n, d, k must all be >= 1")
        if not self.horizon > 0:
            raise ProblemError("horizon T must be strictly positive")
        self.control_lo = np.asarray(self.control_lo, dtype=float).reshape(self.k)
        self.control_hi = np.asarray(self.control_hi, dtype=float).reshape(self.k)
        if np.any(self.control_lo > self.control_hi):
            i = int(np.argmax(self.control_lo > self.control_hi))
            raise ConfigError(
                f"empty control box: lo[{i}] = {self.control_lo[i]} > "
                f"hi[{i}] = {self.control_hi[i]}"
            )
        if self.drift_x is None:
            self.drift_x = _fd_jacobian_x(self.drift, self.n, self.h_grad)
        if self.diffusion_x is None:
            self.diffusion_x = _fd_jacobian_x(
                self.diffusion, self.n, self.h_grad, matrix_valued=True
            )
        if self.driver_x is None:
            self.driver_x = _fd_driver_grad(self.driver, "x", self.n, self.h_grad)
        if self.driver_y is None:
            self.driver_y = _fd_driver_grad(self.driver, "y", 1, self.h_grad)
        if self.driver_z is None:
            self.driver_z = _fd_driver_grad(self.driver, "z", self.d, self.h_grad)
        if self.terminal_x is None:
            self.terminal_x = _fd_terminal_grad(self.terminal, self.n, self.h_grad)

    def control_inside(self, u, atol=1e-12):
        u = np.asarray(u, dtype=float)
        return bool(
            np.all(u >= self.control_lo - atol) and np.all(u <= self.control_hi + atol)
        )


def _fd_step(h_grad, value):
    return np.asarray(h_grad * (1.0 + np.abs(value)))


def _fd_jacobian_x(fn, n, h_grad, matrix_valued=False):
    """Central-difference Jacobian in x of b or sigma."""

    def grad(s, x, u):
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(n):
            h = _fd_step(h_grad, x[..., j])
            e = np.zeros_like(x)
            e[..., j] = h
            num = fn(s, x + e, u) - fn(s, x - e, u)
            den = 2.0 * h[..., None, None] if matrix_valued else 2.0 * h[..., None]
            cols.append(num / den)
        return np.stack(cols, axis=-1)

    return grad


def _fd_driver_grad(fn, which, m, h_grad):
    """Central-difference gradient of the driver in x, y, or z."""

    def grad(s, x, y, z, u):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if which == "y":
            h = _fd_step(h_grad, y)
            return (fn(s, x, y + h, z, u) - fn(s, x, y - h, z, u)) / (2.0 * h)
        target = x if which == "x" else z
        cols = []
        for j in range(m):
            h = _fd_step(h_grad, target[..., j])
            e = np.zeros_like(target)
            e[..., j] = h
            if which == "x":
                diff = (fn(s, x + e, y, z, u) - fn(s, x - e, y, z, u)) / (2.0 * h)
            else:
                diff = (fn(s, x, y, z + e, u) - fn(s, x, y, z - e, u)) / (2.0 * h)
            cols.append(diff)
        return np.stack(cols, axis=-1)

    return grad


def _fd_terminal_grad(fn, n, h_grad):
    def grad(x):
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(n):
            h = _fd_step(h_grad, x[..., j])
            e = np.zeros_like(x)
            e[..., j] = h
            cols.append((fn(x + e) - fn(x - e)) / (2.0 * h))
        return np.stack(cols, axis=-1)

    return grad


def _make_env(n, d, k, s=None, x=None, y=None, z=None, u=None):
    env = {}
    if s is not None:
        env["s"] = s
    if x is not None:
        x = np.asarray(x, dtype=float)
        for i in range(n):
            env[f"x{i + 1}"] = x[..., i]
    if y is not None:
        env["y"] = np.asarray(y, dtype=float)
    if z is not None:
        z = np.asarray(z, dtype=float)
        for j in range(d):
            env[f"z{j + 1}"] = z[..., j]
    if u is not None:
        u = np.asarray(u, dtype=float)
        for i in range(k):
            env[f"u{i + 1}"] = u[..., i]
    return env


def _vector_evaluator(exprs, n, d, k):
    """Drift evaluator from n scalar expressions."""

    def drift(s, x, u):
        x = np.asarray(x, dtype=float)
        env = _make_env(n, d, k, s=s, x=x, u=u)
        shape = x.shape[:-1]
        out = np.empty(shape + (n,))
        for i, ex in enumerate(exprs):
            out[..., i] = np.broadcast_to(ex.evaluate(env), shape)
        return out

    return drift


def _matrix_evaluator(exprs, n, d, k):
    """Diffusion evaluator from n*d scalar expressions (row-major)."""

    def diffusion(s, x, u):
        x = np.asarray(x, dtype=float)
        env = _make_env(n, d, k, s=s, x=x, u=u)
        shape = x.shape[:-1]
        out = np.empty(shape + (n, d))
        for i in range(n):
            for j in range(d):
                out[..., i, j] = np.broadcast_to(
                    exprs[i * d + j].evaluate(env), shape
                )
        return out

    return diffusion


def _driver_evaluator(expr, n, d, k):
    def driver(s, x, y, z, u):
        x = np.asarray(x, dtype=float)
        env = _make_env(n, d, k, s=s, x=x, y=y, z=z, u=u)
        return np.broadcast_to(
            np.asarray(expr.evaluate(env), dtype=float), x.shape[:-1]
        ).copy()

    return driver


def _terminal_evaluator(expr, n):
    def terminal(x):
        x = np.asarray(x, dtype=float)
        env = _make_env(n, 0, 0, x=x)
        return np.broadcast_to(
            np.asarray(expr.evaluate(env), dtype=float), x.shape[:-1]
        ).copy()

    return terminal


def spec_from_expressions(
    n,
    d,
    k,
    horizon,
    control_lo,
    control_hi,
    b_sources,
    sigma_sources,
    f_source,
    phi_source,
    lipschitz_hint=1.0,
    name="",
    line_info=None,
):
    """Build a ProblemSpec from DSL source strings.

    `line_info` optionally maps coefficient keys (b1, sigma1_1, f, phi) to
    (line, col) pairs so parse errors point into the original config file.
    """
    line_info = line_info or {}
    sx = _state_vars(n)
    su = _control_vars(k)
    sz = _noise_vars(d)

    def loc(key):
        return line_info.get(key, (1, 0))

    if len(b_sources) != n:
        raise ConfigError(f"expected {n} drift entries b1..b{n}, got {len(b_sources)}")
    if len(sigma_sources) != n * d:
        raise ConfigError(
            f"expected {n * d} diffusion entries, got {len(sigma_sources)}"
        )
    b_exprs = [
        parse_expression(src, ["s"] + sx + su, *loc(f"b{i + 1}"))
        for i, src in enumerate(b_sources)
    ]
    sig_exprs = [
        parse_expression(
            src, ["s"] + sx + su, *loc(f"sigma{i // d + 1}_{i % d + 1}")
        )
        for i, src in enumerate(sigma_sources)
    ]
    f_expr = parse_expression(f_source, ["s", "y"] + sx + sz + su, *loc("f"))
    phi_expr = parse_expression(phi_source, sx, *loc("phi"))
    b_vars = frozenset().union(*(e.variables for e in b_exprs))
    sig_vars = frozenset().union(*(e.variables for e in sig_exprs))
    return ProblemSpec(
        n=n,
        d=d,
        k=k,
        horizon=horizon,
        control_lo=control_lo,
        control_hi=control_hi,
        drift=_vector_evaluator(b_exprs, n, d, k),
        diffusion=_matrix_evaluator(sig_exprs, n, d, k),
        driver=_driver_evaluator(f_expr, n, d, k),
        terminal=_terminal_evaluator(phi_expr, n),
        b_sources=list(b_sources),
        sigma_sources=list(sigma_sources),
        f_source=f_source,
        phi_source=phi_source,
        b_variables=b_vars,
        sigma_variables=sig_vars,
        f_variables=f_expr.variables,
        lipschitz_hint=lipschitz_hint,
        name=name,
    )


# --------------------------------------------------------------------------
# Config file parsing / rendering
# --------------------------------------------------------------------------

_SECTIONS = ("dims", "horizon", "control", "initial", "coefficients")
_SECTION_KEYS = {
    "dims": {"n", "d", "k", "lipschitz_hint"},
    "horizon": {"T"},
    "control": {"lo", "hi"},
    "initial": {"t", "x"},
}


def _parse_kv_lines(text):
    """Split config text into {section: {key: (value, line, col)}}."""
    data = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", lineno, len(line))
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno, 1)
            data.setdefault(section, {})
            continue
        if section is None:
            raise ConfigError("key outside any section", lineno, 1)
        if "=" not in line:
            raise ConfigError("expected key = value", lineno, 1)
        key, value = line.split("=", 1)
        col = line.index("=") + 2 + (len(value) - len(value.lstrip()))
        key = key.strip()
        if key in data[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno, 1)
        data[section][key] = (value.strip(), lineno, col)
    return data


def _need(data, section, key):
    try:
        return data[section][key]
    except KeyError:
        raise ConfigError(f"missing required key {key!r} in section [{section}]")


def _as_int(item, key):
    value, line, col = item
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}", line, col)


def _as_float(item, key):
    value, line, col = item
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}", line, col)


def _as_floats(item, key, count):
    value, line, col = item
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != count:
        raise ConfigError(
            f"{key} must have {count} comma-separated values, got {len(parts)}",
            line,
            col,
        )
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise ConfigError(f"{key} must be numeric, got {value!r}", line, col)


def _unquote(item, key):
    value, line, col = item
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1], line, col + 1
    return value, line, col


def parse_problem(config_text):
    """Parse a problem config into a validated ProblemSpec.

    Returns (spec, initial) where initial is a (t, x) pair when the
    optional [initial] section is present, else None.  Errors carry the
    offending line and column.
    """
    data = _parse_kv_lines(config_text)
    for section in ("dims", "horizon", "control", "coefficients"):
        if section not in data:
            raise ConfigError(f"missing required section [{section}]")
    for section, allowed in _SECTION_KEYS.items():
        for key, (_, line, _) in data.get(section, {}).items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, 1)

    n = _as_int(_need(data, "dims", "n"), "n")
    d = _as_int(_need(data, "dims", "d"), "d")
    k = _as_int(_need(data, "dims", "k"), "k")
    hint = 1.0
    if "lipschitz_hint" in data["dims"]:
        hint = _as_float(data["dims"]["lipschitz_hint"], "lipschitz_hint")
    horizon = _as_float(_need(data, "horizon", "T"), "T")
    lo = _as_floats(_need(data, "control", "lo"), "lo", k)
    hi = _as_floats(_need(data, "control", "hi"), "hi", k)

    coeff = data["coefficients"]
    expected = (
        [f"b{i + 1}" for i in range(n)]
        + [f"sigma{i + 1}_{j + 1}" for i in range(n) for j in range(d)]
        + ["f", "phi"]
    )
    for key, (_, line, _) in coeff.items():
        if key not in expected:
            raise ConfigError(f"unknown coefficient key {key!r}", line, 1)
    sources = {}
    line_info = {}
    for key in expected:
        if key not in coeff:
            raise ConfigError(f"missing coefficient {key!r} in [coefficients]")
        src, line, col = _unquote(coeff[key], key)
        sources[key] = src
        line_info[key] = (line, col)

    spec = spec_from_expressions(
        n,
        d,
        k,
        horizon,
        lo,
        hi,
        [sources[f"b{i + 1}"] for i in range(n)],
        [sources[f"sigma{i + 1}_{j + 1}"] for i in range(n) for j in range(d)],
        sources["f"],
        sources["phi"],
        lipschitz_hint=hint,
        line_info=line_info,
    )

    initial = None
    if "initial" in data:
        t0 = _as_float(_need(data, "initial", "t"), "t")
        x0 = _as_floats(_need(data, "initial", "x"), "x", n)
        if not 0.0 <= t0 < horizon:
            raise ConfigError(f"initial time t = {t0} outside [0, T)")
        initial = (t0, x0)
    return spec, initial


def render_problem(spec, initial=None):
    """Render a spec (built from expressions) back to config text."""
    if spec.b_sources is None:
        raise ProblemError("spec has no expression sources to render")
    lines = ["[dims]", f"n = {spec.n}", f"d = {spec.d}", f"k = {spec.k}"]
    lines.append(f"lipschitz_hint = {float(spec.lipschitz_hint)!r}")
    lines += ["", "[horizon]", f"T = {float(spec.horizon)!r}"]
    lines += [
        "",
        "[control]",
        "lo = " + ", ".join(repr(float(v)) for v in spec.control_lo),
        "hi = " + ", ".join(repr(float(v)) for v in spec.control_hi),
    ]
    if initial is not None:
        t0, x0 = initial
        lines += [
            "",
            "[initial]",
            f"t = {float(t0)!r}",
            "x = " + ", ".join(repr(float(v)) for v in np.atleast_1d(x0)),
        ]
    lines += ["", "[coefficients]"]
    for i, src in enumerate(spec.b_sources):
        lines.append(f'b{i + 1} = "{src}"')
    for i in range(spec.n):
        for j in range(spec.d):
            lines.append(f'sigma{i + 1}_{j + 1} = "{spec.sigma_sources[i * spec.d + j]}"')
    lines.append(f'f = "{spec.f_source}"')
    lines.append(f'phi = "{spec.phi_source}"')
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Built-in problems
# --------------------------------------------------------------------------


def _example31(horizon=1.0):
    # dX = X u ds + X dW, driver x - y, terminal x, U = [0, 1]
    spec = spec_from_expressions(
        1, 1, 1, horizon, [0.0], [1.0],
        ["x1 * u1"], ["x1"], "x1 - y", "x1",
        lipschitz_hint=2.0, name="example31",
    )
    spec.drift_x = lambda s, x, u: np.asarray(u, dtype=float)[..., :1, None] * np.ones(
        np.shape(x)[:-1] + (1, 1)
    )
    spec.diffusion_x = lambda s, x, u: np.ones(np.shape(x)[:-1] + (1, 1, 1))
    spec.driver_x = lambda s, x, y, z, u: np.ones(np.shape(x)[:-1] + (1,))
    spec.driver_y = lambda s, x, y, z, u: -np.ones(np.shape(x)[:-1])
    spec.driver_z = lambda s, x, y, z, u: np.zeros(np.shape(x)[:-1] + (1,))
    spec.terminal_x = lambda x: np.ones(np.shape(x)[:-1] + (1,))
    return spec


def _smooth1d(horizon=1.0):
    # smooth nonlinear coefficients with bounded derivatives
    spec = spec_from_expressions(
        1, 1, 1, horizon, [0.0], [1.0],
        ["sin(x1) * u1"], ["0.5 + 0.1 * cos(x1)"],
        "x1 - y + 0.1 * sin(z1)", "sin(x1)",
        lipschitz_hint=2.0, name="smooth1d",
    )
    spec.drift_x = lambda s, x, u: (
        np.cos(np.asarray(x, dtype=float)[..., :1])
        * np.asarray(u, dtype=float)[..., :1]
    )[..., None]
    spec.diffusion_x = lambda s, x, u: (
        -0.1 * np.sin(np.asarray(x, dtype=float)[..., :1])
    )[..., None, None]
    spec.driver_x = lambda s, x, y, z, u: np.ones(np.shape(x)[:-1] + (1,))
    spec.driver_y = lambda s, x, y, z, u: -np.ones(np.shape(x)[:-1])
    spec.driver_z = lambda s, x, y, z, u: 0.1 * np.cos(
        np.asarray(z, dtype=float)[..., :1]
    )
    spec.terminal_x = lambda x: np.cos(np.asarray(x, dtype=float)[..., :1])
    return spec


_BUILTINS = {"example31": _example31, "smooth1d": _smooth1d}

# pipeline start points (t0, x0) and baseline constant control per builtin
_BUILTIN_START = {
    "example31": (0.0, np.array([0.0]), np.array([0.0])),
    "smooth1d": (0.0, np.array([0.0]), np.array([0.0])),
}


def builtin_names():
    return sorted(_BUILTINS)


def builtin_problem(name, horizon=None):
    if name not in _BUILTINS:
        raise ConfigError(
            f"unknown builtin {name!r}; available: {', '.join(builtin_names())}"
        )
    if horizon is None:
        return _BUILTINS[name]()
    return _BUILTINS[name](horizon)


def builtin_start(name):
    """Default (t0, x0, constant control) the pipeline starts from."""
    t0, x0, u0 = _BUILTIN_START[name]
    return t0, x0.copy(), u0.copy()


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def project_control(u_raw, spec):
    """Componentwise clamp of a control onto the control box (idempotent)."""
    u = np.asarray(u_raw, dtype=float)
    return np.clip(u, spec.control_lo, spec.control_hi)


def eval_coefficients(spec, s, x, u):
    """Evaluate (b, sigma) at (s, x, u); u must already lie in the box."""
    if not 0.0 <= s <= spec.horizon + 1e-12:
        raise DomainError(f"time {s} outside [0, {spec.horizon}]")
    u = np.asarray(u, dtype=float)
    if not spec.control_inside(u):
        raise ControlBoxError(
            f"control {u} outside box [{spec.control_lo}, {spec.control_hi}]"
        )
    x = np.asarray(x, dtype=float)
    return spec.drift(s, x, u), spec.diffusion(s, x, u)


@dataclass
class AssumptionProbeReport:
    """Empirical check of one coefficient assumption on random samples."""

    assumption: str
    samples: int
    max_difference_ratio: float
    max_growth_ratio: float
    ratios: dict
    lipschitz_hint: float
    safety_factor: float
    passed: bool
    seed: int


_SAFETY_FACTOR = 1.05


def _probe_rng(seed):
    return np.random.Generator(
        np.random.Philox(key=np.array([seed & (2**64 - 1), 2**63 + 17], dtype=np.uint64))
    )


def probe_assumptions(spec, assumption, sample_count, radius, seed=0):
    """Sample random points and report empirical Lipschitz/growth ratios.

    assumption is one of "H1" (b, sigma Lipschitz and linear growth in x),
    "H2" (f, phi Lipschitz in (x, y, z) and linear growth), or "H3"
    (bounded partial derivatives).  Statistical, not a proof; the pass
    flag compares against lipschitz_hint times a fixed safety factor.
    """
    if assumption not in ("H1", "H2", "H3"):
        raise ProblemError(f"unknown assumption id {assumption!r}")
    if sample_count < 1:
        raise ProblemError("sample_count must be >= 1")
    if not radius > 0:
        raise ProblemError("radius must be positive")

    rng = _probe_rng(seed)
    m = sample_count
    s = rng.uniform(0.0, spec.horizon, size=m)
    x = rng.uniform(-radius, radius, size=(m, spec.n))
    x_hat = rng.uniform(-radius, radius, size=(m, spec.n))
    u = rng.uniform(spec.control_lo, spec.control_hi, size=(m, spec.k))
    y = rng.uniform(-radius, radius, size=m)
    y_hat = rng.uniform(-radius, radius, size=m)
    z = rng.uniform(-radius, radius, size=(m, spec.d))
    z_hat = rng.uniform(-radius, radius, size=(m, spec.d))

    ratios = {}
    eps = 1e-12

    if assumption == "H1":
        dx = np.linalg.norm(x - x_hat, axis=-1)
        b1, s1 = spec.drift(s, x, u), spec.diffusion(s, x, u)
        b2, s2 = spec.drift(s, x_hat, u), spec.diffusion(s, x_hat, u)
        db = np.linalg.norm(b1 - b2, axis=-1)
        ds = np.linalg.norm(s1 - s2, axis=(-2, -1))
        ratios["b"] = float(np.max(db / np.maximum(dx, eps)))
        ratios["sigma"] = float(np.max(ds / np.maximum(dx, eps)))
        lip = float(np.max((db + ds) / np.maximum(dx, eps)))
        growth = float(
            np.max(
                (np.linalg.norm(b1, axis=-1) + np.linalg.norm(s1, axis=(-2, -1)))
                / (1.0 + np.linalg.norm(x, axis=-1))
            )
        )
    elif assumption == "H2":
        f1 = spec.driver(s, x, y, z, u)
        f2 = spec.driver(s, x_hat, y_hat, z_hat, u)
        p1 = spec.terminal(x)
        p2 = spec.terminal(x_hat)
        den = (
            np.linalg.norm(x - x_hat, axis=-1)
            + np.abs(y - y_hat)
            + np.linalg.norm(z - z_hat, axis=-1)
        )
        dxn = np.linalg.norm(x - x_hat, axis=-1)
        ratios["f"] = float(np.max(np.abs(f1 - f2) / np.maximum(den, eps)))
        ratios["phi"] = float(np.max(np.abs(p1 - p2) / np.maximum(dxn, eps)))
        lip = max(ratios["f"], ratios["phi"])
        f0 = spec.driver(s, x, np.zeros(m), np.zeros((m, spec.d)), u)
        growth = float(
            np.max((np.abs(f0) + np.abs(p1)) / (1.0 + np.linalg.norm(x, axis=-1)))
        )
    else:  # H3: derivative magnitudes
        for key, val in (
            ("b_x", spec.drift_x(s, x, u)),
            ("sigma_x", spec.diffusion_x(s, x, u)),
            ("f_x", spec.driver_x(s, x, y, z, u)),
            ("f_y", spec.driver_y(s, x, y, z, u)),
            ("f_z", spec.driver_z(s, x, y, z, u)),
            ("phi_x", spec.terminal_x(x)),
        ):
            ratios[key] = float(np.max(np.abs(val)))
        lip = max(ratios.values())
        growth = lip

    bound = spec.lipschitz_hint * _SAFETY_FACTOR
    return AssumptionProbeReport(
        assumption=assumption,
        samples=sample_count,
        max_difference_ratio=lip,
        max_growth_ratio=growth,
        ratios=ratios,
        lipschitz_hint=spec.lipschitz_hint,
        safety_factor=_SAFETY_FACTOR,
        passed=bool(lip <= bound and growth <= bound),
        seed=seed,
    )
