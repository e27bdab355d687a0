"""Run configuration: ``key = value`` text files.

Blank lines and everything after ``#`` are ignored.  A key given twice
keeps its last value, except ``line`` which accumulates one line sample per
occurrence.  A line sample is written ``x0 .. t0 ; x1 .. t1 ; n``.
"""

import os
from dataclasses import dataclass, field, fields

from .linalg import PRECONDITIONERS, SolverConfig
from .optimize import NewtonConfig
from .problems import PROBLEMS


class ConfigError(ValueError):
    """Base class; ``lineno`` is 1-based, or None for the end of input."""

    def __init__(self, msg, lineno=None, key=None):
        where = f"line {lineno}" if lineno is not None else "end of input"
        super().__init__(f"{where}: {msg}")
        self.lineno = lineno
        self.key = key


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


@dataclass(frozen=True)
class LineSample:
    p0: tuple
    p1: tuple
    n: int


@dataclass
class RunConfig:
    problem: str
    d: int = None  # None: the problem's own dimension
    n0: int = 8
    levels: int = 0
    adaptive: bool = False
    adaptive_steps: int = 4
    theta: float = 0.5
    rho: float = None  # None keeps the problem default
    mu: float = None
    a: float = None
    b: float = None
    paired: bool = False
    newton_tol: float = 1e-5
    newton_maxiter: int = 100
    omega_min: float = 2.0 ** -6
    start: str = "auto"
    gmres_reduction: float = 1e-6
    gmres_restart: int = 100
    gmres_maxiter: int = 5000
    preconditioner: str = "auto"
    direct_threshold: int = 20000
    out: str = "output"
    lines: list = field(default_factory=list)

    def newton(self):
        return NewtonConfig(tol=self.newton_tol, maxiter=self.newton_maxiter,
                            omega_min=self.omega_min, start=self.start)

    def solver(self):
        return SolverConfig(reduction=self.gmres_reduction, restart=self.gmres_restart,
                            maxiter=self.gmres_maxiter, preconditioner=self.preconditioner,
                            direct_threshold=self.direct_threshold)

    def overrides(self):
        return {k: getattr(self, k) for k in ("rho", "mu", "a", "b")
                if getattr(self, k) is not None}


_REQUIRED = ("problem",)
_PROBLEM_DIM = {"example1": 2, "example2": 2, "example2-nonsparse": 2}


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _unit_open(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise ValueError("must lie in (0, 1)")
    return v


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"choose from {', '.join(sorted(options))}")
        return text
    return conv


def _line(text):
    parts = [p.strip() for p in text.split(";")]
    if len(parts) != 3:
        raise ValueError("expected 'x0 .. t0 ; x1 .. t1 ; n'")
    p0 = tuple(float(x) for x in parts[0].split())
    p1 = tuple(float(x) for x in parts[1].split())
    if len(p0) != len(p1) or len(p0) not in (2, 3):
        raise ValueError("endpoints need 2 or 3 matching coordinates")
    return LineSample(p0, p1, _positive_int(parts[2]))


_PARSERS = {
    "problem": _choice(set(PROBLEMS)),
    "d": lambda s: int(_choice({"1", "2"})(s)),
    "n0": _positive_int,
    "levels": _nonneg_int,
    "adaptive": _bool,
    "adaptive_steps": _nonneg_int,
    "theta": _unit_open,
    "rho": float,
    "mu": float,
    "a": float,
    "b": float,
    "paired": _bool,
    "newton_tol": _unit_open,
    "newton_maxiter": _positive_int,
    "omega_min": _unit_open,
    "start": _choice({"auto", "zero", "nonsparse"}),
    "gmres_reduction": _unit_open,
    "gmres_restart": _positive_int,
    "gmres_maxiter": _positive_int,
    "preconditioner": _choice(set(PRECONDITIONERS)),
    "direct_threshold": _nonneg_int,
    "out": str,
    "line": _line,
}


def parse_config(text):
    """Parse and validate configuration text into a :class:`RunConfig`."""
    values, where = {}, {}
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigSyntaxError(f"expected 'key = value', got {body!r}", lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in _PARSERS:
            raise UnknownKey(f"unknown key {key!r}", lineno, key)
        try:
            parsed = _PARSERS[key](value)
        except ValueError as exc:
            raise TypeMismatch(f"bad value {value!r} for key {key!r}: {exc}", lineno, key) from None
        if key == "line":
            lines.append(parsed)
            where.setdefault("line", lineno)
        else:
            values[key] = parsed
            where[key] = lineno
    for key in _REQUIRED:
        if key not in values:
            raise MissingRequired(f"required key {key!r} is missing", None, key)
    cfg = RunConfig(**values, lines=lines)
    _validate(cfg, where)
    return cfg


def _validate(cfg, where=None):
    where = where or {}
    want = _PROBLEM_DIM.get(cfg.problem)
    if cfg.d is None:
        cfg.d = want or 1
    elif want is not None and cfg.d != want:
        raise TypeMismatch(f"problem {cfg.problem} needs d = {want}", where.get("d"), "d")
    for i, ls in enumerate(cfg.lines):
        if len(ls.p0) != cfg.d + 1:
            raise TypeMismatch(f"line sample {i} needs {cfg.d + 1} coordinates per endpoint",
                               where.get("line"), "line")
    if cfg.a is not None and cfg.b is not None and not cfg.a < 0 < cfg.b:
        raise TypeMismatch("bounds must satisfy a < 0 < b", where.get("b"), "b")
    if cfg.rho is not None and not cfg.rho > 0:
        raise TypeMismatch("rho must be positive", where.get("rho"), "rho")
    if cfg.mu is not None and not cfg.mu >= 0:
        raise TypeMismatch("mu must be nonnegative", where.get("mu"), "mu")
    if cfg.omega_min > 1.0:
        raise TypeMismatch("omega_min must not exceed 1", where.get("omega_min"), "omega_min")
    return cfg


def validate(cfg):
    """Re-check a config after programmatic edits (e.g. CLI overrides)."""
    return _validate(cfg)


def check_output_dir(path):
    """Create ``path`` if needed and make sure it is writable."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path!r}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path!r} is not writable")


def format_config(cfg):
    """Text that :func:`parse_config` maps back to ``cfg``."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "lines":
            for ls in v:
                out.append("line = " + " ".join(repr(float(x)) for x in ls.p0) + " ; "
                           + " ".join(repr(float(x)) for x in ls.p1) + f" ; {ls.n}")
        elif v is None:
            continue
        elif isinstance(v, bool):
            out.append(f"{f.name} = {'true' if v else 'false'}")
        elif isinstance(v, float):
            out.append(f"{f.name} = {v!r}")
        else:
            out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
