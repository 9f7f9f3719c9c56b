"""Run configuration: INI-style text with sections ``[grid] [time] [model] [cost] [bounds] [optimizer] [run]``.

Every problem in a file is reported at once, each with its key path and line
number.  Targets and the initial datum are named profiles
(``constant[:c]``, ``cosine[:a]``, ``two-bump[:a]``, ``random[:a]``) or paths:
a ``.bchf`` snapshot (constant in time) or a trajectory directory written by a
previous forward run.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from bchopt.grid import BCMode, Grid, TimeGrid
from bchopt.model import BoxBounds, CostSpec, ModelParams
from bchopt.optimizer import OptimizerConfig

MODES = ("forward", "optimize", "grad-check", "taylor-test", "sparsity-sweep", "verify-all")
PROFILES = ("constant", "cosine", "two-bump", "random")


@dataclass(frozen=True)
class ConfigIssue:
    key: str
    line: int | None
    message: str

    def __str__(self):
        where = f"line {self.line}" if self.line else "missing"
        return f"{self.key} ({where}): {self.message}"


class ConfigError(ValueError):
    def __init__(self, issues: list[ConfigIssue]):
        self.issues = list(issues)
        super().__init__("invalid configuration:\n  " + "\n  ".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class GridSpec:
    n: tuple[int, ...] = (16, 16)
    length: tuple[float, ...] = (2 * math.pi, 2 * math.pi)
    bc_mode: str = "periodic"


@dataclass(frozen=True)
class TimeSpec:
    t_final: float = 0.1
    steps: int = 10


@dataclass(frozen=True)
class CostConfig:
    b1: float = 1.0
    b2: float = 1.0
    b3: float = 0.1
    kappa: tuple[float, ...] = ()
    phi_Q: str = "constant:0"
    phi_Omega: str = "constant:0"


@dataclass(frozen=True)
class RunSection:
    mode: str = "forward"
    out: str = "bch-out"
    seed: int = 0
    phi0: str = "cosine:0.6"
    threads: int = 1
    kappa_grid: tuple[float, ...] = ()
    directions: int = 5
    fd_t: float = 1e-4
    taylor_scales: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    checkpoint_every: int = 1


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = GridSpec()
    time: TimeSpec = TimeSpec()
    model: ModelParams = ModelParams()
    potential: str = "quartic"
    cost: CostConfig = CostConfig()
    bounds: BoxBounds | None = None
    optimizer: OptimizerConfig = OptimizerConfig()
    run: RunSection = RunSection()
    base_dir: str = field(default=".", compare=False)

    def make_grid(self) -> Grid:
        return Grid(self.grid.n, self.grid.length, self.grid.bc_mode)

    def make_time_grid(self) -> TimeGrid:
        return TimeGrid(self.time.t_final, self.time.steps)


# -- value parsers ------------------------------------------------------------------------


def _tuple(kind):
    def parse(s):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(kind(p) for p in parts)

    return parse


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _u64(s):
    v = int(s)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


_SCHEMA = {
    "grid": {"n": _tuple(int), "length": _tuple(float), "bc_mode": str},
    "time": {"t_final": float, "steps": int},
    "model": {"eps": float, "mobility": float, "eta0": float, "nu": float, "sigma": float,
              "lambda_lo": float, "lambda_hi": float, "lambda_profile": str, "h_source": str,
              "h_amp": float, "flow": _bool, "stabilization": _opt_float, "potential": str},
    "cost": {"b1": float, "b2": float, "b3": float, "kappa": _tuple(float), "phi_Q": str, "phi_Omega": str},
    "bounds": {"lo": _tuple(float), "hi": _tuple(float)},
    "optimizer": {"step_tau": _opt_float, "backtrack_factor": float, "max_tries": int, "stop_tol": float,
                  "max_outer": int, "bb": _bool},
    "run": {"mode": str, "out": str, "seed": _u64, "phi0": str, "threads": int, "kappa_grid": _tuple(float),
            "directions": int, "fd_t": float, "taylor_scales": _tuple(float), "checkpoint_every": int},
}
_REQUIRED = {("grid", "n"), ("time", "t_final"), ("time", "steps")}


def _line_index(text: str) -> dict:
    """``(section, key) -> line number`` by a plain scan (configparser keeps no positions)."""
    idx = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            idx.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            idx.setdefault((section, m.group(1).strip()), no)
    return idx


def _profile_ok(value: str, base: Path) -> str | None:
    name = value.split(":", 1)[0].strip()
    if name in PROFILES:
        if ":" in value:
            try:
                float(value.split(":", 1)[1])
            except ValueError:
                return f"profile parameter of {value!r} is not a number"
        return None
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        return f"unknown profile and no such file: {value!r}"
    return None


def parse_config_text(text: str, base_dir=".") -> RunConfig:
    lines = _line_index(text)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([ConfigIssue("<file>", getattr(exc, "lineno", None), str(exc).splitlines()[0])]) from None
    issues: list[ConfigIssue] = []
    values: dict[str, dict] = {s: {} for s in _SCHEMA}

    def issue(sec, key, msg):
        issues.append(ConfigIssue(f"{sec}.{key}" if key else sec, lines.get((sec, key)) or lines.get((sec, None)), msg))

    for sec in cp.sections():
        if sec not in _SCHEMA:
            issue(sec, None, "unknown section")
            continue
        for key, raw in cp.items(sec):
            if key not in _SCHEMA[sec]:
                issue(sec, key, "unknown key")
                continue
            try:
                values[sec][key] = _SCHEMA[sec][key](raw)
            except ValueError as exc:
                issue(sec, key, f"type error: {exc}")
    for sec, key in sorted(_REQUIRED):
        if key not in values[sec] and not any(i.key == f"{sec}.{key}" for i in issues):
            issues.append(ConfigIssue(f"{sec}.{key}", None, "missing required key"))

    g, t, mdl, c, b, o, r = (values[s] for s in ("grid", "time", "model", "cost", "bounds", "optimizer", "run"))
    base = Path(base_dir)

    # grid
    n = g.get("n", (16, 16))
    dim = len(n)
    if dim not in (1, 2):
        issue("grid", "n", "dimension must be 1 or 2")
    if any(k < 4 for k in n):
        issue("grid", "n", "every axis needs at least 4 cells")
    length = g.get("length", (2 * math.pi,) * dim)
    if len(length) == 1 and dim == 2:
        length = length * 2
    if len(length) != dim:
        issue("grid", "length", f"expected {dim} entries")
    if any(not x > 0 for x in length):
        issue("grid", "length", "lengths must be positive")
    bc = g.get("bc_mode", "periodic")
    if bc not in (m.value for m in BCMode):
        issue("grid", "bc_mode", f"unknown boundary mode {bc!r}")

    # time
    if "t_final" in t and not t["t_final"] > 0:
        issue("time", "t_final", "must be positive")
    if "steps" in t and t["steps"] < 1:
        issue("time", "steps", "must be at least 1")

    # model
    potential = mdl.pop("potential", "quartic")
    if potential != "quartic":
        issue("model", "potential", "only the quartic potential is available")
    if mdl.get("eps", 1.0) != 1.0:
        issue("model", "eps", "the solver is normalised to eps = 1")
    if "lambda_lo" in mdl and not mdl["lambda_lo"] > 0:
        issue("model", "lambda_lo", "drag must be strictly positive (lambda_lo > 0)")
    model = None
    try:
        model = ModelParams(**mdl)
    except ValueError as exc:
        key = next((k for k in mdl if str(exc).startswith(k)), None)
        if not (key == "lambda_lo" and any(i.key == "model.lambda_lo" for i in issues)):
            issue("model", key, str(exc))

    # cost
    if "b3" in c and not c["b3"] > 0:
        issue("cost", "b3", "b3 must lie in (0, +inf)")
    for k in ("b1", "b2"):
        if k in c and c[k] < 0:
            issue("cost", k, "must be nonnegative")
    if any(k < 0 for k in c.get("kappa", ())):
        issue("cost", "kappa", "must be nonnegative")
    if len(c.get("kappa", ())) not in (0, 1, dim):
        issue("cost", "kappa", f"expected 1 or {dim} entries")
    for k in ("phi_Q", "phi_Omega"):
        if k in c and (msg := _profile_ok(c[k], base)):
            issue("cost", k, msg)
    cost = CostConfig(**c)

    # bounds
    bounds = None
    if b:
        lo, hi = b.get("lo"), b.get("hi")
        if lo is None or hi is None:
            issue("bounds", "lo" if lo is None else "hi", "both lo and hi are required")
        else:
            lo = lo * dim if len(lo) == 1 else lo
            hi = hi * dim if len(hi) == 1 else hi
            if len(lo) != dim or len(hi) != dim:
                issue("bounds", "lo", f"expected 1 or {dim} entries")
            elif any(a > z for a, z in zip(lo, hi)):
                issue("bounds", "lo", "lo must not exceed hi")
            else:
                bounds = BoxBounds(lo, hi)

    # optimizer
    opt = OptimizerConfig()
    try:
        opt = OptimizerConfig(**o)
    except ValueError as exc:
        issue("optimizer", next((k for k in o if k in str(exc)), None), str(exc))

    # run
    if "mode" in r and r["mode"] not in MODES:
        issue("run", "mode", f"unknown mode {r['mode']!r}; expected one of {', '.join(MODES)}")
    if "phi0" in r and (msg := _profile_ok(r["phi0"], base)):
        issue("run", "phi0", msg)
    if r.get("threads", 1) < 1:
        issue("run", "threads", "must be at least 1")
    if r.get("directions", 1) < 1:
        issue("run", "directions", "must be at least 1")
    kg = r.get("kappa_grid", ())
    if any(z < a for a, z in zip(kg, kg[1:])):
        issue("run", "kappa_grid", "must be ascending")
    if r.get("checkpoint_every", 1) < 0:
        issue("run", "checkpoint_every", "must be nonnegative")

    if issues:
        raise ConfigError(issues)
    return RunConfig(GridSpec(n, tuple(length), bc), TimeSpec(**t), model, potential, cost, bounds, opt,
                     RunSection(**r), str(base))


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([ConfigIssue("<file>", None, f"cannot read {path}: {exc.strerror}")]) from None
    return parse_config_text(text, base_dir=path.parent)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize(cfg: RunConfig) -> str:
    """Text that parses back to an equal :class:`RunConfig`."""
    out = []

    def section(name, pairs):
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in pairs if not (isinstance(v, tuple) and not v))
        out.append("")

    section("grid", [("n", cfg.grid.n), ("length", cfg.grid.length), ("bc_mode", cfg.grid.bc_mode)])
    section("time", [("t_final", cfg.time.t_final), ("steps", cfg.time.steps)])
    section("model", [(f.name, getattr(cfg.model, f.name)) for f in fields(cfg.model)] + [("potential", cfg.potential)])
    section("cost", [(f.name, getattr(cfg.cost, f.name)) for f in fields(cfg.cost)])
    if cfg.bounds is not None:
        section("bounds", [("lo", cfg.bounds.lo), ("hi", cfg.bounds.hi)])
    section("optimizer", [(k, getattr(cfg.optimizer, k)) for k in _SCHEMA["optimizer"]])
    section("run", [(f.name, getattr(cfg.run, f.name)) for f in fields(cfg.run)])
    return "\n".join(out)


# -- profiles -----------------------------------------------------------------------------


def profile_field(spec: str, grid: Grid, seed: int = 0, base_dir=".") -> np.ndarray:
    """Evaluate a named profile (or load a snapshot) on the grid."""
    name, _, arg = spec.partition(":")
    name = name.strip()
    coords = grid.cell_coords()
    if name == "constant":
        return np.full(grid.n, float(arg or 0.0))
    if name == "cosine":
        a = float(arg or 0.6)
        k = 2 * np.pi if grid.periodic else np.pi
        out = np.full(grid.n, a)
        for x, L in zip(coords, grid.length):
            out = out * np.cos(k * x / L)
        return out
    if name == "two-bump":
        a = float(arg or 1.0)
        width = 2 * max(grid.h)
        r0 = 0.2 * min(grid.length)
        out = -np.ones(grid.n)
        for frac in (0.3, 0.7):
            c = [frac * L if i == 0 else 0.5 * L for i, L in enumerate(grid.length)]
            dist = np.sqrt(sum((x - ci) ** 2 for x, ci in zip(coords, c)))
            out = out + (1 + np.tanh((r0 - dist) / width))
        return a * out
    if name == "random":
        a = float(arg or 0.1)
        rng = np.random.default_rng(seed)
        z = grid.solve_poly(rng.standard_normal(grid.n), [1.0, 1.0, 1.0])
        return a * z / max(np.max(np.abs(z)), 1e-300)
    from bchopt.io import read_field

    p = Path(spec)
    if not p.is_absolute():
        p = Path(base_dir) / p
    _, data = read_field(p, grid.length)
    if data.shape != grid.n:
        raise ValueError(f"{spec}: field shape {data.shape} does not match grid {grid.n}")
    return data


def target_trajectory(spec: str, grid: Grid, tg: TimeGrid, seed: int = 0, base_dir=".") -> np.ndarray:
    """``phi_Q`` for every time level; a trajectory directory supplies each level."""
    full = Path(base_dir) / spec
    if spec.split(":", 1)[0] not in PROFILES and full.is_dir():
        from bchopt.io import read_trajectory

        tr = read_trajectory(full, grid.length)
        if sorted(tr["phi"]) != list(range(tg.steps + 1)):
            raise ValueError(f"{spec}: needs every level 0..{tg.steps}")
        return np.stack([tr["phi"][k] for k in range(tg.steps + 1)])
    f = profile_field(spec, grid, seed, base_dir)
    return np.broadcast_to(f, (tg.steps + 1,) + grid.n).copy()


def final_target(spec: str, grid: Grid, tg: TimeGrid, seed: int = 0, base_dir=".") -> np.ndarray:
    full = Path(base_dir) / spec
    if spec.split(":", 1)[0] not in PROFILES and full.is_dir():
        return target_trajectory(spec, grid, tg, seed, base_dir)[-1]
    return profile_field(spec, grid, seed, base_dir)


def build_problem(cfg: RunConfig):
    """Return ``(ReducedProblem, OptimizerConfig)`` ready to run."""
    from dataclasses import replace

    from bchopt.adjoint import ReducedProblem

    grid, tg = cfg.make_grid(), cfg.make_time_grid()
    base = cfg.base_dir
    phi0 = profile_field(cfg.run.phi0, grid, cfg.run.seed, base)
    phi_Q = target_trajectory(cfg.cost.phi_Q, grid, tg, cfg.run.seed + 1, base)
    phi_O = final_target(cfg.cost.phi_Omega, grid, tg, cfg.run.seed + 2, base)
    spec = CostSpec(cfg.cost.b1, cfg.cost.b2, cfg.cost.b3, phi_Q, phi_O, cfg.cost.kappa)
    problem = ReducedProblem(grid, tg, cfg.model, phi0, spec)
    return problem, replace(cfg.optimizer, bounds=cfg.bounds)
