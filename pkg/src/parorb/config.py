"""TOML run configuration for the command-line driver.

Layout (all tables except ``[problem]`` optional)::

    seed = 0
    threads = 1

    [problem]
    dimension = 1
    extents = [20.0]
    points_per_axis = [400]
    n_orbitals = 4
    hartree = false
    xc = false
    hartree_mode = "kernel"     # or "poisson" (3D only); default by dimension
    atoms = [{ position = [10.0], charge = 2.0, softening = 1.0 }]

    [optimizer]
    algorithm = "opt_par_mod"   # optm_qr | opt_par | opt_par_mod
    n_diag = 100                # or "inf"
    n_org = 1
    ...                         # every OptimizerParams field

    [io]
    log = "iterations.csv"
    summary = "summary.json"
    reduction = "reduction.csv"
    log_every = 1

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .energy import Atom, EnergyFlags, Problem
from .grid import GridError, build_grid
from .optimizer import OptimizerParams


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class ProblemSpec:
    dimension: int
    extents: tuple[float, ...]
    points_per_axis: tuple[int, ...]
    n_orbitals: int
    atoms: tuple[Atom, ...] = ()
    hartree: bool = False
    xc: bool = False
    hartree_mode: str | None = None

    def build(self) -> Problem:
        grid = build_grid(self.dimension, self.extents, self.points_per_axis)
        for atom in self.atoms:
            if not grid.contains(atom.position):
                raise GridError(f"atom at {atom.position} lies outside the grid box")
        return Problem(grid, self.atoms, EnergyFlags(self.hartree, self.xc, self.hartree_mode))


@dataclass(frozen=True)
class IOSpec:
    log: Path = Path("iterations.csv")
    summary: Path = Path("summary.json")
    reduction: Path = Path("reduction.csv")
    log_every: int = 1


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    io: IOSpec = field(default_factory=IOSpec)
    threads: int = 1
    seed: int = 0

    def echo(self) -> dict:
        """Plain-data view of the configuration for the run summary."""
        p = dataclasses.asdict(self.problem)
        p["atoms"] = [dataclasses.asdict(a) for a in self.problem.atoms]
        opt = dataclasses.asdict(self.optimizer)
        if opt["n_diag"] is None:
            opt["n_diag"] = "inf"
        return {
            "problem": p,
            "optimizer": opt,
            "io": {k: str(v) for k, v in dataclasses.asdict(self.io).items()},
            "threads": self.threads,
            "seed": self.seed,
        }


_TOP_KEYS = {"problem", "optimizer", "io", "threads", "seed"}
_PROBLEM_KEYS = {f.name for f in dataclasses.fields(ProblemSpec)}
_ATOM_KEYS = {"position", "charge", "softening"}
_IO_KEYS = {f.name for f in dataclasses.fields(IOSpec)}
_OPT_KEYS = {f.name for f in dataclasses.fields(OptimizerParams)} - {"seed"}
_REQUIRED_PROBLEM = {"dimension", "extents", "points_per_axis", "n_orbitals"}

DEFAULTS = {
    f.name: f.default for f in dataclasses.fields(OptimizerParams) if f.name != "seed"
}


def _reject_unknown(table: dict, allowed: set, where: str):
    for key in table:
        if key not in allowed:
            raise ConfigError("unknown key", f"{where}.{key}" if where else key)


def _expect(value, types, key):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"expected {types}, got boolean", key)
    if not isinstance(value, types):
        raise ConfigError(f"expected {types}, got {type(value).__name__}", key)
    return value


def _number(value, key) -> float:
    return float(_expect(value, (int, float), key))


def _integer(value, key) -> int:
    return int(_expect(value, int, key))


def _parse_problem(raw: dict) -> ProblemSpec:
    _reject_unknown(raw, _PROBLEM_KEYS, "problem")
    missing = _REQUIRED_PROBLEM - raw.keys()
    if missing:
        raise ConfigError("missing required key", f"problem.{sorted(missing)[0]}")
    dim = _integer(raw["dimension"], "problem.dimension")
    extents = tuple(
        _number(x, "problem.extents") for x in _expect(raw["extents"], list, "problem.extents")
    )
    points = tuple(
        _integer(x, "problem.points_per_axis")
        for x in _expect(raw["points_per_axis"], list, "problem.points_per_axis")
    )
    atoms = []
    for k, a in enumerate(_expect(raw.get("atoms", []), list, "problem.atoms")):
        where = f"problem.atoms[{k}]"
        _expect(a, dict, where)
        _reject_unknown(a, _ATOM_KEYS, where)
        if "position" not in a or "charge" not in a:
            raise ConfigError("atoms need position and charge", where)
        pos = tuple(_number(x, f"{where}.position") for x in _expect(a["position"], list, f"{where}.position"))
        if len(pos) != dim:
            raise ConfigError(f"position needs {dim} coordinates", f"{where}.position")
        try:
            atoms.append(
                Atom(pos, _number(a["charge"], f"{where}.charge"),
                     _number(a.get("softening", 1.0), f"{where}.softening"))
            )
        except ValueError as exc:
            raise ConfigError(str(exc), where) from exc
    mode = raw.get("hartree_mode")
    if mode is not None and mode not in ("kernel", "poisson"):
        raise ConfigError("must be 'kernel' or 'poisson'", "problem.hartree_mode")
    n = _integer(raw["n_orbitals"], "problem.n_orbitals")
    if n < 1:
        raise ConfigError("must be >= 1", "problem.n_orbitals")
    spec = ProblemSpec(
        dim, extents, points, n, tuple(atoms),
        bool(_expect(raw.get("hartree", False), bool, "problem.hartree")),
        bool(_expect(raw.get("xc", False), bool, "problem.xc")),
        mode,
    )
    try:
        problem = spec.build()
    except (GridError, ValueError) as exc:
        raise ConfigError(str(exc), "problem") from exc
    if n > problem.grid.n_points:
        raise ConfigError("more orbitals than grid points", "problem.n_orbitals")
    return spec


def _parse_optimizer(raw: dict, seed: int) -> OptimizerParams:
    _reject_unknown(raw, _OPT_KEYS, "optimizer")
    kwargs = {}
    for key, value in raw.items():
        name = f"optimizer.{key}"
        if key == "n_diag" and value == "inf":
            kwargs[key] = None
            continue
        default = DEFAULTS[key]
        if isinstance(default, str):
            kwargs[key] = _expect(value, str, name)
        elif isinstance(default, float):
            kwargs[key] = _number(value, name)
        else:
            kwargs[key] = _integer(value, name)
    try:
        params = OptimizerParams(seed=seed, **kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = next((k for k in sorted(_OPT_KEYS, key=len, reverse=True) if msg.startswith(k)), None)
        if key is None and "tau" in msg:
            key = "tau_min"
        raise ConfigError(msg, f"optimizer.{key}" if key else "optimizer") from exc
    return params


def _parse_io(raw: dict, base: Path) -> IOSpec:
    _reject_unknown(raw, _IO_KEYS, "io")
    kwargs = {}
    for key in ("log", "summary", "reduction"):
        if key in raw:
            kwargs[key] = Path(_expect(raw[key], str, f"io.{key}"))
    if "log_every" in raw:
        k = _integer(raw["log_every"], "io.log_every")
        if k < 1:
            raise ConfigError("must be >= 1", "io.log_every")
        kwargs["log_every"] = k
    io = IOSpec(**kwargs)
    return dataclasses.replace(
        io,
        log=base / io.log,
        summary=base / io.summary,
        reduction=base / io.reduction,
    )


def config_from_dict(data: dict, base: Path = Path(".")) -> RunConfig:
    _reject_unknown(data, _TOP_KEYS, "")
    if "problem" not in data:
        raise ConfigError("missing required table", "problem")
    seed = _integer(data.get("seed", 0), "seed")
    threads = _integer(data.get("threads", 1), "threads")
    if threads < 1:
        raise ConfigError("must be >= 1", "threads")
    return RunConfig(
        problem=_parse_problem(_expect(data["problem"], dict, "problem")),
        optimizer=_parse_optimizer(_expect(data.get("optimizer", {}), dict, "optimizer"), seed),
        io=_parse_io(_expect(data.get("io", {}), dict, "io"), base),
        threads=threads,
        seed=seed,
    )


def parse_config(path) -> RunConfig:
    """Read and validate a TOML run configuration.

    Raises :class:`ConfigError` for syntax errors (the message carries line
    and column), unknown keys and invalid values, and ``OSError`` when the
    file cannot be read.
    """
    path = Path(path)
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent)


def with_overrides(config: RunConfig, *, seed=None, threads=None, log_every=None) -> RunConfig:
    if seed is not None:
        config = dataclasses.replace(
            config, seed=seed, optimizer=dataclasses.replace(config.optimizer, seed=seed)
        )
    if threads is not None:
        if threads < 1:
            raise ConfigError("must be >= 1", "threads")
        config = dataclasses.replace(config, threads=threads)
    if log_every is not None:
        if log_every < 1:
            raise ConfigError("must be >= 1", "io.log_every")
        config = dataclasses.replace(config, io=dataclasses.replace(config.io, log_every=log_every))
    return config

