"""Experiment configuration, presets and the artefact-writing runner.

Configs are INI files with four sections::

    [surface]
    kind = sphere
    r = 1.0
    resolution = 64, 32

    [initial]
    type = modes
    modes = 0.05*sin(theta)^2*cos(2*phi)

    [flow]
    flow = willmore
    dt = 1e-3
    t_end = 0.6

    [output]
    directory = runs/sphere

Initial heights (and graph profiles) use a small grammar: a signed sum of
terms, each an optional amplitude times a product of ``cos(k*u)^p`` or
``sin(k*u)^p`` factors in the chart coordinates ``u`` of the surface.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import os
import re
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .flow import FlowConfig, run
from .geometry import AdmissibilityError
from .observables import CSV_COLUMNS
from .reference import KINDS, ReferenceSurface, SurfaceError, build_reference, export_obj

SECTIONS = ("surface", "initial", "flow", "output")
SURFACE_KEYS = {
    "circle": ("r",),
    "sphere": ("r",),
    "cylinder": ("r", "length"),
    "torus": ("R", "r"),
    "graph": ("f", "box"),
}
AXES = {
    "circle": ("t",),
    "sphere": ("theta", "phi"),
    "cylinder": ("x", "phi"),
    "torus": ("u", "v"),
    "graph": ("x", "y"),
}
INITIAL_TYPES = ("constant", "modes", "file")
EXIT_CODES = {"completed": 0, "stationary": 0, "guard": 2, "solver_failure": 3}
EXIT_CONFIG = 1


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# -- initial-condition grammar ------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*^()]))")


@dataclass(frozen=True)
class ModeFactor:
    func: str  # "cos" or "sin"
    wavenumber: float
    axis: str
    power: int = 1


@dataclass(frozen=True)
class ModeTerm:
    amplitude: float
    factors: tuple[ModeFactor, ...] = ()


def _tokens(text: str):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if not mt or mt.end() == pos:
            raise ValueError(f"unexpected character {text[pos]!r} at position {pos}")
        kind = mt.lastgroup
        out.append((kind, mt.group(kind)))
        pos = mt.end()
    return out


def parse_modes(text: str, axes: tuple[str, ...]) -> tuple[ModeTerm, ...]:
    """Parse ``a*cos(k*u)^p*sin(v) - b + ...`` into mode terms.

    Raises ``ValueError`` on anything outside the grammar, including
    coordinate names not in ``axes``.
    """
    toks = _tokens(text)
    if not toks:
        raise ValueError("empty expression")
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None)

    def take(kind=None, value=None):
        nonlocal pos
        tk = peek()
        if tk[0] is None or (kind and tk[0] != kind) or (value and tk[1] != value):
            want = value or kind or "token"
            raise ValueError(f"expected {want} but found {tk[1]!r}")
        pos += 1
        return tk[1]

    def factor():
        tk = peek()
        if tk[0] == "num":
            return float(take())
        name = take("name")
        if name not in ("cos", "sin"):
            raise ValueError(f"unknown function {name!r}; only cos and sin are allowed")
        take("op", "(")
        k = 1.0
        if peek()[0] == "num":
            k = float(take())
            take("op", "*")
        axis = take("name")
        if axis not in axes:
            raise ValueError(f"unknown coordinate {axis!r}; expected one of {axes}")
        take("op", ")")
        power = 1
        if peek() == ("op", "^"):
            take()
            power = int(float(take("num")))
            if power < 1:
                raise ValueError("powers must be positive integers")
        return ModeFactor(name, k, axis, power)

    terms = []
    sign = 1.0
    if peek()[0] == "op" and peek()[1] in "+-":
        sign = -1.0 if take() == "-" else 1.0
    while True:
        amp, facs = sign, []
        while True:
            f = factor()
            if isinstance(f, float):
                amp *= f
            else:
                facs.append(f)
            if peek() == ("op", "*"):
                take()
                continue
            break
        terms.append(ModeTerm(amp, tuple(facs)))
        tk = peek()
        if tk[0] is None:
            break
        if tk[0] == "op" and tk[1] in "+-":
            sign = -1.0 if take() == "-" else 1.0
            continue
        raise ValueError(f"unexpected {tk[1]!r}")
    return tuple(terms)


def evaluate_modes(terms, coords: dict[str, np.ndarray]) -> np.ndarray:
    shape = np.shape(next(iter(coords.values())))
    out = np.zeros(shape)
    for term in terms:
        val = np.full(shape, term.amplitude)
        for f in term.factors:
            base = np.cos if f.func == "cos" else np.sin
            val = val * base(f.wavenumber * coords[f.axis]) ** f.power
        out = out + val
    return out


# -- config types -------------------------------------------------------------------


@dataclass(frozen=True)
class InitialCondition:
    type: str = "constant"
    value: float = 0.0
    modes: str = ""
    path: str = ""

    def field_values(self, surface: ReferenceSurface, base_dir: Path | None = None) -> np.ndarray:
        if self.type == "constant":
            return np.full(surface.size, float(self.value))
        if self.type == "modes":
            terms = parse_modes(self.modes, surface.axis_names)
            return evaluate_modes(terms, surface.coords())
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        data = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=1)
        data = np.asarray(data, dtype=float).ravel()
        if data.size != surface.size:
            raise ConfigError("initial.path", f"file holds {data.size} values; the grid has {surface.size} nodes")
        return data


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    params: tuple[tuple[str, object], ...]
    resolution: tuple[int, ...]
    initial: InitialCondition = field(default_factory=InitialCondition)
    flow: FlowConfig = field(default_factory=FlowConfig)
    directory: str = "run"
    alpha: float = 0.5
    fit: bool = True
    preset: str = ""

    @property
    def surface_params(self) -> dict:
        return dict(self.params)

    def build_surface(self) -> ReferenceSurface:
        params = self.surface_params
        if self.kind == "graph":
            terms = parse_modes(params["f"], AXES["graph"][: len(params["box"])])
            names = AXES["graph"][: len(params["box"])]
            params = {"box": params["box"], "f": lambda *c: evaluate_modes(terms, dict(zip(names, c)))}
        return build_reference(self.kind, params, self.resolution)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def to_ini(cfg: ExperimentConfig) -> str:
    """Serialise a config; :func:`parse_config` of the result reproduces ``cfg``."""
    lines = ["[surface]", f"kind = {cfg.kind}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.params]
    lines += [f"resolution = {_fmt(cfg.resolution)}", "", "[initial]", f"type = {cfg.initial.type}"]
    if cfg.initial.type == "constant":
        lines.append(f"value = {_fmt(float(cfg.initial.value))}")
    elif cfg.initial.type == "modes":
        lines.append(f"modes = {cfg.initial.modes}")
    else:
        lines.append(f"path = {cfg.initial.path}")
    lines += ["", "[flow]"]
    for f in fields(FlowConfig):
        val = getattr(cfg.flow, f.name)
        if val is not None:
            lines.append(f"{f.name} = {_fmt(val)}")
    lines += ["", "[output]", f"directory = {cfg.directory}", f"alpha = {_fmt(cfg.alpha)}", f"fit = {_fmt(cfg.fit)}"]
    if cfg.preset:
        lines.append(f"preset = {cfg.preset}")
    return "\n".join(lines) + "\n"


def _number(key, text, kind=float):
    try:
        val = kind(text)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {'an integer' if kind is int else 'a number'}, got {text!r}") from None
    if kind is float and not math.isfinite(val):
        raise ConfigError(key, "must be finite")
    return val


def _bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (torus R vs r)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(sec, f"unknown section; expected {SECTIONS}")
    if not parser.has_section("surface"):
        raise ConfigError("surface", "missing section")

    def section(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    surf = section("surface")
    kind = surf.pop("kind", None)
    if kind is None:
        raise ConfigError("surface.kind", "missing")
    if kind not in KINDS:
        raise ConfigError("surface.kind", f"unknown kind {kind!r}; expected one of {KINDS}")
    res_text = surf.pop("resolution", None)
    if res_text is None:
        raise ConfigError("surface.resolution", "missing")
    resolution = tuple(_number("surface.resolution", t, int) for t in res_text.split(","))
    expected_m = 1 if kind == "circle" else 2
    if kind != "graph" and len(resolution) != expected_m:
        raise ConfigError("surface.resolution", f"{kind} needs {expected_m} node count(s)")
    params = []
    for key in surf:
        if key not in SURFACE_KEYS[kind]:
            raise ConfigError(f"surface.{key}", f"unknown key for kind {kind!r}; allowed {SURFACE_KEYS[kind]}")
    defaults = {"r": 1.0, "R": 2.0, "length": 2 * math.pi}
    for key in SURFACE_KEYS[kind]:
        if key not in surf:
            if key not in defaults:
                raise ConfigError(f"surface.{key}", "missing")
            params.append((key, defaults[key]))
            continue
        raw = surf[key]
        if key == "f":
            params.append((key, raw.strip()))
        elif key == "box":
            params.append((key, tuple(_number("surface.box", t) for t in raw.split(","))))
        else:
            val = _number(f"surface.{key}", raw)
            if val <= 0:
                raise ConfigError(f"surface.{key}", "must be positive")
            params.append((key, val))
    if kind == "graph":
        box = dict(params)["box"]
        if len(resolution) != len(box):
            raise ConfigError("surface.resolution", "graph needs one node count per box length")
        try:
            parse_modes(dict(params)["f"], AXES["graph"][: len(box)])
        except ValueError as exc:
            raise ConfigError("surface.f", str(exc)) from None

    ini = section("initial")
    itype = ini.pop("type", "constant")
    if itype not in INITIAL_TYPES:
        raise ConfigError("initial.type", f"expected one of {INITIAL_TYPES}, got {itype!r}")
    allowed = {"constant": ("value",), "modes": ("modes",), "file": ("path",)}[itype]
    for key in ini:
        if key not in allowed:
            raise ConfigError(f"initial.{key}", f"not valid for type {itype!r}")
    if itype == "constant":
        initial = InitialCondition("constant", _number("initial.value", ini.get("value", "0.0")))
    elif itype == "modes":
        if "modes" not in ini:
            raise ConfigError("initial.modes", "missing")
        axes = AXES[kind] if kind != "graph" else AXES["graph"][: len(resolution)]
        try:
            parse_modes(ini["modes"], axes)
        except ValueError as exc:
            raise ConfigError("initial.modes", str(exc)) from None
        initial = InitialCondition("modes", modes=ini["modes"].strip())
    else:
        if "path" not in ini:
            raise ConfigError("initial.path", "missing")
        initial = InitialCondition("file", path=ini["path"].strip())

    fl = section("flow")
    kwargs = {}
    types = {f.name: f for f in fields(FlowConfig)}
    for key, raw in fl.items():
        if key not in types:
            raise ConfigError(f"flow.{key}", f"unknown key; allowed {tuple(types)}")
        default = getattr(FlowConfig(), key)
        if key in ("flow", "scheme", "solver"):
            kwargs[key] = raw.strip()
        elif key in ("solver_maxiter", "record_every", "snapshot_every"):
            kwargs[key] = _number(f"flow.{key}", raw, int)
        elif key == "stationary_tol" or isinstance(default, float):
            kwargs[key] = _number(f"flow.{key}", raw)
        else:  # pragma: no cover - every FlowConfig field is handled above
            raise ConfigError(f"flow.{key}", "unsupported")
    try:
        flow = FlowConfig(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = msg.split()[0]
        raise ConfigError(f"flow.{key}" if key in types else "flow", msg) from None

    out = section("output")
    for key in out:
        if key not in ("directory", "alpha", "fit", "preset"):
            raise ConfigError(f"output.{key}", "unknown key; allowed ('directory', 'alpha', 'fit', 'preset')")
    alpha = _number("output.alpha", out.get("alpha", "0.5"))
    if not 0 < alpha <= 1:
        raise ConfigError("output.alpha", "must lie in (0, 1]")
    return ExperimentConfig(
        kind=kind,
        params=tuple(params),
        resolution=resolution,
        initial=initial,
        flow=flow,
        directory=out.get("directory", "run").strip(),
        alpha=alpha,
        fit=_bool("output.fit", out.get("fit", "true")),
        preset=out.get("preset", "").strip(),
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


# -- presets --------------------------------------------------------------------------

_PRESETS = {
    "sphere_stability": (
        "sphere", (("r", 1.0),), (64, 32),
        InitialCondition("modes", modes="0.05*sin(theta)^2*cos(2*phi)"),
        FlowConfig(flow="willmore", scheme="imex", dt=1e-3, t_end=0.6, guard_fraction=0.8, record_every=10,
                   snapshot_every=100),
    ),
    "nonconvex_to_sphere": (
        "sphere", (("r", 1.0),), (64, 32),
        InitialCondition("modes", modes="0.04*sin(theta)^6*cos(6*phi)"),
        FlowConfig(flow="willmore", scheme="imex", dt=5e-4, t_end=0.4, guard_fraction=0.8, record_every=20,
                   snapshot_every=200),
    ),
    "cylinder_willmore": (
        "cylinder", (("r", 1.0), ("length", 2 * math.pi)), (128, 8),
        InitialCondition("constant", 0.0),
        FlowConfig(flow="willmore", scheme="imex", dt=1e-4, t_end=1.0, guard_fraction=0.8, record_every=100,
                   snapshot_every=2500),
    ),
    "cylinder_sdf_perturbed": (
        "cylinder", (("r", 1.0), ("length", 2 * math.pi)), (64, 32),
        InitialCondition("modes", modes="0.05*cos(2*x)"),
        FlowConfig(flow="sdf", scheme="imex", dt=1e-3, t_end=0.5, guard_fraction=0.8, record_every=10,
                   snapshot_every=100),
    ),
    "sphere_equilibrium": (
        "sphere", (("r", 1.0),), (64, 32),
        InitialCondition("constant", 0.0),
        FlowConfig(flow="willmore", scheme="imex", dt=1e-3, t_end=0.1, stationary_tol=0.0, record_every=10,
                   snapshot_every=50),
    ),
    "sdf_volume_check": (
        "circle", (("r", 1.0),), (128,),
        InitialCondition("modes", modes="0.2*cos(2*t)"),
        FlowConfig(flow="sdf", scheme="imex", dt=1e-5, t_end=0.05, record_every=50, snapshot_every=1000),
    ),
}

PRESETS = tuple(_PRESETS)


def preset(name: str) -> ExperimentConfig:
    """Fully specified config of a named acceptance experiment."""
    if name not in _PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    kind, params, res, initial, flow = _PRESETS[name]
    return ExperimentConfig(kind, params, res, initial, flow, directory=f"runs/{name}", preset=name)


# -- runner -----------------------------------------------------------------------------


@dataclass
class ExperimentOutcome:
    exit_code: int
    reason: str
    directory: Path | None
    result: object = None
    message: str = ""


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())


def run_experiment(cfg: ExperimentConfig, directory=None, *, base_dir=None) -> ExperimentOutcome:
    """Run a configured flow and write its artefacts.

    Writes ``config.ini`` (the echoed config), ``observables.csv``,
    ``snap_NNNN.obj`` meshes and ``summary.txt`` (a JSON object).  The exit
    code is 0 for ``completed``/``stationary``, 2 for ``guard``, 3 for
    ``solver_failure`` and 1 for configuration errors.
    """
    outdir = Path(directory if directory is not None else cfg.directory)
    try:
        surface = cfg.build_surface()
        rho0 = cfg.initial.field_values(surface, Path(base_dir) if base_dir else None)
    except ConfigError as exc:
        return ExperimentOutcome(EXIT_CONFIG, "config", None, message=str(exc))
    except (SurfaceError, ValueError, OSError) as exc:
        key = "initial" if isinstance(exc, OSError) else "surface"
        return ExperimentOutcome(EXIT_CONFIG, "config", None, message=f"{key}: {exc}")
    if not np.all(np.isfinite(rho0)) or float(np.abs(rho0).max()) >= surface.tubular_radius:
        return ExperimentOutcome(
            EXIT_CONFIG, "config", None,
            message=f"initial: sup|rho| = {float(np.abs(rho0).max()):.6g} is not below the tubular radius "
                    f"{surface.tubular_radius:.6g}",
        )
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.ini").write_text(to_ini(replace(cfg, directory=str(outdir))))

    start = time.perf_counter()
    try:
        result = run(rho0, surface, cfg.flow, observe=True, fit=cfg.fit, alpha=cfg.alpha)
    except AdmissibilityError as exc:  # pragma: no cover - run() converts these
        return ExperimentOutcome(EXIT_CODES["guard"], "guard", outdir, message=str(exc))
    wall = time.perf_counter() - start

    write_csv(outdir / "observables.csv", result.records)
    snaps = list(result.snapshots) if cfg.flow.snapshot_every else [(0.0, np.asarray(rho0, dtype=float))]
    if not snaps or snaps[-1][0] != result.state.t:
        snaps.append((result.state.t, result.state.rho))
    wrap = surface.mesh_wrap()
    for i, (_, rho) in enumerate(snaps):
        export_obj(outdir / f"snap_{i:04d}.obj", surface.points + rho[:, None] * surface.normal, surface.grid, wrap)
    margins = result.guard_margins
    every = cfg.flow.record_every
    summary = {
        "reason": result.reason,
        "message": result.message,
        "exit_code": EXIT_CODES[result.reason],
        "steps": result.steps,
        "t_final": result.state.t,
        "wall_time_s": wall,
        "tubular_radius": surface.tubular_radius,
        "guard_level": cfg.flow.guard_fraction * surface.tubular_radius,
        "guard_margin_final": margins[-1],
        "guard_margin_min": min(margins),
        "guard_margin_history": [[t, g] for k, (t, g) in enumerate(zip(result.times, margins))
                                 if k % every == 0 or k == len(margins) - 1],
        "snapshots": len(snaps),
    }
    (outdir / "summary.txt").write_text(json.dumps(summary, indent=2) + "\n")
    return ExperimentOutcome(EXIT_CODES[result.reason], result.reason, outdir, result, result.message)


@dataclass(frozen=True)
class ScanEntry:
    amplitude: float
    reason: str
    final_residual: float  # sphere-fit residual over fitted radius at the end of the run
    converged: bool


def amplitude_scan(cfg: ExperimentConfig, amplitudes, *, tol: float = 1e-4):
    """Rerun ``cfg`` with its initial height rescaled to each ``sup|rho|`` in ``amplitudes``.

    A run counts as converged when it ends ``completed`` or ``stationary``
    with a final fit residual below ``tol`` times the fitted radius.

    Returns
    -------
    entries : list of ScanEntry
        One per amplitude, in increasing order.
    largest : float or None
        Largest amplitude below which every scanned amplitude converged.
    """
    surface = cfg.build_surface()
    shape = cfg.initial.field_values(surface)
    peak = float(np.abs(shape).max())
    if peak == 0.0:
        raise ConfigError("initial", "amplitude scan needs a non-zero initial shape")
    shape = shape / peak
    entries = []
    for amp in sorted(float(a) for a in amplitudes):
        if amp >= surface.tubular_radius:
            entries.append(ScanEntry(amp, "config", math.nan, False))
            continue
        result = run(amp * shape, surface, cfg.flow, observe=True, fit=True, alpha=cfg.alpha)
        fit = result.records[-1].sphere_fit if result.records else None
        resid = fit.residual / fit.radius if fit is not None else math.nan
        ok = result.reason in ("completed", "stationary") and resid < tol
        entries.append(ScanEntry(amp, result.reason, resid, ok))
    largest = None
    for e in entries:
        if not e.converged:
            break
        largest = e.amplitude
    return entries, largest


def config_from_text_or_path(source) -> ExperimentConfig:
    """Accept a path or raw INI text (anything containing a newline)."""
    if isinstance(source, str) and "\n" in source:
        return parse_config(source)
    return load_config(source)


def thread_cap_from_env(var: str = "NORMALGRAPH_THREADS") -> int | None:
    """Read a thread cap from the environment; ``None`` when unset."""
    raw = os.environ.get(var)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(var, f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(var, "must be at least 1")
    return n
