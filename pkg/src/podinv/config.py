"""Experiment configuration: INI files with five flat sections.

Every recognised key is listed in :data:`KEYS`; that table drives parsing,
validation of unknown keys and the ``--help`` text of the command line tool.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .inverse import STOP_RULES, ObjectiveConfig

KINDS = ("recover", "sweep-h", "sweep-lambda", "sweep-npod", "lambda-iter", "timing")
LETTERS_A_TO_O = tuple("ABCDEFGHIJKLMNO")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _words(s: str) -> tuple:
    return tuple(w for w in re.split(r"[\s]+", s.strip()) if w)


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("", "auto", "none") else float(s)


def _fraction(s: str) -> float:
    """Accept ``0.03125`` as well as ``1/32``."""
    num, sep, den = s.partition("/")
    return float(num) / float(den) if sep else float(s)


# (section, key) -> (parser, default text, help)
KEYS = {
    ("pde", "a"): (float, "1.0", "diffusion coefficient (constant, > 0)"),
    ("pde", "c"): (float, "0.0", "reaction coefficient (constant, >= 0)"),
    ("pde", "T"): (_fraction, "1.0", "final time"),
    ("pde", "dt"): (_fraction, "1/32", "time step; must divide T"),
    ("pde", "n_div"): (int, "32", "cells per side of the unit-square mesh (h = 1/n_div)"),
    ("snapshots", "sources"): (_words, " ".join(LETTERS_A_TO_O), "training sources, whitespace separated (A, circle:x1,x2,r, line:s, ring:theta, bitmap:path)"),
    ("snapshots", "include_differences"): (_bool, "true", "also use difference quotients as snapshots"),
    ("snapshots", "epsilon"): (float, "1e-4", "tail-energy threshold for the POD rank, in (0, 1)"),
    ("snapshots", "glyphs"): (str, "", "glyph file replacing the shipped letters (empty: shipped set)"),
    ("snapshots", "basis"): (str, "", "load a saved basis (.npz) instead of building one"),
    ("sensors", "k"): (int, "100", "sensors per side; k x k cell-centred grid (n = k^2)"),
    ("sensors", "sigma"): (float, "1e-3", "noise standard deviation"),
    ("sensors", "seed"): (int, "0", "base seed; trial i uses seed + i"),
    ("sensors", "noise"): (str, "gaussian", "noise law: gaussian or uniform"),
    ("inverse", "lambda"): (float, "1e-6", "Tikhonov weight"),
    ("inverse", "alpha"): (_opt_float, "auto", "gradient step; auto = 0.9 / (power-iteration estimate of L)"),
    ("inverse", "tol"): (float, "1e-5", "stopping tolerance"),
    ("inverse", "max_iter"): (int, "20000", "iteration cap"),
    ("inverse", "stop_rule"): (str, "relative-update", "one of " + ", ".join(STOP_RULES)),
    ("inverse", "outer_max"): (int, "20", "lambda-iter: maximum outer steps"),
    ("inverse", "outer_tol"): (float, "0.01", "lambda-iter: relative change of ||f|| that ends the iteration"),
    ("experiment", "kind"): (str, "recover", "one of " + ", ".join(KINDS)),
    ("experiment", "engine"): (str, "pod", "forward engine for recover/sweeps/lambda-iter: pod or fem"),
    ("experiment", "truth"): (str, "A", "source to reconstruct (same notation as snapshots.sources)"),
    ("experiment", "trials"): (int, "1", "noisy trials per sweep point"),
    ("experiment", "values"): (str, "", "sweep grid; empty = default grid for the kind ('5:full' allowed for sweep-npod)"),
    ("experiment", "reference_n_div"): (int, "64", "sweep-h: mesh used for the reference data S f*"),
    ("experiment", "workers"): (int, "1", "threads for independent trials"),
    ("experiment", "output"): (str, "podinv-out", "output directory; relative paths resolve against $PODINV_OUTPUT_ROOT"),
}

SECTIONS = ("pde", "snapshots", "sensors", "inverse", "experiment")


def describe_keys() -> str:
    """Plain-text listing of every configuration key, for ``--help``."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for (s, k), (_, default, text) in KEYS.items():
            if s == sec:
                lines.append(f"  {k} = {default}\n      {text}")
    return "\n".join(lines)


@dataclass
class PdeConfig:
    a: float = 1.0
    c: float = 0.0
    T: float = 1.0
    dt: float = 1.0 / 32
    n_div: int = 32


@dataclass
class SnapshotConfig:
    sources: tuple = LETTERS_A_TO_O
    include_differences: bool = True
    epsilon: float = 1e-4
    glyphs: str = ""
    basis: str = ""


@dataclass
class SensorConfig:
    k: int = 100
    sigma: float = 1e-3
    seed: int = 0
    noise: str = "gaussian"


@dataclass
class ExperimentSection:
    kind: str = "recover"
    engine: str = "pod"
    truth: str = "A"
    trials: int = 1
    values: str = ""
    reference_n_div: int = 64
    workers: int = 1
    output: str = "podinv-out"


@dataclass
class ExperimentConfig:
    pde: PdeConfig = field(default_factory=PdeConfig)
    snapshots: SnapshotConfig = field(default_factory=SnapshotConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    inverse: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    outer_max: int = 20
    outer_tol: float = 0.01
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self) -> "ExperimentConfig":
        p, s, e = self.pde, self.snapshots, self.experiment
        if p.T <= 0 or p.dt <= 0:
            raise ConfigError("pde.T and pde.dt must be positive")
        m = round(p.T / p.dt)
        if m < 1 or abs(m * p.dt - p.T) > 1e-9 * p.T:
            raise ConfigError(f"pde.dt={p.dt!r} does not divide pde.T={p.T!r}")
        if p.n_div < 2:
            raise ConfigError("pde.n_div must be at least 2")
        if p.a <= 0 or p.c < 0:
            raise ConfigError("need pde.a > 0 and pde.c >= 0")
        if not 0.0 < s.epsilon < 1.0:
            raise ConfigError("snapshots.epsilon must lie in (0, 1)")
        if not s.sources and not s.basis:
            raise ConfigError("snapshots.sources is empty")
        if self.sensors.k < 2:
            raise ConfigError("sensors.k must be at least 2")
        if self.sensors.sigma < 0:
            raise ConfigError("sensors.sigma must be non-negative")
        if self.sensors.noise not in ("gaussian", "uniform"):
            raise ConfigError("sensors.noise must be gaussian or uniform")
        if e.kind not in KINDS:
            raise ConfigError(f"experiment.kind must be one of {', '.join(KINDS)}")
        if e.engine not in ("pod", "fem"):
            raise ConfigError("experiment.engine must be pod or fem")
        if e.trials < 1 or e.workers < 1:
            raise ConfigError("experiment.trials and experiment.workers must be >= 1")
        if self.outer_max < 1 or self.outer_tol <= 0:
            raise ConfigError("inverse.outer_max must be >= 1 and inverse.outer_tol > 0")
        return self


def _line_of(text: str, section: str, key: Optional[str]) -> Optional[int]:
    cur = None
    for no, ln in enumerate(text.splitlines(), 1):
        s = ln.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
            if key is None and cur == section:
                return no
        elif cur == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.I):
            return no
    return None


def _where(name: str, text: str, section: str, key: Optional[str] = None) -> str:
    no = _line_of(text, section, key)
    return f"{name}:{no}" if no else name


def parse_config(text: str, overrides=(), name: str = "<config>") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI ``text`` plus ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {name}: {exc}") from exc

    raw = {}
    known = {(s.lower(), k.lower()): (s, k) for s, k in KEYS}
    for sec in cp.sections():
        if sec.lower() not in SECTIONS:
            raise ConfigError(f"{_where(name, text, sec)}: unknown section [{sec}]")
        for key, val in cp.items(sec):
            ident = known.get((sec.lower(), key.lower()))
            if ident is None:
                raise ConfigError(f"{_where(name, text, sec, key)}: unknown key {sec}.{key}")
            raw[ident] = (val, _where(name, text, sec, key))
    for item in overrides:
        lhs, eq, val = item.partition("=")
        sec, dot, key = lhs.strip().partition(".")
        ident = known.get((sec.lower(), key.lower()))
        if not eq or not dot or ident is None:
            raise ConfigError(f"bad override {item!r}; expected section.key=value with a known key")
        raw[ident] = (val.strip(), f"--set {lhs.strip()}")

    values = {}
    for ident, (parse, default, _) in KEYS.items():
        text_val, where = raw.get(ident, (default, "default"))
        try:
            values[ident] = parse(text_val)
        except ValueError as exc:
            raise ConfigError(f"{where}: {ident[0]}.{ident[1]}: {exc}") from exc

    v = lambda s, k: values[(s, k)]  # noqa: E731
    try:
        inverse = ObjectiveConfig(
            lambda_n=v("inverse", "lambda"),
            alpha=v("inverse", "alpha"),
            tol=v("inverse", "tol"),
            max_iter=v("inverse", "max_iter"),
            stop_rule=v("inverse", "stop_rule"),
        )
    except ValueError as exc:
        raise ConfigError(f"[inverse]: {exc}") from exc
    cfg = ExperimentConfig(
        pde=PdeConfig(*(v("pde", k) for k in ("a", "c", "T", "dt", "n_div"))),
        snapshots=SnapshotConfig(*(v("snapshots", k) for k in ("sources", "include_differences", "epsilon", "glyphs", "basis"))),
        sensors=SensorConfig(*(v("sensors", k) for k in ("k", "sigma", "seed", "noise"))),
        inverse=inverse,
        outer_max=v("inverse", "outer_max"),
        outer_tol=v("inverse", "outer_tol"),
        experiment=ExperimentSection(
            *(v("experiment", k) for k in ("kind", "engine", "truth", "trials", "values", "reference_n_div", "workers", "output"))
        ),
    )
    return cfg.validate()


def load_config(path=None, overrides=(), profile: Optional[str] = None) -> ExperimentConfig:
    """Read a config file (or a shipped profile) and apply overrides.

    With neither ``path`` nor ``profile`` the built-in defaults are used.
    """
    if path is not None and profile is not None:
        raise ConfigError("give either a config file or a profile, not both")
    if profile is not None:
        res = resources.files("podinv").joinpath(f"configs/{profile}.ini")
        if not res.is_file():
            raise ConfigError(f"unknown profile {profile!r}; shipped: {', '.join(shipped_profiles())}")
        return parse_config(res.read_text(), overrides, name=f"profile:{profile}")
    if path is None:
        return parse_config("", overrides, name="<defaults>")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), overrides, name=str(p))


def shipped_profiles() -> list:
    d = resources.files("podinv").joinpath("configs")
    return sorted(x.name[:-4] for x in d.iterdir() if x.name.endswith(".ini"))
