"""Experiment configuration: plain INI text, validated into a typed object.

Configs are diffable key-value sections.  Parsing and serialization are
semantically idempotent: ``parse(serialize(parse(text)))`` equals
``parse(text)``.  The canonical serialized form (sorted sections and
keys) is what gets hashed into the run manifest.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from typing import Optional

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config",
           "default_config", "FAMILIES"]

FAMILIES = ("svm-closure", "field-quantization", "hybrid-dynamics",
            "ehrenfest", "berry-loop")

_REQUIRED_SECTIONS = ("experiment", "physical", "lattice", "modes",
                      "integrator", "ensemble", "output")


class ConfigError(ValueError):
    """Names the offending field and the violated constraint."""


@dataclass
class ExperimentConfig:
    family: str
    physical: dict[str, float]
    lattice_dims: tuple[int, ...]
    lattice_spacing: float
    scalar_analog: bool
    modes_keep: int
    dt: float
    steps: int
    tolerance: float
    paths: int
    seed: int
    output_directory: str
    output_formats: tuple[str, ...]
    protocol: Optional[dict] = None
    extras: dict[str, dict[str, str]] = field(default_factory=dict)

    def canonical_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"family": self.family}
        cp["physical"] = {k: _fmt(v) for k, v in sorted(self.physical.items())}
        cp["lattice"] = {
            "dims": " ".join(str(d) for d in self.lattice_dims),
            "spacing": _fmt(self.lattice_spacing),
            "scalar_analog": str(self.scalar_analog).lower(),
        }
        cp["modes"] = {"keep": str(self.modes_keep)}
        cp["integrator"] = {"dt": _fmt(self.dt), "steps": str(self.steps),
                            "tolerance": _fmt(self.tolerance)}
        cp["ensemble"] = {"paths": str(self.paths), "seed": str(self.seed)}
        if self.protocol is not None:
            cp["protocol"] = {k: _fmt_any(v) for k, v in sorted(self.protocol.items())}
        cp["output"] = {"directory": self.output_directory,
                        "formats": " ".join(self.output_formats)}
        for sec, kv in sorted(self.extras.items()):
            cp[sec] = dict(sorted(kv.items()))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def replaced(self, section: str, key: str, value: str) -> "ExperimentConfig":
        """New config with one scalar field overridden (used by sweeps)."""
        cp = configparser.ConfigParser()
        cp.read_string(self.canonical_text())
        if not cp.has_section(section) or key not in cp[section]:
            raise ConfigError(f"{section}.{key}: no such config field")
        cp[section][key] = value
        buf = io.StringIO()
        cp.write(buf)
        return parse_config(buf.getvalue())


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _fmt_any(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt_any(x) for x in v)
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def _get(cp: configparser.ConfigParser, section: str, key: str) -> str:
    try:
        return cp[section][key]
    except KeyError:
        raise ConfigError(f"{section}.{key}: required field is missing") from None


def _get_float(cp, section, key, positive=False, nonnegative=False) -> float:
    raw = _get(cp, section, key)
    try:
        val = float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: not a number ({raw!r})") from None
    if positive and not val > 0:
        raise ConfigError(f"{section}.{key}: must be > 0, got {val}")
    if nonnegative and val < 0:
        raise ConfigError(f"{section}.{key}: must be >= 0, got {val}")
    return val


def _get_int(cp, section, key, minimum=None) -> int:
    raw = _get(cp, section, key)
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: not an integer ({raw!r})") from None
    if minimum is not None and val < minimum:
        raise ConfigError(f"{section}.{key}: must be >= {minimum}, got {val}")
    return val


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    for sec in _REQUIRED_SECTIONS:
        if not cp.has_section(sec):
            raise ConfigError(f"{sec}: required section is missing")
    family = _get(cp, "experiment", "family")
    if family not in FAMILIES:
        raise ConfigError(f"experiment.family: unknown family {family!r}; "
                          f"expected one of {', '.join(FAMILIES)}")

    physical = {}
    for key in cp["physical"]:
        val = _get_float(cp, "physical", key)
        if key != "charge" and val <= 0:
            raise ConfigError(f"physical.{key}: must be > 0, got {val}")
        physical[key] = val
    for key in ("hbar", "c", "mass"):
        if key not in physical:
            raise ConfigError(f"physical.{key}: required field is missing")
    physical.setdefault("charge", 0.0)

    dims_raw = _get(cp, "lattice", "dims").split()
    try:
        dims = tuple(int(d) for d in dims_raw)
    except ValueError:
        raise ConfigError(f"lattice.dims: not integers ({dims_raw})") from None
    if not dims or any(d < 1 for d in dims):
        raise ConfigError(f"lattice.dims: site counts must be positive, got {dims}")
    spacing = _get_float(cp, "lattice", "spacing", positive=True)
    scalar_analog = cp.getboolean("lattice", "scalar_analog", fallback=len(dims) == 1)

    keep = _get_int(cp, "modes", "keep", minimum=0)
    dt = _get_float(cp, "integrator", "dt", positive=True)
    steps = _get_int(cp, "integrator", "steps", minimum=1)
    tolerance = _get_float(cp, "integrator", "tolerance", positive=True)
    paths = _get_int(cp, "ensemble", "paths", minimum=1)
    seed = _get_int(cp, "ensemble", "seed")

    protocol = None
    if family == "berry-loop":
        if not cp.has_section("protocol"):
            raise ConfigError("protocol: required section is missing for berry-loop")
        kind = _get(cp, "protocol", "kind")
        if kind not in ("circle", "ellipse", "segment"):
            raise ConfigError(f"protocol.kind: unknown loop kind {kind!r}")
        protocol = {
            "kind": kind,
            "center": tuple(float(x) for x in _get(cp, "protocol", "center").split()),
            "radii": tuple(float(x) for x in _get(cp, "protocol", "radii").split()),
            "period": _get_float(cp, "protocol", "period", positive=True),
            "samples": _get_int(cp, "protocol", "samples", minimum=16),
        }

    outdir = _get(cp, "output", "directory")
    formats = tuple(_get(cp, "output", "formats").split())
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"output.formats: unknown format {f!r}")

    extras = {}
    known = set(_REQUIRED_SECTIONS) | {"protocol"}
    for sec in cp.sections():
        if sec not in known:
            extras[sec] = dict(cp[sec])

    return ExperimentConfig(
        family=family, physical=physical, lattice_dims=dims,
        lattice_spacing=spacing, scalar_analog=scalar_analog, modes_keep=keep,
        dt=dt, steps=steps, tolerance=tolerance, paths=paths, seed=seed,
        output_directory=outdir, output_formats=formats, protocol=protocol,
        extras=extras,
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def default_config(family: str) -> ExperimentConfig:
    """Benchmark configuration for each experiment family."""
    if family not in FAMILIES:
        raise ConfigError(f"experiment.family: unknown family {family!r}")
    base = {
        "svm-closure": """
[experiment]
family = svm-closure
[physical]
hbar = 1.0
c = 1.0
mass = 1.0
charge = 0.0
omega_trap = 1.0
displacement = 1.0
[lattice]
dims = 16
spacing = 1.0
scalar_analog = true
[modes]
keep = 1
[integrator]
dt = 0.005
steps = 1260
tolerance = 0.05
[ensemble]
paths = 100000
seed = 20250809
[output]
directory = runs/svm-closure
formats = csv json
""",
        "field-quantization": """
[experiment]
family = field-quantization
[physical]
hbar = 1.0
c = 1.0
mass = 1.0
charge = 0.0
[lattice]
dims = 4 4 4
spacing = 1.0
scalar_analog = false
[modes]
keep = 0
[integrator]
dt = 0.01
steps = 1
tolerance = 1e-10
[ensemble]
paths = 20
seed = 20250809
[output]
directory = runs/field-quantization
formats = csv json
""",
        "hybrid-dynamics": """
[experiment]
family = hybrid-dynamics
[physical]
hbar = 1.0
c = 1.0
mass = 1.0
charge = 0.2
omega_trap = 0.55
f0 = 0.4
[lattice]
dims = 16
spacing = 1.0
scalar_analog = true
[modes]
keep = 1
[integrator]
dt = 0.01
steps = 10000
tolerance = 1e-6
[ensemble]
paths = 1
seed = 20250809
[output]
directory = runs/hybrid-dynamics
formats = csv json
""",
        "ehrenfest": """
[experiment]
family = ehrenfest
[physical]
hbar = 1.0
c = 1.0
mass = 1.0
charge = 0.3
omega_trap = 0.55
f0 = 0.5
[lattice]
dims = 16
spacing = 1.0
scalar_analog = true
[modes]
keep = 1
[integrator]
dt = 0.0008
steps = 10000
tolerance = 1e-6
[ensemble]
paths = 1
seed = 20250809
[output]
directory = runs/ehrenfest
formats = csv json
""",
        "berry-loop": """
[experiment]
family = berry-loop
[physical]
hbar = 1.0
c = 1.0
mass = 1.0
charge = 0.001
omega_mode = 1.0
kappa = 0.4
[lattice]
dims = 16
spacing = 1.0
scalar_analog = true
[modes]
keep = 1
[integrator]
dt = 0.02
steps = 5120
tolerance = 0.01
[ensemble]
paths = 1
seed = 20250809
[protocol]
kind = circle
center = 0.0 0.0
radii = 1.4 1.4
period = 100.0
samples = 256
[output]
directory = runs/berry-loop
formats = csv json
""",
    }[family]
    return parse_config(base)
