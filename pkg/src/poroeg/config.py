"""Flat ``section.key = value unit`` configuration files.

Every dimensioned quantity must carry an explicit unit; values are stored in
SI.  Unknown keys are rejected before anything is computed.

Example::

    scenario = terzaghi
    method = EG
    material.K = 1000 kPa
    material.mu = 1e-6 kPa.s
    time.outputs = 25, 50, 100, 250 s
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

UNITS = {
    "pressure": {"Pa": 1.0, "kPa": 1e3, "MPa": 1e6, "GPa": 1e9},
    "area": {"m2": 1.0, "mm2": 1e-6, "D": 9.869233e-13, "mD": 9.869233e-16},
    "time": {"s": 1.0, "min": 60.0, "h": 3600.0, "d": 86400.0},
    "viscosity": {"Pa.s": 1.0, "kPa.s": 1e3, "mPa.s": 1e-3, "cP": 1e-3},
    "compressibility": {"1/Pa": 1.0, "1/kPa": 1e-3, "1/MPa": 1e-6, "1/GPa": 1e-9},
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3},
    "density": {"kg/m3": 1.0},
    "mobility": {"s": 1.0},
    "mobility2": {"s2": 1.0},
    "massflux": {"kg/m2/s": 1.0},
}
SI_UNIT = {dim: next(u for u, f in table.items() if f == 1.0) for dim, table in UNITS.items()}

SCENARIOS = ("poisson_convergence", "terzaghi", "two_layer", "structured_2d", "random_2d", "random_3d", "custom")
METHODS = ("CG", "EG", "DG")

# key -> (type, dimension); type is one of str, int, float, bool, floats, ints
SCHEMA = {
    "scenario": ("str", None),
    "method": ("str", None),
    "degree": ("int", None),
    "coupling": ("str", None),
    "seed": ("int", None),
    "output.dir": ("str", None),
    "output.vtk": ("bool", None),
    "output.matrices": ("bool", None),
    "mesh.dim": ("int", None),
    "mesh.nx": ("int", None),
    "mesh.ny": ("int", None),
    "mesh.nz": ("int", None),
    "mesh.lx": ("float", "length"),
    "mesh.ly": ("float", "length"),
    "mesh.lz": ("float", "length"),
    "mesh.levels": ("ints", None),
    "mesh.file": ("str", None),
    "poisson.degrees": ("ints", None),
    "poisson.methods": ("strs", None),
    "material.K": ("float", "pressure"),
    "material.nu": ("float", None),
    "material.alpha": ("float", None),
    "material.K_s": ("float", "pressure"),
    "material.phi": ("float", None),
    "material.c_f": ("float", "compressibility"),
    "material.rho": ("float", "density"),
    "material.mu": ("float", "viscosity"),
    "material.k": ("float", "area"),
    "material.k2": ("float", "area"),
    "material.kappa_r": ("float", "mobility"),
    "random.phi_mean": ("float", None),
    "random.phi_var": ("float", None),
    "random.phi_min": ("float", None),
    "random.phi_max": ("float", None),
    "random.kappa_mean": ("float", "mobility"),
    "random.kappa_var": ("float", "mobility2"),
    "random.kappa_min": ("float", "mobility"),
    "random.kappa_max": ("float", "mobility"),
    "random.fields_file": ("str", None),
    "geometry.interface": ("float", "length"),
    "geometry.band_min": ("float", "length"),
    "geometry.band_max": ("float", "length"),
    "bc.sigma": ("float", "pressure"),
    "bc.sigma_x": ("float", "pressure"),
    "bc.sigma_y": ("float", "pressure"),
    "bc.p_D": ("float", "pressure"),
    "bc.p0": ("float", "pressure"),
    "bc.q_D": ("float", "massflux"),
    "bc.outlet": ("str", None),
    "solver.beta": ("float", None),
    "solver.xi": ("float", None),
    "solver.max_iter": ("int", None),
    "solver.relative": ("bool", None),
    "solver.zeta_unit": ("float", "pressure"),
    "solver.penalty": ("str", None),
    "time.dt": ("float", "time"),
    "time.tau": ("float", "time"),
    "time.outputs": ("floats", "time"),
}

POSITIVE = {"material.K", "material.K_s", "material.rho", "material.mu", "material.k", "material.k2",
            "material.kappa_r", "time.dt", "time.tau", "solver.xi", "solver.zeta_unit", "solver.max_iter",
            "mesh.nx", "mesh.ny", "mesh.nz", "mesh.lx", "mesh.ly", "mesh.lz", "random.kappa_mean", "solver.beta"}
NON_NEGATIVE = {"material.c_f", "random.phi_var", "random.kappa_var", "random.kappa_min", "bc.sigma",
                "bc.sigma_x", "bc.sigma_y", "seed"}
UNIT_INTERVAL = {"material.phi", "random.phi_mean", "random.phi_min", "random.phi_max"}


class ConfigError(ValueError):
    pass


def _parse_number(text, key):
    t = text.strip()
    if t.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as a number") from None


def _split_unit(text, key, dim):
    parts = text.rsplit(None, 1)
    table = UNITS[dim]
    if len(parts) == 2 and parts[1] in table:
        return parts[0], table[parts[1]]
    if len(parts) == 2 and not _looks_numeric(parts[1]):
        raise ConfigError(f"{key}: unknown unit {parts[1]!r}; expected one of {sorted(table)}")
    raise ConfigError(f"{key}: a unit is required ({', '.join(sorted(table))})")


def _looks_numeric(s):
    try:
        float(s.rstrip(","))
        return True
    except ValueError:
        return s.lower() in ("inf", "infinity")


def convert_value(key, text):
    """Typed SI value of one ``key = text`` entry."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    kind, dim = SCHEMA[key]
    text = text.strip()
    if kind == "str":
        if not text:
            raise ConfigError(f"{key}: empty value")
        return text
    if kind == "strs":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    if kind in ("int", "ints"):
        try:
            vals = tuple(int(s) for s in text.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected integer value(s), got {text!r}") from None
        return vals if kind == "ints" else _single(vals, key)
    scale = 1.0
    if dim is not None:
        text, scale = _split_unit(text, key, dim)
    vals = tuple(_parse_number(s, key) * scale for s in text.split(",") if s.strip())
    if not vals:
        raise ConfigError(f"{key}: empty value")
    return vals if kind == "floats" else _single(vals, key)


def _single(vals, key):
    if len(vals) != 1:
        raise ConfigError(f"{key}: expected a single value")
    return vals[0]


def format_value(key, value):
    """Inverse of :func:`convert_value` (SI units, round-trip exact)."""
    kind, dim = SCHEMA[key]
    unit = "" if dim is None else " " + SI_UNIT[dim]
    if kind in ("str",):
        return str(value)
    if kind == "strs":
        return ", ".join(value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int":
        return str(int(value))
    if kind == "ints":
        return ", ".join(str(int(v)) for v in value)
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value) + unit
    return repr(float(value)) + unit


@dataclass
class SimulationConfig:
    """Validated settings; ``values`` maps keys to SI values (defaults filled)."""
    values: Dict[str, object] = field(default_factory=dict)
    explicit: frozenset = frozenset()

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __contains__(self, key):
        return key in self.values

    @property
    def scenario(self):
        return self.values["scenario"]

    @property
    def method(self):
        return self.values.get("method", "EG")

    def override(self, key, value):
        raw = {k: v for k, v in self.values.items() if k in self.explicit}
        raw[key] = value
        return build_config(raw)

    def serialize(self):
        """Explicit entries only, so defaults are re-derived on parse."""
        lines = [f"{k} = {format_value(k, self.values[k])}" for k in sorted(self.explicit)]
        return "\n".join(lines) + "\n"

    def digest(self):
        text = "\n".join(f"{k} = {format_value(k, v)}" for k, v in sorted(self.values.items()) if v is not None)
        return hashlib.sha256(text.encode()).hexdigest()


def parse_text(text) -> SimulationConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = convert_value(key, val)
    return build_config(raw)


def parse_config(path) -> SimulationConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text)


def _check_range(key, v):
    if isinstance(v, tuple):
        for x in v:
            _check_range(key, x)
        return
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        return
    if math.isnan(v):
        raise ConfigError(f"{key}: NaN is not allowed")
    if key in POSITIVE and not v > 0:
        raise ConfigError(f"{key}: must be > 0 (got {v})")
    if key in NON_NEGATIVE and v < 0:
        raise ConfigError(f"{key}: must be >= 0 (got {v})")
    if key in UNIT_INTERVAL and not 0 < v < 1:
        raise ConfigError(f"{key}: must lie in (0, 1) (got {v})")
    if key == "material.nu" and not 0 < v < 0.5:
        raise ConfigError(f"{key}: must lie in (0, 0.5) (got {v})")
    if key == "material.alpha" and not 0 <= v <= 1:
        raise ConfigError(f"{key}: must lie in [0, 1] (got {v})")


def build_config(raw: Mapping[str, object]) -> SimulationConfig:
    """Validate explicit entries and fill scenario defaults."""
    from .scenarios import scenario_defaults

    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
    if "scenario" not in raw:
        raise ConfigError("missing required key 'scenario'")
    scen = raw["scenario"]
    if scen not in SCENARIOS:
        raise ConfigError(f"scenario: must be one of {SCENARIOS} (got {scen!r})")
    method = str(raw.get("method", "EG")).upper()
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {METHODS} (got {raw.get('method')!r})")
    raw = dict(raw)
    if "method" in raw:
        raw["method"] = method
    if raw.get("coupling", "independent") not in ("independent", "dependent"):
        raise ConfigError(f"coupling: must be 'independent' or 'dependent' (got {raw['coupling']!r})")
    if raw.get("solver.penalty", "trace") not in ("trace", "literal"):
        raise ConfigError(f"solver.penalty: must be 'trace' or 'literal' (got {raw['solver.penalty']!r})")
    for key, v in raw.items():
        _check_range(key, v)
    values = dict(scenario_defaults(scen, method))
    values.update(raw)
    if "material.alpha" in raw and "material.K_s" in raw:
        raise ConfigError("material.alpha and material.K_s are mutually exclusive")
    if "material.K_s" in raw:
        values.pop("material.alpha", None)
    elif "material.alpha" in values:
        values.pop("material.K_s", None)
    for key, v in values.items():
        _check_range(key, v)
    if values.get("mesh.dim", 2) not in (2, 3):
        raise ConfigError(f"mesh.dim: must be 2 or 3 (got {values['mesh.dim']})")
    if "time.dt" in values and "time.tau" in values:
        n = values["time.tau"] / values["time.dt"]
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ConfigError("time.tau: must be a positive whole multiple of time.dt")
    if values.get("random.phi_min", 0) >= values.get("random.phi_max", 1):
        raise ConfigError("random.phi_min: must be below random.phi_max")
    if values.get("random.kappa_min", 0) >= values.get("random.kappa_max", math.inf):
        raise ConfigError("random.kappa_min: must be below random.kappa_max")
    return SimulationConfig(values, frozenset(raw))
