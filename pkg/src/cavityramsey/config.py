"""YAML configuration: strict schema, single unit-conversion seam, manifest.

Files use ordinary frequencies (``*_hz`` keys, converted to rad/s exactly
once while building the parameter objects) and SI seconds (``*_s``).  The
parser rejects unknown keys and duplicate keys (with line numbers), fills
documented defaults for everything omitted, and keeps the fully populated
mapping so that ``emit_config`` -> ``parse_config`` reproduces the same
objects bit for bit.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .experiments import ExperimentConfig, ExperimentError, LossModel
from .integrator import IntegratorConfig
from .params import (PhysicalParams, TWO_PI, doppler_sigma_from_temperature)


class ConfigError(ValueError):
    pass


# ----- strict YAML loading ----------------------------------------------

class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys, reporting lines."""


def _construct_mapping(loader: _StrictLoader, node: yaml.MappingNode):
    seen: dict = {}
    for key_node, _value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in seen:
            raise ConfigError(
                f"duplicate key {key!r} at line {key_node.start_mark.line + 1} "
                f"(first occurrence at line {seen[key] + 1})"
            )
        seen[key] = key_node.start_mark.line
    return loader.construct_mapping(node, deep=True)


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _load_yaml(text: str):
    try:
        return yaml.load(text, Loader=_StrictLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc


# ----- schema ------------------------------------------------------------

# section -> key -> default.  None means "absent unless given".
_SCHEMA: dict[str, dict[str, object]] = {
    "physical": {
        "kappa_hz": 780e3,
        "g_hz": 450.0,
        "n_atoms": 2e7,
        "rabi_hz": 833.333e3,
        "delta_a_hz": 0.0,
        "delta_cavity_hz": 0.0,
        "lifetime_s": 22e-6,          # .inf disables spontaneous decay
        "temperature_uk": None,       # exclusive with doppler_sigma_hz
        "doppler_sigma_hz": None,
        "coupling_efficiency": 1.0,
    },
    "grid": {
        "n_phase": 16,
        "n_doppler": 6,
    },
    "integrator": {
        "rel_tol": 1e-8,
        "abs_tol": 1e-10,
        "max_step_s": math.inf,
        "initial_step_s": None,
        "method": "dp54",
    },
    "protocol": {
        "frame": "atom",
        "sample_dt_s": 2e-8,
        "readout_s": 10e-6,
        "pulse_area_over_pi": 1.0,
        "tau_pulse_s": 300e-9,
        "ramsey_time_s": 5e-6,
        "ramsey_spacing": "center",
        "floor_fraction": 0.01,
    },
    "lock": {
        "servo_gain": 0.5,
        "step_fraction": 0.1,
        "n_pulses": 108,
        "initial_offset_hz": 0.0,
        "laser_noise_hz": 0.0,
        "rng_seed": 0,
        "mode": "interp",
    },
    "recycle": {
        "loss_mode": "pulsed-ramsey",
        "tau_loss_s": None,
        "cycle_time_s": 2e-3,
        "n_min_atoms": 1e3,
    },
    "scan": {
        "pulse_areas_over_pi": None,  # null -> default 21-point grid
        "detunings_hz": None,         # null -> default two-tier grid
        "n_sequences": 120,
    },
    "threads": 1,                     # top-level scalar
}

# default Doppler source when neither width key is given
_DEFAULT_TEMPERATURE_UK = 2.0


def _normalize(value):
    """Undo the YAML 1.1 quirk that leaves '780e3' (signless exponent) a string."""
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            pass
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    return value


def _merge_defaults(data: dict) -> tuple[dict, list[str]]:
    """Validate ``data`` against the schema; return (full mapping, defaulted keys)."""
    if not isinstance(data, dict):
        raise ConfigError(f"top level must be a mapping, got {type(data).__name__}")
    data = _normalize(data)
    out: dict = {}
    defaulted: list[str] = []
    for section, spec in _SCHEMA.items():
        if not isinstance(spec, dict):          # top-level scalar
            if section in data:
                out[section] = data[section]
            else:
                out[section] = spec
                defaulted.append(section)
            continue
        given = data.get(section, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in given:
            if key not in spec:
                raise ConfigError(f"unknown key {section}.{key!r}")
        filled = {}
        for key, default in spec.items():
            if key in given:
                filled[key] = given[key]
            else:
                filled[key] = default
                if default is not None:
                    defaulted.append(f"{section}.{key}")
        out[section] = filled
    for key in data:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
    return out, defaulted


def _label(section: str, key: str) -> str:
    return f"{section}.{key}" if key else section


def _number(section: str, key: str, value, allow_none: bool = False) -> float:
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{_label(section, key)} must be a number, got {value!r}")
    return float(value)


def _integer(section: str, key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{_label(section, key)} must be an integer, got {value!r}")
    return int(value)


def _string(section: str, key: str, value) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{_label(section, key)} must be a string, got {value!r}")
    return value


def _number_list(section: str, key: str, value) -> np.ndarray | None:
    if value is None:
        return None
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{section}.{key} must be a non-empty list or null")
    out = [_number(section, key, v) for v in value]
    return np.asarray(out, dtype=float)


# ----- building the runtime objects -------------------------------------

@dataclass(eq=False)
class ConfigBundle:
    """Parsed configuration: runtime objects plus the canonical mapping."""
    experiment: ExperimentConfig
    pulse_areas_over_pi: np.ndarray | None
    detunings_hz: np.ndarray | None
    n_sequences: int
    raw: dict                      # fully populated, config units
    defaulted: list[str]           # keys filled from schema defaults

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _build_physical(sec: dict) -> PhysicalParams:
    lifetime = _number("physical", "lifetime_s", sec["lifetime_s"])
    if lifetime <= 0.0:
        raise ConfigError(f"physical.lifetime_s must be positive, got {lifetime}")
    gamma = 0.0 if math.isinf(lifetime) else 1.0 / lifetime
    temp = _number("physical", "temperature_uk", sec["temperature_uk"], allow_none=True)
    sigma_hz = _number("physical", "doppler_sigma_hz", sec["doppler_sigma_hz"],
                       allow_none=True)
    if temp is not None and sigma_hz is not None:
        raise ConfigError(
            "physical.temperature_uk and physical.doppler_sigma_hz are exclusive; "
            "give one or neither"
        )
    if sigma_hz is not None:
        doppler = TWO_PI * sigma_hz
    else:
        if temp is None:
            temp = _DEFAULT_TEMPERATURE_UK
        if temp < 0.0:
            raise ConfigError(f"physical.temperature_uk must be >= 0, got {temp}")
        doppler = doppler_sigma_from_temperature(temp * 1e-6)
    try:
        return PhysicalParams(
            kappa=TWO_PI * _number("physical", "kappa_hz", sec["kappa_hz"]),
            gamma=gamma,
            g_max=TWO_PI * _number("physical", "g_hz", sec["g_hz"]),
            n_atoms=_number("physical", "n_atoms", sec["n_atoms"]),
            rabi=TWO_PI * _number("physical", "rabi_hz", sec["rabi_hz"]),
            delta_a=TWO_PI * _number("physical", "delta_a_hz", sec["delta_a_hz"]),
            delta_cavity=TWO_PI * _number("physical", "delta_cavity_hz",
                                          sec["delta_cavity_hz"]),
            doppler_sigma=doppler,
            coupling_efficiency=_number("physical", "coupling_efficiency",
                                        sec["coupling_efficiency"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_integrator(sec: dict) -> IntegratorConfig:
    try:
        return IntegratorConfig(
            rel_tol=_number("integrator", "rel_tol", sec["rel_tol"]),
            abs_tol=_number("integrator", "abs_tol", sec["abs_tol"]),
            max_step=_number("integrator", "max_step_s", sec["max_step_s"]),
            initial_step=_number("integrator", "initial_step_s",
                                 sec["initial_step_s"], allow_none=True),
            method=_string("integrator", "method", sec["method"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ConfigBundle:
    """Parse YAML text into runtime objects (empty text = all defaults)."""
    data = _load_yaml(text)
    if data is None:
        data = {}
    return build_config(data)


def build_config(data: dict) -> ConfigBundle:
    full, defaulted = _merge_defaults(data)
    params = _build_physical(full["physical"])
    integ = _build_integrator(full["integrator"])
    grid = full["grid"]
    proto = full["protocol"]
    lock = full["lock"]
    rec = full["recycle"]
    tau_loss = _number("recycle", "tau_loss_s", rec["tau_loss_s"], allow_none=True)
    try:
        loss = LossModel(mode=_string("recycle", "loss_mode", rec["loss_mode"]),
                         tau_loss=tau_loss)
        experiment = ExperimentConfig(
            params=params,
            n_phase=_integer("grid", "n_phase", grid["n_phase"]),
            n_doppler=_integer("grid", "n_doppler", grid["n_doppler"]),
            frame=_string("protocol", "frame", proto["frame"]),
            integrator=integ,
            sample_dt=_number("protocol", "sample_dt_s", proto["sample_dt_s"]),
            readout=_number("protocol", "readout_s", proto["readout_s"]),
            pulse_area_over_pi=_number("protocol", "pulse_area_over_pi",
                                       proto["pulse_area_over_pi"]),
            tau_pulse=_number("protocol", "tau_pulse_s", proto["tau_pulse_s"]),
            ramsey_time=_number("protocol", "ramsey_time_s", proto["ramsey_time_s"]),
            ramsey_spacing=_string("protocol", "ramsey_spacing",
                                   proto["ramsey_spacing"]),
            floor_fraction=_number("protocol", "floor_fraction",
                                   proto["floor_fraction"]),
            servo_gain=_number("lock", "servo_gain", lock["servo_gain"]),
            step_fraction=_number("lock", "step_fraction", lock["step_fraction"]),
            n_pulses=_integer("lock", "n_pulses", lock["n_pulses"]),
            initial_offset_hz=_number("lock", "initial_offset_hz",
                                      lock["initial_offset_hz"]),
            laser_noise_hz=_number("lock", "laser_noise_hz", lock["laser_noise_hz"]),
            rng_seed=_integer("lock", "rng_seed", lock["rng_seed"]),
            lock_mode=_string("lock", "mode", lock["mode"]),
            loss=loss,
            cycle_time=_number("recycle", "cycle_time_s", rec["cycle_time_s"]),
            n_min_atoms=_number("recycle", "n_min_atoms", rec["n_min_atoms"]),
            threads=_integer("threads", "", full["threads"]),
        )
    except (ExperimentError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    areas = _number_list("scan", "pulse_areas_over_pi", full["scan"]["pulse_areas_over_pi"])
    detunings = _number_list("scan", "detunings_hz", full["scan"]["detunings_hz"])
    n_seq = _integer("scan", "n_sequences", full["scan"]["n_sequences"])
    if n_seq < 1:
        raise ConfigError("scan.n_sequences must be >= 1")
    return ConfigBundle(experiment, areas, detunings, n_seq, full, defaulted)


def load_config(path: str | Path) -> ConfigBundle:
    return parse_config(Path(path).read_text())


def set_key(data: dict, dotted: str, value_text: str) -> None:
    """Apply one ``--set section.key=value`` override to a raw mapping.

    The value text goes through the YAML scalar parser so numbers, lists
    and null behave as in a file.  Unknown paths are rejected here so typos
    fail before any work starts.
    """
    parts = dotted.split(".")
    spec: object = _SCHEMA
    for part in parts:
        if not isinstance(spec, dict) or part not in spec:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        spec = spec[part]
    if isinstance(spec, dict):
        raise ConfigError(f"{dotted!r} names a section, not a key")
    try:
        value = yaml.safe_load(value_text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {dotted!r}: {exc}") from exc
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r} conflicts with a scalar entry")
    node[parts[-1]] = value


def emit_config(bundle: ConfigBundle) -> str:
    """Canonical YAML with every key explicit; reparses to the same objects."""
    return yaml.safe_dump(_jsonable(bundle.raw), sort_keys=False,
                          default_flow_style=False)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [float(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(raw: dict) -> str:
    """sha256 of the sorted-key JSON form of the full mapping."""
    blob = json.dumps(_jsonable(raw), sort_keys=True, allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ----- run manifest ------------------------------------------------------

@dataclass(eq=False)
class RunManifest:
    command: str
    config_hash: str
    version: str = __version__
    created_utc: str = field(
        default_factory=lambda: _dt.datetime.now(_dt.timezone.utc)
        .isoformat(timespec="seconds"))
    wall_time_s: float = 0.0
    defaulted_keys: list[str] = field(default_factory=list)
    integrator: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    outputs: list[dict] = field(default_factory=list)

    def add_output(self, path: str | Path) -> None:
        p = Path(path)
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        self.outputs.append({"path": p.name, "bytes": p.stat().st_size,
                             "sha256": digest})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


class Stopwatch:
    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self._t0
        return False
