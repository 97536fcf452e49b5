"""Experiment configuration: physical parameters, geometry, parsing.

The config file is a flat, line-oriented ``key = value`` document.  Keys are
prefixed by their section (``molecule.``, ``grating.``, ``geometry.``,
``source.``, ``detector.``, ``environment.``).  Values may carry one of the
whitelisted unit suffixes (``u``, ``W``, ``um``, ``m``, ``K``, ``A3_4pie0``,
``m2``, ``mps``); bare numbers are taken as SI.  Comments start with ``#``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from scipy.constants import atomic_mass, epsilon_0

from .errors import ConfigError

# Multiplicative conversion to SI per suffix.  A3_4pie0 converts a
# polarizability volume in cubic angstroms to C m^2/V.
_UNIT_FACTORS = {
    "u": atomic_mass,
    "W": 1.0,
    "um": 1e-6,
    "m": 1.0,
    "K": 1.0,
    "A3_4pie0": 4.0 * math.pi * epsilon_0 * 1e-30,
    "m2": 1.0,
    "mps": 1.0,
}


def parse_quantity(text: str) -> float:
    """Parse a number with an optional whitelisted unit suffix into SI."""
    text = text.strip()
    parts = text.split()
    if len(parts) == 2:
        num, suffix = parts
    elif len(parts) == 1:
        num = parts[0]
        suffix = ""
        for known in _UNIT_FACTORS:
            if num.endswith(known) and len(num) > len(known):
                cand = num[: -len(known)]
                try:
                    float(cand)
                except ValueError:
                    continue
                num, suffix = cand, known
                break
    else:
        raise ConfigError(f"cannot parse quantity {text!r}")
    if suffix and suffix not in _UNIT_FACTORS:
        raise ConfigError(f"unknown unit suffix {suffix!r} in {text!r}")
    try:
        value = float(num)
    except ValueError:
        raise ConfigError(f"cannot parse number in {text!r}") from None
    return value * _UNIT_FACTORS.get(suffix, 1.0)


def _require(cond: bool, field: str, bound: str) -> None:
    if not cond:
        raise ConfigError(f"invariant violation for {field!r}: requires {bound}")


@dataclass(frozen=True)
class MoleculeSpec:
    """Molecular mass, DUV optical response and photophysics branching."""

    mass: float           # kg
    alpha_duv: float      # C m^2/V, magnitude (sign has no observable effect)
    sigma_duv: float      # m^2
    phi_ic: float
    phi_isc: float
    phi_f: float
    p_dep: float
    lambda_f: float       # m

    def __post_init__(self):
        _require(self.mass > 0, "molecule.mass", "> 0")
        _require(self.sigma_duv >= 0, "molecule.sigma_duv", ">= 0")
        total = self.phi_ic + self.phi_isc + self.phi_f
        _require(abs(total - 1.0) <= 1e-12, "molecule.phi_ic+phi_isc+phi_f",
                 "= 1 within 1e-12")
        _require(0.0 <= self.p_dep <= 1.0, "molecule.p_dep", "in [0, 1]")
        _require(self.lambda_f > 0, "molecule.lambda_f", "> 0")
        # Diffraction is insensitive to the sign of the polarizability;
        # store the magnitude.
        object.__setattr__(self, "alpha_duv", abs(self.alpha_duv))


@dataclass(frozen=True)
class GratingSpec:
    """Standing-wave laser grating parameters."""

    lambda_l: float       # m
    power: float          # W
    waist_y: float        # m
    height: float         # m, vertical center of the laser spot
    reflectivity: float   # dimensionless, 0..1

    def __post_init__(self):
        _require(self.lambda_l > 0, "grating.lambda_l", "> 0")
        _require(self.power >= 0, "grating.power", ">= 0")
        _require(self.waist_y > 0, "grating.waist_y", "> 0")
        _require(0.0 <= self.reflectivity <= 1.0, "grating.reflectivity",
                 "in [0, 1]")

    @property
    def period(self) -> float:
        return self.lambda_l / 2.0


@dataclass(frozen=True)
class GeometrySpec:
    """Beamline distances and slit apertures."""

    l1: float
    l2: float
    l2p: float
    l3: float
    l4: float
    l4p: float
    slit1_width_x: float
    slit2_width_x: float
    slit1_width_y: float
    slit2_width_y: float
    slit1_height: float
    slit2_height: float
    source_size: float

    def __post_init__(self):
        for name in ("l1", "l2", "l2p", "l3", "l4", "l4p"):
            _require(getattr(self, name) > 0, f"geometry.{name}", "> 0")
        for name in ("slit1_width_x", "slit2_width_x",
                     "slit1_width_y", "slit2_width_y", "source_size"):
            _require(getattr(self, name) > 0, f"geometry.{name}", "> 0")


@dataclass(frozen=True)
class SourceSpec:
    """Thermal source: temperature and forward-velocity shift."""

    temperature: float    # K
    v_shift: float        # m/s

    def __post_init__(self):
        _require(self.temperature > 0, "source.temperature", "> 0")
        _require(self.v_shift >= 0, "source.v_shift", ">= 0")


@dataclass(frozen=True)
class DetectorSpec:
    """Screen pixel grid and detector acceptance."""

    pixel_pitch: float
    width_px: int
    height_px: int
    acceptance_angle: float  # rad
    # y of the top edge of the frame (camera position); the beam sags under
    # gravity, so the frame is usually aimed well below the source height.
    offset_y: float = 0.0

    def __post_init__(self):
        _require(self.pixel_pitch > 0, "detector.pixel_pitch", "> 0")
        _require(self.width_px > 0, "detector.width_px", "> 0")
        _require(self.height_px > 0, "detector.height_px", "> 0")
        _require(self.acceptance_angle > 0, "detector.acceptance_angle", "> 0")


@dataclass(frozen=True)
class EnvironmentSpec:
    """Gravity and the transverse Earth-rotation components."""

    g: float        # m/s^2, signed
    omega_x: float  # 1/s
    omega_y: float  # 1/s

    def __post_init__(self):
        for name in ("g", "omega_x", "omega_y"):
            _require(math.isfinite(getattr(self, name)),
                     f"environment.{name}", "finite")


@dataclass(frozen=True)
class ExperimentConfig:
    molecule: MoleculeSpec
    grating: GratingSpec
    geometry: GeometrySpec
    source: SourceSpec
    detector: DetectorSpec
    environment: EnvironmentSpec

    def replace_fields(self, section: str, **changes) -> "ExperimentConfig":
        """Return a copy with fields of one section replaced."""
        return replace(self, **{section: replace(getattr(self, section),
                                                 **changes)})


@dataclass(frozen=True)
class Stations:
    """z positions of the beamline stations, monotone increasing.

    The two collimation slits precede the grating; the narrow horizontal
    delimiter that performs the velocity selection sits behind it.
    """

    source: float
    slit1: float
    slit2: float
    grating: float
    delimiter: float
    screen: float


# key -> (section, field).  lambda_f is optional and defaults to the grating
# wavelength; width_px/height_px are integers.
_SCHEMA = {
    "molecule.mass": ("molecule", "mass"),
    "molecule.alpha_duv": ("molecule", "alpha_duv"),
    "molecule.sigma_duv": ("molecule", "sigma_duv"),
    "molecule.phi_ic": ("molecule", "phi_ic"),
    "molecule.phi_isc": ("molecule", "phi_isc"),
    "molecule.phi_f": ("molecule", "phi_f"),
    "molecule.p_dep": ("molecule", "p_dep"),
    "molecule.lambda_f": ("molecule", "lambda_f"),
    "grating.lambda_l": ("grating", "lambda_l"),
    "grating.power": ("grating", "power"),
    "grating.waist_y": ("grating", "waist_y"),
    "grating.height": ("grating", "height"),
    "grating.reflectivity": ("grating", "reflectivity"),
    "geometry.l1": ("geometry", "l1"),
    "geometry.l2": ("geometry", "l2"),
    "geometry.l2p": ("geometry", "l2p"),
    "geometry.l3": ("geometry", "l3"),
    "geometry.l4": ("geometry", "l4"),
    "geometry.l4p": ("geometry", "l4p"),
    "geometry.slit1_width_x": ("geometry", "slit1_width_x"),
    "geometry.slit2_width_x": ("geometry", "slit2_width_x"),
    "geometry.slit1_width_y": ("geometry", "slit1_width_y"),
    "geometry.slit2_width_y": ("geometry", "slit2_width_y"),
    "geometry.slit1_height": ("geometry", "slit1_height"),
    "geometry.slit2_height": ("geometry", "slit2_height"),
    "geometry.source_size": ("geometry", "source_size"),
    "source.temperature": ("source", "temperature"),
    "source.v_shift": ("source", "v_shift"),
    "detector.pixel_pitch": ("detector", "pixel_pitch"),
    "detector.width_px": ("detector", "width_px"),
    "detector.height_px": ("detector", "height_px"),
    "detector.acceptance_angle": ("detector", "acceptance_angle"),
    "detector.offset_y": ("detector", "offset_y"),
    "environment.g": ("environment", "g"),
    "environment.omega_x": ("environment", "omega_x"),
    "environment.omega_y": ("environment", "omega_y"),
}

_OPTIONAL = {"molecule.lambda_f", "detector.offset_y"}
_INT_KEYS = {"detector.width_px", "detector.height_px"}

_SECTION_TYPES = {
    "molecule": MoleculeSpec,
    "grating": GratingSpec,
    "geometry": GeometrySpec,
    "source": SourceSpec,
    "detector": DetectorSpec,
    "environment": EnvironmentSpec,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document; values are converted to SI."""
    raw: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = parse_quantity(value)

    missing = [k for k in _SCHEMA if k not in raw and k not in _OPTIONAL]
    if missing:
        raise ConfigError(f"missing key {missing[0]!r}"
                          + (f" (and {len(missing) - 1} more)"
                             if len(missing) > 1 else ""))

    # Fluorescence wavelength defaults to the grating wavelength; the
    # emission red-shift changes the recoil by an O(1) factor at most.
    raw.setdefault("molecule.lambda_f", raw["grating.lambda_l"])

    per_section: dict[str, dict[str, float | int]] = {
        s: {} for s in _SECTION_TYPES}
    for key, value in raw.items():
        section, field = _SCHEMA[key]
        if key in _INT_KEYS:
            if value != int(value):
                raise ConfigError(f"{key} must be an integer, got {value}")
            value = int(value)
        per_section[section][field] = value

    return ExperimentConfig(**{
        section: cls(**per_section[section])
        for section, cls in _SECTION_TYPES.items()
    })


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit the config in SI units; parse(serialize(cfg)) is bit-exact."""
    lines = []
    for section, cls in _SECTION_TYPES.items():
        spec = getattr(cfg, section)
        for f in fields(cls):
            value = getattr(spec, f.name)
            lines.append(f"{section}.{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


def z_stations(geom: GeometrySpec) -> Stations:
    """Station table along the beam axis.

    l1 = source to first collimation slit, l2 = first to second collimation
    slit, l2p = second slit to grating, l3 = grating to velocity-selection
    delimiter, l4p = delimiter to screen.  l4 (grating to screen) is the
    optical lever arm of the diffraction kicks and is consistent with
    l3 + l4p at the stated precision.
    """
    z_grating = geom.l1 + geom.l2 + geom.l2p
    st = Stations(
        source=0.0,
        slit1=geom.l1,
        slit2=geom.l1 + geom.l2,
        grating=z_grating,
        delimiter=z_grating + geom.l3,
        screen=z_grating + geom.l4,
    )
    zs = [st.source, st.slit1, st.slit2, st.grating, st.delimiter,
          st.screen]
    if any(b <= a for a, b in zip(zs, zs[1:])):
        raise ConfigError(f"stations not monotone increasing: {zs}")
    return st
