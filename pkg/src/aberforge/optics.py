"""Domain model for surfaces, materials, sensors, and lens systems.

Units follow lens-design convention: lengths in mm, pixel pitch in µm,
wavelengths in nm. All types are immutable after construction and every
operation here is a pure function.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

LENS_SCHEMA_VERSION = 1

# Fraunhofer anchor lines (nm) for the two-coefficient dispersion fit.
LAMBDA_D = 587.56
LAMBDA_F = 486.13
LAMBDA_C = 656.27

SURFACE_KINDS = ("spherical", "aspheric", "stop", "image-plane")


class OpticsError(ValueError):
    """Domain error raised by the optics model (invalid geometry or input)."""


@dataclass(frozen=True)
class Material:
    """Optical medium defined by d-line index and Abbe number.

    Dispersion uses a two-coefficient Cauchy fit n(λ) = A + B/λ² (λ in µm)
    anchored so n(587.56 nm) = n_d and (n_d−1)/(n_F−n_C) = V_d.
    """

    name: str
    nd: float
    vd: float

    def __post_init__(self):
        if self.nd < 1.0:
            raise OpticsError(f"n_d must be >= 1, got {self.nd}")
        if self.vd <= 0 and not math.isinf(self.vd):
            raise OpticsError(f"Abbe number must be > 0, got {self.vd}")

    @property
    def cauchy_ab(self) -> tuple[float, float]:
        if math.isinf(self.vd) or self.nd == 1.0:
            return self.nd, 0.0
        lf, lc, ld = LAMBDA_F / 1e3, LAMBDA_C / 1e3, LAMBDA_D / 1e3
        b = (self.nd - 1.0) / (self.vd * (1.0 / lf**2 - 1.0 / lc**2))
        a = self.nd - b / ld**2
        return a, b


AIR = Material("air", 1.0, math.inf)

# Concrete material pool for the evolutionary lens search: a generic crown,
# flint, and optical plastic.
GLASS_CATALOG = {
    "air": AIR,
    "crown": Material("crown", 1.5168, 64.17),
    "flint": Material("flint", 1.6200, 36.37),
    "plastic": Material("plastic", 1.5900, 30.00),
}


def refractive_index(material: Material, wavelength_nm: float) -> float:
    """Index of refraction at a wavelength in nm (valid 380–780 nm)."""
    if not 380.0 <= wavelength_nm <= 780.0:
        raise OpticsError(f"wavelength {wavelength_nm} nm outside 380–780 nm band")
    a, b = material.cauchy_ab
    lam_um = wavelength_nm / 1e3
    return a + b / lam_um**2


@dataclass(frozen=True)
class Surface:
    """One rotationally symmetric surface of a sequential lens.

    ``thickness`` is the axial distance to the next surface; ``material``
    names the medium following this surface. Aspheric coefficients are
    (a4, a6, ...) multiplying r^4, r^6, ... up to r^10 (N_A = 5).
    """

    kind: str
    curvature: float = 0.0
    conic: float = 0.0
    aspheric: tuple[float, ...] = ()
    semi_diameter: float = 1.0
    thickness: float = 0.0
    material: Material = AIR

    def __post_init__(self):
        if self.kind not in SURFACE_KINDS:
            raise OpticsError(f"unknown surface kind {self.kind!r}")
        if self.kind in ("spherical", "aspheric") and self.semi_diameter <= 0:
            raise OpticsError("refracting surface needs semi-diameter > 0")
        if self.kind == "spherical":
            if self.conic != 0.0 or any(a != 0.0 for a in self.aspheric):
                raise OpticsError("spherical surface must have κ = 0 and no aspheric terms")
            if abs(self.curvature) * self.semi_diameter >= 1.0:
                raise OpticsError("spherical sag not real over full aperture (|c|·h >= 1)")
        if len(self.aspheric) > 4:
            raise OpticsError("aspheric order capped at r^10 (4 coefficients)")


def surface_sag(surface: Surface, r: float) -> float:
    """Surface height h(r): conic base plus even-order polynomial terms."""
    c = surface.curvature
    k = surface.conic
    r2 = r * r
    disc = 1.0 - (1.0 + k) * c * c * r2
    if disc < 0.0:
        raise OpticsError(f"radius {r} outside valid conic domain of surface")
    h = c * r2 / (1.0 + math.sqrt(disc))
    for i, a in enumerate(surface.aspheric):
        h += a * r2 ** (i + 2)
    return h


def surface_sag_slope(surface: Surface, r: float) -> float:
    """dh/dr, used for surface normals and Newton intersection."""
    c = surface.curvature
    k = surface.conic
    disc = 1.0 - (1.0 + k) * c * c * r * r
    if disc < 0.0:
        raise OpticsError(f"radius {r} outside valid conic domain of surface")
    slope = c * r / math.sqrt(disc)
    for i, a in enumerate(surface.aspheric):
        n = 2 * (i + 2)
        slope += n * a * r ** (n - 1)
    return slope


@dataclass(frozen=True)
class Sensor:
    """Square sensor defined by pixel pitch (µm) and side resolution."""

    pitch_um: float
    resolution: int = 2048

    def __post_init__(self):
        if self.pitch_um <= 0 or self.resolution <= 0:
            raise OpticsError("sensor pitch and resolution must be positive")

    @property
    def half_diagonal_mm(self) -> float:
        return self.pitch_um * 1e-3 * self.resolution * math.sqrt(2.0) / 2.0


DEFAULT_SENSOR_LIBRARY = (
    Sensor(4.0),
    Sensor(8.0),
    Sensor(12.0),
    Sensor(16.0),
)


def match_sensor(image_height_mm: float, library=DEFAULT_SENSOR_LIBRARY) -> Sensor:
    """Pick the sensor whose half-diagonal is closest to the image height.

    Ties resolve to the smaller pixel pitch.
    """
    if image_height_mm <= 0:
        raise OpticsError("image height must be positive")
    if not library:
        raise OpticsError("sensor library is empty")
    return min(library, key=lambda s: (abs(s.half_diagonal_mm - image_height_mm), s.pitch_um))


@dataclass(frozen=True)
class LensSystem:
    """Ordered sequential lens: surfaces object-to-image plus imaging geometry.

    ``image_distance`` is measured from the last surface vertex to the image
    plane. ``efl`` and ``fnum`` must agree with traced paraxial values
    within 1% (checked by ``validate_paraxial``).
    """

    surfaces: tuple[Surface, ...]
    stop_index: int
    image_distance: float
    efl: float
    fnum: float
    half_fov_deg: float
    sensor: Sensor | None = None
    name: str = "lens"

    def __post_init__(self):
        stops = [i for i, s in enumerate(self.surfaces) if s.kind == "stop"]
        if len(stops) != 1:
            raise OpticsError(f"lens must have exactly one stop, found {len(stops)}")
        if stops[0] != self.stop_index:
            raise OpticsError("stop_index does not point at the stop surface")
        if self.image_distance <= 0:
            raise OpticsError("image distance must be positive")

    @property
    def vertex_positions(self) -> tuple[float, ...]:
        z = 0.0
        out = []
        for s in self.surfaces:
            out.append(z)
            z += s.thickness
        return tuple(out)

    @property
    def image_plane_z(self) -> float:
        return self.vertex_positions[-1] + self.image_distance

    @property
    def entrance_pupil_radius(self) -> float:
        return entrance_pupil(self)[1]

    def with_image_distance(self, image_distance: float) -> "LensSystem":
        return replace(self, image_distance=image_distance)


@dataclass(frozen=True)
class IdealLens:
    """Aberration-free paraxial stand-in: every ray lands at the chief point."""

    efl: float
    fnum: float
    half_fov_deg: float
    sensor: Sensor | None = None
    name: str = "ideal"

    @property
    def image_distance(self) -> float:
        return self.efl

    @property
    def entrance_pupil_radius(self) -> float:
        return self.efl / (2.0 * self.fnum)


# ---------------------------------------------------------------------------
# Paraxial trace (y-u method) for focal length, back focal distance, and
# entrance pupil location.

def paraxial_trace(lens: LensSystem, wavelength_nm: float = LAMBDA_D):
    """Trace a paraxial marginal ray from infinity; returns (efl, bfd).

    bfd is measured from the last surface vertex.
    """
    y, u = 1.0, 0.0
    n1 = 1.0
    y_first = None
    for s in lens.surfaces:
        if s.kind in ("spherical", "aspheric"):
            if y_first is None:
                y_first = y
            n2 = refractive_index(s.material, wavelength_nm)
            u = (n1 * u - y * s.curvature * (n2 - n1)) / n2
            n1 = n2
        y += s.thickness * u
    if y_first is None or u == 0.0:
        raise OpticsError("lens has no optical power")
    # undo the final transfer so y is at the last surface vertex
    y_last = y - lens.surfaces[-1].thickness * u if lens.surfaces[-1].thickness else y
    efl = -y_first / u
    bfd = -y_last / u
    return efl, bfd


def _reverse_paraxial(lens: LensSystem, y: float, u: float, wavelength_nm: float):
    """Propagate a paraxial ray from the stop plane backwards to the first
    surface vertex; returns (y, u) there in object-space convention."""
    zs = lens.vertex_positions
    for i in range(lens.stop_index - 1, -1, -1):
        s = lens.surfaces[i]
        dz = zs[i + 1] - zs[i]
        y -= dz * u
        if s.kind in ("spherical", "aspheric"):
            n_before = 1.0
            for j in range(i - 1, -1, -1):
                if lens.surfaces[j].kind in ("spherical", "aspheric"):
                    n_before = refractive_index(lens.surfaces[j].material, wavelength_nm)
                    break
            # invert u' = (n1 u − y c (n2−n1)) / n2 for u given u'
            n2 = refractive_index(s.material, wavelength_nm)
            u = (n2 * u + y * s.curvature * (n2 - n_before)) / n_before
    return y, u


def entrance_pupil(lens: LensSystem, wavelength_nm: float = LAMBDA_D):
    """(z position, radius) of the entrance pupil: the paraxial image of the
    aperture stop seen from object space."""
    zs = lens.vertex_positions
    stop = lens.surfaces[lens.stop_index]
    if lens.stop_index == 0:
        return zs[0], stop.semi_diameter
    yc, uc = _reverse_paraxial(lens, 0.0, 1.0, wavelength_nm)
    z0 = zs[0]
    z_ep = z0 - yc / uc if uc != 0.0 else z0
    ye, ue = _reverse_paraxial(lens, stop.semi_diameter, 1.0, wavelength_nm)
    radius = abs(ye - (z0 - z_ep) * ue)
    if radius <= 0:
        radius = stop.semi_diameter
    return z_ep, radius


def entrance_pupil_z(lens: LensSystem, wavelength_nm: float = LAMBDA_D) -> float:
    return entrance_pupil(lens, wavelength_nm)[0]


def validate_paraxial(lens: LensSystem, tol: float = 0.01) -> None:
    """Check stored efl against the traced paraxial value (1% default)."""
    efl, _ = paraxial_trace(lens)
    if abs(efl - lens.efl) > tol * abs(lens.efl):
        raise OpticsError(
            f"stored efl {lens.efl:.4f} inconsistent with traced {efl:.4f}"
        )


# ---------------------------------------------------------------------------
# Lens description file (JSON, one lens per file, schema_version mandatory)

def lens_to_dict(lens: LensSystem) -> dict:
    return {
        "schema_version": LENS_SCHEMA_VERSION,
        "units": {"length": "mm", "pitch": "um", "wavelength": "nm"},
        "name": lens.name,
        "efl_mm": lens.efl,
        "fnum": lens.fnum,
        "half_fov_deg": lens.half_fov_deg,
        "image_distance_mm": lens.image_distance,
        "stop_index": lens.stop_index,
        "sensor": None
        if lens.sensor is None
        else {"pitch_um": lens.sensor.pitch_um, "resolution": lens.sensor.resolution},
        "surfaces": [
            {
                "kind": s.kind,
                "curvature_per_mm": s.curvature,
                "conic": s.conic,
                "aspheric": list(s.aspheric),
                "semi_diameter_mm": s.semi_diameter,
                "thickness_mm": s.thickness,
                "material": {"name": s.material.name, "nd": s.material.nd,
                             "vd": None if math.isinf(s.material.vd) else s.material.vd},
            }
            for s in lens.surfaces
        ],
    }


def lens_from_dict(doc: dict) -> LensSystem:
    version = doc.get("schema_version")
    if version != LENS_SCHEMA_VERSION:
        raise OpticsError(f"unsupported lens schema version {version!r}")
    surfaces = []
    for sd in doc["surfaces"]:
        m = sd["material"]
        vd = m["vd"] if m["vd"] is not None else math.inf
        surfaces.append(
            Surface(
                kind=sd["kind"],
                curvature=sd["curvature_per_mm"],
                conic=sd["conic"],
                aspheric=tuple(sd["aspheric"]),
                semi_diameter=sd["semi_diameter_mm"],
                thickness=sd["thickness_mm"],
                material=Material(m["name"], m["nd"], vd),
            )
        )
    sensor = None
    if doc.get("sensor"):
        sensor = Sensor(doc["sensor"]["pitch_um"], doc["sensor"]["resolution"])
    return LensSystem(
        surfaces=tuple(surfaces),
        stop_index=doc["stop_index"],
        image_distance=doc["image_distance_mm"],
        efl=doc["efl_mm"],
        fnum=doc["fnum"],
        half_fov_deg=doc["half_fov_deg"],
        sensor=sensor,
        name=doc.get("name", "lens"),
    )


def save_lens(lens: LensSystem, path) -> None:
    with open(path, "w") as f:
        json.dump(lens_to_dict(lens), f, indent=2, sort_keys=True)
        f.write("\n")


def load_lens(path) -> LensSystem:
    with open(path) as f:
        return lens_from_dict(json.load(f))


def lens_identity(path) -> str:
    """Content hash of a lens file: the no-overlap key for manifests."""
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
