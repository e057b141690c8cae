"""Lens-source generation (simplified evolutionary optimizer plus
image-distance perturbation) and the 18-subclass hybrid sampler."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .optics import (
    AIR,
    GLASS_CATALOG,
    LensSystem,
    Material,
    OpticsError,
    Surface,
    lens_identity,
    match_sensor,
    paraxial_trace,
    save_lens,
)
from .raytrace import RaytraceError, rms_spot_radius, trace_system
from .quantify import OIQReport, SEVERITY_NAMES

DEFAULT_COC_MM = 0.024  # permissible circle of confusion, 24 µm
DEFAULT_GAMMA = 0.25

FITNESS_FIELDS = (0.0, 0.35, 0.6, 0.85, 1.0)
FITNESS_WAVELENGTHS = (486.13, 587.56, 656.27)

ALL_SUBCLASS_KEYS = tuple(
    f"{sev}x{cls}" for sev in SEVERITY_NAMES for cls in range(6)
)


class LensLibError(ValueError):
    pass


class SubclassDeficitError(LensLibError):
    def __init__(self, deficits: dict):
        self.deficits = deficits
        detail = ", ".join(f"{k} has {v}" for k, v in sorted(deficits.items()))
        super().__init__(f"underpopulated subclasses: {detail}")


class UnboundedDoFError(LensLibError):
    pass


def depth_of_field(f: float, fnum: float, coc_mm: float, image_distance: float):
    """Near and far depth-of-field half-ranges (ΔL1, ΔL2) in mm."""
    if coc_mm < 0:
        raise LensLibError("circle of confusion must be nonnegative")
    if coc_mm == 0.0:
        return 0.0, 0.0
    fdl = fnum * coc_mm * image_distance
    denom_far = f * f - fdl
    if denom_far <= 0:
        raise UnboundedDoFError(
            f"far depth of field unbounded: f²={f*f:.4g} <= FδL={fdl:.4g}"
        )
    num = fnum * coc_mm * image_distance**2
    return num / (f * f + fdl), num / denom_far


@dataclass(frozen=True)
class DesignSpec:
    """Search space for the evolutionary lens optimizer."""

    element_range: tuple[int, int] = (1, 2)
    focal_range: tuple[float, float] = (45.0, 55.0)
    fnum_range: tuple[float, float] = (2.8, 5.6)
    half_fov_range: tuple[float, float] = (3.0, 15.0)
    aspheric_allowed: bool = False
    materials: tuple[str, ...] = ("crown", "flint", "plastic")
    gamma: float = DEFAULT_GAMMA
    coc_mm: float = DEFAULT_COC_MM

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise LensLibError("gamma must lie in [0, 1]")
        if self.coc_mm <= 0:
            raise LensLibError("circle of confusion must be positive")
        for lo, hi in (self.element_range, self.focal_range, self.fnum_range, self.half_fov_range):
            if hi < lo:
                raise LensLibError("empty parameter range")


def perturb_image_distance(lens: LensSystem, spec: DesignSpec, seed: int):
    """With probability gamma, return a copy with the image distance shifted
    uniformly within [−ΔL1, ΔL2]; otherwise None."""
    rng = np.random.default_rng(seed)
    if rng.random() >= spec.gamma:
        return None
    dl1, dl2 = depth_of_field(lens.efl, lens.fnum, spec.coc_mm, lens.image_distance)
    offset = rng.uniform(-dl1, dl2)
    return lens.with_image_distance(lens.image_distance + offset)


# ---------------------------------------------------------------------------
# EAOD-lite: a simplified evolutionary search over sequential lens genomes.
#
# Genome layout (float vector):
#   [fnum, half_fov, then per element: c_front, c_back, t_glass, t_air,
#    and if aspherics are on: a4, a6 for the front surface]

_ASPH_SCALES = (1e-6, 1e-9)


@dataclass
class _Genome:
    fnum: float
    half_fov: float
    n_elements: int
    materials: tuple[str, ...]
    params: np.ndarray  # (n_elements, 4 [+2 aspheric])
    aspheric: bool


def _random_genome(rng, spec: DesignSpec) -> _Genome:
    n_el = int(rng.integers(spec.element_range[0], spec.element_range[1] + 1))
    cols = 6 if spec.aspheric_allowed else 4
    params = np.zeros((n_el, cols))
    c_max = 1.0 / spec.focal_range[0]
    for e in range(n_el):
        params[e, 0] = rng.uniform(-c_max, c_max)
        params[e, 1] = rng.uniform(-c_max, c_max)
        params[e, 2] = rng.uniform(1.0, 4.0)
        params[e, 3] = rng.uniform(0.5, 4.0)
        if spec.aspheric_allowed:
            params[e, 4] = rng.normal(0.0, 1.0)
            params[e, 5] = rng.normal(0.0, 1.0)
    mats = tuple(spec.materials[int(rng.integers(len(spec.materials)))] for _ in range(n_el))
    return _Genome(
        fnum=float(rng.uniform(*spec.fnum_range)),
        half_fov=float(rng.uniform(*spec.half_fov_range)),
        n_elements=n_el,
        materials=mats,
        params=params,
        aspheric=spec.aspheric_allowed,
    )


def _build_probe_surfaces(g: _Genome, surfaces: list) -> None:
    """Append element surfaces with provisional 10 mm apertures."""
    for e in range(g.n_elements):
        c1, c2, tg, ta = g.params[e, :4]
        asph = ()
        if g.aspheric and g.params.shape[1] >= 6:
            asph = (g.params[e, 4] * _ASPH_SCALES[0], g.params[e, 5] * _ASPH_SCALES[1])
        kind = "aspheric" if asph and any(asph) else "spherical"
        mat = GLASS_CATALOG[g.materials[e]]
        surfaces.append(
            Surface(kind=kind, curvature=float(c1), conic=0.0, aspheric=asph,
                    semi_diameter=10.0, thickness=float(max(tg, 0.3)), material=mat)
        )
        surfaces.append(
            Surface(kind="spherical", curvature=float(c2), semi_diameter=10.0,
                    thickness=float(max(ta, 0.1)) if e < g.n_elements - 1 else 0.0,
                    material=AIR)
        )


def _genome_to_lens(g: _Genome, spec: DesignSpec, name: str = "candidate"):
    """Build a LensSystem from a genome, rescaling geometry so the paraxial
    focal length falls inside the spec range. Returns None if infeasible."""
    for attempt in range(2):
        epd = None
        surfaces = []
        # provisional tall apertures; tightened after the paraxial solve
        try:
            _build_probe_surfaces(g, surfaces)
        except OpticsError:
            return None
        probe = LensSystem(
            surfaces=(Surface(kind="stop", semi_diameter=10.0),) + tuple(surfaces),
            stop_index=0, image_distance=1.0, efl=1.0, fnum=g.fnum,
            half_fov_deg=g.half_fov, name=name,
        )
        try:
            efl, bfd = paraxial_trace(probe)
        except OpticsError:
            return None
        if not math.isfinite(efl) or efl <= 0 or bfd <= 0:
            return None
        lo, hi = spec.focal_range
        if lo <= efl <= hi or attempt == 1:
            epd = efl / g.fnum
            # aperture: pupil radius plus field spread, with margin
            z = 0.5
            final = [Surface(kind="stop", semi_diameter=epd / 2.0, thickness=0.5)]
            tan_h = math.tan(math.radians(g.half_fov))
            ok = True
            for s in surfaces:
                semi = epd / 2.0 + (z + s.thickness) * tan_h + 1.0
                if s.kind == "spherical" and abs(s.curvature) * semi >= 0.999:
                    ok = False
                    break
                final.append(
                    Surface(kind=s.kind, curvature=s.curvature, conic=s.conic,
                            aspheric=s.aspheric, semi_diameter=semi,
                            thickness=s.thickness, material=s.material)
                )
                z += s.thickness
            if not ok:
                return None
            if not (lo * 0.98 <= efl <= hi * 1.02):
                return None
            return LensSystem(
                surfaces=tuple(final), stop_index=0, image_distance=bfd,
                efl=efl, fnum=g.fnum, half_fov_deg=g.half_fov, name=name,
            )
        # rescale geometry so efl lands at the nearest range bound
        target = min(max(efl, lo), hi)
        m = target / efl
        g.params[:, 0] /= m
        g.params[:, 1] /= m
        g.params[:, 2] *= m
        g.params[:, 3] *= m
    return None


def lens_fitness(lens: LensSystem, spec: DesignSpec, pupil_samples: int = 49) -> float:
    """Mean RMS spot radius (µm) over the evaluation fields and wavelengths,
    plus ray-failure and focal-deviation penalties."""
    total = 0.0
    cells = 0
    failure = 0.0
    for frac in FITNESS_FIELDS:
        for wl in FITNESS_WAVELENGTHS:
            try:
                res = trace_system(lens, frac * lens.half_fov_deg, wl, pupil_samples)
            except RaytraceError:
                failure += 1.0
                continue
            total += rms_spot_radius(res.spots)
            failure += 1.0 - res.survival_fraction
            cells += 1
    n_cells = len(FITNESS_FIELDS) * len(FITNESS_WAVELENGTHS)
    if cells == 0:
        return float("inf")
    lo, hi = spec.focal_range
    focal_pen = 0.0
    if lens.efl < lo:
        focal_pen = (lo - lens.efl) / lo
    elif lens.efl > hi:
        focal_pen = (lens.efl - hi) / hi
    return total / cells + 1000.0 * failure / n_cells + 1e4 * focal_pen


def _mutate(g: _Genome, rng, spec: DesignSpec, sigma: float = 1.0) -> _Genome:
    p = g.params.copy()
    c_sigma = 0.1 / spec.focal_range[0]
    p[:, 0] += rng.normal(0.0, sigma * c_sigma, size=len(p))
    p[:, 1] += rng.normal(0.0, sigma * c_sigma, size=len(p))
    p[:, 2] = np.clip(p[:, 2] + rng.normal(0.0, 0.2 * sigma, size=len(p)), 0.5, 6.0)
    p[:, 3] = np.clip(p[:, 3] + rng.normal(0.0, 0.2 * sigma, size=len(p)), 0.1, 8.0)
    if g.aspheric and p.shape[1] >= 6:
        p[:, 4] += rng.normal(0.0, 0.3 * sigma, size=len(p))
        p[:, 5] += rng.normal(0.0, 0.3 * sigma, size=len(p))
    return _Genome(g.fnum, g.half_fov, g.n_elements, g.materials, p, g.aspheric)


def _crossover(a: _Genome, b: _Genome, rng) -> _Genome:
    if a.n_elements != b.n_elements:
        return a
    w = rng.uniform(0.0, 1.0)
    p = w * a.params + (1.0 - w) * b.params
    return _Genome(a.fnum, a.half_fov, a.n_elements, a.materials, p.copy(), a.aspheric)


def eaod_lite(
    spec: DesignSpec,
    population: int = 24,
    generations: int = 30,
    seed: int = 0,
    with_history: bool = False,
):
    """Evolutionary lens search; returns (LensSystem, fitness) pairs sorted
    by fitness. Tournament selection, arithmetic crossover, Gaussian
    mutation, one-elite survival. With ``with_history`` the per-generation
    best fitness list is returned as a second value."""
    if population < 8:
        raise LensLibError("population must be at least 8")
    rng = np.random.default_rng(seed)
    genomes = [_random_genome(rng, spec) for _ in range(population)]

    def evaluate(gs):
        out = []
        for g in gs:
            lens = _genome_to_lens(g, spec)
            fit = float("inf") if lens is None else lens_fitness(lens, spec)
            out.append((g, lens, fit))
        return out

    scored = evaluate(genomes)
    best_history = []
    for gen in range(generations):
        scored.sort(key=lambda x: x[2])
        best_history.append(scored[0][2])
        elite = scored[0]
        children = [elite[0]]
        while len(children) < population:
            contenders = [scored[int(rng.integers(len(scored)))] for _ in range(3)]
            pa = min(contenders, key=lambda x: x[2])[0]
            contenders = [scored[int(rng.integers(len(scored)))] for _ in range(3)]
            pb = min(contenders, key=lambda x: x[2])[0]
            child = _crossover(pa, pb, rng)
            child = _mutate(child, rng, spec, sigma=1.0 - 0.5 * gen / max(generations - 1, 1))
            children.append(child)
        scored = evaluate(children)
        # keep the elite if every child regressed
        if min(s[2] for s in scored) > elite[2]:
            scored[0] = elite
    scored.sort(key=lambda x: x[2])
    best_history.append(scored[0][2])
    results = [(lens, fit) for (_, lens, fit) in scored if lens is not None and math.isfinite(fit)]
    if not results:
        raise LensLibError("no feasible lens found after all generations")
    if with_history:
        return results, best_history
    return results


def build_lens_source(
    spec: DesignSpec,
    count: int,
    out_dir,
    seed: int = 0,
    population: int = 24,
    generations: int = 30,
    keep_per_run: int = 8,
):
    """Run eaod_lite over spec variations (aspheric on/off), apply the
    image-distance perturbation, and write lens files. Returns the file
    paths; raises with the achieved count if the target is unreachable."""
    if count < 1:
        raise LensLibError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    idx = 0
    run = 0
    max_runs = max(4, 2 * count // keep_per_run + 4)
    variants = [False, True] if spec.aspheric_allowed else [False]
    while len(paths) < count and run < max_runs:
        from dataclasses import replace

        run_spec = replace(spec, aspheric_allowed=variants[run % len(variants)])
        try:
            results = eaod_lite(run_spec, population, generations, seed=int(rng.integers(2**31)))
        except LensLibError:
            run += 1
            continue
        for lens, _fit in results[:keep_per_run]:
            height = lens.efl * math.tan(math.radians(lens.half_fov_deg))
            from dataclasses import replace as _rep

            lens = _rep(lens, sensor=match_sensor(height), name=f"lens_{idx:05d}")
            base_path = os.path.join(out_dir, f"lens_{idx:05d}.json")
            save_lens(lens, base_path)
            paths.append(base_path)
            idx += 1
            variant = perturb_image_distance(lens, spec, seed=int(rng.integers(2**31)))
            if variant is not None:
                variant = _rep(variant, name=f"lens_{idx:05d}")
                var_path = os.path.join(out_dir, f"lens_{idx:05d}.json")
                save_lens(variant, var_path)
                paths.append(var_path)
                idx += 1
            if len(paths) >= count:
                break
        run += 1
    if len(paths) < count:
        raise LensLibError(
            f"feasibility shortfall: requested {count} lenses, achieved {len(paths)}"
        )
    return paths


# ---------------------------------------------------------------------------
# Hybrid sampler

@dataclass
class LensLibManifest:
    """Sampled train/test library manifest."""

    name: str
    split: str
    seed: int
    m1: int
    m2: int
    entries: list  # {"lens": path, "identity": hash, "subclass": key, "report": dict}
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "seed": self.seed,
            "m1": self.m1,
            "m2": self.m2,
            "entries": self.entries,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LensLibManifest":
        return cls(**doc)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "LensLibManifest":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def hybrid_sample(
    source: list,
    m1: int,
    m2: int,
    seed: int = 0,
    name: str = "lenslib",
    require_all: bool = True,
):
    """Uniform without-replacement draw of m1 train + m2 test lenses per
    (severity × OD-Class) subclass.

    ``source`` holds (lens_path, OIQReport) pairs. With require_all, every
    one of the 18 subclasses must hold at least m1+m2 lenses; otherwise
    only populated subclasses are sampled.
    """
    groups: dict[str, list] = {k: [] for k in ALL_SUBCLASS_KEYS}
    for lens_path, report in source:
        key = report.subclass_key
        if key not in groups:
            raise LensLibError(f"report has unknown subclass key {key!r}")
        groups[key].append((lens_path, report))

    need = m1 + m2
    deficits = {k: len(v) for k, v in groups.items() if len(v) < need}
    if require_all and deficits:
        raise SubclassDeficitError(deficits)

    rng = np.random.default_rng(seed)
    train_entries = []
    test_entries = []
    for key in ALL_SUBCLASS_KEYS:
        bucket = groups[key]
        if len(bucket) < need:
            continue
        order = rng.permutation(len(bucket))[:need]
        for pos, j in enumerate(order):
            lens_path, report = bucket[int(j)]
            entry = {
                "lens": str(lens_path),
                "identity": lens_identity(lens_path),
                "subclass": key,
                "report": report.to_dict(),
            }
            (train_entries if pos < m1 else test_entries).append(entry)

    config = {"require_all": require_all, "subclasses": len(ALL_SUBCLASS_KEYS)}
    train = LensLibManifest(name, "train", seed, m1, m2, train_entries, config)
    test = LensLibManifest(name, "test", seed, m1, m2, test_entries, config)
    overlap = {e["identity"] for e in train_entries} & {e["identity"] for e in test_entries}
    if overlap:
        raise LensLibError(f"train/test overlap on identities: {sorted(overlap)[:3]}")
    return train, test
