import dataclasses
import math

import numpy as np
import pytest

from aberforge import optics
from aberforge.optics import (
    AIR,
    GLASS_CATALOG,
    LensSystem,
    Surface,
    match_sensor,
    paraxial_trace,
)


def gaussian_kernel(sigma: float, side: int = 61) -> np.ndarray:
    """Unit-sum sampled isotropic Gaussian on an odd square grid."""
    ax = np.arange(side) - (side - 1) / 2.0
    yy, xx = np.meshgrid(ax, ax)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def make_singlet(
    efl: float = 100.0,
    stop_semi: float = 5.0,
    half_fov_deg: float = 6.0,
    glass_name: str = "crown",
    thickness: float = 2.0,
) -> LensSystem:
    """Plano-convex singlet behind an aperture stop, focused at paraxial BFD."""
    glass = GLASS_CATALOG[glass_name]
    n = optics.refractive_index(glass, 587.56)
    c1 = 1.0 / ((n - 1.0) * efl)
    surfaces = (
        Surface(kind="stop", semi_diameter=stop_semi, thickness=0.5),
        Surface(
            kind="spherical",
            curvature=c1,
            semi_diameter=8.0,
            thickness=thickness,
            material=glass,
        ),
        Surface(kind="spherical", curvature=0.0, semi_diameter=8.0, material=AIR),
    )
    lens = LensSystem(
        surfaces=surfaces,
        stop_index=0,
        image_distance=efl,
        efl=efl,
        fnum=efl / (2.0 * stop_semi),
        half_fov_deg=half_fov_deg,
        name="singlet",
    )
    true_efl, bfd = paraxial_trace(lens)
    sensor = match_sensor(true_efl * math.tan(math.radians(half_fov_deg)))
    return dataclasses.replace(
        lens, image_distance=bfd, efl=true_efl, sensor=sensor
    )


@pytest.fixture(scope="session")
def singlet() -> LensSystem:
    return make_singlet()


@pytest.fixture(scope="session")
def singlet_psf_grid(singlet):
    from aberforge.raytrace import psf_grid

    return psf_grid(singlet, n_fov=8, n_wave=5, rays_per_psf=2000)


@pytest.fixture(scope="session")
def singlet_rgb(singlet_psf_grid):
    from aberforge.raytrace import default_rgb_response, stack_rgb

    return stack_rgb(
        singlet_psf_grid, default_rgb_response(singlet_psf_grid.wavelengths)
    )
