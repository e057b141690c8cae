"""aberforge: lens-library construction and optical-degradation toolkit.

Subpackages: optics (domain model), raytrace (tracing and PSF synthesis),
simulate (patch-wise degradation imaging), quantify (OIQ stack), lenslib
(lens-source generation and hybrid sampling), psf_repr (PSF maps and VQ
codebooks), cli (batch command-line surface).
"""

__version__ = "0.1.0"

from . import optics, raytrace, simulate, quantify, lenslib, psf_repr  # noqa: F401
