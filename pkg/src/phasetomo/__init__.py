"""Phaseless inverse scattering toolkit.

Pipeline: synthesize phaseless spectra |u_sc|^2 from a refractive-index
phantom (forward), recover travel times from the spectra's beat structure
(recovery), and reconstruct the index by bent-ray travel-time tomography
(tomography), on top of a conformal-metric geodesic engine (geodesics) and
admissible field representations (medium).
"""

from . import errors, forward, geodesics, medium, recovery, tomography

__version__ = "0.1.0"

__all__ = ["errors", "forward", "geodesics", "medium", "recovery",
           "tomography", "__version__"]
