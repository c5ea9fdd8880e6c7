"""
測試共用的粗網格情境（每個行程只建構一次）
"""

from functools import lru_cache
from typing import Optional

import numpy as np

from src.application.basis import build_basis
from src.application.galerkin import GalerkinParameters, GalerkinSystem
from src.application.geometry import build_discretization, build_rigid_geometry
from src.application.propulsion import build_propulsion
from src.application.transport import density_profile, initial_density
from src.domain.models import (
    DensityField,
    FluidDiscretization,
    GalerkinBasis,
    RigidGeometry,
)
from src.domain.shapes import Sphere

BODY_RADIUS = 1.0
OUTER_RADIUS = 3.0
RESOLUTION = 2.0
SUBDIVISIONS = 2
BASIS_SIZE = 10
POTENTIAL_ORDER = 1


@lru_cache(maxsize=None)
def unit_sphere_geometry() -> RigidGeometry:
    return build_rigid_geometry(Sphere(BODY_RADIUS), 1.0)


@lru_cache(maxsize=None)
def coarse_disc(
    R: float = OUTER_RADIUS, resolution: float = RESOLUTION
) -> FluidDiscretization:
    return build_discretization(Sphere(BODY_RADIUS), R, resolution, SUBDIVISIONS)


@lru_cache(maxsize=None)
def coarse_basis(N: int = BASIS_SIZE) -> GalerkinBasis:
    return build_basis(coarse_disc(), unit_sphere_geometry(), N, POTENTIAL_ORDER)


def uniform_density(value: float = 1.0) -> DensityField:
    return initial_density(coarse_disc(), density_profile("uniform", value))


def two_layer_density(radius: float = 2.0) -> DensityField:
    profile = density_profile("two_layer", 1.0, 2.0, layer_radius=radius)
    return initial_density(coarse_disc(), profile, positive=True)


def coarse_system(
    family: str = "swirl",
    amplitude: float = 1.0,
    params: Optional[GalerkinParameters] = None,
    N: int = BASIS_SIZE,
) -> GalerkinSystem:
    disc = coarse_disc()
    flux = build_propulsion(disc, family, amplitude)
    return GalerkinSystem(coarse_basis(N), disc, unit_sphere_geometry(), flux, params)


def random_coefficients(seed: int, N: int = BASIS_SIZE, scale: float = 0.3) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal(N)
