"""Cones, conical frustums and their Gaussian approximations.

Conventions
-----------
Ray directions are *not* normalized: a distance ``t`` along a ray is
measured in units of ``|d|``, so the point at parameter ``t`` is ``o + t d``.
The cone radius at parameter ``t`` is ``radius * t``, i.e. ``radius`` is the
footprint radius on the plane through ``o + d``.

All functions here are pure and broadcast over leading array dimensions.
Everything is computed in float64.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Pixel width -> cone radius. A disk of radius r has per-axis variance r^2/4,
# a unit-width box has 1/12, so r = 2/sqrt(12) matches the two.
PIXEL_RADIUS_SCALE = 2.0 / np.sqrt(12.0)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        if not np.linalg.norm(self.direction) > 0:
            raise ValueError("ray direction must be nonzero")
        if not self.radius > 0:
            raise ValueError(f"ray radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class ConicalFrustum:
    ray: Ray
    t0: float
    t1: float

    def __post_init__(self):
        if not (0 <= self.t0 < self.t1):
            raise ValueError(f"need 0 <= t0 < t1, got t0={self.t0}, t1={self.t1}")


@dataclass(frozen=True)
class FrustumMoments:
    """Mean/variance along the axis and per-axis variance across it."""

    mu_t: np.ndarray
    sigma_t2: np.ndarray
    sigma_r2: np.ndarray


@dataclass(frozen=True)
class GaussianRegion:
    mean: np.ndarray
    cov_diag: np.ndarray
    cov: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if np.any(np.asarray(self.cov_diag) < 0):
            raise ValueError("cov_diag must be nonnegative")


def _check_interval(t0, t1):
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(~(t1 > t0)):
        raise ValueError("frustum interval must satisfy t1 > t0")
    return t0, t1


def frustum_moments_stable(t0, t1):
    """Moments of a uniform conical frustum, in midpoint/half-width form.

    ``sigma_r2`` is returned for a unit cone radius; multiply by
    ``radius**2`` for an actual cone.
    """
    t0, t1 = _check_interval(t0, t1)
    t_mu = (t0 + t1) / 2
    t_delta = (t1 - t0) / 2
    mu2, d2 = t_mu**2, t_delta**2
    denom = 3 * mu2 + d2
    mu_t = t_mu + (2 * t_mu * d2) / denom
    sigma_t2 = d2 / 3 - (4 / 15) * (d2**2 * (12 * mu2 - d2)) / denom**2
    sigma_r2 = mu2 / 4 + (5 / 12) * d2 - (4 / 15) * d2**2 / denom
    return FrustumMoments(mu_t, sigma_t2, sigma_r2)


def frustum_moments_naive(t0, t1):
    """Same moments via raw power differences.

    Cancels catastrophically when ``t1 - t0`` is small relative to ``t0``;
    kept only as a cross-check for the stable form.
    """
    t0, t1 = _check_interval(t0, t1)
    d3 = t1**3 - t0**3
    mu_t = 3 * (t1**4 - t0**4) / (4 * d3)
    e_t2 = 3 * (t1**5 - t0**5) / (5 * d3)
    sigma_t2 = e_t2 - mu_t**2
    sigma_r2 = 3 * (t1**5 - t0**5) / (20 * d3)
    return FrustumMoments(mu_t, sigma_t2, sigma_r2)


def cylinder_moments(radius, t0, t1):
    """Moments of a uniform cylinder of the given radius between t0 and t1.

    Unlike the frustum moments, ``sigma_r2`` already includes the radius.
    """
    radius = np.asarray(radius, dtype=np.float64)
    if np.any(~(radius > 0)):
        raise ValueError("cylinder radius must be positive")
    t0, t1 = _check_interval(t0, t1)
    t_mu = (t0 + t1) / 2
    t_delta = (t1 - t0) / 2
    return FrustumMoments(t_mu, t_delta**2 / 3, radius**2 / 4)


def lift_gaussian(directions, mu_t, sigma_t2, sigma_r2):
    """Mean offset and covariance diagonal of a cone Gaussian in world space.

    ``directions`` has shape (..., 3) and broadcasts against the moment
    arrays' extra trailing sample dimension, i.e. moments are (..., n).
    """
    d = np.asarray(directions, dtype=np.float64)[..., None, :]
    mean = d * mu_t[..., None]
    d_sq = d**2
    d_norm_sq = np.maximum(np.sum(d_sq, axis=-1, keepdims=True), 1e-300)
    cov_diag = sigma_t2[..., None] * d_sq + sigma_r2[..., None] * (1 - d_sq / d_norm_sq)
    return mean, cov_diag


def full_covariance(direction, sigma_t2, sigma_r2):
    d = np.asarray(direction, dtype=np.float64)
    ddt = np.outer(d, d)
    return sigma_t2 * ddt + sigma_r2 * (np.eye(3) - ddt / (d @ d))


def frustum_to_gaussian(f: ConicalFrustum, full_cov=False) -> GaussianRegion:
    m = frustum_moments_stable(f.t0, f.t1)
    sigma_r2 = m.sigma_r2 * f.ray.radius**2
    offset, cov_diag = lift_gaussian(f.ray.direction, np.atleast_1d(m.mu_t), np.atleast_1d(m.sigma_t2),
                                     np.atleast_1d(sigma_r2))
    cov = full_covariance(f.ray.direction, float(m.sigma_t2), float(sigma_r2)) if full_cov else None
    return GaussianRegion(f.ray.origin + offset[0], np.maximum(cov_diag[0], 0.0), cov)


def cone_gaussians(origins, directions, radii, t_values, shape="cone"):
    """Gaussians for every interval of a batch of cones.

    Args:
        origins, directions: (B, 3).
        radii: (B,) cone radius at unit distance (or cylinder radius).
        t_values: (B, n+1) sorted interval edges.
        shape: "cone" or "cylinder".

    Returns:
        means, cov_diags: each (B, n, 3).
    """
    t0 = t_values[..., :-1]
    t1 = t_values[..., 1:]
    radii = np.asarray(radii, dtype=np.float64)[..., None]
    if shape == "cone":
        m = frustum_moments_stable(t0, t1)
        sigma_r2 = m.sigma_r2 * radii**2
    elif shape == "cylinder":
        m = cylinder_moments(np.broadcast_to(radii, t0.shape), t0, t1)
        sigma_r2 = m.sigma_r2
    else:
        raise ValueError(f"unknown shape {shape!r}")
    offset, cov_diag = lift_gaussian(directions, m.mu_t, m.sigma_t2, sigma_r2)
    return np.asarray(origins, dtype=np.float64)[..., None, :] + offset, np.maximum(cov_diag, 0.0)


def frustum_contains(f: ConicalFrustum, x):
    """Indicator of the conical frustum; vectorized over leading dims of x."""
    x = np.asarray(x, dtype=np.float64)
    d = f.ray.direction
    rel = x - f.ray.origin
    proj = rel @ d
    d_norm = np.linalg.norm(d)
    t_axial = proj / d_norm**2
    in_slab = (f.t0 < t_axial) & (t_axial < f.t1)
    dist = np.linalg.norm(rel, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_angle = proj / (d_norm * dist)
    in_cone = cos_angle > 1.0 / np.sqrt(1.0 + (f.ray.radius / d_norm) ** 2)
    return in_slab & in_cone


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, Blender/OpenGL convention (looks down -z, y up).

    ``pose`` is the 4x4 camera-to-world matrix; ``focal`` is in pixels.
    """

    pose: np.ndarray
    focal: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64))
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if not self.near < self.far:
            raise ValueError("need near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera must have at least one pixel")

    @property
    def origin(self):
        return self.pose[:3, 3]

    @property
    def pixel_radius(self):
        return PIXEL_RADIUS_SCALE / self.focal

    def downscaled(self, factor: int) -> "Camera":
        if self.width % factor or self.height % factor:
            raise ValueError(f"image {self.width}x{self.height} not divisible by {factor}")
        return Camera(self.pose, self.focal / factor, self.width // factor, self.height // factor,
                      self.near, self.far)

    def directions(self, cols, rows, jitter=None):
        """World-space directions through (col + 0.5, row + 0.5) + jitter.

        Directions have unit camera-space depth, so the image plane sits at t=1.
        """
        cols = np.asarray(cols, dtype=np.float64)
        rows = np.asarray(rows, dtype=np.float64)
        u = cols + 0.5
        v = rows + 0.5
        if jitter is not None:
            u = u + jitter[..., 0]
            v = v + jitter[..., 1]
        cam = np.stack([(u - self.width / 2) / self.focal,
                        -(v - self.height / 2) / self.focal,
                        -np.ones_like(u)], axis=-1)
        return cam @ self.pose[:3, :3].T

    def pixel_axes(self):
        """World-space direction increments for one pixel step in (col, row)."""
        rot = self.pose[:3, :3]
        return rot[:, 0] / self.focal, -rot[:, 1] / self.focal

    def all_rays(self):
        """(origins, directions, radii) for every pixel in row-major order."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        dirs = self.directions(cols.ravel(), rows.ravel())
        n = dirs.shape[0]
        return (np.broadcast_to(self.origin, (n, 3)).copy(), dirs,
                np.full(n, self.pixel_radius))


def pixel_cone(camera: Camera, row: int, col: int) -> Ray:
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise IndexError(f"pixel ({row}, {col}) outside {camera.height}x{camera.width} image")
    return Ray(camera.origin, camera.directions(col, row), camera.pixel_radius)
