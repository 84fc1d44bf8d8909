"""Imaging geometry: detector ring, pixel grid, timing, acoustic constants.

Conventions used everywhere downstream:

* the grid is centered on the origin; pixel (row i, col j) sits at
  ``x = (j - (nx-1)/2) * pitch``, ``y = (i - (ny-1)/2) * pitch``;
* images are ``[ny, nx]`` arrays flattened row-major, sinograms are
  ``[n_detectors, n_time_samples]``;
* time sample k is at ``t = k * dt`` (acquisition starts at the laser pulse);
* detector l sits nominally at angle ``detector_angles[l]`` on a ring of
  radius ``ring_radius``. Jittered positions perturb radius by
  ``ring_radius * u1 * position_jitter_frac`` and angle by
  ``u2 * position_jitter_frac`` (u uniform in [-1, 1]), drawn once from
  ``jitter_seed``. Simulation uses jittered positions, reconstruction the
  nominal ones, so the model mismatch seen on real hardware is present in
  synthetic data too.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import GeometryError, ShapeError

TWO_PI = 2.0 * np.pi


def _uniform_angles(n: int) -> np.ndarray:
    return np.arange(n) * (TWO_PI / n)


@dataclass(frozen=True)
class ImagingGeometry:
    grid_nx: int = 128
    grid_ny: int = 128
    pixel_pitch: float = 110e-6
    detector_count: int = 36
    ring_radius: float = 44e-3
    detector_angles: tuple = None  # radians, strictly increasing in [0, 2pi)
    position_jitter_frac: float = 1e-3
    sound_speed: float = 1490.0
    dt: float = 1.0 / 24.4e6
    time_samples: int = 1024
    voxel_volume: float = None  # defaults to pixel_pitch**3 (unit-pitch slice)
    sir_subelements: int = 1
    sensor_diameter: float = 13e-3
    jitter_seed: int = 0

    def __post_init__(self):
        if self.detector_count < 1:
            raise GeometryError("detector_count must be >= 1")
        if self.detector_angles is None:
            object.__setattr__(
                self, "detector_angles",
                tuple(_uniform_angles(int(self.detector_count))))
        else:
            object.__setattr__(
                self, "detector_angles",
                tuple(float(a) for a in self.detector_angles))
        if self.voxel_volume is None:
            object.__setattr__(self, "voxel_volume", float(self.pixel_pitch) ** 3)
        self.validate()

    def validate(self):
        if self.detector_count < 1:
            raise GeometryError("detector_count must be >= 1")
        if self.time_samples < 2:
            raise GeometryError("time_samples must be >= 2")
        if self.grid_nx < 1 or self.grid_ny < 1:
            raise GeometryError("grid must have at least one pixel")
        for name in ("pixel_pitch", "ring_radius", "sound_speed", "dt",
                     "voxel_volume"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be positive")
        if self.position_jitter_frac < 0:
            raise GeometryError("position_jitter_frac must be >= 0")
        if self.sir_subelements < 1:
            raise GeometryError("sir_subelements must be >= 1")
        if self.sir_subelements > 1 and not self.sensor_diameter > 0:
            raise GeometryError(
                "sensor_diameter must be positive when sir_subelements > 1")
        angles = np.asarray(self.detector_angles)
        if angles.shape != (self.detector_count,):
            raise GeometryError("detector_angles length must equal detector_count")
        if np.any(angles < 0) or np.any(angles >= TWO_PI):
            raise GeometryError("detector_angles must lie in [0, 2pi)")
        if self.detector_count > 1 and np.any(np.diff(angles) <= 0):
            raise GeometryError("detector_angles must be strictly increasing")

    # -- derived geometry ---------------------------------------------------

    @property
    def n_pixels(self) -> int:
        return self.grid_nx * self.grid_ny

    @property
    def image_shape(self) -> tuple:
        return (self.grid_ny, self.grid_nx)

    @property
    def sinogram_shape(self) -> tuple:
        return (self.detector_count, self.time_samples)

    def half_diagonal(self) -> float:
        w = self.grid_nx * self.pixel_pitch
        h = self.grid_ny * self.pixel_pitch
        return 0.5 * float(np.hypot(w, h))

    def pixel_coords(self):
        """Flattened (row-major) pixel center coordinates (px, py)."""
        jj = np.arange(self.grid_nx) - (self.grid_nx - 1) / 2.0
        ii = np.arange(self.grid_ny) - (self.grid_ny - 1) / 2.0
        px = np.tile(jj * self.pixel_pitch, self.grid_ny)
        py = np.repeat(ii * self.pixel_pitch, self.grid_nx)
        return px, py

    def _jitter(self):
        rng = np.random.default_rng(self.jitter_seed)
        u = rng.uniform(-1.0, 1.0, size=(self.detector_count, 2))
        radii = self.ring_radius * (1.0 + u[:, 0] * self.position_jitter_frac)
        angles = np.asarray(self.detector_angles) + u[:, 1] * self.position_jitter_frac
        return radii, angles

    def detector_positions(self, jittered: bool = False) -> np.ndarray:
        """Detector center coordinates, shape (detector_count, 2)."""
        if jittered:
            radii, angles = self._jitter()
        else:
            radii = np.full(self.detector_count, self.ring_radius)
            angles = np.asarray(self.detector_angles)
        return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)

    def subelement_positions(self, jittered: bool = False):
        """Point sub-detector coordinates (dsx, dsy), each (detector_count, S).

        Sub-elements sample a chord of length ``sensor_diameter`` oriented
        tangentially to the ring; S == 1 degenerates exactly to the center.
        """
        if jittered:
            radii, angles = self._jitter()
        else:
            radii = np.full(self.detector_count, self.ring_radius)
            angles = np.asarray(self.detector_angles)
        s = self.sir_subelements
        if s == 1:
            offsets = np.zeros(1)
        else:
            offsets = np.linspace(-self.sensor_diameter / 2.0,
                                  self.sensor_diameter / 2.0, s)
        cx = radii * np.cos(angles)
        cy = radii * np.sin(angles)
        tx = -np.sin(angles)
        ty = np.cos(angles)
        dsx = cx[:, None] + offsets[None, :] * tx[:, None]
        dsy = cy[:, None] + offsets[None, :] * ty[:, None]
        return dsx, dsy

    def max_source_detector_distance(self) -> float:
        """Upper bound on pixel-to-subelement distance (jitter included)."""
        r_out = self.ring_radius * (1.0 + self.position_jitter_frac)
        if self.sir_subelements > 1:
            r_out = float(np.hypot(r_out, self.sensor_diameter / 2.0))
        return r_out + self.half_diagonal()

    # -- identity / serialization --------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector_angles"] = list(self.detector_angles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingGeometry":
        return cls(**d)

    def geometry_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class Image:
    """Initial-pressure image on the geometry grid, [ny, nx] float array."""

    data: np.ndarray
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"image must be 2-D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Sinogram:
    """Measured pressure traces, [n_detectors, n_time_samples]."""

    data: np.ndarray
    geometry_ref: str = ""
    snr_db: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"sinogram must be 2-D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def check_image(geometry: ImagingGeometry, img: Image):
    if img.data.shape != geometry.image_shape:
        raise ShapeError(
            f"image shape {img.data.shape} != geometry grid {geometry.image_shape}")


def check_sinogram(geometry: ImagingGeometry, sino: Sinogram):
    if sino.data.shape != geometry.sinogram_shape:
        raise ShapeError(
            f"sinogram shape {sino.data.shape} != geometry {geometry.sinogram_shape}")
