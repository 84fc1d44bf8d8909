import numpy as np
import pytest

from oatdar.geometry import ImagingGeometry
from oatdar.operator import entry_scale


@pytest.fixture(scope="session")
def toy_geometry():
    """16x16 grid, 8 detectors, 128 time samples, 2 sub-elements, no jitter."""
    return ImagingGeometry(
        grid_nx=16, grid_ny=16, pixel_pitch=110e-6,
        detector_count=8, ring_radius=5e-3,
        position_jitter_frac=0.0, sound_speed=1490.0,
        dt=1.0 / 24.4e6, time_samples=128,
        sir_subelements=2, sensor_diameter=2e-3, jitter_seed=1)


@pytest.fixture(scope="session")
def tik_geometry():
    """12x12 grid used by the dense Tikhonov cross-check."""
    return ImagingGeometry(
        grid_nx=12, grid_ny=12, pixel_pitch=110e-6,
        detector_count=6, ring_radius=4e-3,
        position_jitter_frac=0.0, sound_speed=1490.0,
        dt=1.0 / 24.4e6, time_samples=96,
        sir_subelements=1, jitter_seed=1)


def dense_spreading_oracle(geom, jittered=False):
    """Brute-force spreading matrix: test every (detector, time, pixel) cell
    against the travel-time window, summing sub-elements in order."""
    px, py = geom.pixel_coords()
    dsx, dsy = geom.subelement_positions(jittered=jittered)
    nd, nt, n = geom.detector_count, geom.time_samples, geom.n_pixels
    base = entry_scale(geom)
    dt, vs = geom.dt, geom.sound_speed
    tk = np.arange(nt) * dt
    a = np.zeros((nd * nt, n))
    for l in range(nd):
        for j in range(n):
            for s in range(geom.sir_subelements):
                dx = px[j] - dsx[l, s]
                dy = py[j] - dsy[l, s]
                dist = np.sqrt(dx * dx + dy * dy)
                hit = np.abs(tk - dist / vs) < 0.5 * dt
                a[l * nt + np.flatnonzero(hit), j] += base / dist
    return a


def dense_derivative_oracle(nt, dt):
    """Explicit dense time-derivative matrix (central + one-sided ends)."""
    d = np.zeros((nt, nt))
    d[0, 0], d[0, 1] = -1.0 / dt, 1.0 / dt
    d[nt - 1, nt - 2] += -1.0 / dt
    d[nt - 1, nt - 1] += 1.0 / dt
    for m in range(1, nt - 1):
        d[m, m - 1] += -0.5 / dt
        d[m, m + 1] += 0.5 / dt
    return d


def dense_full_oracle(geom, jittered=False):
    """Dense full operator: block time derivative times spreading matrix."""
    a_s = dense_spreading_oracle(geom, jittered=jittered)
    d = dense_derivative_oracle(geom.time_samples, geom.dt)
    nd, nt = geom.detector_count, geom.time_samples
    out = np.empty_like(a_s)
    for l in range(nd):
        out[l * nt:(l + 1) * nt] = d @ a_s[l * nt:(l + 1) * nt]
    return out
