"""Synthetic paired (cube, height map) scenes with known ground truth.

The simulator stands in for a real tomographic acquisition at desk scale.
Each pixel's vertical response is a two-Gaussian profile: a ground return
at z=0 and a canopy return centered at the true height.  Polarizations
reweight the two terms (HH emphasizes ground, HV/VV the canopy), the
profile is blurred along z by the band's vertical resolution and
multiplicative uniform noise is applied per voxel.  This is an explicit
stand-in, not a scattering model.

Everything is a pure function of (params, seed): identical inputs produce
bit-identical float32 outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BandId, CanopyHeightMap, Polarization, TomoCube, band_registry
from .errors import BadParamsError, EmptyVegetationWindowError

#: Fixed cube height grid: 36 bins, 2 m spacing, spanning -6 m .. +64 m.
#: Covers sub-ground response and 20-35 m canopies with headroom.
NZ = 36
Z_CENTERS_M = -6.0 + 2.0 * np.arange(NZ, dtype=np.float64)

#: Gaussian FWHM / sigma.
_FWHM = 2.355

# Seed-stream tags so the height field and per-pol noise never share a stream.
_HEIGHT_STREAM = 0x48
_NOISE_STREAM = 0x4E


@dataclass(frozen=True)
class SceneParams:
    seed: int
    nx: int
    ny: int
    height_range_m: tuple[float, float] = (20.0, 35.0)
    correlation_length_px: float = 8.0
    ground_amp: float = 1.0
    canopy_amp: float = 1.0
    ground_sigma_m: float = 2.0
    canopy_sigma_m: float = 3.0
    noise_rel: float = 0.1
    gap_fraction: float = 0.0

    def __post_init__(self):
        lo, hi = self.height_range_m
        if not (lo < hi):
            raise BadParamsError("height_range_m must satisfy lo < hi")
        if self.nx < 1 or self.ny < 1:
            raise BadParamsError("grid dims must be positive")
        if self.ground_amp < 0 or self.canopy_amp < 0:
            raise BadParamsError("amplitudes must be non-negative")
        if self.ground_sigma_m <= 0 or self.canopy_sigma_m <= 0:
            raise BadParamsError("profile sigmas must be positive")
        if not (0 <= self.noise_rel < 1):
            raise BadParamsError("noise_rel must be in [0, 1)")
        if not (0 <= self.gap_fraction < 1):
            raise BadParamsError("gap_fraction must be in [0, 1)")
        if self.correlation_length_px <= 0:
            raise BadParamsError("correlation_length_px must be positive")


@dataclass(frozen=True)
class VerticalProfile:
    """Per-pixel scattering distribution sampled at the height-bin centers."""

    z_centers_m: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.z_centers_m.shape != self.values.shape:
            raise BadParamsError("z grid and values must have equal length")


def gen_height_field(params: SceneParams) -> CanopyHeightMap:
    """Generate a smooth, bounded canopy height field.

    Sum of nx*ny/64 random Gaussian bumps on a uniform base at the middle of
    the height range, clamped to the range; ``gap_fraction`` of the pixels
    (rounded to the nearest pixel) are set to nodata.
    """
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, _HEIGHT_STREAM]))
    lo, hi = params.height_range_m
    nx, ny = params.nx, params.ny
    field = np.full((nx, ny), (lo + hi) / 2.0, dtype=np.float64)

    n_bumps = max(1, (nx * ny) // 64)
    cx = rng.uniform(0, nx, n_bumps)
    cy = rng.uniform(0, ny, n_bumps)
    amp = rng.uniform(-0.45 * (hi - lo), 0.45 * (hi - lo), n_bumps)
    sigma = params.correlation_length_px
    reach = int(math.ceil(4 * sigma))
    xs = np.arange(nx, dtype=np.float64)
    ys = np.arange(ny, dtype=np.float64)
    for i in range(n_bumps):
        x0 = max(0, int(cx[i]) - reach)
        x1 = min(nx, int(cx[i]) + reach + 1)
        y0 = max(0, int(cy[i]) - reach)
        y1 = min(ny, int(cy[i]) + reach + 1)
        gx = np.exp(-((xs[x0:x1] - cx[i]) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((ys[y0:y1] - cy[i]) ** 2) / (2 * sigma * sigma))
        field[x0:x1, y0:y1] += amp[i] * np.outer(gx, gy)

    np.clip(field, lo, hi, out=field)

    n_gaps = int(round(params.gap_fraction * nx * ny))
    if n_gaps:
        flat = rng.choice(nx * ny, size=n_gaps, replace=False)
        field.reshape(-1)[flat] = np.nan
    return CanopyHeightMap(heights_m=field.astype(np.float32))


def profile_at(h_m: float, params: SceneParams,
               z_centers: np.ndarray = Z_CENTERS_M) -> VerticalProfile:
    """Noise-free two-Gaussian vertical profile for a canopy of height h_m."""
    if h_m < 0:
        raise BadParamsError("height must be non-negative")
    z = np.asarray(z_centers, dtype=np.float64)
    vals = (params.ground_amp * np.exp(-z ** 2 / (2 * params.ground_sigma_m ** 2))
            + params.canopy_amp * np.exp(-(z - h_m) ** 2 / (2 * params.canopy_sigma_m ** 2)))
    return VerticalProfile(z_centers_m=z, values=vals)


def _pol_amps(pol: Polarization, params: SceneParams) -> tuple[float, float]:
    # HH sees more ground double-bounce; the V channels see more canopy volume.
    if pol is Polarization.HH:
        return params.ground_amp * 1.5, params.canopy_amp
    return params.ground_amp, params.canopy_amp * 1.25


def _z_blur_kernel(vertical_res_m: float, bin_m: float) -> np.ndarray:
    sigma_bins = vertical_res_m / _FWHM / bin_m
    radius = max(1, int(math.ceil(4 * sigma_bins)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-t ** 2 / (2 * sigma_bins ** 2))
    return k / k.sum()


def _blur_z(vol: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # 'same' convolution along the last axis with zero padding
    radius = len(kernel) // 2
    padded = np.pad(vol, [(0, 0)] * (vol.ndim - 1) + [(radius, radius)])
    out = np.zeros_like(vol)
    for t, w in enumerate(kernel):
        out += w * padded[..., t:t + vol.shape[-1]]
    return out


def gen_cube(chm: CanopyHeightMap, band: BandId,
             pols: tuple[Polarization, ...], params: SceneParams) -> TomoCube:
    """Simulate a tomographic cube consistent with the given height map.

    Per pixel and polarization: two-Gaussian profile, z-blur at the band's
    vertical resolution (Gaussian std = resolution / 2.355), multiplicative
    noise (1 + noise_rel * u), u uniform in [-1, 1] per voxel, clamped at 0.
    Nodata pixels get ground-only profiles.
    """
    if len(pols) == 0 or len(set(pols)) != len(pols):
        raise BadParamsError("pols must be a non-empty set")
    nx, ny = chm.nx, chm.ny
    z = Z_CENTERS_M
    nodata = chm.nodata
    h = np.where(nodata, 0.0, chm.heights_m.astype(np.float64))

    kernel = _z_blur_kernel(band_registry()[band].vertical_res_m, float(z[1] - z[0]))
    ground_term = np.exp(-z ** 2 / (2 * params.ground_sigma_m ** 2))
    canopy_shape = np.exp(-(z[None, None, :] - h[:, :, None]) ** 2
                          / (2 * params.canopy_sigma_m ** 2))

    volumes = np.empty((len(pols), nx, ny, NZ), dtype=np.float32)
    for p, pol in enumerate(pols):
        g_amp, c_amp = _pol_amps(pol, params)
        c_amp_px = np.where(nodata, 0.0, c_amp)
        vol = g_amp * ground_term[None, None, :] + c_amp_px[:, :, None] * canopy_shape
        vol = _blur_z(vol, kernel)
        if params.noise_rel > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([params.seed, _NOISE_STREAM, p]))
            vol = vol * (1.0 + params.noise_rel * rng.uniform(-1.0, 1.0, vol.shape))
        np.clip(vol, 0.0, None, out=vol)
        volumes[p] = vol.astype(np.float32)

    return TomoCube(band=band, pols=tuple(pols), z_centers_m=z.copy(),
                    intensity=volumes)


def gen_scene(params: SceneParams, band: BandId,
              pols: tuple[Polarization, ...]) -> tuple[TomoCube, CanopyHeightMap]:
    chm = gen_height_field(params)
    return gen_cube(chm, band, pols, params), chm


def oracle_height(profile: VerticalProfile, z_min_veg_m: float = 5.0) -> float:
    """Brute-force reference predictor: argmax bin center at or above z_min.

    Ties (including all-zero profiles) break toward the lowest z bin.  This
    is the non-learned oracle that acceptance tests compare models against.
    """
    window = profile.z_centers_m >= z_min_veg_m
    if not np.any(window):
        raise EmptyVegetationWindowError(
            f"no height bins at or above {z_min_veg_m} m")
    vals = profile.values[window]
    return float(profile.z_centers_m[window][int(np.argmax(vals))])


def profile_is_degenerate(profile: VerticalProfile, z_min_veg_m: float = 5.0) -> bool:
    """True when the vegetation window carries no usable peak (all values equal)."""
    window = profile.z_centers_m >= z_min_veg_m
    if not np.any(window):
        raise EmptyVegetationWindowError(
            f"no height bins at or above {z_min_veg_m} m")
    vals = profile.values[window]
    return bool(np.all(vals == vals[0]))


def oracle_height_map(cube: TomoCube, z_min_veg_m: float = 5.0) -> np.ndarray:
    """Apply the oracle per pixel to the pol-averaged profile stack."""
    window = np.asarray(cube.z_centers_m) >= z_min_veg_m
    if not np.any(window):
        raise EmptyVegetationWindowError(
            f"no height bins at or above {z_min_veg_m} m")
    mean_profile = cube.intensity.astype(np.float64).mean(axis=0)
    idx = np.argmax(mean_profile[:, :, window], axis=2)
    return np.asarray(cube.z_centers_m)[window][idx]
