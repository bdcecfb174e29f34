import numpy as np
import pytest

from tomoheight.core import BandId, Polarization, TomoCube, UNION_POLS
from tomoheight.fileio import align
from tomoheight.synth import SceneParams, Z_CENTERS_M, gen_cube, gen_height_field


def make_cube(nx=4, ny=5, nz=36, pols=(Polarization.HH,), band=BandId.P,
              seed=0, z_centers=None):
    """Small well-formed random cube for format and validation tests."""
    rng = np.random.default_rng(seed)
    z = Z_CENTERS_M[:nz] if z_centers is None else z_centers
    intensity = rng.uniform(0, 5, (len(pols), nx, ny, nz)).astype(np.float32)
    return TomoCube(band=band, pols=tuple(pols), z_centers_m=np.asarray(z, float),
                    intensity=intensity)


@pytest.fixture(scope="session")
def small_scene():
    """32x32 union-pol scene with mild noise, aligned."""
    params = SceneParams(seed=11, nx=32, ny=32, noise_rel=0.1)
    chm = gen_height_field(params)
    cube = gen_cube(chm, BandId.P, UNION_POLS, params)
    return align(cube, chm)


@pytest.fixture(scope="session")
def small_scene_params():
    return SceneParams(seed=11, nx=32, ny=32, noise_rel=0.1)
