import numpy as np
import pytest

from conftest import make_cube
from tomoheight.core import (
    BandId,
    MetricsReport,
    Polarization,
    SplitLabel,
    band_registry,
    parse_pols,
    pols_to_str,
    validate_cube,
)


class TestBandRegistry:
    def test_exactly_three_bands(self):
        reg = band_registry()
        assert set(reg) == {BandId.P, BandId.LMono, BandId.LBi}

    @pytest.mark.parametrize("band,slant,azimuth,vertical,passes,wavelength", [
        (BandId.P, 5.0, 1.0, 3.0, 28, 0.69),
        (BandId.LMono, 3.0, 0.55, 1.3, 30, 0.22),
        (BandId.LBi, 3.0, 0.55, 2.3, 30, 0.22),
    ])
    def test_registry_values(self, band, slant, azimuth, vertical, passes, wavelength):
        meta = band_registry()[band]
        assert meta.slant_range_res_m == slant
        assert meta.azimuth_res_m == azimuth
        assert meta.vertical_res_m == vertical
        assert meta.num_passes == passes
        assert meta.wavelength_m == wavelength

    def test_registry_is_immutable(self):
        with pytest.raises(TypeError):
            band_registry()[BandId.P] = None


class TestValidateCube:
    def test_well_formed_accepted(self):
        assert validate_cube(make_cube()) is None

    def test_nan_voxel(self):
        cube = make_cube()
        cube.intensity[0, 1, 2, 3] = np.nan
        assert validate_cube(cube) == "NonFiniteIntensity"

    def test_negative_voxel(self):
        cube = make_cube()
        cube.intensity[0, 0, 0, 0] = -0.5
        assert validate_cube(cube) == "NegativeIntensity"

    def test_reversed_z(self):
        cube = make_cube(z_centers=np.linspace(64, -6, 36))
        assert validate_cube(cube) == "NonMonotoneZAxis"

    def test_nonuniform_z(self):
        z = np.arange(36, dtype=float)
        z[20] += 0.5
        cube = make_cube(z_centers=z)
        assert validate_cube(cube) == "NonMonotoneZAxis"

    def test_pol_count_mismatch(self):
        cube = make_cube(pols=(Polarization.HH, Polarization.HV))
        bad = make_cube()
        object.__setattr__(bad, "intensity", cube.intensity)
        assert validate_cube(bad) == "DimensionMismatch"

    def test_z_length_mismatch(self):
        cube = make_cube(nz=10, z_centers=np.arange(12, dtype=float))
        assert validate_cube(cube) == "DimensionMismatch"


class TestMetricsReport:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            MetricsReport(mae_m=2.0, rmse_m=1.0, r2=0.5, normalized_mae=1.0,
                          n_samples=10, split=SplitLabel.Test)
        with pytest.raises(ValueError):
            MetricsReport(mae_m=1.0, rmse_m=2.0, r2=1.5, normalized_mae=1.0,
                          n_samples=10, split=SplitLabel.Test)
        with pytest.raises(ValueError):
            MetricsReport(mae_m=1.0, rmse_m=2.0, r2=0.5, normalized_mae=1.0,
                          n_samples=0, split=SplitLabel.Test)


def test_pols_roundtrip():
    assert parse_pols("HH+HV+VV") == (Polarization.HH, Polarization.HV, Polarization.VV)
    assert parse_pols("hv") == (Polarization.HV,)
    assert pols_to_str(parse_pols("HH,VV")) == "HH+VV"
    with pytest.raises(ValueError):
        parse_pols("HH+HH")
    with pytest.raises(ValueError):
        parse_pols("")
