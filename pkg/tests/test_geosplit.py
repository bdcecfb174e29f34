import numpy as np
import pytest

from tomoheight.core import SplitAssignment, SplitLabel
from tomoheight.errors import BadSpecError, DegenerateSplitError, TooSmallError
from tomoheight.geosplit import (
    Quadrant,
    SplitSpec,
    SplitStrategy,
    SwathOrientation,
    default_quadrant_roles,
    leakage_report,
    make_split,
    split_pixel_table,
)


def label_counts(a):
    return {lbl: int((a.labels == int(lbl)).sum()) for lbl in SplitLabel}


def regions_connected(a, label):
    mask = a.mask(label)
    n = int(mask.sum())
    if n == 0:
        return True
    seen = np.zeros_like(mask)
    sx, sy = np.argwhere(mask)[0]
    stack = [(int(sx), int(sy))]
    seen[sx, sy] = True
    count = 0
    while stack:
        x, y = stack.pop()
        count += 1
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            u, v = x + dx, y + dy
            if 0 <= u < mask.shape[0] and 0 <= v < mask.shape[1] \
                    and mask[u, v] and not seen[u, v]:
                seen[u, v] = True
                stack.append((u, v))
    return count == n


class TestSpecValidation:
    def test_ratio_sum_enforced(self):
        with pytest.raises(BadSpecError):
            SplitSpec(SplitStrategy.Swath, (0.7, 0.0, 0.2))

    def test_zero_val_allowed(self):
        SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2))

    def test_incomplete_roles_rejected(self):
        with pytest.raises(BadSpecError):
            SplitSpec(SplitStrategy.Quadrant, (0.5, 0.25, 0.25),
                      quadrant_roles={Quadrant.NW: SplitLabel.Train})

    def test_too_small_grid(self):
        with pytest.raises(TooSmallError):
            make_split(3, 10, SplitSpec(SplitStrategy.Swath, (0.8, 0.0, 0.2)))


class TestSwath:
    def test_along_range_boundaries(self):
        a = make_split(10, 10, SplitSpec(SplitStrategy.Swath, (0.8, 0.0, 0.2),
                                         orientation=SwathOrientation.AlongRange))
        assert np.all(a.labels[:8, :] == int(SplitLabel.Train))
        assert np.all(a.labels[8:, :] == int(SplitLabel.Test))

    def test_along_azimuth(self):
        a = make_split(10, 20, SplitSpec(SplitStrategy.Swath, (0.5, 0.25, 0.25),
                                         orientation=SwathOrientation.AlongAzimuth))
        assert np.all(a.labels[:, :10] == int(SplitLabel.Train))
        assert np.all(a.labels[:, 10:15] == int(SplitLabel.Val))
        assert np.all(a.labels[:, 15:] == int(SplitLabel.Test))


class TestSquare:
    def test_test_pixel_count_tracks_ratio(self):
        a = make_split(321, 665, SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2)))
        target = 0.2 * 321 * 665
        assert abs(label_counts(a)[SplitLabel.Test] - target) <= 665

    def test_center_placement(self):
        a = make_split(32, 32, SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2)))
        test_mask = a.mask(SplitLabel.Test)
        xs, ys = np.nonzero(test_mask)
        # rectangle roughly centered
        assert abs((xs.min() + xs.max()) / 2 - 15.5) <= 1.5
        assert abs((ys.min() + ys.max()) / 2 - 15.5) <= 1.5

    def test_val_rectangle_disjoint(self):
        a = make_split(48, 48, SplitSpec(SplitStrategy.Square, (0.7, 0.1, 0.2)))
        counts = label_counts(a)
        assert counts[SplitLabel.Val] > 0
        total = 48 * 48
        assert abs(counts[SplitLabel.Test] - 0.2 * total) <= 48
        assert abs(counts[SplitLabel.Val] - 0.1 * total) <= 48

    def test_explicit_origin(self):
        a = make_split(32, 32, SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2),
                                         test_origin=(0, 0)))
        assert a.labels[0, 0] == int(SplitLabel.Test)


class TestQuadrant:
    def test_explicit_roles_8x8(self):
        roles = {Quadrant.NW: SplitLabel.Train, Quadrant.NE: SplitLabel.Train,
                 Quadrant.SW: SplitLabel.Val, Quadrant.SE: SplitLabel.Test}
        a = make_split(8, 8, SplitSpec(SplitStrategy.Quadrant, (0.5, 0.25, 0.25),
                                       quadrant_roles=roles))
        counts = label_counts(a)
        assert counts[SplitLabel.Train] == 32
        assert counts[SplitLabel.Val] == 16
        assert counts[SplitLabel.Test] == 16

    def test_tabular_mode_three_to_one(self):
        roles = default_quadrant_roles((0.75, 0.0, 0.25))
        assert sum(1 for v in roles.values() if v is SplitLabel.Train) == 3
        assert sum(1 for v in roles.values() if v is SplitLabel.Test) == 1
        a = make_split(16, 16, SplitSpec(SplitStrategy.Quadrant, (0.75, 0.0, 0.25)))
        counts = label_counts(a)
        assert counts[SplitLabel.Train] == 192 and counts[SplitLabel.Test] == 64

    def test_exact_cnn_ratios(self):
        a = make_split(40, 40, SplitSpec(SplitStrategy.Quadrant, (0.5, 0.3, 0.2),
                                         exact_quadrant_ratios=True))
        counts = label_counts(a)
        total = 1600
        assert counts[SplitLabel.Train] == 800
        assert abs(counts[SplitLabel.Val] - 0.3 * total) <= 1
        assert abs(counts[SplitLabel.Test] - 0.2 * total) <= 1


class TestPartitionProperties:
    def test_random_specs_partition_and_ratios(self):
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 200:
            nx = int(rng.integers(8, 80))
            ny = int(rng.integers(8, 80))
            kind = rng.integers(3)
            if kind == 0:
                test = float(rng.uniform(0.1, 0.3))
                val = float(rng.choice([0.0, rng.uniform(0.1, 0.2)]))
                spec = SplitSpec(SplitStrategy.Swath, (1 - val - test, val, test),
                                 orientation=SwathOrientation(
                                     rng.choice(["along_range", "along_azimuth"])))
            elif kind == 1:
                test = float(rng.uniform(0.1, 0.3))
                val = float(rng.choice([0.0, rng.uniform(0.05, 0.15)]))
                spec = SplitSpec(SplitStrategy.Square, (1 - val - test, val, test))
            else:
                ratios = [(0.75, 0.0, 0.25), (0.5, 0.25, 0.25), (0.5, 0.3, 0.2)][
                    int(rng.integers(3))]
                spec = SplitSpec(SplitStrategy.Quadrant, ratios,
                                 exact_quadrant_ratios=(ratios == (0.5, 0.3, 0.2)))
            a = make_split(nx, ny, spec)
            counts = label_counts(a)
            total = nx * ny
            # exhaustive, mutually exclusive partition
            assert sum(counts.values()) == total
            # achieved fractions within one row/column of requested
            tol = max(nx, ny)
            for ratio, lbl in zip(spec.ratios,
                                  (SplitLabel.Train, SplitLabel.Val, SplitLabel.Test)):
                if spec.strategy is SplitStrategy.Quadrant and not spec.exact_quadrant_ratios:
                    continue  # quadrants quantize to quarters by construction
                assert abs(counts[lbl] - ratio * total) <= tol, (spec, counts)
            checked += 1

    def test_contiguity_swath_quadrant(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            nx, ny = int(rng.integers(8, 60)), int(rng.integers(8, 60))
            swath = make_split(nx, ny, SplitSpec(SplitStrategy.Swath, (0.6, 0.2, 0.2)))
            quad = make_split(nx, ny, SplitSpec(SplitStrategy.Quadrant, (0.5, 0.25, 0.25)))
            square = make_split(nx, ny, SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2)))
            for a in (swath, quad):
                for lbl in (SplitLabel.Train, SplitLabel.Val, SplitLabel.Test):
                    assert regions_connected(a, lbl)
            assert regions_connected(square, SplitLabel.Train)


class TestLeakageReport:
    def test_adjacent_quadrants_boundary(self):
        roles = {Quadrant.NW: SplitLabel.Train, Quadrant.NE: SplitLabel.Test,
                 Quadrant.SW: SplitLabel.Excluded, Quadrant.SE: SplitLabel.Excluded}
        a = make_split(8, 8, SplitSpec(SplitStrategy.Quadrant, (0.5, 0.25, 0.25),
                                       quadrant_roles=roles))
        rep = leakage_report(a)
        assert rep.boundary_edges == 4
        assert rep.disjoint

    def test_all_train_degenerate(self):
        a = SplitAssignment(labels=np.zeros((6, 6), dtype=np.uint8))
        with pytest.raises(DegenerateSplitError):
            leakage_report(a)

    def test_interior_test_counts(self):
        a = make_split(32, 32, SplitSpec(SplitStrategy.Square, (0.8, 0.0, 0.2)))
        rep = leakage_report(a)
        # monotone in distance and every test boundary pixel has a train
        # neighbor at Chebyshev distance 1
        assert rep.test_near_train[1] > 0
        assert (rep.test_near_train[1] <= rep.test_near_train[2]
                <= rep.test_near_train[4] <= rep.test_near_train[8])
        test_mask = a.mask(SplitLabel.Test)
        xs, ys = np.nonzero(test_mask)
        perimeter = ((xs == xs.min()) | (xs == xs.max())
                     | (ys == ys.min()) | (ys == ys.max())).sum()
        assert rep.test_near_train[1] == perimeter


class TestPixelTable:
    def test_all_test_grid(self):
        a = SplitAssignment(labels=np.full((4, 4), 2, dtype=np.uint8))
        table = split_pixel_table(a)
        assert len(table[SplitLabel.Test]) == 16
        assert all(len(table[lbl]) == 0 for lbl in
                   (SplitLabel.Train, SplitLabel.Val, SplitLabel.Excluded))

    def test_lengths_sum_to_grid(self):
        a = make_split(17, 23, SplitSpec(SplitStrategy.Swath, (0.6, 0.2, 0.2)))
        table = split_pixel_table(a)
        assert sum(len(v) for v in table.values()) == 17 * 23

    def test_roundtrip_preserves_lists(self, tmp_path):
        from tomoheight.fileio import read_split, write_split

        a = make_split(12, 12, SplitSpec(SplitStrategy.Quadrant, (0.5, 0.25, 0.25)))
        write_split(a, tmp_path / "x.smap")
        b = read_split(tmp_path / "x.smap")
        ta, tb = split_pixel_table(a), split_pixel_table(b)
        for lbl in SplitLabel:
            assert np.array_equal(ta[lbl], tb[lbl])
