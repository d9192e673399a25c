import datetime as dt

import numpy as np
import pytest

from stormens.errors import EmptyArchive, KeyOutOfRange, OutOfDomain
from stormens.griddata import (
    PATCH,
    Climatology,
    CoarseGridSpec,
    FineGridSpec,
    LabelGrid,
    PatchIndexMap,
    ReportRecord,
    build_climatology,
    build_patch_index,
    climatology_lookup,
    coarse_from_fine,
    extract_patch,
    grid_reports,
    haversine_km,
    nearest_cell,
    reports_from_csv,
    reports_to_csv,
)

DAY0 = dt.date(2020, 1, 1)


def make_fine(n=128, spacing=3.0):
    return FineGridSpec(n, n, spacing, origin_lat=40.0, origin_lon=-100.0)


def coarse_at_fine_indices(fine, idx_pairs, spacing_km=80.0):
    """Coarse grid whose centers sit at given (row, col) fine indices."""
    centers = np.empty((1, len(idx_pairs), 2))
    for j, (r, c) in enumerate(idx_pairs):
        lat, lon = fine.latlon(r, c)
        centers[0, j] = (lat, lon)
    return CoarseGridSpec(1, len(idx_pairs), spacing_km, centers)


# ---------------------------------------------------------------- patch index


def test_center_projection_simple():
    fine = make_fine(128)
    coarse = coarse_at_fine_indices(fine, [(64, 64)])
    idx = build_patch_index(fine, coarse)
    assert idx.origin(0, 0) == (32, 32)


def test_exact_fit_single_cell():
    fine = make_fine(64)
    coarse = coarse_at_fine_indices(fine, [(32, 32)])
    idx = build_patch_index(fine, coarse)
    assert idx.origin(0, 0) == (0, 0)


def oracle_best_footprint(fine, lat, lon):
    """Brute-force scan maximizing overlap with the centered window."""
    rf, cf = fine.project(lat, lon)
    ci, cj = int(np.floor(rf + 1e-9)), int(np.floor(cf + 1e-9))
    best, best_score = None, -1.0
    for r0 in range(fine.n_rows - PATCH + 1):
        for c0 in range(fine.n_cols - PATCH + 1):
            ov_r = PATCH - abs(r0 - (ci - PATCH // 2))
            ov_c = PATCH - abs(c0 - (cj - PATCH // 2))
            score = max(ov_r, 0) * max(ov_c, 0)
            if score > best_score:
                best, best_score = (r0, c0), score
    return best


def test_random_centers_match_bruteforce_overlap():
    rng = np.random.default_rng(42)
    fine = make_fine(150)
    pairs = []
    for _ in range(100):
        r = rng.uniform(32.0, fine.n_rows - 33.0)
        c = rng.uniform(32.0, fine.n_cols - 33.0)
        pairs.append((r, c))
    coarse = coarse_at_fine_indices(fine, pairs)
    idx = build_patch_index(fine, coarse)
    # spot-check the slow oracle on a subset; exhaustive scan is O(n^2) per cell
    for j in rng.choice(len(pairs), size=12, replace=False):
        lat, lon = coarse.center(0, int(j))
        assert idx.origin(0, int(j)) == oracle_best_footprint(fine, lat, lon)


def test_footprint_must_fit():
    fine = make_fine(100)
    coarse = coarse_at_fine_indices(fine, [(10, 50)])
    with pytest.raises(OutOfDomain):
        build_patch_index(fine, coarse)


def test_patch_index_deterministic():
    fine = make_fine(128)
    coarse = coarse_from_fine(fine, 2, 2)
    a = build_patch_index(fine, coarse)
    b = build_patch_index(fine, coarse)
    assert np.array_equal(a.origins, b.origins)


def test_coarse_from_fine_footprints_always_fit():
    fine = make_fine(192)
    coarse = coarse_from_fine(fine, 6, 6)
    idx = build_patch_index(fine, coarse)  # does not raise
    assert idx.origins.min() >= 0
    assert idx.origins.max() <= 192 - PATCH


# --------------------------------------------------------------- extract_patch


def test_extract_constant_field():
    idx = PatchIndexMap(np.array([[[5, 7]]]))
    field = np.full((128, 128), 5.0)
    assert np.all(extract_patch(field, (0, 0), idx) == 5.0)


def test_extract_ramp_index_identity():
    idx = PatchIndexMap(np.array([[[2, 3]]]))
    field = np.arange(128.0 * 128.0).reshape(128, 128)
    patch = extract_patch(field, (0, 0), idx)
    assert patch[0, 0] == field[2, 3]
    assert patch[10, 20] == field[12, 23]


def test_extract_matches_loop_oracle():
    rng = np.random.default_rng(0)
    field = rng.standard_normal((150, 170))
    r0, c0 = 31, 55
    idx = PatchIndexMap(np.array([[[r0, c0]]]))
    patch = extract_patch(field, (0, 0), idx)
    for i in range(PATCH):
        for j in range(PATCH):
            assert patch[i, j] == field[r0 + i, c0 + j]


def test_plant_and_readback_bit_exact():
    rng = np.random.default_rng(1)
    fine = make_fine(128)
    coarse = coarse_at_fine_indices(fine, [(64, 64)])
    idx = build_patch_index(fine, coarse)
    block = rng.standard_normal((PATCH, PATCH))
    field = np.zeros((128, 128))
    r0, c0 = idx.origin(0, 0)
    field[r0:r0 + PATCH, c0:c0 + PATCH] = block
    assert np.array_equal(extract_patch(field, (0, 0), idx), block)


def test_extract_out_of_domain():
    idx = PatchIndexMap(np.array([[[100, 100]]]))
    with pytest.raises(OutOfDomain):
        extract_patch(np.zeros((120, 120)), (0, 0), idx)


# ---------------------------------------------------------------- grid_reports


def small_coarse(fine):
    return coarse_from_fine(fine, 3, 3)


def test_single_report_stamps_four_windows():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat, lon = coarse.center(1, 1)
    rep = ReportRecord("hail", lat, lon, hour=5, day=DAY0)
    grid, skipped = grid_reports([rep], coarse, DAY0, n_days=1)
    assert skipped == 0
    assert sorted(np.flatnonzero(grid.labels[0, :, 1, 1])) == [3, 4, 5, 6]
    assert grid.labels.sum() == 4


def test_hour_zero_clips_to_day_start():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat, lon = coarse.center(0, 0)
    rep = ReportRecord("wind", lat, lon, hour=0, day=DAY0)
    grid, _ = grid_reports([rep], coarse, DAY0, n_days=1)
    assert sorted(np.flatnonzero(grid.labels[0, :, 0, 0])) == [0, 1]


def test_hour_23_clips_to_day_end():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat, lon = coarse.center(0, 0)
    rep = ReportRecord("tornado", lat, lon, hour=23, day=DAY0)
    grid, _ = grid_reports([rep], coarse, DAY0, n_days=1)
    assert sorted(np.flatnonzero(grid.labels[0, :, 0, 0])) == [21, 22, 23]


def oracle_grid_reports(reports, coarse, day0, n_days, hours=24):
    """Exhaustive distance scan + window stamping, written independently."""
    labels = np.zeros((n_days, hours, coarse.n_rows, coarse.n_cols), dtype=np.uint8)
    skipped = 0
    for rep in reports:
        best = None
        best_d = np.inf
        for i in range(coarse.n_rows):
            for j in range(coarse.n_cols):
                lat, lon = coarse.center(i, j)
                d = haversine_km(rep.lat, rep.lon, lat, lon)
                if d < best_d - 1e-12:
                    best, best_d = (i, j), d
        if best_d > 0.75 * coarse.spacing_km:
            skipped += 1
            continue
        for h in (rep.hour - 2, rep.hour - 1, rep.hour, rep.hour + 1):
            if 0 <= h < hours:
                labels[(rep.day - day0).days, h, best[0], best[1]] = 1
    return labels, skipped


def test_random_reports_match_bruteforce():
    rng = np.random.default_rng(9)
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat_lo, lon_lo = fine.latlon(0, 0)
    lat_hi, lon_hi = fine.latlon(191, 191)
    reports = []
    for _ in range(50):
        reports.append(
            ReportRecord(
                category=str(rng.choice(["hail", "wind", "tornado"])),
                lat=float(rng.uniform(lat_lo, lat_hi)),
                lon=float(rng.uniform(lon_lo, lon_hi)),
                hour=int(rng.integers(0, 24)),
                day=DAY0 + dt.timedelta(days=int(rng.integers(0, 5))),
            )
        )
    grid, skipped = grid_reports(reports, coarse, DAY0, n_days=5)
    want, want_skipped = oracle_grid_reports(reports, coarse, DAY0, 5)
    assert skipped == want_skipped
    assert np.array_equal(grid.labels, want)


def test_report_increments_at_most_four_same_day():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat, lon = coarse.center(2, 2)
    for hour in range(24):
        rep = ReportRecord("hail", lat, lon, hour=hour, day=DAY0)
        grid, _ = grid_reports([rep], coarse, DAY0, n_days=2)
        assert 2 <= grid.labels[0].sum() <= 4
        assert grid.labels[1].sum() == 0  # never crosses a day boundary


def test_far_report_counted_and_skipped():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    rep = ReportRecord("hail", 10.0, 10.0, hour=6, day=DAY0)
    grid, skipped = grid_reports([rep], coarse, DAY0, n_days=1)
    assert skipped == 1
    assert grid.labels.sum() == 0


def test_report_outside_archive_range():
    fine = make_fine(192)
    coarse = small_coarse(fine)
    lat, lon = coarse.center(0, 0)
    rep = ReportRecord("hail", lat, lon, hour=6, day=DAY0 + dt.timedelta(days=9))
    with pytest.raises(KeyOutOfRange):
        grid_reports([rep], coarse, DAY0, n_days=5)


def test_nearest_cell_tie_breaks_to_lowest():
    # two centers equidistant from the probe point
    centers = np.array([[[40.0, -100.0], [40.0, -99.0]]])
    coarse = CoarseGridSpec(1, 2, 80.0, centers)
    cell = nearest_cell(coarse, 40.0, -99.5)
    assert cell == (0, 0)


def test_reports_csv_roundtrip(tmp_path):
    reports = [
        ReportRecord("hail", 40.25, -99.75, 5, DAY0),
        ReportRecord("tornado", 41.0, -98.5, 23, DAY0 + dt.timedelta(days=3)),
    ]
    p = tmp_path / "reports.csv"
    reports_to_csv(reports, p)
    assert p.read_text().splitlines()[0] == "day,hour,category,lat,lon"
    assert reports_from_csv(p) == reports


# ---------------------------------------------------------------- climatology


def year_archive(fill, nr=2, nc=2, hours=24, days=365):
    labels = np.full((days, hours, nr, nc), fill, dtype=np.uint8)
    return LabelGrid(labels, DAY0)


def test_all_zero_archive_clamps_to_floor():
    clim = build_climatology(year_archive(0))
    assert np.all(clim.prob == 1e-4)


def test_all_one_archive_clamps_to_ceiling():
    clim = build_climatology(year_archive(1))
    assert np.all(clim.prob == 1.0 - 1e-4)


def test_unsmoothed_single_year_matches_counting_oracle():
    rng = np.random.default_rng(5)
    labels = (rng.random((40, 24, 2, 2)) < 0.3).astype(np.uint8)
    grid = LabelGrid(labels, DAY0)
    clim = build_climatology(grid, sigma_doy=0.0, sigma_hour=0.0)
    for d in range(40):
        k = grid.doy_index(d)
        for h in range(24):
            for i in range(2):
                for j in range(2):
                    want = np.clip(float(labels[d, h, i, j]), 1e-4, 1 - 1e-4)
                    assert clim.prob[i, j, k, h] == pytest.approx(want)


def test_empty_archive_rejected():
    with pytest.raises(EmptyArchive):
        build_climatology(LabelGrid(np.zeros((0, 24, 2, 2), dtype=np.uint8), DAY0))


def test_lookup_constant_table():
    clim = Climatology(np.full((2, 2, 365, 24), 0.3))
    assert climatology_lookup(clim, (1, 1), 100, 12) == pytest.approx(0.3)


def test_lookup_doy_wraps():
    prob = np.full((1, 1, 365, 24), 0.2)
    prob[0, 0, 0, :] = 0.9
    clim = Climatology(prob)
    assert climatology_lookup(clim, (0, 0), 366, 0) == pytest.approx(0.9)
    assert climatology_lookup(clim, (0, 0), 1, 0) == pytest.approx(0.9)


def test_lookup_random_readback():
    rng = np.random.default_rng(8)
    prob = rng.uniform(1e-4, 1 - 1e-4, size=(3, 4, 365, 24))
    clim = Climatology(prob)
    for _ in range(200):
        r = int(rng.integers(0, 3))
        c = int(rng.integers(0, 4))
        doy = int(rng.integers(1, 366))
        h = int(rng.integers(0, 24))
        assert climatology_lookup(clim, (r, c), doy, h) == prob[r, c, doy - 1, h]


def test_lookup_bad_cell():
    clim = Climatology(np.full((2, 2, 365, 24), 0.3))
    with pytest.raises(KeyOutOfRange):
        climatology_lookup(clim, (5, 0), 10, 3)


def test_label_grid_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    labels = (rng.random((6, 24, 3, 3)) < 0.2).astype(np.uint8)
    grid = LabelGrid(labels, DAY0)
    grid.save(tmp_path / "labels.npz")
    back = LabelGrid.load(tmp_path / "labels.npz")
    assert back.day0 == DAY0
    assert back.window_len == 4
    assert np.array_equal(back.labels, labels)


def test_climatology_bundle_roundtrip(tmp_path):
    clim = Climatology(np.full((2, 2, 365, 24), 0.25), source_years="1986-2015")
    clim.save(tmp_path / "clim.npz")
    back = Climatology.load(tmp_path / "clim.npz")
    assert back.source_years == "1986-2015"
    assert np.array_equal(back.prob, clim.prob)
