import math

import numpy as np
import pytest

from stormens.errors import (
    EmptyInput,
    LengthMismatch,
    SingleMemberEnsemble,
    UnknownPredictor,
    ZeroVariance,
)
from stormens.neural.losses import binary_cross_entropy
from stormens.verification import (
    VerificationTable,
    aggregate_bss,
    brier_score,
    discard_test,
    murphy_decompose,
    neighborhood_bss_map,
    pattern_correlation,
    permutation_importance,
    reliability_curve,
    spread_skill,
)


def make_table(members, obs, clim=None, windows=None, cells=None, days=None):
    members = np.atleast_2d(np.asarray(members, dtype=float))
    n = len(members)
    return VerificationTable(
        days=np.zeros(n, dtype=int) if days is None else np.asarray(days),
        windows=np.zeros(n, dtype=int) if windows is None else np.asarray(windows),
        cells=np.zeros((n, 2), dtype=int) if cells is None else np.asarray(cells),
        members=members,
        obs=np.asarray(obs, dtype=float),
        clim=np.full(n, 0.1) if clim is None else np.asarray(clim, dtype=float),
    )


def random_table(rng, n, k=5, n_windows=4, grid=(3, 3)):
    p = rng.uniform(0.01, 0.99, (n, k))
    return VerificationTable(
        days=rng.integers(0, 10, n),
        windows=rng.integers(0, n_windows, n),
        cells=np.stack([rng.integers(0, grid[0], n), rng.integers(0, grid[1], n)], axis=1),
        members=p,
        obs=(rng.random(n) < 0.3).astype(float),
        clim=rng.uniform(0.05, 0.4, n),
    )


# ---------------------------------------------------------------- brier score


def test_brier_perfect_forecast():
    o = np.array([0.0, 1.0, 1.0])
    assert brier_score(o, o) == 0.0


def test_brier_half_everywhere():
    p = np.full(8, 0.5)
    o = (np.arange(8) % 2).astype(float)
    assert brier_score(p, o) == pytest.approx(0.25, rel=1e-15)


def test_brier_matches_summation_oracle():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, 1001)
    o = (rng.random(1001) < 0.2).astype(float)
    want = math.fsum((pi - oi) ** 2 for pi, oi in zip(p, o)) / 1001
    assert brier_score(p, o) == pytest.approx(want, rel=1e-13)


def test_brier_errors():
    with pytest.raises(LengthMismatch):
        brier_score(np.zeros(3), np.zeros(4))
    with pytest.raises(EmptyInput):
        brier_score(np.zeros(0), np.zeros(0))


# --------------------------------------------------------------- aggregate BSS


def test_bss_of_climatology_forecast_is_zero():
    rng = np.random.default_rng(1)
    t = random_table(rng, 500)
    bss = aggregate_bss(t, "all", forecast=t.clim)
    assert bss[None] == pytest.approx(0.0, abs=1e-12)


def test_bss_of_perfect_forecast_is_one():
    rng = np.random.default_rng(2)
    t = random_table(rng, 500)
    bss = aggregate_bss(t, "all", forecast=t.obs.astype(float))
    assert bss[None] == pytest.approx(1.0, abs=1e-12)


def test_bss_never_exceeds_one():
    rng = np.random.default_rng(3)
    for trial in range(5):
        t = random_table(rng, 200)
        for group in ("all", "window", "cell"):
            for v in aggregate_bss(t, group).values():
                assert v <= 1.0 + 1e-12


def oracle_bss_by_window(table):
    """Materialize the full (day, window, cell) score arrays, then average."""
    keys = sorted({(int(d), int(w), int(r), int(c))
                   for d, w, (r, c) in zip(table.days, table.windows, table.cells)})
    key_to_row = {}
    for i in range(len(table)):
        key_to_row[(int(table.days[i]), int(table.windows[i]),
                    int(table.cells[i, 0]), int(table.cells[i, 1]))] = i
    windows = sorted({k[1] for k in keys})
    out = {}
    for w in windows:
        bs_vals, clim_vals = [], []
        for k in keys:
            if k[1] != w:
                continue
            i = key_to_row[k]
            p = table.members[i].mean()
            bs_vals.append((p - table.obs[i]) ** 2)
            clim_vals.append((table.clim[i] - table.obs[i]) ** 2)
        out[w] = 1.0 - (math.fsum(bs_vals) / len(bs_vals)) / (
            math.fsum(clim_vals) / len(clim_vals)
        )
    return out


def test_bss_grouped_by_window_matches_two_pass_oracle():
    rng = np.random.default_rng(4)
    # full key coverage: one row per (day, window, cell)
    days, windows, cells = [], [], []
    for d in range(6):
        for w in range(4):
            for r in range(2):
                for c in range(2):
                    days.append(d)
                    windows.append(w)
                    cells.append((r, c))
    n = len(days)
    t = VerificationTable(
        days=np.array(days),
        windows=np.array(windows),
        cells=np.array(cells),
        members=rng.uniform(0.01, 0.99, (n, 7)),
        obs=(rng.random(n) < 0.3).astype(float),
        clim=rng.uniform(0.05, 0.4, n),
    )
    got = aggregate_bss(t, "window")
    want = oracle_bss_by_window(t)
    for w in want:
        assert got[w] == pytest.approx(want[w], rel=1e-12)


# -------------------------------------------------------- murphy decomposition


def test_murphy_constant_climatological_forecast():
    rng = np.random.default_rng(5)
    o = (rng.random(400) < 0.25).astype(float)
    p = np.full(400, o.mean())
    rel, res, unc = murphy_decompose(p, o)
    assert rel == pytest.approx(0.0, abs=1e-15)
    assert res == pytest.approx(0.0, abs=1e-15)
    assert brier_score(p, o) == pytest.approx(unc, rel=1e-12)


def test_murphy_identity_on_bin_centers():
    rng = np.random.default_rng(6)
    edges = np.linspace(0, 1, 21)
    centers = (edges[:-1] + edges[1:]) / 2
    p = centers[rng.integers(0, 20, 2000)]
    o = (rng.random(2000) < p).astype(float)
    rel, res, unc = murphy_decompose(p, o, bins=20)
    assert rel - res + unc == pytest.approx(brier_score(p, o), abs=1e-12)


def test_murphy_two_bin_hand_case():
    p = np.array([0.2, 0.2, 0.8, 0.8])
    o = np.array([0.0, 1.0, 1.0, 1.0])
    rel, res, unc = murphy_decompose(p, o, bins=np.array([0.0, 0.5, 1.0]))
    assert rel == pytest.approx(0.065, abs=1e-15)
    assert res == pytest.approx(0.0625, abs=1e-15)
    assert unc == pytest.approx(0.1875, abs=1e-15)


def test_murphy_empty_input():
    with pytest.raises(EmptyInput):
        murphy_decompose(np.zeros(0), np.zeros(0))


# ----------------------------------------------------------- reliability curve


def test_reliability_calibrated_simulation_inside_cis():
    rng = np.random.default_rng(7)
    n = 20_000
    p = rng.uniform(0, 1, n)
    o = (rng.random(n) < p).astype(float)
    summary = reliability_curve(p, o, bins=20, n_boot=100, seed=3)
    occupied = summary.count > 0
    hit = 0
    for b in np.flatnonzero(occupied):
        if summary.ci_lo[b] - 1e-12 <= summary.mean_forecast[b] <= summary.ci_hi[b] + 1e-12:
            hit += 1
    assert hit / occupied.sum() >= 0.9


def test_reliability_no_events():
    rng = np.random.default_rng(8)
    p = rng.uniform(0, 1, 500)
    o = np.zeros(500)
    summary = reliability_curve(p, o, bins=10, seed=0)
    for b in np.flatnonzero(summary.count > 0):
        assert summary.observed_freq[b] == 0.0


def test_reliability_ci_width_shrinks_with_data():
    def mean_width(n, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 1, n)
        o = (rng.random(n) < p).astype(float)
        s = reliability_curve(p, o, bins=10, n_boot=100, seed=1)
        sel = s.count > 0
        return np.nanmean(s.ci_hi[sel] - s.ci_lo[sel])

    assert mean_width(20_000, 9) < mean_width(2_000, 9)


# ---------------------------------------------------------------- spread-skill


def test_ssrel_zero_when_spread_equals_rmse():
    # rows with o=0 and members {0, 2s}: mean s, spread s, error s; spread is
    # constant within each bin (10 discrete levels, equal counts), so per-bin
    # RMSE equals per-bin mean spread by construction
    levels = np.linspace(0.05, 0.45, 10)
    s = np.repeat(levels, 20)
    members = np.stack([np.zeros(200), 2 * s], axis=1)
    t = make_table(members, np.zeros(200))
    rows, ssrel = spread_skill(t, bins=10)
    assert ssrel < 1e-12


def test_identical_members_single_bin():
    p = np.full((50, 4), 0.3)
    o = (np.arange(50) % 2).astype(float)
    t = make_table(p, o)
    rows, ssrel = spread_skill(t, bins=10)
    assert len(rows) == 1
    spread_bin, rmse_bin, count = rows[0]
    assert spread_bin == 0.0
    assert count == 50
    assert ssrel == pytest.approx(rmse_bin, rel=1e-12)
    assert rmse_bin == pytest.approx(np.sqrt(np.mean((0.3 - o) ** 2)), rel=1e-12)


def test_spread_skill_matches_binning_oracle():
    rng = np.random.default_rng(11)
    t = random_table(rng, 400, k=6)
    rows, ssrel = spread_skill(t, bins=10)
    # independent re-binning with the same quantile-edge convention
    spread = t.members.std(axis=1)
    mean = t.members.mean(axis=1)
    edges = np.unique(np.quantile(spread, np.linspace(0, 1, 11)))
    want_rows = []
    want_ssrel = 0.0
    k = np.clip(np.searchsorted(edges, spread, side="right") - 1, 0, len(edges) - 2)
    for b in range(len(edges) - 1):
        idx = np.flatnonzero(k == b)
        if idx.size == 0:
            continue
        ms = math.fsum(spread[i] for i in idx) / idx.size
        rmse = math.sqrt(math.fsum((mean[i] - t.obs[i]) ** 2 for i in idx) / idx.size)
        want_rows.append((ms, rmse, idx.size))
        want_ssrel += idx.size * abs(ms - rmse)
    want_ssrel /= len(t)
    assert len(rows) == len(want_rows)
    for got, want in zip(rows, want_rows):
        assert got[0] == pytest.approx(want[0], rel=1e-12)
        assert got[1] == pytest.approx(want[1], rel=1e-12)
        assert got[2] == want[2]
    assert ssrel == pytest.approx(want_ssrel, rel=1e-12)


def test_spread_skill_needs_members():
    t = make_table(np.full((10, 1), 0.3), np.zeros(10))
    with pytest.raises(SingleMemberEnsemble):
        spread_skill(t)


def test_ssrel_invariant_to_member_relabeling():
    rng = np.random.default_rng(12)
    t = random_table(rng, 120, k=5)
    _, ssrel = spread_skill(t)
    shuffled = t.members[:, rng.permutation(5)]
    t2 = make_table(shuffled, t.obs, clim=t.clim)
    _, ssrel2 = spread_skill(t2)
    assert ssrel2 == pytest.approx(ssrel, rel=1e-12)


# ---------------------------------------------------------------- discard test


def test_discard_oracle_ranking_gives_mf_one():
    # larger spread <-> larger error, constructed directly
    n = 40
    p = np.linspace(0.05, 0.9, n)  # all obs 0: BCE grows with p
    d = np.linspace(0.01, 0.3, n)
    members = np.stack([p - d, p + d], axis=1)
    t = make_table(members, np.zeros(n))
    fractions, errors, mf = discard_test(t)
    assert mf == 1.0
    assert np.all(np.diff(errors) < 0)


def test_discard_constant_error_gives_mf_zero():
    members = np.tile(np.array([[0.2, 0.4]]), (30, 1))
    t = make_table(members, np.zeros(30))
    _, errors, mf = discard_test(t)
    assert mf == 0.0
    assert np.allclose(errors, errors[0])


def test_discard_fraction_zero_is_full_sample_error():
    rng = np.random.default_rng(13)
    t = random_table(rng, 100)
    _, errors, _ = discard_test(t)
    want, _ = binary_cross_entropy(t.mean, t.obs.astype(float))
    assert errors[0] == pytest.approx(want, rel=1e-12)


def oracle_discard(table, fractions):
    spread = table.members.std(axis=1)
    mean = table.members.mean(axis=1)
    order = sorted(range(len(table)), key=lambda i: (-spread[i], i))
    out = []
    for f in fractions:
        keep = order[int(f * len(table)):]
        pc = np.clip(mean[keep], 1e-7, 1 - 1e-7)
        o = table.obs[keep]
        out.append(
            -math.fsum(oi * math.log(pi) + (1 - oi) * math.log(1 - pi)
                       for pi, oi in zip(pc, o)) / len(keep)
        )
    return np.asarray(out)


def test_discard_matches_exhaustive_oracle():
    rng = np.random.default_rng(14)
    t = random_table(rng, 173)
    fractions, errors, mf = discard_test(t)
    want = oracle_discard(t, fractions)
    assert np.allclose(errors, want, rtol=1e-12)
    want_mf = np.mean(np.diff(want) < 0)
    assert mf == pytest.approx(want_mf)


def test_discard_invariant_to_row_order():
    rng = np.random.default_rng(15)
    t = random_table(rng, 80)
    perm = rng.permutation(80)
    t2 = VerificationTable(t.days[perm], t.windows[perm], t.cells[perm],
                           t.members[perm], t.obs[perm], t.clim[perm])
    _, e1, mf1 = discard_test(t)
    _, e2, mf2 = discard_test(t2)
    assert np.allclose(e1, e2, rtol=1e-12)
    assert mf1 == mf2


# --------------------------------------------------------- pattern correlation


def test_pattern_correlation_self():
    a = np.random.default_rng(16).standard_normal((16, 16))
    assert pattern_correlation(a, a) == pytest.approx(1.0, rel=1e-12)


def test_pattern_correlation_negated():
    a = np.random.default_rng(17).standard_normal((16, 16))
    assert pattern_correlation(a, -a) == pytest.approx(-1.0, rel=1e-12)


def test_pattern_correlation_covariance_oracle():
    rng = np.random.default_rng(18)
    a = rng.standard_normal(300)
    b = 0.5 * a + rng.standard_normal(300)
    am, bm = a.mean(), b.mean()
    cov = math.fsum((x - am) * (y - bm) for x, y in zip(a, b))
    va = math.fsum((x - am) ** 2 for x in a)
    vb = math.fsum((y - bm) ** 2 for y in b)
    want = cov / math.sqrt(va * vb)
    assert pattern_correlation(a, b) == pytest.approx(want, rel=1e-12)


def test_pattern_correlation_zero_variance():
    with pytest.raises(ZeroVariance):
        pattern_correlation(np.ones(10), np.arange(10.0))


# ------------------------------------------------------- permutation importance


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def causal_predict(patches):
    """Reads the channel-0 maximum, mimicking the label-driving predictor."""
    return sigmoid(3.0 * patches[..., 0].max(axis=(1, 2)) - 2.0)


def make_causal_dataset(rng, n=80):
    patches = rng.uniform(0, 0.05, (n, 8, 8, 3))
    strength = rng.uniform(0, 2, n)
    patches[:, 3:6, 3:6, 0] += strength[:, None, None]
    patches[..., 2] = 0.77  # constant channel
    obs = (rng.random(n) < sigmoid(3.0 * strength - 2.0)).astype(float)
    return patches, obs


def test_permuting_causal_channel_increases_brier():
    rng = np.random.default_rng(19)
    patches, obs = make_causal_dataset(rng)
    mean_delta, deltas = permutation_importance(causal_predict, patches, obs, 0,
                                                n_shuffles=20, seed=0)
    assert mean_delta > 0
    assert np.sum(deltas > 0) >= 19


def test_permuting_constant_channel_is_exactly_zero():
    rng = np.random.default_rng(20)
    patches, obs = make_causal_dataset(rng)
    mean_delta, deltas = permutation_importance(causal_predict, patches, obs, 2,
                                                n_shuffles=5, seed=0)
    assert abs(mean_delta) < 1e-12
    assert np.all(np.abs(deltas) < 1e-12)


def test_identity_permutation_is_zero():
    rng = np.random.default_rng(21)
    patches, obs = make_causal_dataset(rng, n=1)  # only the identity exists
    mean_delta, _ = permutation_importance(causal_predict, patches, obs, 0,
                                           n_shuffles=3, seed=0)
    assert mean_delta == 0.0


def test_unknown_predictor_channel():
    rng = np.random.default_rng(22)
    patches, obs = make_causal_dataset(rng, n=4)
    with pytest.raises(UnknownPredictor):
        permutation_importance(causal_predict, patches, obs, 17)


# ------------------------------------------------------------------- BSS map


def uniform_table(grid=(3, 3), days=5, windows=3):
    """Identical row pattern in every cell."""
    rows = []
    rng = np.random.default_rng(23)
    pattern = [(0.8, 1.0), (0.1, 0.0), (0.3, 0.0), (0.7, 1.0)]
    days_l, windows_l, cells, members, obs, clim = [], [], [], [], [], []
    i = 0
    for r in range(grid[0]):
        for c in range(grid[1]):
            for d in range(days):
                for w in range(windows):
                    p, o = pattern[(d * windows + w) % len(pattern)]
                    days_l.append(d)
                    windows_l.append(w)
                    cells.append((r, c))
                    members.append([p, p])
                    obs.append(o)
                    clim.append(0.25)
                    i += 1
    return VerificationTable(np.array(days_l), np.array(windows_l), np.array(cells),
                             np.array(members), np.array(obs), np.array(clim))


def test_uniform_domain_map_is_constant_and_global():
    t = uniform_table()
    m = neighborhood_bss_map(t, (3, 3), min_reports=0)
    global_bss = aggregate_bss(t, "all")[None]
    assert np.allclose(m.bss, global_bss, rtol=1e-12)


def test_corner_cell_pools_four_cells():
    t = uniform_table()
    rows_per_cell = len(t) // 9
    m = neighborhood_bss_map(t, (3, 3), min_reports=1)
    # corner (0,0) pools cells (0,0),(0,1),(1,0),(1,1)
    events_per_cell = int(t.obs[:rows_per_cell].sum())
    assert m.report_count[0, 0] == 4 * events_per_cell
    assert m.report_count[1, 1] == 9 * events_per_cell


def oracle_bss_map(table, grid):
    nr, nc = grid
    bss = np.full(grid, np.nan)
    for r in range(nr):
        for c in range(nc):
            bs, clim = [], []
            for i in range(len(table)):
                rr, cc = table.cells[i]
                if abs(rr - r) <= 1 and abs(cc - c) <= 1:
                    p = table.members[i].mean()
                    bs.append((p - table.obs[i]) ** 2)
                    clim.append((table.clim[i] - table.obs[i]) ** 2)
            if bs:
                bss[r, c] = 1 - (math.fsum(bs) / len(bs)) / (math.fsum(clim) / len(clim))
    return bss


def test_bss_map_matches_pooling_oracle():
    rng = np.random.default_rng(24)
    t = random_table(rng, 600, grid=(4, 4))
    m = neighborhood_bss_map(t, (4, 4), min_reports=2)
    want = oracle_bss_map(t, (4, 4))
    assert np.allclose(m.bss, want, rtol=1e-12, equal_nan=True)
    assert m.meta["min_reports"] == 2


def test_bss_map_default_threshold_scales():
    rng = np.random.default_rng(25)
    t = random_table(rng, 300, grid=(3, 3))
    m = neighborhood_bss_map(t, (3, 3))
    assert m.min_reports >= 1
    assert m.meta["reference_min_reports"] == 150
