"""Skill and uncertainty metrics for probabilistic severe-weather forecasts.

All kernels are pure functions of aligned arrays. Skill aggregation follows
the verify-then-average convention: squared errors are computed per
(day, window, cell) first and averaged over the non-grouped dimensions,
with the climatology reference averaged identically, before the skill
ratio is formed.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyAfterDiscard,
    EmptyInput,
    LengthMismatch,
    SingleMemberEnsemble,
    UnknownPredictor,
    ZeroClimatologyVariance,
    ZeroVariance,
)
from .neural.losses import binary_cross_entropy
from .seeding import derive_rng


@dataclass
class VerificationTable:
    """Aligned forecast/observation records keyed by (day, window, cell)."""

    days: np.ndarray          # (n,) int
    windows: np.ndarray       # (n,) int window-start hours
    cells: np.ndarray         # (n, 2) int coarse (row, col)
    members: np.ndarray       # (n, k) member probabilities
    obs: np.ndarray           # (n,) {0,1}
    clim: np.ndarray          # (n,) climatology probabilities

    def __post_init__(self):
        n = len(self.days)
        for name in ("windows", "members", "obs", "clim"):
            if len(getattr(self, name)) != n:
                raise LengthMismatch(f"{name} has {len(getattr(self, name))} rows, want {n}")
        if self.cells.shape != (n, 2):
            raise LengthMismatch(f"cells shaped {self.cells.shape}, want ({n}, 2)")

    @property
    def mean(self):
        return self.members.mean(axis=1)

    @property
    def spread(self):
        return self.members.std(axis=1)

    def __len__(self):
        return len(self.days)


def brier_score(p, o):
    """Mean squared probability error."""
    p = np.asarray(p, dtype=float)
    o = np.asarray(o, dtype=float)
    if p.shape != o.shape:
        raise LengthMismatch(f"brier_score: {p.shape} vs {o.shape}")
    if p.size == 0:
        raise EmptyInput("brier_score of nothing")
    return float(np.mean((p - o) ** 2))


def aggregate_bss(table, group_by="all", forecast=None):
    """Skill against climatology, grouped Hamill-style.

    Per-row squared errors for the forecast and the climatology are averaged
    over all rows outside the grouping key; the skill score of a group is
    1 - mean(BS) / mean(BS_clim). ``group_by`` is "all", "window", or "cell".
    Returns {group_key: bss}; the "all" key of the ungrouped form is None.
    """
    p = np.asarray(table.mean if forecast is None else forecast, dtype=float)
    o = np.asarray(table.obs, dtype=float)
    c = np.asarray(table.clim, dtype=float)
    bs = (p - o) ** 2
    bs_clim = (c - o) ** 2
    if group_by == "all":
        keys = [None]
        idx = {None: np.arange(len(o))}
    elif group_by == "window":
        keys = sorted(set(int(w) for w in table.windows))
        idx = {k: np.flatnonzero(table.windows == k) for k in keys}
    elif group_by == "cell":
        keys = sorted({(int(r), int(cc)) for r, cc in table.cells})
        idx = {
            k: np.flatnonzero((table.cells[:, 0] == k[0]) & (table.cells[:, 1] == k[1]))
            for k in keys
        }
    else:
        raise ValueError(f"unknown group_by: {group_by!r}")
    out = {}
    for k in keys:
        denom = bs_clim[idx[k]].mean()
        if denom <= 0.0:
            raise ZeroClimatologyVariance(f"group {k}: climatology Brier score is zero")
        out[k] = float(1.0 - bs[idx[k]].mean() / denom)
    return out


def _bin_index(p, edges):
    k = np.searchsorted(edges, p, side="right") - 1
    return np.clip(k, 0, len(edges) - 2)


def murphy_decompose(p, o, bins=20):
    """Reliability / resolution / uncertainty components of the Brier score."""
    p = np.asarray(p, dtype=float)
    o = np.asarray(o, dtype=float)
    if p.size == 0:
        raise EmptyInput("murphy_decompose of nothing")
    if p.shape != o.shape:
        raise LengthMismatch(f"murphy_decompose: {p.shape} vs {o.shape}")
    edges = np.linspace(0.0, 1.0, bins + 1) if np.isscalar(bins) else np.asarray(bins)
    k = _bin_index(p, edges)
    n = p.size
    obar = o.mean()
    rel = res = 0.0
    for b in range(len(edges) - 1):
        sel = k == b
        nk = int(sel.sum())
        if nk == 0:
            continue
        pk = p[sel].mean()
        ok = o[sel].mean()
        rel += nk * (pk - ok) ** 2
        res += nk * (ok - obar) ** 2
    unc = obar * (1.0 - obar)
    return rel / n, res / n, float(unc)


@dataclass
class ReliabilitySummary:
    edges: np.ndarray
    mean_forecast: np.ndarray   # per-bin mean forecast (nan where empty)
    observed_freq: np.ndarray   # per-bin observed frequency (nan where empty)
    count: np.ndarray
    ci_lo: np.ndarray           # bootstrap 95% interval on observed_freq
    ci_hi: np.ndarray
    rel: float
    res: float
    unc: float


def reliability_curve(p, o, bins=20, n_boot=100, seed=0):
    """Reliability diagram with percentile-bootstrap confidence intervals."""
    p = np.asarray(p, dtype=float)
    o = np.asarray(o, dtype=float)
    if p.size == 0:
        raise EmptyInput("reliability_curve of nothing")
    if p.shape != o.shape:
        raise LengthMismatch(f"reliability_curve: {p.shape} vs {o.shape}")
    edges = np.linspace(0.0, 1.0, bins + 1) if np.isscalar(bins) else np.asarray(bins)
    nb = len(edges) - 1
    k = _bin_index(p, edges)
    mean_fc = np.full(nb, np.nan)
    freq = np.full(nb, np.nan)
    count = np.zeros(nb, dtype=int)
    for b in range(nb):
        sel = k == b
        count[b] = sel.sum()
        if count[b]:
            mean_fc[b] = p[sel].mean()
            freq[b] = o[sel].mean()
    rng = derive_rng(seed, "reliability_bootstrap")
    boot = np.full((n_boot, nb), np.nan)
    n = p.size
    for r in range(n_boot):
        rows = rng.integers(0, n, size=n)
        kb = k[rows]
        ob = o[rows]
        for b in range(nb):
            sel = kb == b
            if sel.any():
                boot[r, b] = ob[sel].mean()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # all-nan bins are expected
        ci_lo = np.nanpercentile(boot, 2.5, axis=0)
        ci_hi = np.nanpercentile(boot, 97.5, axis=0)
    rel, res, unc = murphy_decompose(p, o, edges)
    return ReliabilitySummary(edges, mean_fc, freq, count, ci_lo, ci_hi, rel, res, unc)


def spread_skill(table, bins=10):
    """Binned spread vs RMSE of the ensemble mean, plus SSREL.

    Rows are grouped into equal-count bins by ensemble spread; SSREL is the
    count-weighted mean absolute gap between bin spread and bin RMSE.
    """
    if table.members.shape[1] < 2:
        raise SingleMemberEnsemble("spread_skill needs at least 2 members")
    spread = table.spread
    err2 = (table.mean - table.obs) ** 2
    edges = np.quantile(spread, np.linspace(0.0, 1.0, bins + 1))
    edges = np.unique(edges)
    if len(edges) < 2:  # all spreads identical: one bin
        edges = np.array([spread.min(), spread.max() + 1.0])
    k = np.clip(np.searchsorted(edges, spread, side="right") - 1, 0, len(edges) - 2)
    rows = []
    ssrel = 0.0
    for b in range(len(edges) - 1):
        sel = k == b
        nk = int(sel.sum())
        if nk == 0:
            continue
        mean_spread = float(spread[sel].mean())
        rmse = float(np.sqrt(err2[sel].mean()))
        rows.append((mean_spread, rmse, nk))
        ssrel += nk * abs(mean_spread - rmse)
    return rows, float(ssrel / len(table))


#: relative slack distinguishing a strict decrease from summation noise
_MF_TOL = 1e-12


def discard_test(table, fractions=None, error_fn=None):
    """Error of the retained rows as the most-uncertain ones are removed.

    Rows are ranked by ensemble spread (stable order on ties). Returns the
    error curve and the monotonicity fraction: the share of consecutive
    steps with strictly decreasing error (decreases smaller than 1e-12
    relative count as flat, so exactly-equal errors never register as
    decreasing through float accumulation noise).
    """
    if fractions is None:
        fractions = np.arange(0.0, 0.501, 0.05)
    fractions = np.asarray(list(fractions), dtype=float)
    if fractions[0] != 0.0 or np.any(np.diff(fractions) <= 0):
        raise ValueError("fractions must start at 0 and increase")
    if error_fn is None:
        def error_fn(p, o):
            return binary_cross_entropy(p, o)[0]
    n = len(table)
    order = np.argsort(-table.spread, kind="stable")
    mean = table.mean
    obs = table.obs.astype(float)
    errors = []
    for f in fractions:
        drop = int(f * n)
        keep = order[drop:]
        if keep.size == 0:
            raise EmptyAfterDiscard(f"fraction {f} discards every row")
        errors.append(float(error_fn(mean[keep], obs[keep])))
    errors = np.asarray(errors)
    steps = np.diff(errors)
    slack = _MF_TOL * np.maximum(1.0, np.abs(errors[:-1]))
    mf = float(np.mean(steps < -slack)) if len(steps) else 0.0
    return fractions, errors, mf


def pattern_correlation(a, b):
    """Pearson correlation of two equal-shape fields over all grid points."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"pattern_correlation: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.sqrt(np.sum(da**2)))
    vb = float(np.sqrt(np.sum(db**2)))
    if va == 0.0 or vb == 0.0:
        raise ZeroVariance("pattern_correlation with a constant field")
    return float(np.sum(da * db) / (va * vb))


def permutation_importance(predict_fn, patches, obs, channel, n_shuffles=20, seed=0):
    """Brier-score increase when one predictor's patches are shuffled.

    ``patches`` is (n, ..., n_channels); the chosen channel's blocks are
    permuted across the sample axis (spatial structure intact), predictions
    recomputed, and the Brier-score change averaged over ``n_shuffles``.
    """
    patches = np.asarray(patches)
    obs = np.asarray(obs, dtype=float)
    if not 0 <= channel < patches.shape[-1]:
        raise UnknownPredictor(f"channel {channel} outside stack of {patches.shape[-1]}")
    base = brier_score(predict_fn(patches), obs)
    rng = derive_rng(seed, "perm_importance", channel)
    deltas = []
    for _ in range(n_shuffles):
        perm = rng.permutation(len(patches))
        shuffled = patches.copy()
        shuffled[..., channel] = patches[perm, ..., channel]
        deltas.append(brier_score(predict_fn(shuffled), obs) - base)
    return float(np.mean(deltas)), np.asarray(deltas)


@dataclass
class BssMap:
    bss: np.ndarray        # (n_rows, n_cols), nan where undefined
    report_count: np.ndarray
    masked: np.ndarray     # True where pooled reports fall below the threshold
    min_reports: int = 0
    meta: dict = field(default_factory=dict)


#: verification rows backing the published 150-report mask threshold
REFERENCE_VERIF_ROWS = 365 * 22 * 900
REFERENCE_MIN_REPORTS = 150


def neighborhood_bss_map(table, grid_shape, min_reports=None):
    """Per-cell skill pooled over each cell's 3x3 neighborhood.

    Cells whose pooled report count falls below ``min_reports`` are flagged
    masked. When not given, the threshold scales the published value by the
    ratio of desk verification rows to the reference sample and is recorded
    in the map metadata.
    """
    nr, nc = grid_shape
    if min_reports is None:
        min_reports = max(
            1, round(REFERENCE_MIN_REPORTS * len(table) / REFERENCE_VERIF_ROWS)
        )
    p = table.mean
    o = table.obs.astype(float)
    c = table.clim
    bs = (p - o) ** 2
    bs_clim = (c - o) ** 2
    cell_rows = {}
    for i, (r, cc) in enumerate(table.cells):
        cell_rows.setdefault((int(r), int(cc)), []).append(i)
    bss = np.full((nr, nc), np.nan)
    count = np.zeros((nr, nc), dtype=int)
    for r in range(nr):
        for cc in range(nc):
            pooled = []
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    key = (r + dr, cc + dc)
                    if 0 <= key[0] < nr and 0 <= key[1] < nc:
                        pooled.extend(cell_rows.get(key, []))
            if not pooled:
                continue
            pooled = np.asarray(pooled)
            count[r, cc] = int(o[pooled].sum())
            denom = bs_clim[pooled].mean()
            if denom > 0:
                bss[r, cc] = 1.0 - bs[pooled].mean() / denom
    masked = count < min_reports
    meta = {
        "min_reports": int(min_reports),
        "reference_min_reports": REFERENCE_MIN_REPORTS,
        "reference_rows": REFERENCE_VERIF_ROWS,
        "table_rows": len(table),
    }
    return BssMap(bss, count, masked, int(min_reports), meta)
