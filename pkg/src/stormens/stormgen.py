"""Seeded synthetic archives: predictor fields with planted storms and
stochastic severe-event labels drawn from a known law.

Storms are isotropic Gaussian bumps. Composite reflectivity peaks at
``intensity``; updraft helicity peaks at ``intensity * rotation``, so the
two explicit channels are sufficient statistics for the label law

    P(report | storm) = sigmoid(a_uh * rotation * intensity
                                + a_cref * intensity - bias)

which makes the Bayes-optimal window probability computable in closed form
from the planted storm list (``bayes_window_probs``).
"""

import datetime as dt
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .arrayio import load_bundle, save_bundle
from .errors import EmptyArchive
from .griddata import (
    FineGridSpec,
    LabelGrid,
    ReportRecord,
    coarse_from_fine,
    grid_reports,
    nearest_cell,
)
from .predictors import PredictorId as P
from .seeding import derive_rng

DEFAULT_DAY0 = dt.date(2021, 1, 1)
#: synthetic category mix for emitted reports
CATEGORY_WEIGHTS = (("hail", 0.5), ("wind", 0.35), ("tornado", 0.15))


@dataclass(frozen=True)
class StormObject:
    row: float
    col: float
    radius: float
    intensity: float
    rotation: float
    hour: int


@dataclass
class SynthConfig:
    storms_per_day: float = 1.2
    #: (a_uh, a_cref, bias) of the logistic label law
    label_coeffs: tuple = (2.5, 1.0, 2.0)
    #: target pattern correlations for (CAPE, |CIN|), (CREF, 2-m dewpoint),
    #: and the two SRH layers
    env_correlations: tuple = (0.5, 0.45, 0.7)
    noise_floor: float = 0.05
    seed: int = 0
    n_fine: int = 192
    hours_per_day: int = 24
    radius_range: tuple = (3.0, 8.0)
    intensity_range: tuple = (0.3, 2.0)
    #: smoothing length (fine cells) of the mesoscale environment fields
    smooth_sigma: float = 24.0

    def __post_init__(self):
        for rho in self.env_correlations:
            if not -1.0 < rho < 1.0:
                raise ValueError("env_correlations must lie in (-1, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("label_coeffs", "env_correlations", "radius_range", "intensity_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def make_fine_grid(cfg, origin_lat=40.0, origin_lon=-100.0, spacing_km=3.0):
    """Fine grid with a seeded smooth elevation field."""
    rng = derive_rng(cfg.seed, "elevation")
    n = cfg.n_fine
    rough = rng.standard_normal((n // 4, n // 4))
    smooth = gaussian_filter(rough, cfg.smooth_sigma / 4.0, mode="wrap")
    smooth = zoom(smooth, 4.0, order=1, mode="grid-wrap", grid_mode=True)
    smooth -= smooth.min()
    if smooth.max() > 0:
        smooth *= 1500.0 / smooth.max()
    return FineGridSpec(n, n, spacing_km, origin_lat, origin_lon, elevation=smooth)


def storms_for_day(cfg, day_index):
    """The planted storms of one day; independent of the field stream."""
    rng = derive_rng(cfg.seed, "storms", day_index)
    storms = []
    for _ in range(rng.poisson(cfg.storms_per_day)):
        storms.append(
            StormObject(
                row=float(rng.uniform(0, cfg.n_fine)),
                col=float(rng.uniform(0, cfg.n_fine)),
                radius=float(rng.uniform(*cfg.radius_range)),
                intensity=float(rng.uniform(*cfg.intensity_range)),
                rotation=float(rng.uniform()),
                hour=int(rng.integers(0, cfg.hours_per_day)),
            )
        )
    return storms


def _add_bump(field2d, row, col, radius, amp):
    """Add amp * exp(-d^2 / (2 radius^2)) on a local window."""
    n = field2d.shape[0]
    half = int(np.ceil(4.0 * radius))
    r0, r1 = max(0, int(row) - half), min(n, int(row) + half + 1)
    c0, c1 = max(0, int(col) - half), min(n, int(col) + half + 1)
    if r0 >= r1 or c0 >= c1:
        return
    rr = np.arange(r0, r1)[:, None] - row
    cc = np.arange(c0, c1)[None, :] - col
    field2d[r0:r1, c0:c1] += amp * np.exp(-(rr**2 + cc**2) / (2.0 * radius**2))


def _smooth_std(rng, hours, n, sigma):
    """Per-hour smooth fields standardized to zero mean, unit variance.

    Generated at quarter resolution and bilinearly upsampled; the mesoscale
    spectrum is all that matters here.
    """
    m = max(n // 4, 8)
    base = rng.standard_normal((hours, m, m))
    base = gaussian_filter(base, (0, sigma / 4.0, sigma / 4.0), mode="wrap")
    full = zoom(base, (1, n / m, n / m), order=1, mode="grid-wrap", grid_mode=True)
    mu = full.mean(axis=(1, 2), keepdims=True)
    sd = full.std(axis=(1, 2), keepdims=True)
    return (full - mu) / np.maximum(sd, 1e-12)


def _standardize(x):
    mu = x.mean(axis=(1, 2), keepdims=True)
    sd = x.std(axis=(1, 2), keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-12)


def synth_day(cfg, day_index):
    """All 15 diagnostic fields, hourly, for one day, plus the storm list.

    Deterministic in (cfg.seed, day_index): the storm stream and the field
    stream are seeded separately so labels never need field generation.
    """
    storms = storms_for_day(cfg, day_index)
    rng = derive_rng(cfg.seed, "fields", day_index)
    n, hours = cfg.n_fine, cfg.hours_per_day
    rho_cin, rho_td, rho_srh = cfg.env_correlations

    fields = {}
    for pid in (P.CREF, P.UH_0_2KM, P.UH_2_5KM, P.APCP, P.SPD_10M, P.GRPL):
        fields[pid] = cfg.noise_floor * rng.random((hours, n, n))
    for s in storms:
        h = s.hour
        _add_bump(fields[P.CREF][h], s.row, s.col, s.radius, s.intensity)
        _add_bump(fields[P.UH_2_5KM][h], s.row, s.col, s.radius, s.intensity * s.rotation)
        _add_bump(fields[P.UH_0_2KM][h], s.row, s.col, s.radius, 0.6 * s.intensity * s.rotation)
        _add_bump(fields[P.GRPL][h], s.row, s.col, s.radius, 0.7 * s.intensity)
        _add_bump(fields[P.APCP][h], s.row, s.col, 1.5 * s.radius, 0.8 * s.intensity)
        _add_bump(fields[P.SPD_10M][h], s.row, s.col, 1.5 * s.radius, 0.5 * s.intensity)

    sig = cfg.smooth_sigma
    # CAPE: lognormal-style mesoscale field, enhanced around every storm of
    # the day (the environment evolves slowly relative to storms)
    cape = 400.0 * np.exp(0.6 * _smooth_std(rng, hours, n, sig))
    bumps = np.zeros((n, n))
    for s in storms:
        _add_bump(bumps, s.row, s.col, 3.0 * s.radius, 800.0 * s.intensity)
    cape += bumps[None, :, :]
    fields[P.CAPE] = cape

    z_cape = _standardize(cape)
    mix = rho_cin * z_cape + np.sqrt(1 - rho_cin**2) * _smooth_std(rng, hours, n, sig)
    cin_mag = np.clip(60.0 + 25.0 * mix, 0.0, None)
    fields[P.CIN] = -cin_mag  # physically signed; normalization takes magnitude

    z_cref = _standardize(fields[P.CREF])
    fields[P.DEWPOINT_2M] = 12.0 + 4.0 * (
        rho_td * z_cref + np.sqrt(1 - rho_td**2) * _smooth_std(rng, hours, n, sig)
    )

    shared = _smooth_std(rng, hours, n, sig)
    a, b = np.sqrt(rho_srh), np.sqrt(1 - rho_srh)
    fields[P.SRH_0_1KM] = 50.0 + 120.0 * (a * shared + b * _smooth_std(rng, hours, n, sig))
    fields[P.SRH_0_3KM] = 80.0 + 220.0 * (a * shared + b * _smooth_std(rng, hours, n, sig))

    fields[P.MSLP] = 1012.0 + 6.0 * _smooth_std(rng, hours, n, sig)
    fields[P.TEMP_2M] = 22.0 + 6.0 * _smooth_std(rng, hours, n, sig)
    fields[P.USHR_0_6KM] = 8.0 + 6.0 * _smooth_std(rng, hours, n, sig)
    fields[P.VSHR_0_6KM] = 4.0 + 6.0 * _smooth_std(rng, hours, n, sig)

    return {pid: f.astype(np.float32) for pid, f in fields.items()}, storms


def report_probability(cfg, storm):
    a_uh, a_cref, bias = cfg.label_coeffs
    logit = a_uh * storm.rotation * storm.intensity + a_cref * storm.intensity - bias
    return 1.0 / (1.0 + np.exp(-logit))


def synth_labels(cfg, storms, fine, day_index, day0=DEFAULT_DAY0):
    """Emit severe reports from planted storms under the logistic law."""
    rng = derive_rng(cfg.seed, "reports", day_index)
    day = day0 + dt.timedelta(days=int(day_index))
    names = [c for c, _ in CATEGORY_WEIGHTS]
    weights = [w for _, w in CATEGORY_WEIGHTS]
    reports = []
    for storm in storms:
        if rng.random() >= report_probability(cfg, storm):
            continue
        category = names[int(rng.choice(len(names), p=weights))]
        lat, lon = fine.latlon(storm.row, storm.col)
        reports.append(ReportRecord(category, float(lat), float(lon), storm.hour, day))
    return reports


def bayes_window_probs(cfg, storms_by_day, fine, coarse):
    """Exact P(label=1) per (day, window hour, cell) from the planted storms."""
    n_days = len(storms_by_day)
    hours = cfg.hours_per_day
    no_report = np.ones((n_days, hours, coarse.n_rows, coarse.n_cols))
    for d, storms in enumerate(storms_by_day):
        for storm in storms:
            lat, lon = fine.latlon(storm.row, storm.col)
            cell = nearest_cell(coarse, float(lat), float(lon))
            if cell is None:
                continue
            q = report_probability(cfg, storm)
            for off in (-2, -1, 0, 1):
                h = storm.hour + off
                if 0 <= h < hours:
                    no_report[d, h, cell[0], cell[1]] *= 1.0 - q
    return 1.0 - no_report


class SynthArchive:
    """Lazy view of a synthetic archive: labels eager, fields on demand."""

    def __init__(self, cfg, fine, coarse, n_days, verify_days, day0=DEFAULT_DAY0,
                 cache_days=256, fields_dir=None):
        if n_days < 10:
            raise EmptyArchive("archive needs at least 10 days")
        self.cfg = cfg
        self.fine = fine
        self.coarse = coarse
        self.n_days = n_days
        self.day0 = day0
        self.fields_dir = fields_dir
        self._cache = {}
        self._cache_days = cache_days

        n_fit = n_days - verify_days
        if n_fit <= 0:
            raise EmptyArchive("verify_days leaves no training days")
        rng = derive_rng(cfg.seed, "split")
        fit_days = np.arange(n_fit)
        val = set(int(d) for d in rng.choice(fit_days, size=int(0.1 * n_fit), replace=False))
        self.validation_days = sorted(val)
        self.train_days = [int(d) for d in fit_days if int(d) not in val]
        self.verify_days = [int(d) for d in range(n_fit, n_days)]

        self.storms_by_day = [storms_for_day(cfg, d) for d in range(n_days)]
        reports = []
        for d in range(n_days):
            reports.extend(synth_labels(cfg, self.storms_by_day[d], fine, d, day0))
        self.reports = reports
        self.labels, self.skipped_reports = grid_reports(
            reports, coarse, day0, n_days, cfg.hours_per_day
        )

    def fields(self, day_index):
        """Per-hour diagnostic fields of one day (cached, lazily built)."""
        if day_index in self._cache:
            return self._cache[day_index]
        if self.fields_dir is not None:
            path = self.fields_dir / f"fields_{day_index:04d}.npz"
            if path.exists():
                arrays, _ = load_bundle(path)
                out = {P(name): arr for name, arr in arrays.items()}
            else:
                out, _ = synth_day(self.cfg, day_index)
        else:
            out, _ = synth_day(self.cfg, day_index)
        if len(self._cache) >= self._cache_days:
            self._cache.pop(next(iter(self._cache)))
        self._cache[day_index] = out
        return out

    def bayes_probs(self):
        return bayes_window_probs(self.cfg, self.storms_by_day, self.fine, self.coarse)

    def date(self, day_index):
        return self.day0 + dt.timedelta(days=int(day_index))


def make_archive(cfg, n_days, verify_days=20, coarse_shape=(6, 6), day0=DEFAULT_DAY0,
                 fields_dir=None):
    """Build the {train, validation, verification} archive for an experiment."""
    fine = make_fine_grid(cfg)
    coarse = coarse_from_fine(fine, *coarse_shape)
    return SynthArchive(cfg, fine, coarse, n_days, verify_days, day0, fields_dir=fields_dir)


def synth_label_archive(cfg, n_years, fine, coarse, day0):
    """Label-only archive over preceding years, for climatology references.

    Uses a separate seed branch so reference years never reuse experiment
    storm streams.
    """
    n_days = 365 * n_years
    start = day0 - dt.timedelta(days=n_days)
    ref_cfg = SynthConfig(**{**cfg.to_dict(), "seed": cfg.seed + 1_000_003})
    reports = []
    for d in range(n_days):
        storms = storms_for_day(ref_cfg, d)
        reports.extend(synth_labels(ref_cfg, storms, fine, d, start))
    labels, _ = grid_reports(reports, coarse, start, n_days, cfg.hours_per_day)
    return labels


def save_archive(archive, out_dir, with_fields=False):
    """Persist labels, storms, and config; optionally the day fields."""
    out_dir.mkdir(parents=True, exist_ok=True)
    archive.labels.save(out_dir / "labels.npz")
    rows = []
    for d, storms in enumerate(archive.storms_by_day):
        for s in storms:
            rows.append([d, s.hour, s.row, s.col, s.radius, s.intensity, s.rotation])
    storm_arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), 7)
    save_bundle(
        out_dir / "storms.npz",
        {"storms": storm_arr},
        meta={
            "kind": "synth_archive",
            "config": archive.cfg.to_dict(),
            "n_days": archive.n_days,
            "day0": archive.day0.isoformat(),
            "train_days": archive.train_days,
            "validation_days": archive.validation_days,
            "verify_days": archive.verify_days,
            "skipped_reports": archive.skipped_reports,
            "coarse_shape": [archive.coarse.n_rows, archive.coarse.n_cols],
            "columns": ["day", "hour", "row", "col", "radius", "intensity", "rotation"],
        },
    )
    if with_fields:
        fdir = out_dir / "fields"
        fdir.mkdir(exist_ok=True)
        for d in range(archive.n_days):
            fields, _ = synth_day(archive.cfg, d)
            save_bundle(fdir / f"fields_{d:04d}.npz",
                        {pid.value: arr for pid, arr in fields.items()},
                        meta={"kind": "day_fields", "day": d})


def load_archive(out_dir):
    """Rebuild a SynthArchive from a persisted directory."""
    _, meta = load_bundle(out_dir / "storms.npz")
    cfg = SynthConfig.from_dict(meta["config"])
    day0 = dt.date.fromisoformat(meta["day0"])
    fields_dir = out_dir / "fields"
    archive = make_archive(
        cfg,
        meta["n_days"],
        verify_days=len(meta["verify_days"]),
        coarse_shape=tuple(meta["coarse_shape"]),
        day0=day0,
        fields_dir=fields_dir if fields_dir.exists() else None,
    )
    return archive
