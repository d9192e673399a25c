"""Fine/coarse grid geometry, patch indexing, report gridding, climatology.

The fine grid is the storm-scale domain (3-km analog); the coarse grid is
the prediction domain (80-km analog). Geometry uses a plate-carree local
approximation anchored at the fine grid origin; distances between points
use the great-circle formula.
"""

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .arrayio import load_bundle, save_bundle
from .errors import EmptyArchive, KeyOutOfRange, OutOfDomain

PATCH = 64
HALF = PATCH // 2
WINDOW_LEN = 4
#: a report at hour t stamps window-start hours t-2 .. t+1 (clipped to the day)
WINDOW_OFFSETS = (-2, -1, 0, 1)
KM_PER_DEG = 111.195
EARTH_RADIUS_KM = 6371.0
CLIM_DAYS = 365
PROB_FLOOR = 1e-4

REPORT_CATEGORIES = ("tornado", "hail", "wind")


@dataclass(frozen=True)
class FineGridSpec:
    n_rows: int
    n_cols: int
    spacing_km: float
    origin_lat: float
    origin_lon: float
    elevation: np.ndarray = None

    def __post_init__(self):
        if self.n_rows < PATCH or self.n_cols < PATCH:
            raise ValueError(f"fine grid must be at least {PATCH}x{PATCH}")
        if self.spacing_km <= 0:
            raise ValueError("spacing_km must be positive")
        if self.elevation is None:
            object.__setattr__(self, "elevation", np.zeros((self.n_rows, self.n_cols)))

    @property
    def dlat(self):
        return self.spacing_km / KM_PER_DEG

    @property
    def dlon(self):
        return self.spacing_km / (KM_PER_DEG * np.cos(np.radians(self.origin_lat)))

    def latlon(self, row, col):
        """Lat/lon of (possibly fractional) fine-grid indices."""
        return self.origin_lat + np.asarray(row) * self.dlat, (
            self.origin_lon + np.asarray(col) * self.dlon
        )

    def project(self, lat, lon):
        """Fractional fine-grid indices of a lat/lon point."""
        return (np.asarray(lat) - self.origin_lat) / self.dlat, (
            np.asarray(lon) - self.origin_lon
        ) / self.dlon


@dataclass(frozen=True)
class CoarseGridSpec:
    n_rows: int
    n_cols: int
    spacing_km: float
    cell_centers: np.ndarray  # (n_rows, n_cols, 2) of (lat, lon)

    def center(self, row, col):
        return tuple(self.cell_centers[row, col])


def coarse_from_fine(fine, n_rows, n_cols):
    """Evenly spaced coarse centers whose patch footprints all fit."""
    lo, hi_r, hi_c = HALF, fine.n_rows - HALF - 1, fine.n_cols - HALF - 1
    rows = np.linspace(lo, hi_r, n_rows)
    cols = np.linspace(lo, hi_c, n_cols)
    centers = np.empty((n_rows, n_cols, 2))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            lat, lon = fine.latlon(r, c)
            centers[i, j] = (lat, lon)
    step_cells = rows[1] - rows[0] if n_rows > 1 else (cols[1] - cols[0] if n_cols > 1 else PATCH)
    return CoarseGridSpec(n_rows, n_cols, float(step_cells * fine.spacing_km), centers)


@dataclass(frozen=True)
class PatchIndexMap:
    """Top-left fine-grid index of each coarse cell's 64x64 footprint."""

    origins: np.ndarray  # (n_rows, n_cols, 2) int

    def origin(self, row, col):
        return tuple(int(v) for v in self.origins[row, col])


#: projection snap tolerance, in cells; guards float noise on exact centers
SNAP = 1e-9


def build_patch_index(fine, coarse):
    """Map each coarse cell to the 64x64 fine-grid block centered on it.

    The projected center is rounded toward the origin before the half-patch
    offset is applied; a footprint that does not fit raises OutOfDomain.
    """
    origins = np.zeros((coarse.n_rows, coarse.n_cols, 2), dtype=np.int64)
    for i in range(coarse.n_rows):
        for j in range(coarse.n_cols):
            lat, lon = coarse.center(i, j)
            rf, cf = fine.project(lat, lon)
            r0 = int(np.floor(rf + SNAP)) - HALF
            c0 = int(np.floor(cf + SNAP)) - HALF
            if not (0 <= r0 <= fine.n_rows - PATCH and 0 <= c0 <= fine.n_cols - PATCH):
                raise OutOfDomain(f"cell ({i},{j}): footprint origin ({r0},{c0}) does not fit")
            origins[i, j] = (r0, c0)
    return PatchIndexMap(origins)


def extract_patch(field, cell, index):
    """Copy one coarse cell's 64x64 sub-block out of a fine-grid field."""
    r0, c0 = index.origin(*cell)
    field = np.asarray(field)
    if field.shape[0] < r0 + PATCH or field.shape[1] < c0 + PATCH:
        raise OutOfDomain(f"cell {cell}: field too small for footprint at ({r0},{c0})")
    return np.ascontiguousarray(field[r0:r0 + PATCH, c0:c0 + PATCH])


@dataclass(frozen=True)
class ReportRecord:
    category: str
    lat: float
    lon: float
    hour: int
    day: dt.date

    def __post_init__(self):
        if self.category not in REPORT_CATEGORIES:
            raise ValueError(f"unknown report category {self.category!r}")
        if not 0 <= self.hour <= 23:
            raise ValueError(f"report hour {self.hour} outside [0, 23]")


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km (vectorized)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


def nearest_cell(coarse, lat, lon, max_dist_factor=0.75):
    """Nearest coarse cell by great-circle distance, or None when outside.

    A point farther than ``max_dist_factor * spacing_km`` from every center
    counts as outside the coarse domain. Ties break to the lowest (row, col).
    """
    d = haversine_km(lat, lon, coarse.cell_centers[..., 0], coarse.cell_centers[..., 1])
    flat = int(np.argmin(d))  # first minimum in C order == lowest (row, col)
    if d.flat[flat] > max_dist_factor * coarse.spacing_km:
        return None
    return flat // coarse.n_cols, flat % coarse.n_cols


@dataclass
class LabelGrid:
    """Binary severe-weather occurrence per (day, window-start hour, cell)."""

    labels: np.ndarray  # (n_days, hours_per_day, n_rows, n_cols) uint8
    day0: dt.date
    window_len: int = WINDOW_LEN

    @property
    def n_days(self):
        return self.labels.shape[0]

    @property
    def hours_per_day(self):
        return self.labels.shape[1]

    def day(self, index):
        return self.day0 + dt.timedelta(days=int(index))

    def doy_index(self, day_index):
        """0-based climatology day-of-year index (leap day wraps to 1 Jan)."""
        return (self.day(day_index).timetuple().tm_yday - 1) % CLIM_DAYS

    def save(self, path):
        save_bundle(
            path,
            {"labels": self.labels},
            meta={"kind": "label_grid", "day0": self.day0.isoformat(),
                  "window_len": self.window_len},
        )

    @classmethod
    def load(cls, path):
        arrays, meta = load_bundle(path)
        return cls(arrays["labels"], dt.date.fromisoformat(meta["day0"]), meta["window_len"])


def grid_reports(reports, coarse, day0, n_days, hours_per_day=24):
    """Grid point reports into windowed binary labels.

    Each report stamps label 1 at window-start hours {t-2, t-1, t, t+1} for
    its nearest coarse cell, clipped to the same day. Returns the LabelGrid
    and the count of reports that fell outside the coarse domain.
    """
    labels = np.zeros((n_days, hours_per_day, coarse.n_rows, coarse.n_cols), dtype=np.uint8)
    skipped = 0
    for rep in reports:
        day_idx = (rep.day - day0).days
        if not 0 <= day_idx < n_days or rep.hour >= hours_per_day:
            raise KeyOutOfRange(f"report at {rep.day} hour {rep.hour} outside archive range")
        cell = nearest_cell(coarse, rep.lat, rep.lon)
        if cell is None:
            skipped += 1
            continue
        for off in WINDOW_OFFSETS:
            h = rep.hour + off
            if 0 <= h < hours_per_day:
                labels[day_idx, h, cell[0], cell[1]] = 1
    return LabelGrid(labels, day0), skipped


def reports_to_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "hour", "category", "lat", "lon"])
        for r in reports:
            w.writerow([r.day.isoformat(), r.hour, r.category,
                        format(r.lat, ".17g"), format(r.lon, ".17g")])


def reports_from_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ReportRecord(
                    category=row["category"],
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    hour=int(row["hour"]),
                    day=dt.date.fromisoformat(row["day"]),
                )
            )
    return out


@dataclass
class Climatology:
    """Smoothed event probability per (cell, day of year, hour of day)."""

    prob: np.ndarray  # (n_rows, n_cols, CLIM_DAYS, hours_per_day)
    source_years: str = ""

    def save(self, path):
        save_bundle(path, {"prob": self.prob},
                    meta={"kind": "climatology", "source_years": self.source_years})

    @classmethod
    def load(cls, path):
        arrays, meta = load_bundle(path)
        return cls(arrays["prob"], meta.get("source_years", ""))


def build_climatology(archive, sigma_doy=15.0, sigma_hour=2.0, source_years=""):
    """Relative event frequency smoothed circularly along day of year and hour.

    ``archive`` is a (multi-year) LabelGrid. Frequencies are clamped to
    [1e-4, 1-1e-4] so skill-score denominators never vanish.
    """
    if archive.n_days == 0:
        raise EmptyArchive("climatology archive has no days")
    nh = archive.hours_per_day
    counts = np.zeros((archive.labels.shape[2], archive.labels.shape[3], CLIM_DAYS, nh))
    denom = np.zeros(CLIM_DAYS)
    for d in range(archive.n_days):
        k = archive.doy_index(d)
        denom[k] += 1.0
        counts[:, :, k, :] += archive.labels[d].transpose(1, 2, 0)
    covered = denom > 0
    if not covered.all():
        # fall back to the archive-wide mean rate for uncovered days of year
        base = archive.labels.mean(axis=0).transpose(1, 2, 0)[:, :, None, :]
        freq = np.broadcast_to(base, counts.shape).copy()
        freq[:, :, covered, :] = counts[:, :, covered, :] / denom[covered][None, None, :, None]
    else:
        freq = counts / denom[None, None, :, None]
    if sigma_doy > 0:
        freq = gaussian_filter1d(freq, sigma_doy, axis=2, mode="wrap")
    if sigma_hour > 0:
        freq = gaussian_filter1d(freq, sigma_hour, axis=3, mode="wrap")
    return Climatology(np.clip(freq, PROB_FLOOR, 1.0 - PROB_FLOOR), source_years)


def climatology_lookup(clim, cell, doy, hour):
    """Probability for (cell, day of year, hour); doy and hour wrap."""
    r, c = cell
    nr, nc, _, nh = clim.prob.shape
    if not (0 <= r < nr and 0 <= c < nc):
        raise KeyOutOfRange(f"cell {cell} outside climatology grid")
    if doy < 1 or hour < 0:
        raise KeyOutOfRange(f"bad climatology key doy={doy} hour={hour}")
    return float(clim.prob[r, c, (doy - 1) % CLIM_DAYS, hour % nh])
