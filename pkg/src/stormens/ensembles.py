"""Ensemble prediction: CGAN, CNN (MC dropout only), and MLP systems.

All three share the patch/feature plumbing of an EnsembleContext and emit
EnsembleForecast tables keyed by (day, window-start hour, coarse cell).
Member k of any method draws its randomness from hash(seed, k), so members
never share dropout masks or initial-state draws, and the CGAN ensemble in
identity mode reproduces the CNN ensemble bit for bit under matched seeds.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointMismatch, UnknownMethod
from .griddata import build_patch_index, climatology_lookup, extract_patch
from .normalize import apply_normalizer
from .predictors import DIAGNOSTICS
from .predictors import PredictorId as P
from .seeding import derive_rng, derive_seed
from .severe_models import mlp_features
from .verification import VerificationTable
from .windows import window_hours, window_starts

METHODS = ("cgan", "cnn", "mlp")

#: encoder/generator forward passes run in chunks of this many patches
BATCH_CHUNK = 64


@dataclass
class EnsembleForecast:
    """Member probabilities per (day, window start, coarse cell)."""

    days: np.ndarray       # (n,)
    windows: np.ndarray    # (n,)
    cells: np.ndarray      # (n, 2)
    members: np.ndarray    # (n, k)
    method: str

    @property
    def mean(self):
        return self.members.mean(axis=1)

    @property
    def spread(self):
        return self.members.std(axis=1)

    def __len__(self):
        return len(self.days)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "window", "cell_row", "cell_col", "method",
                        "member_idx", "prob"])
            for i in range(len(self.days)):
                for j in range(self.members.shape[1]):
                    w.writerow([int(self.days[i]), int(self.windows[i]),
                                int(self.cells[i, 0]), int(self.cells[i, 1]),
                                self.method, j, format(self.members[i, j], ".17g")])

    @classmethod
    def from_csv(cls, path):
        rows = {}
        method = None
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                key = (int(rec["day"]), int(rec["window"]),
                       int(rec["cell_row"]), int(rec["cell_col"]))
                rows.setdefault(key, {})[int(rec["member_idx"])] = float(rec["prob"])
                method = rec["method"]
        keys = sorted(rows)
        members = np.array([[rows[k][j] for j in sorted(rows[k])] for k in keys])
        days = np.array([k[0] for k in keys])
        windows = np.array([k[1] for k in keys])
        cells = np.array([[k[2], k[3]] for k in keys])
        return cls(days, windows, cells, members, method)

    def to_bundle(self, path):
        from .arrayio import save_bundle

        save_bundle(path, {
            "days": self.days, "windows": self.windows,
            "cells": self.cells, "members": self.members,
        }, meta={"kind": "ensemble_forecast", "method": self.method})

    @classmethod
    def from_bundle(cls, path):
        from .arrayio import load_bundle

        arrays, meta = load_bundle(path)
        return cls(arrays["days"], arrays["windows"], arrays["cells"],
                   arrays["members"], meta["method"])


def concat_forecasts(parts):
    if not parts:
        raise ValueError("no forecasts to concatenate")
    return EnsembleForecast(
        days=np.concatenate([p.days for p in parts]),
        windows=np.concatenate([p.windows for p in parts]),
        cells=np.concatenate([p.cells for p in parts]),
        members=np.concatenate([p.members for p in parts]),
        method=parts[0].method,
    )


class EnsembleContext:
    """Shared plumbing: archive access, normalization, models, geometry."""

    def __init__(self, archive, normalizers, encoder, enc_store, classifier,
                 clf_stores, mlp, mlp_store, cgan=None):
        self.archive = archive
        self.normalizers = normalizers
        self.encoder = encoder
        self.enc_store = enc_store
        self.classifier = classifier
        self.clf_stores = clf_stores
        self.mlp = mlp
        self.mlp_store = mlp_store
        self.cgan = cgan  # (cfg, gen_a, ga_store, gen_b, gb_store) or None
        fine, coarse = archive.fine, archive.coarse
        self.index = build_patch_index(fine, coarse)
        self.cells = [(r, c) for r in range(coarse.n_rows) for c in range(coarse.n_cols)]
        geo = np.empty((len(self.cells), 3))
        for i, (r, c) in enumerate(self.cells):
            lat, lon = coarse.center(r, c)
            r0, c0 = self.index.origin(r, c)
            elev = fine.elevation[r0 + 32, c0 + 32]
            geo[i] = (
                apply_normalizer(normalizers[P.LATITUDE], lat),
                apply_normalizer(normalizers[P.LONGITUDE], lon),
                apply_normalizer(normalizers[P.ELEVATION], elev),
            )
        self.geo = geo

    def day_patches(self, day):
        """Normalized (hour -> (n_cells, 64, 64, 15)) stacks for one day."""
        fields = self.archive.fields(day)
        hours = sorted(set(h for w in self.windows() for h in window_hours(
            w, self.archive.cfg.hours_per_day)))
        out = {}
        norm_fields = {}
        for pid in DIAGNOSTICS:
            norm_fields[pid] = apply_normalizer(self.normalizers[pid], fields[pid])
        for h in hours:
            stack = np.empty((len(self.cells), 64, 64, 15), dtype=np.float32)
            for i, cell in enumerate(self.cells):
                for ci, pid in enumerate(DIAGNOSTICS):
                    stack[i, :, :, ci] = extract_patch(norm_fields[pid][h], cell, self.index)
            out[h] = stack
        return out

    def windows(self):
        return window_starts(self.archive.cfg.hours_per_day)

    def encode_stacks(self, stacks):
        """Feature vectors for a (n, 64, 64, 15) batch, chunked."""
        feats = np.empty((len(stacks), 128), dtype=np.float32)
        for lo in range(0, len(stacks), BATCH_CHUNK):
            part = stacks[lo:lo + BATCH_CHUNK]
            f, _ = self.encoder.forward(self.enc_store, part, "infer")
            feats[lo:lo + BATCH_CHUNK] = f
        return feats

    def classify_members(self, feats_by_hour, day, mc_streams):
        """Window-stacked features -> one probability column per MC stream.

        ``feats_by_hour`` maps hour -> (n_cells, 128). Returns days/windows/
        cells arrays plus a members matrix with one column per stream.
        """
        n_cells = len(self.cells)
        rows_days, rows_windows, rows_cells = [], [], []
        cols = [[] for _ in mc_streams]
        for w in self.windows():
            hours = window_hours(w, self.archive.cfg.hours_per_day)
            feats = np.stack([feats_by_hour[h] for h in hours], axis=1)
            clf_store = self.clf_stores[w]
            for i, rng in enumerate(mc_streams):
                probs, _ = self.classifier.forward(clf_store, feats, self.geo, "mc", rng)
                cols[i].append(probs)
            rows_days.extend([day] * n_cells)
            rows_windows.extend([w] * n_cells)
            rows_cells.extend(self.cells)
        members = np.stack([np.concatenate(c) for c in cols], axis=1)
        return (np.asarray(rows_days), np.asarray(rows_windows),
                np.asarray(rows_cells), members)


def check_normalizer_hashes(*hashes):
    """All checkpoints feeding one prediction must share normalizer stats."""
    known = [h for h in hashes if h]
    if known and any(h != known[0] for h in known):
        raise CheckpointMismatch("checkpoints were trained with different normalizers")


def cnn_ensemble_predict(ctx, day, n_members, seed):
    """MC-dropout-only ensemble on the original predictor stack."""
    patches = ctx.day_patches(day)
    feats_by_hour = {h: ctx.encode_stacks(stack) for h, stack in patches.items()}
    streams = [derive_rng(seed, "mc", k) for k in range(n_members)]
    days, windows, cells, members = ctx.classify_members(feats_by_hour, day, streams)
    return EnsembleForecast(days, windows, cells, members, "cnn")


def _synthesize_stack(ctx, stack, member_seed, k):
    """Member k's synthetic stack: z drawn whole, generators run chunked."""
    from .cgan import make_initial_state
    from .predictors import COND_IDX, GROUP_A, GROUP_A_IDX, GROUP_B, GROUP_B_IDX

    cfg, gen_a, ga_store, gen_b, gb_store = ctx.cgan
    rng = derive_rng(member_seed, "member", k)
    cond = stack[..., COND_IDX]
    za = make_initial_state(stack[..., GROUP_A_IDX], cfg.noise_sigma, rng, GROUP_A)
    zb = make_initial_state(stack[..., GROUP_B_IDX], cfg.noise_sigma, rng, GROUP_B)
    out = stack.copy()
    for lo in range(0, len(stack), BATCH_CHUNK):
        sl = slice(lo, lo + BATCH_CHUNK)
        xhat_a, _ = gen_a.forward(ga_store, za[sl], cond[sl], "infer")
        xhat_b, _ = gen_b.forward(gb_store, zb[sl], cond[sl], "infer")
        out[sl][..., GROUP_A_IDX] = xhat_a
        out[sl][..., GROUP_B_IDX] = xhat_b
    return out


def cgan_ensemble_predict(ctx, day, n_members, seed, identity=False, mc_draws=1):
    """CGAN-member ensemble: one MC-dropout draw per member (default).

    ``identity=True`` bypasses the generators (members reduce to the
    original stack, reproducing the CNN ensemble under matched seeds);
    ``mc_draws > 1`` switches to the member x dropout cross product.
    """
    if ctx.cgan is None and not identity:
        raise CheckpointMismatch("no CGAN checkpoint attached to this context")
    patches = ctx.day_patches(day)
    hours = sorted(patches)
    columns = []
    days = windows = cells = None
    for k in range(n_members):
        feats_by_hour = {}
        for h in hours:
            stack = patches[h]
            if not identity:
                stack = _synthesize_stack(ctx, stack, derive_seed(seed, "z", day, h), k)
            feats_by_hour[h] = ctx.encode_stacks(stack)
        if mc_draws > 1:
            streams = [derive_rng(seed, "mc", k, d) for d in range(mc_draws)]
        else:
            streams = [derive_rng(seed, "mc", k)]
        days, windows, cells, members = ctx.classify_members(feats_by_hour, day, streams)
        columns.append(members)
    members = np.concatenate(columns, axis=1)
    return EnsembleForecast(days, windows, cells, members, "cgan")


def mlp_ensemble_predict(ctx, day, n_members, seed):
    """Feature-engineered MLP ensemble from MC dropout passes."""
    patches = ctx.day_patches(day)
    hours_per_day = ctx.archive.cfg.hours_per_day
    n_cells = len(ctx.cells)
    rows_days, rows_windows, rows_cells = [], [], []
    feature_rows = []
    for w in ctx.windows():
        hours = window_hours(w, hours_per_day)
        for i in range(n_cells):
            stack = np.stack([patches[h][i] for h in hours], axis=0)
            feature_rows.append(mlp_features(stack, ctx.geo[i]))
        rows_days.extend([day] * n_cells)
        rows_windows.extend([w] * n_cells)
        rows_cells.extend(ctx.cells)
    features = np.asarray(feature_rows, dtype=np.float32)
    cols = []
    for k in range(n_members):
        rng = derive_rng(seed, "mc", k)
        probs, _ = ctx.mlp.forward(ctx.mlp_store, features, "mc", rng)
        cols.append(probs)
    members = np.stack(cols, axis=1)
    return EnsembleForecast(np.asarray(rows_days), np.asarray(rows_windows),
                            np.asarray(rows_cells), members, "mlp")


def predict_days(ctx, days, method, n_members, seed):
    """Dispatch one method over several days and concatenate."""
    if method == "cgan":
        fn = cgan_ensemble_predict
    elif method == "cnn":
        fn = cnn_ensemble_predict
    elif method == "mlp":
        fn = mlp_ensemble_predict
    else:
        raise UnknownMethod(f"unknown prediction method {method!r}")
    parts = [fn(ctx, d, n_members, derive_seed(seed, "day", d)) for d in days]
    return concat_forecasts(parts)


def build_verification_table(forecast, archive, clim):
    """Align a forecast with observed labels and climatology probabilities."""
    obs = np.empty(len(forecast))
    cprob = np.empty(len(forecast))
    for i in range(len(forecast)):
        d = int(forecast.days[i])
        w = int(forecast.windows[i])
        r, c = int(forecast.cells[i, 0]), int(forecast.cells[i, 1])
        obs[i] = archive.labels.labels[d, w, r, c]
        doy = archive.labels.doy_index(d) + 1
        cprob[i] = climatology_lookup(clim, (r, c), doy, w)
    return VerificationTable(
        days=forecast.days.copy(),
        windows=forecast.windows.copy(),
        cells=forecast.cells.copy(),
        members=forecast.members.copy(),
        obs=obs,
        clim=cprob,
    )
