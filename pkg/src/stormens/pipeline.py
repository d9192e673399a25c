"""Experiment orchestration: data, training, prediction, verification.

Each stage reads and writes only under the run directory; stages can be
run individually (``--stages``) against existing artifacts, and a full
``run-all`` with a fixed (config, seed) reproduces every metric CSV bit
for bit in single-threaded mode.
"""

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, cgan, griddata, stormgen
from .arrayio import load_bundle, save_bundle
from .config import config_hash, config_to_text
from .ensembles import (
    EnsembleContext,
    EnsembleForecast,
    build_verification_table,
    cgan_ensemble_predict,
    check_normalizer_hashes,
    cnn_ensemble_predict,
    concat_forecasts,
    mlp_ensemble_predict,
    predict_days,
)
from .errors import MissingMetric, StageFailure, StormensError, UnknownMethod
from .normalize import NormalizerSet, apply_normalizer, fit_normalizer
from .predictors import COND_IDX, DIAGNOSTICS, GROUP_A_IDX, GROUP_B_IDX
from .predictors import PredictorId as P
from .seeding import derive_rng, derive_seed
from .severe_models import (
    Classifier,
    Encoder,
    Mlp,
    load_model_checkpoint,
    mlp_features,
    pretrain_encoder,
    save_model_checkpoint,
    train_classifier,
    train_mlp,
)
from .neural import ParamStore
from .verification import (
    aggregate_bss,
    discard_test,
    murphy_decompose,
    neighborhood_bss_map,
    pattern_correlation,
    permutation_importance,
    reliability_curve,
    spread_skill,
)
from .windows import valid_hours, window_hours, window_starts

STAGE_ORDER = ("synth-data", "train-cgan", "train-encoder", "train-classifier",
               "train-mlp", "predict", "verify", "report")
METHODS = ("cgan", "cnn", "mlp")
FLOAT_FMT = ".17g"


def worker_count():
    """Parallelism knob; the only environment variable the pipeline reads."""
    try:
        return max(1, int(os.environ.get("STORMENS_WORKERS", "1")))
    except ValueError:
        return 1


class RunPaths:
    def __init__(self, out_dir):
        from pathlib import Path

        self.root = Path(out_dir)
        self.archive = self.root / "archive"
        self.checkpoints = self.root / "checkpoints"
        self.forecasts = self.root / "forecasts"
        self.metrics = self.root / "metrics"
        self.report = self.root / "report"

    def ensure(self):
        for p in (self.root, self.archive, self.checkpoints, self.forecasts,
                  self.metrics, self.report):
            p.mkdir(parents=True, exist_ok=True)

    @property
    def climatology(self):
        return self.archive / "climatology.npz"

    @property
    def cgan_checkpoint(self):
        return self.checkpoints / "cgan.npz"

    @property
    def models_checkpoint(self):
        return self.checkpoints / "models.npz"

    @property
    def features(self):
        return self.checkpoints / "features.npz"

    @property
    def manifest(self):
        return self.root / "manifest.json"


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def save(self, path):
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(path.read_text()))


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------- plumbing


class PatchProvider:
    """Normalized fine-grid fields with patch extraction, day-cached."""

    def __init__(self, archive, normalizers, index, cache_days):
        self.archive = archive
        self.normalizers = normalizers
        self.index = index
        self._cache = {}
        self._cap = cache_days

    def day_fields(self, day):
        if day in self._cache:
            return self._cache[day]
        raw = self.archive.fields(day)
        norm = {pid: apply_normalizer(self.normalizers[pid], raw[pid]).astype(np.float32)
                for pid in DIAGNOSTICS}
        if len(self._cache) >= self._cap:
            self._cache.pop(next(iter(self._cache)))
        self._cache[day] = norm
        return norm

    def patch(self, day, hour, cell):
        fields = self.day_fields(day)
        out = np.empty((64, 64, 15), dtype=np.float32)
        for ci, pid in enumerate(DIAGNOSTICS):
            out[:, :, ci] = griddata.extract_patch(fields[pid][hour], cell, self.index)
        return out

    def fetch(self, keys):
        """Patches for (day, hour, cell) keys, grouped by day for locality."""
        out = np.empty((len(keys), 64, 64, 15), dtype=np.float32)
        order = sorted(range(len(keys)), key=lambda i: keys[i][0])
        for i in order:
            day, hour, cell = keys[i]
            out[i] = self.patch(day, hour, cell)
        return out


def build_archive(cfg, paths=None):
    fields_dir = paths.archive / "fields" if paths else None
    if fields_dir is not None and not fields_dir.exists():
        fields_dir = None
    return stormgen.make_archive(
        cfg.stormgen, cfg.archive.n_days, verify_days=cfg.archive.verify_days,
        coarse_shape=(cfg.archive.coarse_rows, cfg.archive.coarse_cols),
        fields_dir=fields_dir,
    )


def fit_normalizers(cfg, archive):
    """Fit per-predictor statistics on a training-day sample; statics span
    the whole domain."""
    rng = derive_rng(cfg.seed, "normalize")
    days = list(rng.choice(archive.train_days,
                           size=min(cfg.archive.normalize_sample_days,
                                    len(archive.train_days)), replace=False))
    ns = NormalizerSet()
    samples = {pid: [] for pid in DIAGNOSTICS}
    for day in days:
        fields = archive.fields(int(day))
        for pid in DIAGNOSTICS:
            samples[pid].append(fields[pid][:, ::4, ::4].ravel())
    for pid in DIAGNOSTICS:
        ns.add(fit_normalizer(pid, np.concatenate(samples[pid]), fitted_on="train"))
    fine = archive.fine
    lats, _ = fine.latlon(np.arange(fine.n_rows), 0)
    _, lons = fine.latlon(0, np.arange(fine.n_cols))
    ns.add(fit_normalizer(P.LATITUDE, lats, fitted_on="domain"))
    ns.add(fit_normalizer(P.LONGITUDE, lons, fitted_on="domain"))
    ns.add(fit_normalizer(P.ELEVATION, fine.elevation, fitted_on="domain"))
    return ns


def load_normalizers(paths):
    text = (paths.checkpoints / "normalizers.txt").read_text()
    return NormalizerSet.from_text(text)


def ensure_normalizers(cfg, paths, archive):
    path = paths.checkpoints / "normalizers.txt"
    if path.exists():
        return NormalizerSet.from_text(path.read_text())
    ns = fit_normalizers(cfg, archive)
    path.write_text(ns.to_text())
    return ns


# ------------------------------------------------------------------- stages


def stage_synth_data(cfg, paths):
    archive = build_archive(cfg)
    stormgen.save_archive(archive, paths.archive, with_fields=cfg.archive.with_fields)
    griddata.reports_to_csv(archive.reports, paths.archive / "reports.csv")
    ref_labels = stormgen.synth_label_archive(
        cfg.stormgen, cfg.archive.clim_years, archive.fine, archive.coarse, archive.day0)
    clim = griddata.build_climatology(
        ref_labels, source_years=f"synthetic-{cfg.archive.clim_years}y")
    clim.save(paths.climatology)
    return archive


def _cgan_training_keys(cfg, archive, provider):
    """(day, hour, cell) keys: storm-present patches first, random filler."""
    rng = derive_rng(cfg.seed, "cgan_keys")
    cells = [(r, c) for r in range(archive.coarse.n_rows)
             for c in range(archive.coarse.n_cols)]
    hours = valid_hours(cfg.stormgen.hours_per_day)
    stormy, plain = [], []
    for day in archive.train_days:
        by_hour = {}
        for storm in archive.storms_by_day[day]:
            by_hour.setdefault(storm.hour, []).append(storm)
        for hour in hours:
            for cell in cells:
                key = (day, hour, cell)
                r0, c0 = provider.index.origin(*cell)
                hit = any(
                    r0 - 8 <= s.row < r0 + 72 and c0 - 8 <= s.col < c0 + 72
                    for s in by_hour.get(hour, ())
                )
                (stormy if hit else plain).append(key)
    n_total = cfg.cgan.train_pairs
    n_storm = min(len(stormy), int(cfg.cgan.storm_fraction * n_total))
    picks = []
    if n_storm:
        picks += [stormy[i] for i in rng.choice(len(stormy), n_storm, replace=False)]
    n_plain = min(len(plain), n_total - n_storm)
    picks += [plain[i] for i in rng.choice(len(plain), n_plain, replace=False)]
    return picks


def stage_train_cgan(cfg, paths, archive, groups=("A", "B"), progress=None):
    normalizers = ensure_normalizers(cfg, paths, archive)
    index = griddata.build_patch_index(archive.fine, archive.coarse)
    provider = PatchProvider(archive, normalizers, index, cfg.archive.cache_days)
    keys = _cgan_training_keys(cfg, archive, provider)
    stacks = provider.fetch(keys)
    gan_cfg = cfg.cgan_config()
    m_all = stacks[..., COND_IDX]
    stores = {}
    if paths.cgan_checkpoint.exists():
        _, stores, _, _ = cgan.load_cgan_checkpoint(paths.cgan_checkpoint)
    for group in groups:
        x_all = stacks[..., GROUP_A_IDX if group == "A" else GROUP_B_IDX]
        gen, disc, g_store, d_store, channels = cgan.init_cgan(
            group, gan_cfg, derive_seed(cfg.seed, "cgan_init", group))
        cgan.train_cgan(gen, disc, g_store, d_store, x_all, m_all, gan_cfg, channels,
                        progress=progress)
        stores[f"G_{group}"] = g_store
        stores[f"D_{group}"] = d_store
    cgan.save_cgan_checkpoint(paths.cgan_checkpoint, gan_cfg, stores, normalizers)


def _labeled_keys(cfg, archive, days):
    """(day, hour, cell) rows plus their hourly window labels."""
    cells = [(r, c) for r in range(archive.coarse.n_rows)
             for c in range(archive.coarse.n_cols)]
    hours = valid_hours(cfg.stormgen.hours_per_day)
    keys, labels = [], []
    for day in days:
        for hour in hours:
            for cell in cells:
                keys.append((day, hour, cell))
                labels.append(int(archive.labels.labels[day, hour, cell[0], cell[1]]))
    return keys, np.asarray(labels, dtype=np.uint8)


def stage_train_encoder(cfg, paths, archive, progress=None):
    normalizers = ensure_normalizers(cfg, paths, archive)
    index = griddata.build_patch_index(archive.fine, archive.coarse)
    provider = PatchProvider(archive, normalizers, index, cfg.archive.cache_days)
    train_keys, train_labels = _labeled_keys(cfg, archive, archive.train_days)
    val_keys, val_labels = _labeled_keys(cfg, archive, archive.validation_days)

    encoder = Encoder(cfg.encoder_config())
    store = ParamStore(np.float32)
    encoder.init_params(store, derive_rng(cfg.seed, "encoder_init"))
    pretrain_encoder(
        encoder, store,
        lambda idx: provider.fetch([train_keys[i] for i in idx]), train_labels,
        lambda idx: provider.fetch([val_keys[i] for i in idx]), val_labels,
        cfg.encoder_train_config(), neg_per_pos=cfg.encoder.neg_per_pos,
        progress=progress,
    )
    # classifiers and the MLP are created (untrained) alongside so that the
    # checkpoint container is complete from this stage onward
    classifier = Classifier(cfg.classifier_config())
    clf_stores = {}
    for w in window_starts(cfg.stormgen.hours_per_day):
        s = ParamStore(np.float32)
        classifier.init_params(s, derive_rng(cfg.seed, "classifier_init", w))
        clf_stores[w] = s
    mlp = Mlp(cfg.mlp_config())
    mlp_store = ParamStore(np.float32)
    mlp.init_params(mlp_store, derive_rng(cfg.seed, "mlp_init"))
    save_model_checkpoint(paths.models_checkpoint, cfg.encoder_config(), store,
                          cfg.classifier_config(), clf_stores, cfg.mlp_config(),
                          mlp_store, normalizers)
    _precompute_features(cfg, paths, archive, provider, encoder, store)


def _precompute_features(cfg, paths, archive, provider, encoder, store):
    """Encoder features for every (fit day, valid hour, cell), persisted."""
    cells = [(r, c) for r in range(archive.coarse.n_rows)
             for c in range(archive.coarse.n_cols)]
    hours = valid_hours(cfg.stormgen.hours_per_day)
    days = sorted(archive.train_days + archive.validation_days)
    arrays = {}
    for day in days:
        for hour in hours:
            stack = np.stack([provider.patch(day, hour, cell) for cell in cells])
            feats = np.empty((len(cells), 128), dtype=np.float32)
            for lo in range(0, len(cells), 64):
                part, _ = encoder.forward(store, stack[lo:lo + 64], "infer")
                feats[lo:lo + 64] = part
            arrays[f"f{day:04d}_{hour:02d}"] = feats
    save_bundle(paths.features, arrays, meta={"kind": "encoder_features",
                                              "days": days, "hours": hours})


def _geo_matrix(archive, normalizers, index):
    cells = [(r, c) for r in range(archive.coarse.n_rows)
             for c in range(archive.coarse.n_cols)]
    geo = np.empty((len(cells), 3))
    for i, (r, c) in enumerate(cells):
        lat, lon = archive.coarse.center(r, c)
        r0, c0 = index.origin(r, c)
        geo[i] = (
            apply_normalizer(normalizers[P.LATITUDE], lat),
            apply_normalizer(normalizers[P.LONGITUDE], lon),
            apply_normalizer(normalizers[P.ELEVATION], archive.fine.elevation[r0 + 32, c0 + 32]),
        )
    return cells, geo


def stage_train_classifier(cfg, paths, archive, windows=None, progress=None):
    (enc_cfg, enc_store, clf_cfg, clf_stores, mlp_cfg, mlp_store,
     normalizers, _) = load_model_checkpoint(paths.models_checkpoint)
    feats_arrays, feats_meta = load_bundle(paths.features)
    index = griddata.build_patch_index(archive.fine, archive.coarse)
    cells, geo = _geo_matrix(archive, normalizers, index)
    classifier = Classifier(clf_cfg)
    hours_per_day = cfg.stormgen.hours_per_day
    windows = window_starts(hours_per_day) if windows is None else list(windows)

    def window_dataset(days, w):
        hours = window_hours(w, hours_per_day)
        feats, geos, labels = [], [], []
        for day in days:
            per_hour = [feats_arrays[f"f{day:04d}_{h:02d}"] for h in hours]
            for i, (r, c) in enumerate(cells):
                feats.append(np.stack([ph[i] for ph in per_hour]))
                geos.append(geo[i])
                labels.append(int(archive.labels.labels[day, w, r, c]))
        return (np.asarray(feats, dtype=np.float32), np.asarray(geos),
                np.asarray(labels, dtype=np.uint8))

    for w in windows:
        tf, tg, tl = window_dataset(archive.train_days, w)
        vf, vg, vl = window_dataset(archive.validation_days, w)
        store = clf_stores[w]
        history = train_classifier(classifier, store, tf, tg, tl, vf, vg, vl,
                                   cfg.classifier_train_config(w),
                                   neg_per_pos=cfg.classifier.neg_per_pos)
        if progress:
            progress(w, history[-1] if history else float("nan"))
    save_model_checkpoint(paths.models_checkpoint, enc_cfg, enc_store, clf_cfg,
                          clf_stores, mlp_cfg, mlp_store, normalizers)


def stage_train_mlp(cfg, paths, archive, progress=None):
    (enc_cfg, enc_store, clf_cfg, clf_stores, mlp_cfg, mlp_store,
     normalizers, _) = load_model_checkpoint(paths.models_checkpoint)
    index = griddata.build_patch_index(archive.fine, archive.coarse)
    provider = PatchProvider(archive, normalizers, index, cfg.archive.cache_days)
    cells, geo = _geo_matrix(archive, normalizers, index)
    hours_per_day = cfg.stormgen.hours_per_day

    def dataset(days):
        rows, labels = [], []
        for day in days:
            for w in window_starts(hours_per_day):
                hours = window_hours(w, hours_per_day)
                for i, (r, c) in enumerate(cells):
                    stack = np.stack([provider.patch(day, h, (r, c)) for h in hours])
                    rows.append(mlp_features(stack, geo[i]))
                    labels.append(int(archive.labels.labels[day, w, r, c]))
        return np.asarray(rows, dtype=np.float32), np.asarray(labels, dtype=np.uint8)

    tx, tl = dataset(archive.train_days)
    vx, vl = dataset(archive.validation_days)
    mlp = Mlp(mlp_cfg)
    train_mlp(mlp, mlp_store, tx, tl, vx, vl, cfg.mlp_train_config(),
              neg_per_pos=cfg.mlp.neg_per_pos)
    save_model_checkpoint(paths.models_checkpoint, enc_cfg, enc_store, clf_cfg,
                          clf_stores, mlp_cfg, mlp_store, normalizers)


def load_context(cfg, paths, archive, need_cgan=True):
    """Assemble the prediction context from persisted checkpoints."""
    (enc_cfg, enc_store, clf_cfg, clf_stores, mlp_cfg, mlp_store,
     normalizers, model_meta) = load_model_checkpoint(paths.models_checkpoint)
    cgan_part = None
    if need_cgan:
        gan_cfg, stores, gan_norm, gan_meta = cgan.load_cgan_checkpoint(paths.cgan_checkpoint)
        check_normalizer_hashes(model_meta.get("normalizer_hash"),
                                gan_meta.get("normalizer_hash"))
        gen_a, _, channels_a = cgan.build_cgan("A", gan_cfg)
        gen_b, _, channels_b = cgan.build_cgan("B", gan_cfg)
        cgan_part = (gan_cfg, gen_a, stores["G_A"], gen_b, stores["G_B"])
    encoder = Encoder(enc_cfg)
    classifier = Classifier(clf_cfg)
    mlp = Mlp(mlp_cfg)
    return EnsembleContext(archive, normalizers, encoder, enc_store, classifier,
                           clf_stores, mlp, mlp_store, cgan=cgan_part)


def predict_day(ctx, day, method, n_members, seed):
    """Dispatch one day's prediction to the matching ensemble routine."""
    if method == "cgan":
        return cgan_ensemble_predict(ctx, day, n_members, seed)
    if method == "cnn":
        return cnn_ensemble_predict(ctx, day, n_members, seed)
    if method == "mlp":
        return mlp_ensemble_predict(ctx, day, n_members, seed)
    raise UnknownMethod(f"unknown prediction method {method!r}")


def stage_predict(cfg, paths, archive, methods=METHODS):
    ctx = load_context(cfg, paths, archive, need_cgan="cgan" in methods)
    seed = cfg.stage_seed("predict")
    days = archive.verify_days
    workers = worker_count()
    for method in methods:
        n = cfg.ensemble.k_members if method == "cgan" else cfg.ensemble.m_members
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(
                    lambda d: predict_day(ctx, d, method, n, derive_seed(seed, "day", d)),
                    days))
            fc = concat_forecasts(parts)
        else:
            fc = predict_days(ctx, days, method, n, seed)
        fc.to_csv(paths.forecasts / f"ensemble_{method}.csv")
        fc.to_bundle(paths.forecasts / f"ensemble_{method}.npz")


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, FLOAT_FMT) if isinstance(v, float) else v for v in row])


def stage_verify(cfg, paths, archive, methods=METHODS, metrics="all"):
    clim = griddata.Climatology.load(paths.climatology)
    v = cfg.verification
    want = set(metrics.split(",")) if isinstance(metrics, str) else set(metrics)
    all_metrics = want == {"all"}
    fractions = np.arange(0.0, v.discard_max + 1e-9, v.discard_step)
    for method in methods:
        fc = EnsembleForecast.from_bundle(paths.forecasts / f"ensemble_{method}.npz")
        table = build_verification_table(fc, archive, clim)
        if all_metrics or "bss" in want:
            rows = [("all", aggregate_bss(table, "all")[None])]
            per_window = aggregate_bss(table, "window")
            rows += [(str(w), per_window[w]) for w in sorted(per_window)]
            member_bss = []
            for j in range(table.members.shape[1]):
                member_bss.append(aggregate_bss(table, "all",
                                                forecast=table.members[:, j])[None])
            _write_csv(paths.metrics / f"bss_{method}.csv", ["group", "bss"], rows)
            _write_csv(paths.metrics / f"bss_members_{method}.csv",
                       ["member", "bss"], list(enumerate(member_bss)))
        if all_metrics or "reliability" in want:
            summary = reliability_curve(table.mean, table.obs, bins=v.reliability_bins,
                                        n_boot=v.n_boot,
                                        seed=cfg.stage_seed("verify-bootstrap"))
            rows = []
            for b in range(len(summary.count)):
                rows.append((b, summary.edges[b], summary.edges[b + 1],
                             float(summary.mean_forecast[b]), float(summary.observed_freq[b]),
                             int(summary.count[b]), float(summary.ci_lo[b]),
                             float(summary.ci_hi[b])))
            _write_csv(paths.metrics / f"reliability_{method}.csv",
                       ["bin", "lo", "hi", "mean_forecast", "observed_freq",
                        "count", "ci_lo", "ci_hi"], rows)
            rel, res, unc = murphy_decompose(table.mean, table.obs, bins=v.reliability_bins)
            _write_csv(paths.metrics / f"murphy_{method}.csv",
                       ["rel", "res", "unc", "brier"],
                       [(rel, res, unc, float(np.mean((table.mean - table.obs) ** 2)))])
        if all_metrics or "spread-skill" in want:
            rows_ss, ssrel = spread_skill(table, bins=v.spread_bins)
            _write_csv(paths.metrics / f"spread_skill_{method}.csv",
                       ["mean_spread", "rmse", "count"], rows_ss)
            _write_csv(paths.metrics / f"ssrel_{method}.csv", ["ssrel"], [(ssrel,)])
        if all_metrics or "discard" in want:
            fr, errors, mf = discard_test(table, fractions)
            _write_csv(paths.metrics / f"discard_{method}.csv",
                       ["fraction", "error"], list(zip(fr.tolist(), errors.tolist())))
            _write_csv(paths.metrics / f"mf_{method}.csv", ["monotonicity_fraction"],
                       [(mf,)])
        if all_metrics or "bss-map" in want:
            grid = (archive.coarse.n_rows, archive.coarse.n_cols)
            min_reports = v.mask_min_reports if v.mask_min_reports > 0 else None
            bmap = neighborhood_bss_map(table, grid, min_reports=min_reports)
            rows = []
            for r in range(grid[0]):
                for c in range(grid[1]):
                    rows.append((r, c, float(bmap.bss[r, c]), int(bmap.report_count[r, c]),
                                 int(bmap.masked[r, c])))
            _write_csv(paths.metrics / f"bss_map_{method}.csv",
                       ["row", "col", "bss", "reports", "masked"], rows)
            (paths.metrics / f"bss_map_{method}.json").write_text(
                json.dumps(bmap.meta, sort_keys=True))
    if all_metrics or "pattern-corr" in want:
        _verify_cgan_fidelity(cfg, paths, archive)
    if all_metrics or "perm-importance" in want:
        _verify_permutation_importance(cfg, paths, archive)
    if v.plots:
        render_plots(paths, methods)


def _fidelity_patches(cfg, archive, ctx):
    """Storm-present verification patches for the generator evaluation."""
    v = cfg.verification
    uh_idx = DIAGNOSTICS.index(P.UH_2_5KM)
    picks = []
    for day in archive.verify_days:
        patches = ctx.day_patches(day)
        for h, stack in sorted(patches.items()):
            for i in range(len(stack)):
                if stack[i, :, :, uh_idx].max() >= v.fidelity_uh_threshold:
                    picks.append(stack[i])
                if len(picks) >= v.fidelity_patches:
                    return np.asarray(picks)
    return np.asarray(picks) if picks else np.zeros((0, 64, 64, 15), dtype=np.float32)


def _verify_cgan_fidelity(cfg, paths, archive):
    from .predictors import CHANNEL_INDEX

    ctx = load_context(cfg, paths, archive, need_cgan=True)
    patches = _fidelity_patches(cfg, archive, ctx)
    if len(patches) == 0:
        _write_csv(paths.metrics / "pattern_corr.csv",
                   ["pair", "real_mean", "generated_mean", "sign_match_rate",
                    "gen_vs_cond_positive_rate", "n_patches"], [])
        return
    gan_cfg, gen_a, ga_store, gen_b, gb_store = ctx.cgan
    members = cgan.generate_members(gen_a, gen_b, ga_store, gb_store, gan_cfg,
                                    patches, 1, cfg.stage_seed("fidelity"))[0]
    pairs = [
        ("cape_cin", P.CAPE, P.CIN),
        ("cref_dewpoint", P.CREF, P.DEWPOINT_2M),
        ("srh01_srh03", P.SRH_0_1KM, P.SRH_0_3KM),
    ]
    rows = []
    uh = patches[..., CHANNEL_INDEX[P.UH_2_5KM]]
    gen_cref = members[..., CHANNEL_INDEX[P.CREF]]
    pos = 0
    for i in range(len(patches)):
        if pattern_correlation(gen_cref[i], uh[i]) > 0:
            pos += 1
    cond_rate = pos / len(patches)
    for name, pa, pb in pairs:
        ia, ib = CHANNEL_INDEX[pa], CHANNEL_INDEX[pb]
        real, gen, match = [], [], 0
        for i in range(len(patches)):
            r = pattern_correlation(patches[i, :, :, ia], patches[i, :, :, ib])
            g = pattern_correlation(members[i, :, :, ia], members[i, :, :, ib])
            real.append(r)
            gen.append(g)
            match += int(np.sign(r) == np.sign(g))
        rows.append((name, float(np.mean(real)), float(np.mean(gen)),
                     match / len(patches), cond_rate, len(patches)))
    _write_csv(paths.metrics / "pattern_corr.csv",
               ["pair", "real_mean", "generated_mean", "sign_match_rate",
                "gen_vs_cond_positive_rate", "n_patches"], rows)


def _verify_permutation_importance(cfg, paths, archive):
    """Channel importance through the CNN path on a verification subset."""
    v = cfg.verification
    ctx = load_context(cfg, paths, archive, need_cgan=False)
    hours_per_day = cfg.stormgen.hours_per_day
    rng = derive_rng(cfg.seed, "perm_rows")
    rows = []
    for day in archive.verify_days:
        for w in window_starts(hours_per_day):
            for i, cell in enumerate(ctx.cells):
                rows.append((day, w, i, cell))
    sel = rng.choice(len(rows), size=min(v.perm_subset, len(rows)), replace=False)
    rows = [rows[i] for i in sorted(sel)]
    cache = {}
    samples = []
    obs = []
    for day, w, ci, cell in rows:
        if day not in cache:
            cache[day] = ctx.day_patches(day)
        hours = window_hours(w, hours_per_day)
        samples.append(np.stack([cache[day][h][ci] for h in hours[:2]]))
        obs.append(archive.labels.labels[day, w, cell[0], cell[1]])
    # fixed two-hour windows keep the sample tensor rectangular
    samples = np.asarray(samples)
    obs = np.asarray(obs, dtype=float)
    geo = np.asarray([ctx.geo[ci] for _, _, ci, _ in rows])
    windows_arr = [w for _, w, _, _ in rows]

    def predict_fn(stacks):
        n, t = stacks.shape[:2]
        flat = stacks.reshape(n * t, 64, 64, 15)
        feats = ctx.encode_stacks(flat).reshape(n, t, 128)
        probs = np.empty(n)
        for w in sorted(set(windows_arr)):
            idx = [i for i, ww in enumerate(windows_arr) if ww == w]
            p, _ = ctx.classifier.forward(ctx.clf_stores[w], feats[idx], geo[idx],
                                          "infer")
            probs[idx] = p
        return probs

    out = []
    for ci, pid in enumerate(DIAGNOSTICS):
        mean_delta, deltas = permutation_importance(
            predict_fn, samples, obs, ci, n_shuffles=v.perm_shuffles,
            seed=cfg.stage_seed("perm"))
        out.append((pid.value, mean_delta, float(np.mean(deltas > 0))))
    _write_csv(paths.metrics / "perm_importance.csv",
               ["predictor", "delta_bs", "positive_rate"], out)


def render_plots(paths, methods=METHODS):
    """Optional figures mirroring the verification tables."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    import csv as _csv

    written = []

    def read(path):
        with open(path, newline="") as fh:
            return list(_csv.DictReader(fh))

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    for method in methods:
        rows = read(paths.metrics / f"bss_{method}.csv")
        ws = [int(r["group"]) for r in rows if r["group"] != "all"]
        bss = [float(r["bss"]) for r in rows if r["group"] != "all"]
        axes[0, 0].plot(ws, bss, marker="o", label=method)
        rel = read(paths.metrics / f"reliability_{method}.csv")
        mf = [float(r["mean_forecast"]) for r in rel if r["count"] != "0"]
        of = [float(r["observed_freq"]) for r in rel if r["count"] != "0"]
        axes[0, 1].plot(mf, of, marker="o", label=method)
        ss = read(paths.metrics / f"spread_skill_{method}.csv")
        axes[1, 0].plot([float(r["mean_spread"]) for r in ss],
                        [float(r["rmse"]) for r in ss], marker="o", label=method)
        dc = read(paths.metrics / f"discard_{method}.csv")
        axes[1, 1].plot([float(r["fraction"]) for r in dc],
                        [float(r["error"]) for r in dc], marker="o", label=method)
    axes[0, 0].set_title("BSS by window start")
    axes[0, 1].set_title("reliability")
    axes[0, 1].plot([0, 1], [0, 1], "k--", lw=0.5)
    axes[1, 0].set_title("spread vs RMSE")
    lim = max(axes[1, 0].get_xlim()[1], axes[1, 0].get_ylim()[1])
    axes[1, 0].plot([0, lim], [0, lim], "k--", lw=0.5)
    axes[1, 1].set_title("discard curve")
    for ax in axes.ravel():
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = paths.report / "verification.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    written.append(out)
    return written


def emit_report(cfg, paths):
    """Summary document distilled from the metric CSVs."""
    import csv as _csv

    metric_files = sorted(paths.metrics.glob("*.csv"))
    if not metric_files:
        raise MissingMetric("no metric CSVs found; run the verify stage first")
    lines = ["# Experiment report", ""]
    lines.append(f"- config hash: {config_hash(cfg)}")
    lines.append(f"- software version: {__version__}")
    lines.append("")
    for method in METHODS:
        path = paths.metrics / f"bss_{method}.csv"
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            rows = list(_csv.DictReader(fh))
        overall = next((r["bss"] for r in rows if r["group"] == "all"), "n/a")
        lines.append(f"## {method} ensemble")
        lines.append(f"- overall BSS: {overall}")
        mf_path = paths.metrics / f"mf_{method}.csv"
        if mf_path.exists():
            with open(mf_path, newline="") as fh:
                mf = next(iter(_csv.DictReader(fh)))["monotonicity_fraction"]
            lines.append(f"- discard-test monotonicity fraction: {mf}")
        ss_path = paths.metrics / f"ssrel_{method}.csv"
        if ss_path.exists():
            with open(ss_path, newline="") as fh:
                ssrel = next(iter(_csv.DictReader(fh)))["ssrel"]
            lines.append(f"- spread-skill reliability: {ssrel}")
        lines.append("- BSS by window start:")
        lines.append("")
        lines.append("  | window | BSS |")
        lines.append("  |-------:|----:|")
        for r in rows:
            if r["group"] != "all":
                lines.append(f"  | {r['group']} | {float(r['bss']):+.4f} |")
        lines.append("")
    out = paths.report / "summary.md"
    out.write_text("\n".join(lines) + "\n")
    return out


def run_experiment(cfg, out_dir, stages=None):
    """Execute the stage chain; returns the manifest.

    ``stages`` limits execution (earlier artifacts must exist on disk).
    """
    paths = RunPaths(out_dir)
    if not paths.root.parent.exists():
        raise StageFailure("setup", f"output directory parent missing: {paths.root.parent}")
    paths.ensure()
    (paths.root / "config.ini").write_text(config_to_text(cfg))
    run_stages = list(STAGE_ORDER) if stages is None else list(stages)
    for s in run_stages:
        if s not in STAGE_ORDER:
            raise StageFailure(s, "unknown stage")
    manifest = RunManifest(config_hash=config_hash(cfg))
    archive = None

    def need_archive():
        nonlocal archive
        if archive is None:
            archive = build_archive(cfg, paths)
        return archive

    for stage in STAGE_ORDER:
        if stage not in run_stages:
            continue
        t0 = time.perf_counter()
        try:
            if stage == "synth-data":
                archive = stage_synth_data(cfg, paths)
            elif stage == "train-cgan":
                stage_train_cgan(cfg, paths, need_archive())
            elif stage == "train-encoder":
                stage_train_encoder(cfg, paths, need_archive())
            elif stage == "train-classifier":
                stage_train_classifier(cfg, paths, need_archive())
            elif stage == "train-mlp":
                stage_train_mlp(cfg, paths, need_archive())
            elif stage == "predict":
                stage_predict(cfg, paths, need_archive())
            elif stage == "verify":
                stage_verify(cfg, paths, need_archive())
            elif stage == "report":
                emit_report(cfg, paths)
        except StageFailure:
            raise
        except (StormensError, OSError, ValueError, KeyError) as exc:
            raise StageFailure(stage, repr(exc)) from exc
        manifest.timings[stage] = round(time.perf_counter() - t0, 3)

    for name, path in (("cgan", paths.cgan_checkpoint), ("models", paths.models_checkpoint)):
        if path.exists():
            manifest.checkpoints[name] = file_digest(path)
    for path in sorted(paths.metrics.glob("*.csv")):
        manifest.metrics[path.name] = file_digest(path)
    manifest.save(paths.manifest)
    return manifest
