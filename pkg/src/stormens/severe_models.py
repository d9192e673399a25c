"""Severe-weather probability models.

The prediction system is decoupled: a 2-d CNN encoder compresses each
64x64x15 patch into a 128-feature vector (trained once with an auxiliary
sigmoid head), and small per-window classifiers map 2-4 consecutive
feature vectors plus scaled geographic scalars to a probability. Monte
Carlo dropout lives in the classifiers only, so features are deterministic
and the probability is the stochastic surface.

The MLP baseline skips the encoder: each predictor is reduced to
{spatial mean, spatial max} x {lead-time mean, lead-time max} scalars,
concatenated with the geographic scalars.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .arrayio import load_bundle, save_bundle
from .errors import BundleError, NoPositiveSamples, ShapeMismatch, WrongWindowArity
from .neural import (
    BatchNorm,
    Conv1d,
    Conv2d,
    Dense,
    Dropout,
    EarlyStopper,
    GlobalMaxPool1d,
    GlobalMaxPool2d,
    ParamStore,
    ReLU,
    Sequential,
    Sigmoid,
    TrainConfig,
    adam_step,
    binary_cross_entropy,
)
from .normalize import NormalizerSet
from .predictors import DIAGNOSTICS
from .seeding import derive_rng

FEATURE_DIM = 128
GEO_DIM = 3
WINDOW_ARITIES = (2, 3, 4)


@dataclass
class EncoderConfig:
    widths: tuple = (48, 64, 96, 128)  # kernel counts; last one is the feature width
    in_channels: int = 15

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(widths=tuple(d["widths"]), in_channels=d["in_channels"])


class Encoder:
    """Blocks of two same-padding convs plus a strided conv; pooled to 128."""

    def __init__(self, cfg, name="enc"):
        if cfg.widths[-1] != FEATURE_DIM:
            raise ValueError(f"terminal width must be {FEATURE_DIM}")
        self.cfg = cfg
        self.name = name
        layers = []
        prev = cfg.in_channels
        for i, w in enumerate(cfg.widths[:-1]):
            nxt = cfg.widths[i + 1]
            for j in range(2):
                tag = f"{name}.b{i}c{j}"
                layers += [Conv2d(tag, prev, w, bias=False), BatchNorm(f"{tag}.bn", w), ReLU()]
                prev = w
            tag = f"{name}.b{i}s"
            layers += [Conv2d(tag, prev, nxt, stride=2, bias=False),
                       BatchNorm(f"{tag}.bn", nxt), ReLU()]
            prev = nxt
        layers.append(GlobalMaxPool2d())
        self.net = Sequential(layers)
        self.aux = Sequential([Dense(f"{name}.aux", FEATURE_DIM, 1), Sigmoid()])

    def init_params(self, store, rng):
        self.net.init_params(store, rng)
        self.aux.init_params(store, rng)

    def forward(self, store, patches, mode, rng=None):
        if patches.ndim != 4 or patches.shape[3] != self.cfg.in_channels:
            raise ShapeMismatch(f"encoder input {patches.shape}, want "
                                f"(n,64,64,{self.cfg.in_channels})")
        return self.net.forward(store, patches, mode, rng)

    def backward(self, store, cache, gy, grads):
        return self.net.backward(store, cache, gy, grads)

    def forward_aux(self, store, patches, mode, rng=None):
        feats, c1 = self.forward(store, patches, mode, rng)
        probs, c2 = self.aux.forward(store, feats, mode, rng)
        return probs[:, 0], (c1, c2)

    def backward_aux(self, store, cache, gprob, grads):
        c1, c2 = cache
        g = self.aux.backward(store, c2, gprob[:, None], grads)
        return self.net.backward(store, c1, g, grads)


def encode_patch(encoder, store, patches):
    """Deterministic feature vectors for one or more normalized patches."""
    patches = np.asarray(patches)
    squeeze = patches.ndim == 3
    if squeeze:
        patches = patches[None]
    feats, _ = encoder.forward(store, patches, "infer")
    return feats[0] if squeeze else feats


@dataclass
class ClassifierConfig:
    conv_kernels: int = 128
    conv_len: int = 2
    dense_units: int = 64
    dropout: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Classifier:
    """Per-window head: 1-d conv over lead time, pooled, geo-aware, MC dropout."""

    def __init__(self, cfg, name="clf"):
        self.cfg = cfg
        self.name = name
        self.temporal = Sequential([
            Conv1d(f"{name}.tconv", FEATURE_DIM, cfg.conv_kernels, k=cfg.conv_len),
            ReLU(),
            GlobalMaxPool1d(),
        ])
        self.head = Sequential([
            Dropout(cfg.dropout, mc=True),
            Dense(f"{name}.d1", cfg.conv_kernels + GEO_DIM, cfg.dense_units),
            ReLU(),
            Dropout(cfg.dropout, mc=True),
            Dense(f"{name}.d2", cfg.dense_units, 1),
            Sigmoid(),
        ])

    def init_params(self, store, rng):
        self.temporal.init_params(store, rng)
        self.head.init_params(store, rng)

    def forward(self, store, feats, geo, mode, rng=None):
        feats = np.asarray(feats)
        if feats.ndim != 3 or feats.shape[2] != FEATURE_DIM:
            raise ShapeMismatch(f"classifier features {feats.shape}, want (n,t,{FEATURE_DIM})")
        if feats.shape[1] not in WINDOW_ARITIES:
            raise WrongWindowArity(f"window arity {feats.shape[1]} not in {WINDOW_ARITIES}")
        if geo.shape != (feats.shape[0], GEO_DIM):
            raise ShapeMismatch(f"geo {geo.shape}, want ({feats.shape[0]},{GEO_DIM})")
        pooled, c1 = self.temporal.forward(store, feats, mode, rng)
        h = np.concatenate([pooled, geo], axis=1)
        probs, c2 = self.head.forward(store, h, mode, rng)
        return probs[:, 0], (c1, c2, pooled.shape[1])

    def backward(self, store, cache, gprob, grads):
        c1, c2, n_pooled = cache
        g = self.head.backward(store, c2, gprob[:, None], grads)
        g_pooled = g[:, :n_pooled]
        return self.temporal.backward(store, c1, g_pooled, grads)


def classify(classifier, store, feats, geo, mc_seed):
    """Severe-weather probability with one Monte Carlo dropout draw."""
    feats = np.asarray(feats)
    squeeze = feats.ndim == 2
    if squeeze:
        feats = feats[None]
        geo = np.asarray(geo)[None]
    probs, _ = classifier.forward(store, feats, np.asarray(geo), "mc",
                                  derive_rng(mc_seed, "mc_dropout"))
    return float(probs[0]) if squeeze else probs


@dataclass
class MlpConfig:
    hidden: tuple = (128, 64)
    dropout: float = 0.1
    n_features: int = 4 * len(DIAGNOSTICS) + GEO_DIM

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(hidden=tuple(d["hidden"]), dropout=d["dropout"],
                   n_features=d["n_features"])


class Mlp:
    """Two hidden layers with BN, ReLU, and MC dropout; sigmoid output."""

    def __init__(self, cfg, name="mlp"):
        self.cfg = cfg
        layers = []
        prev = cfg.n_features
        for i, units in enumerate(cfg.hidden):
            tag = f"{name}.h{i}"
            layers += [Dense(tag, prev, units, bias=False), BatchNorm(f"{tag}.bn", units),
                       ReLU(), Dropout(cfg.dropout, mc=True)]
            prev = units
        layers += [Dense(f"{name}.out", prev, 1), Sigmoid()]
        self.net = Sequential(layers)

    def init_params(self, store, rng):
        self.net.init_params(store, rng)

    def forward(self, store, x, mode, rng=None):
        if x.ndim != 2 or x.shape[1] != self.cfg.n_features:
            raise ShapeMismatch(f"mlp input {x.shape}, want (n,{self.cfg.n_features})")
        probs, cache = self.net.forward(store, x, mode, rng)
        return probs[:, 0], cache

    def backward(self, store, cache, gprob, grads):
        return self.net.backward(store, cache, gprob[:, None], grads)


def mlp_forward(mlp, store, features, mc_seed):
    features = np.asarray(features)
    squeeze = features.ndim == 1
    if squeeze:
        features = features[None]
    probs, _ = mlp.forward(store, features, "mc", derive_rng(mc_seed, "mc_dropout"))
    return float(probs[0]) if squeeze else probs


def mlp_features(patches, geo):
    """Scalar features of a lead window: per predictor, the four
    {spatial mean, spatial max} x {lead-time mean, lead-time max}
    reductions, in DIAGNOSTICS order, followed by the scaled geo scalars."""
    patches = np.asarray(patches)
    if patches.ndim != 4 or patches.shape[3] != len(DIAGNOSTICS):
        raise ShapeMismatch(f"mlp_features input {patches.shape}, want (t,h,w,15)")
    if patches.shape[0] not in WINDOW_ARITIES:
        raise WrongWindowArity(f"window arity {patches.shape[0]} not in {WINDOW_ARITIES}")
    out = np.empty(4 * len(DIAGNOSTICS) + GEO_DIM)
    for c in range(len(DIAGNOSTICS)):
        smean = patches[..., c].mean(axis=(1, 2))
        smax = patches[..., c].max(axis=(1, 2))
        out[4 * c:4 * c + 4] = (smean.mean(), smean.max(), smax.mean(), smax.max())
    out[-GEO_DIM:] = geo
    return out


def mlp_feature_names():
    """The frozen ordering documented in checkpoint manifests."""
    names = []
    for pid in DIAGNOSTICS:
        for tag in ("smean_tmean", "smean_tmax", "smax_tmean", "smax_tmax"):
            names.append(f"{pid.value}.{tag}")
    return names + ["latitude", "longitude", "elevation"]


# ------------------------------------------------------------------ training


def rebalanced_indices(labels, neg_per_pos, rng):
    """Per-epoch undersampling of negatives; positives are never dropped."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0:
        raise NoPositiveSamples("rebalancing requires at least one positive sample")
    take = min(neg.size, neg_per_pos * pos.size)
    chosen_neg = rng.choice(neg, size=take, replace=False)
    idx = np.concatenate([pos, chosen_neg])
    return idx[rng.permutation(idx.size)]


def _epoch_batches(indices, batch_size):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo:lo + batch_size]


def pretrain_encoder(encoder, store, fetch, labels, val_fetch, val_labels, tc,
                     neg_per_pos=10, progress=None):
    """Train encoder+aux head with BCE under 1:10 rebalancing.

    ``fetch(indices)`` returns the normalized patches for dataset rows;
    validation uses a fixed rebalanced subset for comparable early-stopping
    losses. The auxiliary head stays in the store but is unused downstream.
    """
    stopper = EarlyStopper(store, tc.early_stop_patience)
    val_idx = rebalanced_indices(val_labels, neg_per_pos, derive_rng(tc.seed, "val_subset"))
    val_x = val_fetch(val_idx)
    val_y = np.asarray(val_labels, dtype=float)[val_idx]
    history = []
    for epoch in range(tc.max_epochs):
        rng = derive_rng(tc.seed, "encoder_epoch", epoch)
        idx = rebalanced_indices(labels, neg_per_pos, rng)
        lr = tc.lr_at(epoch)
        for rows in _epoch_batches(idx, tc.batch_size):
            x = fetch(rows)
            y = np.asarray(labels, dtype=float)[rows]
            probs, cache = encoder.forward_aux(store, x, "train", rng)
            loss, gp = binary_cross_entropy(probs, y)
            grads = store.zero_grads()
            encoder.backward_aux(store, cache, gp, grads)
            adam_step(store, grads, lr)
        val_probs, _ = encoder.forward_aux(store, val_x, "infer")
        val_loss, _ = binary_cross_entropy(val_probs, val_y)
        history.append(val_loss)
        if progress:
            progress(epoch, val_loss)
        if stopper.update(store, val_loss):
            break
    stopper.restore(store)
    return history


def _train_head(forward_backward, store, labels, val_eval, tc, neg_per_pos):
    """Shared epoch loop for the classifier and MLP heads."""
    stopper = EarlyStopper(store, tc.early_stop_patience)
    history = []
    for epoch in range(tc.max_epochs):
        rng = derive_rng(tc.seed, "head_epoch", epoch)
        idx = rebalanced_indices(labels, neg_per_pos, rng)
        lr = tc.lr_at(epoch)
        for rows in _epoch_batches(idx, tc.batch_size):
            forward_backward(rows, rng, lr)
        val_loss = val_eval()
        history.append(val_loss)
        if stopper.update(store, val_loss):
            break
    stopper.restore(store)
    return history


def train_classifier(classifier, store, feats, geo, labels, val_feats, val_geo,
                     val_labels, tc, neg_per_pos=1):
    """Train one lead window's classifier on precomputed features (1:1)."""
    labels = np.asarray(labels, dtype=float)
    val_labels = np.asarray(val_labels, dtype=float)

    def step(rows, rng, lr):
        probs, cache = classifier.forward(store, feats[rows], geo[rows], "train", rng)
        _, gp = binary_cross_entropy(probs, labels[rows])
        grads = store.zero_grads()
        classifier.backward(store, cache, gp, grads)
        adam_step(store, grads, lr)

    def val_eval():
        probs, _ = classifier.forward(store, val_feats, val_geo, "infer")
        return binary_cross_entropy(probs, val_labels)[0]

    return _train_head(step, store, labels, val_eval, tc, neg_per_pos)


def train_mlp(mlp, store, features, labels, val_features, val_labels, tc, neg_per_pos=1):
    """Train the MLP baseline on scalar features (1:1 rebalancing)."""
    labels = np.asarray(labels, dtype=float)
    val_labels = np.asarray(val_labels, dtype=float)

    def step(rows, rng, lr):
        probs, cache = mlp.forward(store, features[rows], "train", rng)
        _, gp = binary_cross_entropy(probs, labels[rows])
        grads = store.zero_grads()
        mlp.backward(store, cache, gp, grads)
        adam_step(store, grads, lr)

    def val_eval():
        probs, _ = mlp.forward(store, val_features, "infer")
        return binary_cross_entropy(probs, val_labels)[0]

    return _train_head(step, store, labels, val_eval, tc, neg_per_pos)


# ---------------------------------------------------------------- checkpoint


def save_model_checkpoint(path, enc_cfg, enc_store, clf_cfg, clf_stores,
                          mlp_cfg, mlp_store, normalizers):
    """Encoder, per-window classifiers, MLP, and the feature manifest."""
    from .cgan import normalizer_hash

    arrays = enc_store.to_arrays(prefix="encoder/")
    for window, store in clf_stores.items():
        arrays.update(store.to_arrays(prefix=f"clf{window}/"))
    arrays.update(mlp_store.to_arrays(prefix="mlp/"))
    norm_text = normalizers.to_text()
    save_bundle(path, arrays, meta={
        "kind": "severe_models",
        "encoder": enc_cfg.to_dict(),
        "classifier": clf_cfg.to_dict(),
        "mlp": mlp_cfg.to_dict(),
        "windows": sorted(int(w) for w in clf_stores),
        "feature_manifest": mlp_feature_names(),
        "normalizers": norm_text,
        "normalizer_hash": normalizer_hash(norm_text),
    })


def load_model_checkpoint(path):
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "severe_models":
        raise BundleError(f"{path}: not a severe-models checkpoint")
    enc_cfg = EncoderConfig.from_dict(meta["encoder"])
    clf_cfg = ClassifierConfig.from_dict(meta["classifier"])
    mlp_cfg = MlpConfig.from_dict(meta["mlp"])
    enc_store = ParamStore.from_arrays(arrays, prefix="encoder/")
    clf_stores = {int(w): ParamStore.from_arrays(arrays, prefix=f"clf{w}/")
                  for w in meta["windows"]}
    mlp_store = ParamStore.from_arrays(arrays, prefix="mlp/")
    normalizers = NormalizerSet.from_text(meta["normalizers"])
    return enc_cfg, enc_store, clf_cfg, clf_stores, mlp_cfg, mlp_store, normalizers, meta
