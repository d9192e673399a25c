"""Conditional GANs that synthesize predictor ensembles.

Two generators share one design: group A produces the CAPE/CIN/CREF
channels, group B the seven remaining environmental channels. Both are
conditioned on the five explicit storm-scale channels, which are never
generated and travel unchanged into every synthetic member.

The objective is the minimax form

    min_G max_D  L_A(G, D) + lambda * L_R(G)
    L_A = E[ln D(x|m)] + E[ln(1 - D(G(z|m)|m))]
    L_R = E ||x - G(z|m)||_1

with z = x + N(0, sigma^2) noise (sigma 0.5) and the group-A initial-state
channels clamped at zero from below. The discriminator ascends L_A first,
then the generator descends L_A + lambda*L_R with the discriminator frozen.
"""

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .arrayio import load_bundle, save_bundle
from .errors import BundleError, NonFiniteLoss, ShapeMismatch
from .neural import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    GlobalMaxPool2d,
    ParamStore,
    ReLU,
    Sequential,
    Sigmoid,
    TrainConfig,
    adam_step,
)
from .normalize import NormalizerSet
from .predictors import (
    COND_CHANNELS,
    COND_IDX,
    GROUP_A,
    GROUP_A_IDX,
    GROUP_B,
    GROUP_B_IDX,
)
from .seeding import derive_rng, derive_seed

LOG_CLAMP = 1e-7
#: channels whose initial states are clamped at zero from below
CLAMPED = frozenset(GROUP_A)  # CAPE, CIN, CREF


@dataclass
class CganConfig:
    lam: float = 1.0
    noise_sigma: float = 0.5
    #: encoder widths of the UNET; one stride-2 stage per entry
    widths: tuple = (32, 64, 128, 256)
    bottleneck: int = 512
    disc_widths: tuple = (32, 64, 128, 256, 512)
    #: use -ln D(G) for the generator instead of the minimax +ln(1 - D(G))
    non_saturating: bool = False
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=200))

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["disc_widths"] = tuple(d["disc_widths"])
        d["train"] = TrainConfig(**d["train"])
        return cls(**d)


def group_channels(group):
    if group == "A":
        return GROUP_A
    if group == "B":
        return GROUP_B
    raise ValueError(f"unknown channel group {group!r}")


def make_initial_state(x, noise_sigma, rng, channels):
    """Noisy initial state z = x + N(0, sigma^2), clamped per channel.

    ``channels`` names the predictors along the last axis; CAPE, CIN, and
    CREF are clamped at zero from below, all others stay unclamped. The
    zero-noise limit reduces to clamping alone.
    """
    z = x + noise_sigma * rng.standard_normal(x.shape)
    clamp = np.array([pid in CLAMPED for pid in channels])
    if clamp.any():
        z[..., clamp] = np.maximum(z[..., clamp], 0.0)
    return z.astype(x.dtype)


class UNet:
    """Encoder-decoder generator with skip connections at every level.

    The condition and the initial state merge by channel concatenation at
    the first encoder level; each level downsamples with a stride-2 conv
    and upsamples with a transposed conv, fusing its skip with a 3x3 conv.
    """

    def __init__(self, name, z_channels, cond_channels, cfg):
        self.name = name
        self.nz, self.nm = z_channels, cond_channels
        widths = cfg.widths
        self.depth = len(widths)
        c_in = z_channels + cond_channels

        def block(tag, layer, c):
            return Sequential([layer, BatchNorm(f"{tag}.bn", c), ReLU()])

        self.enc = []
        prev = c_in
        for i, w in enumerate(widths):
            tag = f"{name}.enc{i}"
            self.enc.append(block(tag, Conv2d(tag, prev, w, stride=2, bias=False), w))
            prev = w
        bt = f"{name}.bott"
        self.bott = block(bt, Conv2d(bt, prev, cfg.bottleneck, bias=False), cfg.bottleneck)

        self.ups, self.fuse = [], []
        prev = cfg.bottleneck + widths[-1]  # bottleneck concat with deepest skip
        for i in range(self.depth - 1, 0, -1):
            w = widths[i - 1]
            utag = f"{name}.up{i}"
            self.ups.append(block(utag, ConvTranspose2d(utag, prev, w, bias=False), w))
            ftag = f"{name}.fuse{i}"
            self.fuse.append(block(ftag, Conv2d(ftag, 2 * w, w, bias=False), w))
            prev = w
        utag = f"{name}.up0"
        self.up0 = block(utag, ConvTranspose2d(utag, prev, widths[0], bias=False), widths[0])
        self.out = Conv2d(f"{name}.out", widths[0], z_channels)

    def init_params(self, store, rng):
        for seq in self.enc + [self.bott] + self.ups + self.fuse + [self.up0]:
            seq.init_params(store, rng)
        self.out.init_params(store, rng)

    def forward(self, store, z, m, mode, rng=None):
        if z.ndim != 4 or z.shape[3] != self.nz:
            raise ShapeMismatch(f"{self.name}: z is {z.shape}, want (n,h,w,{self.nz})")
        if m.shape[:3] != z.shape[:3] or m.shape[3] != self.nm:
            raise ShapeMismatch(f"{self.name}: condition is {m.shape}, want "
                                f"{z.shape[:3] + (self.nm,)}")
        if z.shape[1] % (1 << self.depth) or z.shape[2] % (1 << self.depth):
            raise ShapeMismatch(f"{self.name}: spatial dims must divide {1 << self.depth}")
        x = np.concatenate([z, m], axis=-1)
        acts, enc_caches = [], []
        h = x
        for seq in self.enc:
            h, c = seq.forward(store, h, mode, rng)
            acts.append(h)
            enc_caches.append(c)
        b, bott_cache = self.bott.forward(store, h, mode, rng)
        d = np.concatenate([b, acts[-1]], axis=-1)
        up_caches, fuse_caches = [], []
        for level, (up, fuse) in enumerate(zip(self.ups, self.fuse)):
            u, cu = up.forward(store, d, mode, rng)
            skip = acts[self.depth - 2 - level]
            cat = np.concatenate([u, skip], axis=-1)
            d, cf = fuse.forward(store, cat, mode, rng)
            up_caches.append(cu)
            fuse_caches.append(cf)
        u0, up0_cache = self.up0.forward(store, d, mode, rng)
        y, out_cache = self.out.forward(store, u0, mode, rng)
        cache = (enc_caches, bott_cache, up_caches, fuse_caches, up0_cache, out_cache)
        return y, cache

    def backward(self, store, cache, gy, grads):
        enc_caches, bott_cache, up_caches, fuse_caches, up0_cache, out_cache = cache
        g = self.out.backward(store, out_cache, gy, grads)
        g = self.up0.backward(store, up0_cache, g, grads)
        skip_grads = [None] * self.depth  # gradient entering each encoder activation
        for level in range(self.depth - 2, -1, -1):
            g = self.fuse[level].backward(store, fuse_caches[level], g, grads)
            w = g.shape[-1] // 2
            gu, gskip = g[..., :w], g[..., w:]
            skip_grads[self.depth - 2 - level] = gskip
            g = self.ups[level].backward(store, up_caches[level], gu, grads)
        wb = g.shape[-1] - store.params[f"{self.name}.enc{self.depth - 1}.W"].shape[-1]
        gb, gskip_deep = g[..., :wb], g[..., wb:]
        g = self.bott.backward(store, bott_cache, gb, grads)
        g = g + gskip_deep
        for i in range(self.depth - 1, -1, -1):
            if skip_grads[i] is not None:
                g = g + skip_grads[i]
            g = self.enc[i].backward(store, enc_caches[i], g, grads)
        return g[..., :self.nz], g[..., self.nz:]


class Discriminator:
    """Conditional binary classifier: stride-2 stack, pooled sigmoid head."""

    def __init__(self, name, x_channels, cond_channels, cfg):
        self.name = name
        self.nx, self.nm = x_channels, cond_channels
        layers = []
        prev = x_channels + cond_channels
        for i, w in enumerate(cfg.disc_widths):
            tag = f"{name}.conv{i}"
            layers += [Conv2d(tag, prev, w, stride=2, bias=False),
                       BatchNorm(f"{tag}.bn", w), ReLU()]
            prev = w
        layers += [GlobalMaxPool2d(), Dense(f"{name}.head", prev, 1), Sigmoid()]
        self.net = Sequential(layers)

    def init_params(self, store, rng):
        self.net.init_params(store, rng)

    def forward(self, store, candidate, m, mode, rng=None):
        if candidate.shape[-1] != self.nx or m.shape[-1] != self.nm:
            raise ShapeMismatch(f"{self.name}: channels {candidate.shape[-1]}/{m.shape[-1]}, "
                                f"want {self.nx}/{self.nm}")
        x = np.concatenate([candidate, m], axis=-1)
        score, caches = self.net.forward(store, x, mode, rng)
        return score, caches

    def backward(self, store, caches, gscore, grads):
        g = self.net.backward(store, caches, gscore, grads)
        return g[..., :self.nx], g[..., self.nx:]


def _clamped_log_grad(s, sign_inside):
    """d/ds of ln(s) or ln(1-s) with the argument clamped to [1e-7, 1-1e-7].

    ``sign_inside`` +1 means ln(s), -1 means ln(1 - s). Returns (value, grad)
    per element; gradient is zero where the clamp is active.
    """
    arg = s if sign_inside > 0 else 1.0 - s
    clamped = np.clip(arg, LOG_CLAMP, 1.0 - LOG_CLAMP)
    value = np.log(clamped)
    inside = (arg >= LOG_CLAMP) & (arg <= 1.0 - LOG_CLAMP)
    grad = np.where(inside, sign_inside / clamped, 0.0)
    return value, grad


def adversarial_loss(gen, disc, g_store, d_store, x, m, z):
    """L_A for an explicit initial state; works on store copies (pure)."""
    gs, ds = g_store.copy(), d_store.copy()
    xhat, _ = gen.forward(gs, z, m, "train")
    s_real, _ = disc.forward(ds, x, m, "train")
    s_fake, _ = disc.forward(ds, xhat, m, "train")
    log_real, _ = _clamped_log_grad(s_real, +1)
    log_fake, _ = _clamped_log_grad(s_fake, -1)
    l_a = float(log_real.mean() + log_fake.mean())
    l_r = float(np.mean(np.abs(x - xhat)))
    return l_a, l_r


def cgan_losses(gen, disc, g_store, d_store, x, m, cfg, channels, seed):
    """Definitional (L_A, L_R) on one batch with fresh z; stores untouched."""
    rng = derive_rng(seed, "cgan_losses")
    z = make_initial_state(x, cfg.noise_sigma, rng, channels)
    return adversarial_loss(gen, disc, g_store, d_store, x, m, z)


def train_cgan_step(gen, disc, g_store, d_store, x, m, cfg, channels, lr, step_seed,
                    adversarial=True):
    """One alternating update: discriminator first, then the generator.

    Both sub-steps see the same (x, m) batch with freshly drawn z. With
    ``adversarial=False`` the generator step reduces to pure L1 regression
    (the lambda -> infinity limit used by the regression sanity check).
    Returns a diagnostics dict.
    """
    n = len(x)
    diag = {}

    if adversarial:
        rng = derive_rng(step_seed, "z_disc")
        z = make_initial_state(x, cfg.noise_sigma, rng, channels)
        xhat, _ = gen.forward(g_store, z, m, "train")
        d_grads = d_store.zero_grads()
        s_real, cache_r = disc.forward(d_store, x, m, "train")
        _, glr = _clamped_log_grad(s_real, +1)
        disc.backward(d_store, cache_r, -glr / s_real.size, d_grads)
        s_fake, cache_f = disc.forward(d_store, xhat, m, "train")
        log_fake, glf = _clamped_log_grad(s_fake, -1)
        disc.backward(d_store, cache_f, -glf / s_fake.size, d_grads)
        adam_step(d_store, d_grads, lr)
        diag["d_real"] = float(s_real.mean())
        diag["d_fake"] = float(s_fake.mean())

    rng = derive_rng(step_seed, "z_gen")
    z = make_initial_state(x, cfg.noise_sigma, rng, channels)
    g_grads = g_store.zero_grads()
    xhat, g_cache = gen.forward(g_store, z, m, "train")
    gxhat = np.zeros_like(xhat)
    if adversarial:
        s_fake, cache_f = disc.forward(d_store, xhat, m, "train")
        if cfg.non_saturating:
            log_term, gs = _clamped_log_grad(s_fake, +1)
            gscore = -gs / s_fake.size
            diag["l_a_gen"] = float(-log_term.mean())
        else:
            log_term, gs = _clamped_log_grad(s_fake, -1)
            gscore = gs / s_fake.size
            diag["l_a_gen"] = float(log_term.mean())
        scratch = d_store.zero_grads()  # discriminator frozen: grads discarded
        gx_d, _ = disc.backward(d_store, cache_f, gscore, scratch)
        gxhat += gx_d
    l_r = float(np.mean(np.abs(x - xhat)))
    lam = 1.0 if not adversarial else cfg.lam
    gxhat += lam * np.sign(xhat - x) / xhat.size
    gen.backward(g_store, g_cache, gxhat, g_grads)
    adam_step(g_store, g_grads, lr)
    diag["l_r"] = l_r
    diag["batch"] = n
    if not all(np.isfinite(v) for v in diag.values()):
        raise NonFiniteLoss(f"cgan step diagnostics went non-finite: {diag}")
    return diag


def train_cgan(gen, disc, g_store, d_store, x_all, m_all, cfg, channels, progress=None):
    """Full training loop over a fixed (x, m) dataset; returns the history."""
    tc = cfg.train
    n = len(x_all)
    history = []
    step = 0
    for epoch in range(tc.max_epochs):
        lr = tc.lr_at(epoch)
        order = derive_rng(tc.seed, "cgan_epoch", epoch).permutation(n)
        epoch_lr = []
        for lo in range(0, n, tc.batch_size):
            sel = order[lo:lo + tc.batch_size]
            diag = train_cgan_step(
                gen, disc, g_store, d_store, x_all[sel], m_all[sel], cfg, channels,
                lr, derive_seed(tc.seed, "cgan_step", step),
            )
            epoch_lr.append(diag["l_r"])
            step += 1
        history.append(float(np.mean(epoch_lr)))
        if progress:
            progress(epoch, history[-1])
    return history


def generate_member(gen_a, gen_b, ga_store, gb_store, cfg, patches, seed, index):
    """One synthetic 15-channel stack per input stack (member ``index``).

    Group A and B channels are replaced by generator output from a z draw
    on the member's own seed stream; the five explicit conditional channels
    are copied unchanged.
    """
    m = patches[..., COND_IDX]
    xa = patches[..., GROUP_A_IDX]
    xb = patches[..., GROUP_B_IDX]
    rng = derive_rng(seed, "member", index)
    za = make_initial_state(xa, cfg.noise_sigma, rng, GROUP_A)
    zb = make_initial_state(xb, cfg.noise_sigma, rng, GROUP_B)
    xhat_a, _ = gen_a.forward(ga_store, za, m, "infer")
    xhat_b, _ = gen_b.forward(gb_store, zb, m, "infer")
    stack = patches.copy()
    stack[..., GROUP_A_IDX] = xhat_a
    stack[..., GROUP_B_IDX] = xhat_b
    return stack


def generate_members(gen_a, gen_b, ga_store, gb_store, cfg, patches, k, seed):
    """K synthetic 15-channel stacks per input stack.

    ``patches`` is (n, 64, 64, 15) normalized (or one unbatched stack).
    Member j's randomness derives from hash(seed, j).
    """
    patches = np.asarray(patches)
    squeeze = patches.ndim == 3
    if squeeze:
        patches = patches[None]
    members = np.empty((k,) + patches.shape, dtype=patches.dtype)
    for j in range(k):
        members[j] = generate_member(gen_a, gen_b, ga_store, gb_store, cfg,
                                     patches, seed, j)
    if squeeze:
        return members[:, 0]
    return members


def build_cgan(group, cfg):
    """Generator/discriminator pair for one channel group."""
    channels = group_channels(group)
    gen = UNet(f"g{group}", len(channels), len(COND_CHANNELS), cfg)
    disc = Discriminator(f"d{group}", len(channels), len(COND_CHANNELS), cfg)
    return gen, disc, channels


def init_cgan(group, cfg, seed, dtype=np.float32):
    gen, disc, channels = build_cgan(group, cfg)
    g_store = ParamStore(dtype)
    d_store = ParamStore(dtype)
    gen.init_params(g_store, derive_rng(seed, f"init_g{group}"))
    disc.init_params(d_store, derive_rng(seed, f"init_d{group}"))
    return gen, disc, g_store, d_store, channels


def save_cgan_checkpoint(path, cfg, stores, normalizers):
    """One container: both generators, both discriminators, config, specs."""
    arrays = {}
    for tag, store in stores.items():
        arrays.update(store.to_arrays(prefix=f"{tag}/"))
    norm_text = normalizers.to_text()
    save_bundle(path, arrays, meta={
        "kind": "cgan_checkpoint",
        "config": cfg.to_dict(),
        "normalizers": norm_text,
        "normalizer_hash": normalizer_hash(norm_text),
        "stores": sorted(stores),
    })


def load_cgan_checkpoint(path):
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "cgan_checkpoint":
        raise BundleError(f"{path}: not a CGAN checkpoint")
    cfg = CganConfig.from_dict(meta["config"])
    stores = {tag: ParamStore.from_arrays(arrays, prefix=f"{tag}/")
              for tag in meta["stores"]}
    normalizers = NormalizerSet.from_text(meta["normalizers"])
    return cfg, stores, normalizers, meta


def normalizer_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
