import numpy as np
import pytest

from stormens.cgan import (
    CganConfig,
    _clamped_log_grad,
    adversarial_loss,
    build_cgan,
    cgan_losses,
    generate_members,
    init_cgan,
    load_cgan_checkpoint,
    make_initial_state,
    save_cgan_checkpoint,
    train_cgan_step,
)
from stormens.errors import NonFiniteLoss, ShapeMismatch
from stormens.neural import ParamStore, adam_step, grad_check
from stormens.normalize import NormalizerSet, fit_normalizer
from stormens.predictors import (
    COND_IDX,
    GROUP_A,
    GROUP_A_IDX,
    GROUP_B,
    GROUP_B_IDX,
    PredictorId,
)
from stormens.seeding import derive_rng

TINY = CganConfig(widths=(3, 4), bottleneck=5, disc_widths=(3, 4))


def tiny_cgan(group="A", seed=0, dtype=np.float64):
    return init_cgan(group, TINY, seed, dtype=dtype)


def batch(rng, n=2, size=8, group="A"):
    nz = 3 if group == "A" else 7
    x = rng.standard_normal((n, size, size, nz))
    m = rng.standard_normal((n, size, size, 5))
    return x, m


# ------------------------------------------------------------ initial state


def test_zero_noise_limit_clamps_only():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 4, 3))
    z = make_initial_state(x, 0.0, derive_rng(1), GROUP_A)
    assert np.array_equal(z, np.maximum(x, 0.0))
    # unclamped group: identity
    xb = rng.standard_normal((4, 4, 7))
    zb = make_initial_state(xb, 0.0, derive_rng(1), GROUP_B)
    assert np.array_equal(zb, xb)


def test_clamped_channels_nonnegative_over_draws():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 3))  # rows as independent draws
    z = make_initial_state(x, 0.5, derive_rng(2), GROUP_A)
    assert z.min() >= 0.0


def test_noise_std_within_one_percent():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((100_000, 1))
    z = make_initial_state(x, 0.5, derive_rng(3), (PredictorId.MSLP,))  # unclamped
    noise = (z - x).ravel()
    assert abs(noise.std() - 0.5) < 0.005


def test_mixed_channels_clamp_mask():
    x = -np.ones((2, 2, 2))
    z = make_initial_state(x, 0.0, derive_rng(0), (PredictorId.CAPE, PredictorId.MSLP))
    assert np.all(z[..., 0] == 0.0)
    assert np.all(z[..., 1] == -1.0)


# -------------------------------------------------------------- generator


def test_generator_preserves_shape_group_a():
    gen, _, gs, _, _ = tiny_cgan("A")
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 64, 64, 3))
    m = rng.standard_normal((2, 64, 64, 5))
    y, _ = gen.forward(gs, z, m, "infer")
    assert y.shape == (2, 64, 64, 3)


def test_generator_group_b_channels():
    gen, _, gs, _, _ = tiny_cgan("B")
    rng = np.random.default_rng(4)
    z = rng.standard_normal((1, 16, 16, 7))
    m = rng.standard_normal((1, 16, 16, 5))
    y, _ = gen.forward(gs, z, m, "infer")
    assert y.shape == (1, 16, 16, 7)


def test_generator_deterministic():
    gen, _, gs, _, _ = tiny_cgan("A")
    rng = np.random.default_rng(5)
    z, m = batch(rng)
    y1, _ = gen.forward(gs.copy(), z, m, "train")
    y2, _ = gen.forward(gs.copy(), z, m, "train")
    assert np.array_equal(y1, y2)


def test_generator_shape_errors():
    gen, _, gs, _, _ = tiny_cgan("A")
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeMismatch):
        gen.forward(gs, rng.standard_normal((1, 8, 8, 4)), rng.standard_normal((1, 8, 8, 5)),
                    "infer")
    with pytest.raises(ShapeMismatch):
        gen.forward(gs, rng.standard_normal((1, 8, 8, 3)), rng.standard_normal((1, 8, 8, 2)),
                    "infer")
    with pytest.raises(ShapeMismatch):  # not divisible by 2^depth
        gen.forward(gs, rng.standard_normal((1, 6, 6, 3)), rng.standard_normal((1, 6, 6, 5)),
                    "infer")


def test_generator_gradient_matches_finite_differences():
    gen, _, gs, _, _ = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(7)
    z, m = batch(rng)
    r = rng.standard_normal((2, 8, 8, 3))

    def loss_fn():
        y, cache = gen.forward(gs, z, m, "train")
        grads = gs.zero_grads()
        gen.backward(gs, cache, r, grads)
        return float(np.sum(y * r)), grads

    assert grad_check(loss_fn, gs, n_coords=60, eps=1e-5, seed=1) < 1e-4


def test_generator_input_gradients():
    gen, _, gs, _, _ = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(8)
    z, m = batch(rng)
    r = rng.standard_normal((2, 8, 8, 3))
    y, cache = gen.forward(gs, z, m, "train")
    gz, gm = gen.backward(gs, cache, r, gs.zero_grads())
    assert gz.shape == z.shape
    assert gm.shape == m.shape
    eps = 1e-6
    for arr, grad in ((z, gz), (m, gm)):
        for flat in np.random.default_rng(9).choice(arr.size, 10, replace=False):
            orig = arr.flat[flat]
            arr.flat[flat] = orig + eps
            up = float(np.sum(gen.forward(gs, z, m, "train")[0] * r))
            arr.flat[flat] = orig - eps
            down = float(np.sum(gen.forward(gs, z, m, "train")[0] * r))
            arr.flat[flat] = orig
            assert (up - down) / (2 * eps) == pytest.approx(grad.flat[flat], rel=2e-4, abs=1e-7)


# ------------------------------------------------------------ discriminator


def test_discriminator_score_in_unit_interval():
    _, disc, _, ds, _ = tiny_cgan("A")
    rng = np.random.default_rng(10)
    x, m = batch(rng, n=4)
    s, _ = disc.forward(ds, x, m, "train")
    assert s.shape == (4, 1)
    assert np.all((s > 0) & (s < 1))


def test_discriminator_deterministic():
    _, disc, _, ds, _ = tiny_cgan("A")
    rng = np.random.default_rng(11)
    x, m = batch(rng)
    s1, _ = disc.forward(ds.copy(), x, m, "train")
    s2, _ = disc.forward(ds.copy(), x, m, "train")
    assert np.array_equal(s1, s2)


def test_discriminator_gradient_matches_finite_differences():
    _, disc, _, ds, _ = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(12)
    x, m = batch(rng, n=3)
    r = rng.standard_normal((3, 1))

    def loss_fn():
        s, cache = disc.forward(ds, x, m, "train")
        grads = ds.zero_grads()
        disc.backward(ds, cache, r, grads)
        return float(np.sum(s * r)), grads

    assert grad_check(loss_fn, ds, n_coords=60, eps=1e-5, seed=2) < 1e-4


# ------------------------------------------------------------------ losses


def test_constant_half_discriminator_gives_two_log_half():
    gen, disc, gs, ds, channels = tiny_cgan("A")
    ds.params["dA.head.W"][:] = 0.0
    ds.params["dA.head.b"][:] = 0.0
    rng = np.random.default_rng(13)
    x, m = batch(rng, n=3)
    l_a, _ = cgan_losses(gen, disc, gs, ds, x, m, TINY, channels, seed=0)
    assert l_a == pytest.approx(2.0 * np.log(0.5), rel=1e-12)


def test_losses_match_definitional_oracle():
    gen, disc, gs, ds, channels = tiny_cgan("A")
    rng = np.random.default_rng(14)
    x, m = batch(rng, n=3)
    l_a, l_r = cgan_losses(gen, disc, gs, ds, x, m, TINY, channels, seed=5)
    # independent recomputation with the same derived z
    z = make_initial_state(x, TINY.noise_sigma, derive_rng(5, "cgan_losses"), channels)
    xhat, _ = gen.forward(gs.copy(), z, m, "train")
    s_real, _ = disc.forward(ds.copy(), x, m, "train")
    s_fake, _ = disc.forward(ds.copy(), xhat, m, "train")
    want_la = np.log(np.clip(s_real, 1e-7, 1 - 1e-7)).mean() + np.log(
        np.clip(1 - s_fake, 1e-7, 1 - 1e-7)
    ).mean()
    want_lr = np.abs(x - xhat).mean()
    assert l_a == pytest.approx(float(want_la), rel=1e-12)
    assert l_r == pytest.approx(float(want_lr), rel=1e-12)
    # identical generator output would zero the reconstruction term
    assert adversarial_loss(gen, disc, gs, ds, xhat, m, z)[1] == 0.0


# ---------------------------------------------------------------- training


def test_regression_mode_halves_l1():
    """Adversarial term disabled: pure L1 regression on a fixed batch."""
    cfg = CganConfig(widths=(4, 6), bottleneck=8, disc_widths=(3,))
    gen, disc, gs, ds, channels = init_cgan("A", cfg, seed=3, dtype=np.float32)
    rng = np.random.default_rng(15)
    x = np.abs(rng.standard_normal((4, 16, 16, 3))).astype(np.float32)
    m = np.abs(rng.standard_normal((4, 16, 16, 5))).astype(np.float32)
    z = make_initial_state(x, cfg.noise_sigma, derive_rng(0, "eval"), channels)
    _, l_r0 = adversarial_loss(gen, disc, gs, ds, x, m, z)
    for step in range(200):
        train_cgan_step(gen, disc, gs, ds, x, m, cfg, channels, lr=2e-3,
                        step_seed=step, adversarial=False)
    _, l_r1 = adversarial_loss(gen, disc, gs, ds, x, m, z)
    assert l_r1 < 0.5 * l_r0


def test_discriminator_step_descends_neg_adversarial_loss():
    gen, disc, gs, ds, channels = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(16)
    x, m = batch(rng, n=4)
    z = make_initial_state(x, TINY.noise_sigma, derive_rng(77, "z_disc"), channels)
    before, _ = adversarial_loss(gen, disc, gs, ds, x, m, z)
    # one D-only step at tiny lr on exactly that z (G step follows but does
    # not touch the discriminator parameters)
    g_before = {k: v.copy() for k, v in gs.params.items()}
    train_cgan_step(gen, disc, gs, ds, x, m, TINY, channels, lr=1e-6, step_seed=77)
    gs.params = g_before  # undo the generator's move, isolate D's effect
    after, _ = adversarial_loss(gen, disc, gs, ds, x, m, z)
    assert -after <= -before + 1e-6


def test_generator_regression_step_equals_manual_adam():
    """The non-adversarial G step is Adam on the hand-built L1 gradients."""
    cfg = CganConfig(widths=(3, 4), bottleneck=5, disc_widths=(3,))
    gen, disc, gs, ds, channels = init_cgan("A", cfg, seed=9, dtype=np.float64)
    rng = np.random.default_rng(17)
    x, m = batch(rng, n=2)

    manual = gs.copy()
    z = make_initial_state(x, cfg.noise_sigma, derive_rng(123, "z_gen"), channels)
    xhat, cache = gen.forward(manual, z, m, "train")
    grads = manual.zero_grads()
    gen.backward(manual, cache, np.sign(xhat - x) / xhat.size, grads)
    adam_step(manual, grads, lr=1e-3)

    train_cgan_step(gen, disc, gs, ds, x, m, cfg, channels, lr=1e-3,
                    step_seed=123, adversarial=False)
    for k in gs.params:
        assert np.allclose(gs.params[k], manual.params[k], atol=1e-14), k


def test_composite_generator_loss_gradcheck():
    """Eq-style composite: adversarial term plus weighted reconstruction."""
    gen, disc, gs, ds, channels = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(18)
    x, m = batch(rng, n=2)
    z = make_initial_state(x, 0.5, derive_rng(4, "fixed"), channels)

    def loss_fn():
        grads = gs.zero_grads()
        xhat, cache = gen.forward(gs, z, m, "train")
        s_fake, dcache = disc.forward(ds.copy(), xhat, m, "train")
        log_fake, gsf = _clamped_log_grad(s_fake, -1)
        l_r = float(np.abs(x - xhat).mean())
        loss = float(log_fake.mean()) + TINY.lam * l_r
        gxhat = np.zeros_like(xhat)
        scratch = ds.zero_grads()
        gx_d, _ = disc.backward(ds.copy(), dcache, gsf / s_fake.size, scratch)
        gxhat += gx_d
        gxhat += TINY.lam * np.sign(xhat - x) / xhat.size
        gen.backward(gs, cache, gxhat, grads)
        return loss, grads

    assert grad_check(loss_fn, gs, n_coords=60, eps=1e-5, seed=6) < 1e-4


def test_discriminator_loss_gradcheck():
    gen, disc, gs, ds, channels = tiny_cgan("A", dtype=np.float64)
    rng = np.random.default_rng(19)
    x, m = batch(rng, n=2)
    z = make_initial_state(x, 0.5, derive_rng(5, "fixed"), channels)
    xhat, _ = gen.forward(gs.copy(), z, m, "train")

    def loss_fn():
        grads = ds.zero_grads()
        s_real, cr = disc.forward(ds, x, m, "train")
        log_real, glr = _clamped_log_grad(s_real, +1)
        s_fake, cf = disc.forward(ds, xhat, m, "train")
        log_fake, glf = _clamped_log_grad(s_fake, -1)
        loss = -float(log_real.mean() + log_fake.mean())
        disc.backward(ds, cr, -glr / s_real.size, grads)
        disc.backward(ds, cf, -glf / s_fake.size, grads)
        return loss, grads

    assert grad_check(loss_fn, ds, n_coords=60, eps=1e-5, seed=7) < 1e-4


def test_non_finite_losses_detected():
    gen, disc, gs, ds, channels = tiny_cgan("A", dtype=np.float32)
    rng = np.random.default_rng(20)
    x, m = batch(rng, n=2)
    gs.params["gA.out.W"][:] = np.inf
    with pytest.raises(NonFiniteLoss):
        train_cgan_step(gen, disc, gs, ds, x.astype(np.float32), m.astype(np.float32),
                        TINY, channels, lr=1e-4, step_seed=0)


# ----------------------------------------------------------------- members


def full_stack(rng, n=2):
    return np.abs(rng.standard_normal((n, 16, 16, 15))).astype(np.float32)


def member_setup(dtype=np.float32):
    cfg = CganConfig(widths=(3, 4), bottleneck=5, disc_widths=(3,))
    gen_a, _, gs_a, _, _ = init_cgan("A", cfg, seed=1, dtype=dtype)
    gen_b, _, gs_b, _, _ = init_cgan("B", cfg, seed=2, dtype=dtype)
    return cfg, gen_a, gen_b, gs_a, gs_b


def test_member_shapes_and_count():
    cfg, gen_a, gen_b, gs_a, gs_b = member_setup()
    rng = np.random.default_rng(21)
    stacks = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, full_stack(rng), k=4, seed=0)
    assert stacks.shape == (4, 2, 16, 16, 15)


def test_members_copy_explicit_channels_bit_exact():
    cfg, gen_a, gen_b, gs_a, gs_b = member_setup()
    rng = np.random.default_rng(22)
    patches = full_stack(rng)
    stacks = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, patches, k=3, seed=9)
    for j in range(3):
        assert np.array_equal(stacks[j][..., COND_IDX], patches[..., COND_IDX])
        # generated channels actually replaced
        assert not np.array_equal(stacks[j][..., GROUP_A_IDX], patches[..., GROUP_A_IDX])


def test_members_differ_across_seeds():
    cfg, gen_a, gen_b, gs_a, gs_b = member_setup()
    rng = np.random.default_rng(23)
    patches = full_stack(rng, n=1)
    stacks = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, patches, k=2, seed=4)
    gen_idx = list(GROUP_A_IDX) + list(GROUP_B_IDX)
    a = stacks[0][..., gen_idx]
    b = stacks[1][..., gen_idx]
    assert np.mean(a != b) >= 0.01


def test_members_reproducible():
    cfg, gen_a, gen_b, gs_a, gs_b = member_setup()
    rng = np.random.default_rng(24)
    patches = full_stack(rng, n=1)
    s1 = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, patches, k=3, seed=11)
    s2 = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, patches, k=3, seed=11)
    assert np.array_equal(s1, s2)


def test_single_stack_input_squeezes():
    cfg, gen_a, gen_b, gs_a, gs_b = member_setup()
    rng = np.random.default_rng(25)
    patches = full_stack(rng, n=1)[0]
    stacks = generate_members(gen_a, gen_b, gs_a, gs_b, cfg, patches, k=2, seed=0)
    assert stacks.shape == (2, 16, 16, 15)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    from stormens.neural import TrainConfig

    cfg = CganConfig(widths=(3, 4), bottleneck=5, disc_widths=(3,),
                     train=TrainConfig(max_epochs=7, seed=5))
    gen_a, disc_a, gs_a, ds_a, _ = init_cgan("A", cfg, seed=1)
    gen_b, disc_b, gs_b, ds_b, _ = init_cgan("B", cfg, seed=2)
    ns = NormalizerSet()
    ns.add(fit_normalizer(PredictorId.CAPE, [0.0, 100.0], fitted_on="train"))
    path = tmp_path / "cgan.npz"
    save_cgan_checkpoint(path, cfg,
                         {"G_A": gs_a, "D_A": ds_a, "G_B": gs_b, "D_B": ds_b}, ns)
    cfg2, stores, ns2, meta = load_cgan_checkpoint(path)
    assert cfg2.widths == (3, 4)
    assert cfg2.train.max_epochs == 7
    assert set(stores) == {"G_A", "D_A", "G_B", "D_B"}
    for k in gs_a.params:
        assert np.array_equal(stores["G_A"].params[k], gs_a.params[k])
    assert ns2.to_text() == ns.to_text()
    assert meta["normalizer_hash"]
