import numpy as np
import pytest

import alphagan3d.autodiff as ad
from alphagan3d import losses
from alphagan3d.errors import ContractError, DomainError
from alphagan3d.losses import LossWeights
from alphagan3d.networks import LayerCode, LayerSpec, NetworkSpec, build_network
from alphagan3d.rng import SeedStream

SHAPE = (4, 4, 4)
LATENT = 6
BATCH = 3
F64 = np.float64


def tiny_nets(seed=0, dtype=F64):
    """Small norm-free networks on 4^3 volumes for exact recomposition."""
    stream = SeedStream(seed)
    act = "leaky_relu"
    g = build_network(NetworkSpec("generator", [
        LayerSpec("dense", LayerCode(4, 1, 1, 0), activation=act),
        LayerSpec("tconv", LayerCode(2, 4, 2, 1), activation=act),
        LayerSpec("tconv", LayerCode(1, 4, 2, 1), activation="tanh"),
    ]), SHAPE, LATENT, stream, dtype=dtype)
    d = build_network(NetworkSpec("discriminator", [
        LayerSpec("conv", LayerCode(2, 4, 2, 1), activation=act),
        LayerSpec("conv", LayerCode(1, 2, 1, 0)),
    ]), SHAPE, LATENT, stream, dtype=dtype)
    e = build_network(NetworkSpec("encoder", [
        LayerSpec("conv", LayerCode(2, 4, 2, 1), activation=act),
        LayerSpec("conv", LayerCode(LATENT, 2, 1, 0)),
    ]), SHAPE, LATENT, stream, dtype=dtype)
    c = build_network(NetworkSpec("code_discriminator", [
        LayerSpec("dense", LayerCode(8, 1, 1, 0), activation=act),
        LayerSpec("dense", LayerCode(1, 1, 1, 0)),
    ]), SHAPE, LATENT, stream, dtype=dtype)
    return g, d, e, c


def rand_batches(rng, dtype=F64):
    x = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=dtype)
    z_e = ad.tensor(rng.normal(size=(BATCH, LATENT)), dtype=dtype)
    z_r = ad.tensor(rng.normal(size=(BATCH, LATENT)), dtype=dtype)
    return x, z_e, z_r


def const_net(c):
    return lambda x: ad.constant(np.full(x.shape[0], c))


def gdl_oracle(x, y):
    """Direct nested-loop gradient difference loss, alpha=1."""
    total = 0.0
    for axis in (2, 3, 4):
        dx = np.abs(np.diff(x, axis=axis))
        dy = np.abs(np.diff(y, axis=axis))
        total += np.abs(dx - dy).mean()
    return total


class TestLgd:
    def test_constant_discriminator(self, rng):
        _, _, _, _ = tiny_nets()
        g, _, _, _ = tiny_nets()
        _, z_e, z_r = rand_batches(rng)
        out = losses.l_gd(const_net(2.5), g, z_e, z_r, training=False)
        assert out.item() == pytest.approx(-5.0)

    def test_zero_generator_sum_discriminator(self, rng):
        _, z_e, z_r = rand_batches(rng)

        def g_zero(z):
            return ad.constant(np.zeros((z.shape[0], 1) + SHAPE))

        def d_sum(x):
            return ad.reshape(ad.sum_(x, axes=(1, 2, 3, 4)), (x.shape[0],))

        assert losses.l_gd(d_sum, g_zero, z_e, z_r).item() == pytest.approx(0.0)

    def test_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        _, z_e, z_r = rand_batches(rng)
        out = losses.l_gd(d, g, z_e, z_r, training=False)
        expected = (-d(g(z_e)).numpy().mean() - d(g(z_r)).numpy().mean())
        assert out.item() == pytest.approx(expected, rel=1e-6)

    def test_latent_mismatch(self, rng):
        g, d, e, c = tiny_nets()
        z_e = ad.constant(np.zeros((BATCH, LATENT)))
        z_r = ad.constant(np.zeros((BATCH, LATENT + 1)))
        with pytest.raises(ContractError):
            losses.l_gd(d, g, z_e, z_r)


def identity_autoencoder():
    vox = int(np.prod(SHAPE))

    def e_net(x):
        return ad.reshape(x, (x.shape[0], vox))

    def g_net(z):
        return ad.reshape(z, (z.shape[0], 1) + SHAPE)

    return g_net, e_net


class TestGeneratorLosses:
    def test_lg1_lambda_zero_equals_lgd_minus_code(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        out = losses.l_g1(d, g, c, e, x, z_r, LossWeights(10.0, 0.0), training=False)
        z_e = e(x)
        expected = (losses.l_gd(d, g, z_e, z_r, training=False).item()
                    - c(z_e).numpy().mean())
        assert out.item() == pytest.approx(expected, abs=1e-9)

    def test_lg1_perfect_autoencoder(self, rng):
        g_net, e_net = identity_autoencoder()
        _, d, _, _ = tiny_nets()
        x, _, _ = rand_batches(rng)
        z_r = ad.constant(rng.normal(size=(BATCH, int(np.prod(SHAPE)))))
        terms = losses.l_g1_terms(d, g_net, const_net(0.5), e_net, x, z_r,
                                  LossWeights(10.0, 10.0), training=False)
        assert terms["l1"].item() == pytest.approx(0.0, abs=1e-12)

    def test_lg1_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        w = LossWeights(10.0, 10.0)
        out = losses.l_g1(d, g, c, e, x, z_r, w, training=False)
        z_e = e(x)
        x_rec = g(z_e)
        expected = (
            -d(x_rec).numpy().mean() - d(g(z_r)).numpy().mean()
            - c(z_e).numpy().mean()
            + w.lambda2 * np.abs(x.numpy() - x_rec.numpy()).mean())
        assert out.item() == pytest.approx(expected, rel=1e-5)

    def test_lg2_minus_lg1_is_lambda_mse(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        w = LossWeights(7.0, 7.0)
        v1 = losses.l_g1(d, g, c, e, x, z_r, w, training=False).item()
        v2 = losses.l_g2(d, g, c, e, x, z_r, w, training=False).item()
        z_e = e(x)
        mse = ((x.numpy() - g(z_e).numpy()) ** 2).mean()
        assert v2 - v1 == pytest.approx(w.lambda1 * mse, rel=1e-6)

    def test_lg2_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        w = LossWeights(5.0, 5.0)
        out = losses.l_g2(d, g, c, e, x, z_r, w, training=False)
        z_e = e(x)
        x_rec = g(z_e)
        diff = x.numpy() - x_rec.numpy()
        expected = (
            -d(x_rec).numpy().mean() - d(g(z_r)).numpy().mean()
            - c(z_e).numpy().mean()
            + w.lambda1 * np.abs(diff).mean() + w.lambda1 * (diff ** 2).mean())
        assert out.item() == pytest.approx(expected, rel=1e-5)

    def test_lg3_identity_reconstruction(self, rng):
        g_net, e_net = identity_autoencoder()
        _, d, _, _ = tiny_nets()
        x, _, _ = rand_batches(rng)
        z_r = ad.constant(rng.normal(size=(BATCH, int(np.prod(SHAPE)))))
        terms = losses.l_g3_terms(d, g_net, const_net(0.5), e_net, x, z_r,
                                  LossWeights(100.0, 100.0, 0.01), training=False)
        assert terms["gdl"].item() == pytest.approx(0.0, abs=1e-12)
        assert terms["mse"].item() == pytest.approx(0.0, abs=1e-12)

    def test_lg3_constant_shift(self, rng):
        # reconstruction = x + shift: spatial gradients match, MSE = shift^2
        shift = 0.75
        vox = int(np.prod(SHAPE))

        def e_net(x):
            return ad.reshape(x, (x.shape[0], vox))

        def g_net(z):
            return ad.add_scalar(ad.reshape(z, (z.shape[0], 1) + SHAPE), shift)

        _, d, _, _ = tiny_nets()
        x, _, _ = rand_batches(rng)
        z_r = ad.constant(rng.normal(size=(BATCH, vox)))
        terms = losses.l_g3_terms(d, g_net, const_net(0.5), e_net, x, z_r,
                                  LossWeights(1.0, 1.0, 1.0), training=False)
        assert terms["gdl"].item() == pytest.approx(0.0, abs=1e-10)
        assert terms["mse"].item() == pytest.approx(shift ** 2, rel=1e-9)

    def test_lg3_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        w = LossWeights(100.0, 100.0, 0.01)
        out = losses.l_g3(d, g, c, e, x, z_r, w, training=False)
        z_e = e(x)
        x_rec = g(z_e)
        diff = x.numpy() - x_rec.numpy()
        expected = (
            -d(x_rec).numpy().mean() - d(g(z_r)).numpy().mean()
            - c(z_e).numpy().mean()
            + w.lambda3 * gdl_oracle(x.numpy(), x_rec.numpy())
            + w.lambda2 * (diff ** 2).mean())
        assert out.item() == pytest.approx(expected, rel=1e-5)

    def test_all_lambda_zero_identity(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        w0 = LossWeights(0.0, 0.0, 0.0)
        z_e = e(x)
        base = (losses.l_gd(d, g, z_e, z_r, training=False).item()
                - c(z_e).numpy().mean())
        for fn in (losses.l_g1, losses.l_g2, losses.l_g3):
            assert fn(d, g, c, e, x, z_r, w0, training=False).item() == \
                pytest.approx(base, abs=1e-7)


class TestLc:
    def test_constant_code_discriminator(self, rng):
        _, z_e, z_r = rand_batches(rng)
        out = losses.l_c(const_net(3.0), z_e, z_r, 10.0, SeedStream(0))
        assert out.item() == pytest.approx(10.0, abs=1e-5)

    def test_equal_latents_linear_unit_weight(self, rng):
        w = rng.normal(size=LATENT)
        w /= np.linalg.norm(w)

        def c_net(z):
            return ad.reshape(ad.matmul(z, ad.constant(w.reshape(-1, 1))),
                              (z.shape[0],))

        z = ad.constant(rng.normal(size=(BATCH, LATENT)))
        out = losses.l_c(c_net, z, z, 10.0, SeedStream(0))
        assert out.item() == pytest.approx(0.0, abs=1e-10)

    def test_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        _, z_e, z_r = rand_batches(rng)
        stream = SeedStream(11)
        out = losses.l_c(c, z_e, z_r, 10.0, stream.clone(), training=False)
        eps = stream.clone().uniform(0.0, 1.0, (BATCH,), dtype=np.float64)
        gp = losses.gradient_penalty_at(c, z_e, z_r, eps, training=False)
        expected = (c(z_e).numpy().mean() - c(z_r).numpy().mean()
                    + 10.0 * gp.item())
        assert out.item() == pytest.approx(expected, rel=1e-5)


class TestLd:
    def test_constant_discriminator(self, rng):
        g, _, _, _ = tiny_nets()
        x, z_e, z_r = rand_batches(rng)
        out = losses.l_d(const_net(4.0), g, x, z_e, z_r, 10.0, SeedStream(0),
                         training=False)
        assert out.item() == pytest.approx(10.0, abs=1e-5)

    def test_recomposition(self, rng):
        g, d, e, c = tiny_nets()
        x, z_e, z_r = rand_batches(rng)
        stream = SeedStream(21)
        out = losses.l_d(d, g, x, z_e, z_r, 10.0, stream.clone(), training=False)
        with ad.no_grad():
            fake_e = g(z_e)
            fake_r = g(z_r)
        eps = stream.clone().uniform(0.0, 1.0, (BATCH,), dtype=np.float64)
        gp = losses.gradient_penalty_at(d, x, fake_r.detach(), eps, training=False)
        expected = (d(fake_e).numpy().mean() + d(fake_r).numpy().mean()
                    - 2.0 * d(x).numpy().mean() + 10.0 * gp.item())
        assert out.item() == pytest.approx(expected, rel=1e-5)

    def test_optimization_decreases_critic_gap(self, rng):
        from alphagan3d.optim import Adam, OptimizerConfig

        g, d, e, c = tiny_nets(seed=5)
        x = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=F64)
        stream = SeedStream(3)
        g.set_trainable(False)

        def gap():
            with ad.no_grad():
                z = ad.constant(stream.clone().normal((BATCH, LATENT),
                                                      dtype=np.float64))
                return float(d(g(z)).numpy().mean() - d(x).numpy().mean())

        before = gap()
        opt = Adam(d.parameters(), OptimizerConfig(learning_rate=1e-3))
        zs = SeedStream(7)
        for _ in range(100):
            z_e = ad.constant(zs.normal((BATCH, LATENT), dtype=np.float64))
            z_r = ad.constant(zs.normal((BATCH, LATENT), dtype=np.float64))
            loss = losses.l_d(d, g, x, z_e, z_r, 10.0, zs, training=False)
            d.zero_grad()
            ad.backward(loss)
            opt.step()
        assert gap() < before


class TestGradientPenalty:
    def test_sum_critic_closed_form(self, rng):
        m = int(np.prod(SHAPE))
        a = ad.constant(rng.normal(size=(BATCH, 1) + SHAPE))
        b = ad.constant(rng.normal(size=(BATCH, 1) + SHAPE))

        def f(x):
            return ad.reshape(ad.sum_(x, axes=(1, 2, 3, 4)), (x.shape[0],))

        gp = losses.gradient_penalty(f, a, b, SeedStream(0))
        assert gp.item() == pytest.approx((np.sqrt(m) - 1.0) ** 2, rel=1e-6)

    def test_zero_critic(self, rng):
        a = ad.constant(rng.normal(size=(2, 1) + SHAPE))
        b = ad.constant(rng.normal(size=(2, 1) + SHAPE))

        def f(x):
            return ad.scale(ad.reshape(ad.sum_(x, axes=(1, 2, 3, 4)),
                                       (x.shape[0],)), 0.0)

        gp = losses.gradient_penalty(f, a, b, SeedStream(0))
        assert gp.item() == pytest.approx(1.0, abs=1e-6)

    def test_unit_linear_critic(self, rng):
        a = ad.constant(rng.normal(size=(3, 1)))
        b = ad.constant(rng.normal(size=(3, 1)))

        def f(x):
            return ad.reshape(x, (x.shape[0],))

        gp = losses.gradient_penalty(f, a, b, SeedStream(0))
        assert gp.item() == pytest.approx(0.0, abs=1e-9)

    def test_swap_symmetry_with_eps_pairing(self, rng):
        g, d, e, c = tiny_nets()
        a = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=F64)
        b = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=F64)
        eps = rng.uniform(size=BATCH)
        lhs = losses.gradient_penalty_at(d, a, b, eps, training=False)
        rhs = losses.gradient_penalty_at(d, b, a, 1.0 - eps, training=False)
        assert lhs.item() == pytest.approx(rhs.item(), rel=1e-9)

    def test_penalty_differentiable_wrt_params(self, rng):
        g, d, e, c = tiny_nets()
        a = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=F64)
        b = ad.tensor(rng.normal(size=(BATCH, 1) + SHAPE), dtype=F64)
        gp = losses.gradient_penalty(d, a, b, SeedStream(0), training=False)
        ad.backward(gp)
        grads = [p.grad for p in d.parameters().values() if p.grad is not None]
        assert grads and any(np.any(g.numpy() != 0) for g in grads)

    def test_non_scalar_critic_rejected(self, rng):
        a = ad.constant(rng.normal(size=(2, 1) + SHAPE))
        with pytest.raises(ContractError):
            losses.gradient_penalty(lambda x: x, a, a, SeedStream(0))


class TestGdl:
    def test_identical_volumes(self, rng):
        x = ad.constant(rng.normal(size=(2, 1) + SHAPE))
        assert losses.gdl(x, x).item() == 0.0

    def test_two_constants(self):
        x = ad.constant(np.full((1, 1) + SHAPE, 1.0))
        y = ad.constant(np.full((1, 1) + SHAPE, -3.0))
        assert losses.gdl(x, y).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.normal(size=(2, 1) + SHAPE)
        y = rng.normal(size=(2, 1) + SHAPE)
        out = losses.gdl(ad.tensor(x, dtype=F64), ad.tensor(y, dtype=F64))
        assert out.item() == pytest.approx(gdl_oracle(x, y), rel=1e-6)

    def test_alpha_two(self, rng):
        x = rng.normal(size=(1, 1) + SHAPE)
        y = rng.normal(size=(1, 1) + SHAPE)
        out = losses.gdl(ad.tensor(x, dtype=F64), ad.tensor(y, dtype=F64), alpha=2)
        expected = sum(
            ((np.abs(np.diff(x, axis=ax)) - np.abs(np.diff(y, axis=ax))) ** 2).mean()
            for ax in (2, 3, 4))
        assert out.item() == pytest.approx(expected, rel=1e-6)

    def test_thin_axis_rejected(self):
        x = ad.constant(np.ones((1, 1, 1, 4, 4)))
        with pytest.raises(DomainError):
            losses.gdl(x, x)


class TestFiniteness:
    def test_all_losses_finite(self, rng):
        g, d, e, c = tiny_nets()
        x, z_e, z_r = rand_batches(rng)
        w = LossWeights(100.0, 100.0, 0.01)
        vals = [
            losses.l_gd(d, g, z_e, z_r, training=False).item(),
            losses.l_g1(d, g, c, e, x, z_r, w, training=False).item(),
            losses.l_g2(d, g, c, e, x, z_r, w, training=False).item(),
            losses.l_g3(d, g, c, e, x, z_r, w, training=False).item(),
            losses.l_c(c, z_e, z_r, w.lambda1, SeedStream(2), training=False).item(),
            losses.l_d(d, g, x, z_e, z_r, w.lambda1, SeedStream(3),
                       training=False).item(),
        ]
        assert all(np.isfinite(v) for v in vals)


class TestParameterPartition:
    def test_ld_touches_only_discriminator(self, rng):
        g, d, e, c = tiny_nets()
        x, z_e, z_r = rand_batches(rng)
        for net in (g, e, c):
            net.set_trainable(False)
        loss = losses.l_d(d, g, x, z_e, z_r, 10.0, SeedStream(0), training=False)
        ad.backward(loss)
        assert any(p.grad is not None for p in d.parameters().values())
        for net in (g, e, c):
            assert all(p.grad is None for p in net.parameters().values())

    def test_lg_leaves_d_and_c_untouched(self, rng):
        g, d, e, c = tiny_nets()
        x, _, z_r = rand_batches(rng)
        d.set_trainable(False)
        c.set_trainable(False)
        loss = losses.l_g3(d, g, c, e, x, z_r, LossWeights(100.0, 100.0, 0.01),
                           training=False)
        ad.backward(loss)
        assert any(p.grad is not None for p in g.parameters().values())
        assert any(p.grad is not None for p in e.parameters().values())
        assert all(p.grad is None for p in d.parameters().values())
        assert all(p.grad is None for p in c.parameters().values())


class TestLossWeights:
    def test_presets(self):
        w = LossWeights.for_preset("sigmarat1")
        assert (w.lambda1, w.lambda2) == (10.0, 10.0)
        w2 = LossWeights.for_preset("sigmarat2")
        assert (w2.lambda1, w2.lambda2, w2.lambda3) == (100.0, 100.0, 0.01)

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(-1.0, 0.0)
