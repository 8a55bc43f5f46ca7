import math

import numpy as np
import pytest
from scipy import stats

from mipdesk import dataset, encoding as enc, oracle, renderer
from mipdesk import rng as rng_mod
from mipdesk.field import MlpSpec, RadianceMlp
from mipdesk.geometry import Camera
from mipdesk.renderer import FieldModel, RenderConfig, Rays


def constant_model(tau_bias, color=0.3, two=False, L=4, dtype=np.float64):
    """A field with (nearly) constant density and constant color."""
    e = enc.EncodingConfig(L=L, L_dir=2)
    spec = MlpSpec(e.dim, e.dir_dim, depth=2, width=8)
    mlps = []
    for k in range(2 if two else 1):
        m = RadianceMlp.init(spec, 0, dtype, stream_key=k)
        m.params["density.w"][:] = 0
        m.params["density.b"][:] = tau_bias
        m.params["rgb.w"][:] = 0
        p = (color + 1e-3) / (1 + 2e-3)
        m.params["rgb.b"][:] = math.log(p / (1 - p))
        mlps.append(m)
    return FieldModel(mlps, e)


def random_model(seed=0, two=False, integrate=True, variant="IPE", dtype=np.float64):
    e = enc.EncodingConfig(L=4, L_dir=2, variant=variant)
    spec = MlpSpec(e.dim, e.dir_dim, depth=2, width=16)
    return FieldModel([RadianceMlp.init(spec, seed, dtype, stream_key=k) for k in range(2 if two else 1)], e, integrate)


def small_camera(n=16):
    pose = dataset.look_at((2.5, 1.0, 1.5))
    return Camera(pose, 20.0, n, n, 1.0, 4.5)


class TestStratified:
    def test_frozen_is_bin_midpoints(self):
        t = renderer.stratified_samples(np.array(2.0), np.array(6.0), 5)
        assert np.allclose(t, 2.0 + 4.0 * (np.arange(5) + 0.5) / 5, rtol=0, atol=1e-15)
        assert np.allclose(np.diff(t), 0.8)

    def test_within_range_and_sorted(self):
        gen = rng_mod.stream(0, rng_mod.ORACLE, "strat")
        t = renderer.stratified_samples(np.full(1000, 1.0), np.full(1000, 3.0), 17, gen)
        assert (t >= 1).all() and (t <= 3).all()
        assert (np.diff(t, axis=-1) >= 0).all()

    def test_uniform_within_bins(self):
        gen = rng_mod.stream(0, rng_mod.ORACLE, "strat-chi2")
        n = 10
        t = renderer.stratified_samples(np.zeros(100_000), np.ones(100_000), n, gen)
        for k in range(n):
            pos = t[:, k] * n - k
            assert (pos >= 0).all() and (pos <= 1).all()
            counts, _ = np.histogram(pos, bins=20, range=(0, 1))
            assert stats.chisquare(counts).pvalue > 1e-4

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            renderer.stratified_samples(np.array(2.0), np.array(2.0), 4)


class TestComposite:
    def test_zero_density_is_black(self):
        t = np.linspace(0, 1, 6)
        c, w, T = renderer.composite(np.zeros(5), np.ones((5, 3)), t)
        assert np.all(c == 0) and np.all(w == 0) and np.all(T == 1)

    def test_opaque_single_interval(self):
        c, w, _ = renderer.composite(np.array([1e6]), np.array([[0.2, 0.4, 0.6]]), np.array([0.0, 1.0]))
        assert np.allclose(c, [0.2, 0.4, 0.6]) and w[0] == pytest.approx(1.0)

    def test_two_interval_closed_form(self):
        tau = np.array([1.0, 2.0])
        rgb = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        t = np.array([0.0, 0.5, 1.0])
        c, w, T = renderer.composite(tau, rgb, t)
        w0 = 1 - math.exp(-0.5)
        w1 = math.exp(-0.5) * (1 - math.exp(-1.0))
        assert abs(w[0] - w0) <= 1e-12 and abs(w[1] - w1) <= 1e-12
        assert np.allclose(c, [w0, w1, 0], rtol=0, atol=1e-12)
        assert T[0] == 1.0 and T[2] == pytest.approx(math.exp(-1.5), abs=1e-15)

    def test_two_interval_matches_continuous_integral(self):
        sigma = lambda t: np.where(t < 0.5, 1.0, 2.0)
        color = lambda t: np.stack([np.where(t < 0.5, 1.0, 0.0), np.where(t < 0.5, 0.0, 1.0), 0 * t], -1)
        ref, _ = oracle.volume_render_integral(sigma, color, 0.0, 1.0, n_steps=200_000)
        c, _, _ = renderer.composite(np.array([1.0, 2.0]), np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([0, 0.5, 1.0]))
        assert np.allclose(c, ref, atol=1e-4)

    def test_white_background(self):
        c, w, T = renderer.composite(np.array([0.5, 0.5]), np.zeros((2, 3)), np.array([0, 1.0, 2.0]), True)
        assert np.allclose(c, T[-1])

    def test_rejects_negative_density(self):
        with pytest.raises(ValueError):
            renderer.composite(np.array([-0.1]), np.zeros((1, 3)), np.array([0, 1.0]))

    def test_rejects_inconsistent_lengths(self):
        with pytest.raises(ValueError):
            renderer.composite(np.ones(3), np.zeros((3, 3)), np.linspace(0, 1, 3))

    def test_weight_invariants(self):
        gen = np.random.default_rng(0)
        tau = gen.exponential(2.0, size=(200, 16))
        t = np.sort(gen.uniform(0, 4, size=(200, 17)), -1)
        _, w, T = renderer.composite(tau, gen.random((200, 16, 3)), t)
        assert (w >= 0).all() and (w.sum(-1) <= 1 + 1e-12).all()
        assert (np.diff(T, axis=-1) <= 1e-15).all() and (T[:, 0] == 1).all()
        tau2 = np.concatenate([tau, np.full((200, 1), 1e9)], -1)
        t2 = np.concatenate([t, t[:, -1:] + 1], -1)
        _, w2, _ = renderer.composite(tau2, gen.random((200, 17, 3)), t2)
        assert np.allclose(w2.sum(-1), 1, atol=1e-6)

    def test_quadrature_converges(self):
        sigma, color = oracle.random_smooth_profile(rng_mod.stream(1, rng_mod.ORACLE, "conv"))

        def at(n):
            t = np.linspace(2, 6, n + 1)
            m = 0.5 * (t[1:] + t[:-1])
            return renderer.composite(sigma(m), color(m), t)[0]

        for n in (16, 32, 64):
            assert np.abs(at(2 * n) - at(n)).max() < np.abs(at(n) - at(n // 2)).max()

    def test_backward_matches_finite_differences(self):
        gen = np.random.default_rng(2)
        tau = gen.exponential(1.0, 6)
        rgb = gen.random((6, 3))
        t = np.sort(gen.uniform(0, 3, 7))
        g = gen.normal(size=3)
        for white in (False, True):
            c, w, T = renderer.composite(tau, rgb, t, white)
            d_tau, d_rgb = renderer.composite_backward(g, tau, rgb, t, w, T, white)
            f = lambda: float(renderer.composite(tau, rgb, t, white)[0] @ g)
            fd = oracle.finite_diff_gradient(f, [tau, rgb], [(0, i) for i in range(6)] + [(1, i) for i in range(18)], 1e-6)
            assert np.allclose(np.concatenate([d_tau, d_rgb.ravel()]), fd, atol=1e-8)


class TestBlurpool:
    def test_hand_example(self):
        assert np.allclose(renderer.blurpool_weights(np.array([0.0, 1.0, 0.0]), 0.0), [0.25, 0.5, 0.25])

    def test_alpha_makes_everything_positive(self):
        w = np.zeros(8)
        w[3] = 1
        assert (renderer.blurpool_weights(w, 0.01) > 0).all()

    def test_uniform_stays_uniform(self):
        out = renderer.blurpool_weights(np.full(7, 0.3), 0.0)
        # max(0, w) = w at the padded ends, so the envelope stays flat.
        assert np.allclose(out, 1 / 7)

    def test_all_zero_without_alpha(self):
        with pytest.raises(ValueError):
            renderer.blurpool_weights(np.zeros(4), 0.0)

    def test_sums_to_one(self):
        w = np.random.default_rng(0).random((10, 9))
        assert np.allclose(renderer.blurpool_weights(w, 0.01).sum(-1), 1)


class TestInverseTransform:
    def test_concentrated(self):
        pdf = np.array([0, 0, 1.0, 0])
        t = renderer.inverse_transform_sample(pdf, np.arange(5.0), 50, rng_mod.stream(0, rng_mod.ORACLE, "it"))
        assert (t >= 2).all() and (t <= 3).all()
        assert (np.diff(t) >= 0).all()

    def test_uniform_ks(self):
        pdf = np.full(8, 1 / 8)
        t = renderer.inverse_transform_sample(pdf, np.linspace(0, 1, 9), 100_000,
                                              rng_mod.stream(0, rng_mod.ORACLE, "ks"), stratified=False)
        assert stats.kstest(t, "uniform").pvalue > 1e-3

    def test_one_to_three_split(self):
        n = 100_000
        t = renderer.inverse_transform_sample(np.array([0.25, 0.75]), np.array([0.0, 1.0, 2.0]), n,
                                              rng_mod.stream(0, rng_mod.ORACLE, "split"), stratified=False)
        k = np.sum(t < 1.0)
        assert abs(k - n / 4) <= 5 * math.sqrt(n * 0.25 * 0.75)

    def test_batched_matches_rowwise(self):
        gen = np.random.default_rng(5)
        pdf = gen.random((4, 6))
        pdf /= pdf.sum(-1, keepdims=True)
        edges = np.sort(gen.uniform(0, 5, (4, 7)), -1)
        t = renderer.inverse_transform_sample(pdf, edges, 9)
        for r in range(4):
            assert np.allclose(t[r], renderer.inverse_transform_sample(pdf[r], edges[r], 9))

    @pytest.mark.parametrize("pdf", [np.array([0.5, 0.6]), np.array([1.2, -0.2])])
    def test_invalid_pdf(self, pdf):
        with pytest.raises(ValueError):
            renderer.inverse_transform_sample(pdf, np.arange(3.0), 4)


class TestRenderPasses:
    def test_empty_field_white_background(self):
        model = constant_model(-1e4)
        cfg = RenderConfig(n_coarse=8, n_fine=8, white_background=True)
        c, f = renderer.render_pixel(model, small_camera(), 3, 5, cfg, rng_mod.stream(0, rng_mod.RENDER, 1))
        assert np.allclose(f, 1.0) and np.allclose(c, 1.0)

    def test_opaque_slab_every_scale(self):
        model = constant_model(1e4, color=0.3)
        cfg = RenderConfig(n_coarse=8, n_fine=8)
        cam = small_camera(16)
        for s in (1, 2, 4, 8):
            _, fine = renderer.render_image(model, cam.downscaled(s), cfg)
            assert fine.shape == (16 // s, 16 // s, 3)
            assert np.abs(fine - 0.3).max() <= 1e-5

    def test_supersample_one_equals_plain(self):
        model = random_model()
        cfg = RenderConfig(n_coarse=8, n_fine=8)
        rays = Rays.from_camera(small_camera(4))
        a = renderer._render_supersampled(model, rays, cfg, None, jitter="centered")
        c, f = renderer.render_rays(model, rays, cfg)
        assert np.array_equal(a[1], f.color)

    def test_centered_jitter_k_equals_shrunken_cone(self):
        model = random_model()
        cfg = RenderConfig(n_coarse=8, n_fine=8, supersample_count=4)
        rays = Rays.from_camera(small_camera(4))
        _, f = renderer._render_supersampled(model, rays, cfg, None, jitter="centered")
        shrunk = Rays(rays.origins, rays.directions, rays.radii / 2, rays.near, rays.far)
        _, ref = renderer.render_rays(model, shrunk, RenderConfig(n_coarse=8, n_fine=8))
        assert np.allclose(f, ref.color)

    def test_fine_pass_uses_exactly_n_fine_intervals(self):
        model = random_model()
        cfg = RenderConfig(n_coarse=12, n_fine=20)
        rays = Rays.from_camera(small_camera(4))
        c, f = renderer.render_rays(model, rays, cfg, rng_mod.stream(0, rng_mod.RENDER, 0))
        assert c.t.shape == (16, 13) and f.t.shape == (16, 21)
        assert f.tau.shape == (16, 20)
        assert (np.diff(f.t, axis=-1) > 0).all()

    def test_two_mlp_mode_takes_sorted_union(self):
        model = random_model(two=True)
        cfg = RenderConfig(n_coarse=12, n_fine=20)
        rays = Rays.from_camera(small_camera(4))
        c, f = renderer.render_rays(model, rays, cfg, rng_mod.stream(0, rng_mod.RENDER, 0))
        assert c.t.shape[-1] == 12 // 2 + 1
        assert f.t.shape[-1] == (12 // 2 + 1) + (20 + 1)
        assert (np.diff(f.t, axis=-1) > 0).all()
        for k in range(16):
            assert np.isin(c.t[k], f.t[k]).all()

    @pytest.mark.parametrize("integrate,variant", [(True, "IPE"), (False, "IPE"), (True, "ConcatPE")])
    def test_featurize_shapes(self, integrate, variant):
        model = random_model(integrate=integrate, variant=variant)
        rays = Rays.from_camera(small_camera(4))
        t = renderer.stratified_samples(rays.near, rays.far, 9)
        assert renderer.featurize(rays, t, model).shape == (16, 8, model.encoding.dim)

    def test_render_image_deterministic_and_chunk_invariant(self):
        model = random_model(dtype=np.float32)
        cam = small_camera(8)
        for k in (1, 3):
            cfg = RenderConfig(n_coarse=8, n_fine=8, supersample_count=k)
            a = renderer.render_image(model, cam, cfg, seed=1, image_key=2, chunk=64)
            b = renderer.render_image(model, cam, cfg, seed=1, image_key=2, chunk=7)
            assert np.array_equal(a[1], b[1])
            c = renderer.render_image(model, cam, cfg, seed=1, image_key=2, chunk=64, randomized=True)
            d = renderer.render_image(model, cam, cfg, seed=1, image_key=2, chunk=64, randomized=True)
            assert np.array_equal(c[1], d[1])

    def test_config_validation(self):
        for kw in ({"n_coarse": 0}, {"alpha": -1.0}, {"supersample_count": 0}):
            with pytest.raises(ValueError):
                RenderConfig(**kw)
