import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, signal

from surfelight import losses, rasterizer, sh
from surfelight.errors import LossUndefinedError
from surfelight.losses import LossReport, LossWeights

from oracles import finite_difference, pair_distortion, sphere_samples
from scenes import random_scene


def dc(value):
    """Transfer coefficients of the constant function ``value``."""
    c = np.zeros(9)
    c[0] = value / sh.Y00
    return c


DIRS = sphere_samples(256, 0)


def reference_ssim(x, y):
    """Gaussian-window SSIM via 2-D convolution with zero fill."""
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    conv = lambda a: signal.convolve2d(a, w, mode="same", boundary="fill")  # noqa: E731
    mx, my = conv(x), conv(y)
    vx, vy, cxy = conv(x * x) - mx**2, conv(y * y) - my**2, conv(x * y) - mx * my
    c1, c2 = 0.01**2, 0.03**2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


class TestPhotometric:
    def test_identical(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert losses.photometric_loss(img, img) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        assert losses.photometric_loss(np.full((8, 8, 3), 0.7), np.full((8, 8, 3), 0.2), lambda_ssim=0.0) == pytest.approx(0.5)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((2, 20, 24, 3))
        mask = rng.random((20, 24)) > 0.3
        m3 = mask[..., None]
        ref_ssim = np.mean([reference_ssim(x[..., c] * mask, y[..., c] * mask)[mask] for c in range(3)])
        ref = np.sum(np.abs(x - y) * m3) / (mask.sum() * 3) + 0.2 * (1 - ref_ssim) / 2
        assert losses.photometric_loss(x, y, mask) == pytest.approx(ref, abs=1e-10)

    def test_masked_pixels_ignored(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((2, 12, 12, 3))
        mask = np.ones((12, 12), bool)
        mask[:4] = False
        y2 = y.copy()
        y2[:4] = 5.0
        assert losses.photometric_loss(x, y, mask) == losses.photometric_loss(x, y2, mask)

    def test_empty_mask(self):
        with pytest.raises(LossUndefinedError):
            losses.photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4), bool))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x, y = rng.random((2, 9, 10, 3))
        mask = rng.random((9, 10)) > 0.2
        _, g = losses.photometric_loss(x, y, mask, with_grad=True)
        fd = finite_difference(lambda: losses.photometric_loss(x, y, mask), x, 1e-6)
        np.testing.assert_allclose(g, fd, atol=1e-7)

    def test_ssim_map_gradient(self):
        rng = np.random.default_rng(4)
        x, y = rng.random((2, 8, 8))
        w = rng.random((8, 8))
        _, vjp = losses.ssim_map(x, y, with_grad=True)
        fd = finite_difference(lambda: float(np.sum(losses.ssim_map(x, y) * w)), x, 1e-6)
        np.testing.assert_allclose(vjp(w), fd, atol=1e-7)


class TestLoss01:
    def test_in_range(self):
        assert losses.loss_01(dc(0.5)[None], DIRS) == 0.0

    def test_above(self):
        assert losses.loss_01(dc(1.5)[None], DIRS) == pytest.approx(0.25, rel=1e-14)

    def test_below(self):
        assert losses.loss_01(dc(-0.2)[None], DIRS) == pytest.approx(0.04, rel=1e-14)

    def test_gradient(self):
        d = np.random.default_rng(5).normal(size=(4, 9))
        _, g = losses.loss_01(d, DIRS, with_grad=True)
        np.testing.assert_allclose(g, finite_difference(lambda: losses.loss_01(d, DIRS), d, 1e-6), atol=1e-8)


class TestPositiveLight:
    def test_nonnegative(self):
        light = np.tile(dc(0.3), (3, 1))
        assert losses.loss_positive_light(light, DIRS) == 0.0

    def test_minus_one(self):
        light = np.zeros((3, 9))
        light[:, 0] = -2 * math.sqrt(math.pi)
        assert losses.loss_positive_light(light, DIRS) == pytest.approx(1.0, rel=1e-14)

    def test_direct_evaluation(self):
        light = np.random.default_rng(6).normal(size=(2, 3, 9))
        vals = np.array([[[sh.evaluate(light[i, c], d[None])[0] for d in DIRS] for c in range(3)] for i in range(2)])
        assert losses.loss_positive_light(light, DIRS) == pytest.approx(np.mean(np.minimum(vals, 0) ** 2), rel=1e-12)

    def test_gradient(self):
        light = np.random.default_rng(7).normal(size=(3, 9))
        _, g = losses.loss_positive_light(light, DIRS, with_grad=True)
        fd = finite_difference(lambda: losses.loss_positive_light(light, DIRS), light, 1e-6)
        np.testing.assert_allclose(g, fd, atol=1e-8)


class TestTransferMatch:
    @staticmethod
    def truncation_error():
        # (1/4pi) * integral of (max(cos, 0) - degree-2 reconstruction)^2, 1-D quadrature.
        a = sh.CLAMPED_COSINE_ZONAL

        def rec(mu):
            p = [1.0, mu, 0.5 * (3 * mu * mu - 1)]
            return sum(a[l] * math.sqrt((2 * l + 1) / (4 * math.pi)) * p[l] for l in range(3))

        f = lambda mu: (max(mu, 0.0) - rec(mu)) ** 2 * 2 * math.pi  # noqa: E731
        return (integrate.quad(f, -1, 0)[0] + integrate.quad(f, 0, 1)[0]) / (4 * math.pi)

    def test_cosine_residual(self):
        n = sphere_samples(5, 1)
        d = sh.clamped_cosine_coeffs(n)
        dirs = sphere_samples(100_000, 2)
        assert losses.loss_transfer_match(d, n, dirs) == pytest.approx(self.truncation_error(), rel=1e-2)

    def test_zero_transfer(self):
        n = sphere_samples(3, 3)
        dirs = sphere_samples(100_000, 4)
        mc = np.mean(np.maximum(n @ dirs.T, 0) ** 2)
        val = losses.loss_transfer_match(np.zeros((3, 9)), n, dirs)
        assert val == pytest.approx(mc, rel=1e-12)
        assert val == pytest.approx(1 / 6, rel=1e-2)

    def test_flip_symmetry(self):
        rng = np.random.default_rng(5)
        n = sphere_samples(4, 6)
        d = rng.normal(size=(4, 9))
        dirs = sphere_samples(500, 7)
        sym = np.concatenate([dirs, -dirs])
        a = losses.loss_transfer_match(d, n, sym)
        b = losses.loss_transfer_match(sh.reflect(d), -n, sym)
        assert a == pytest.approx(b, rel=1e-12)

    def test_stable_across_seeds(self):
        rng = np.random.default_rng(8)
        n = sphere_samples(6, 9)
        d = sh.clamped_cosine_coeffs(n) + rng.normal(scale=0.1, size=(6, 9))
        vals = [losses.loss_transfer_match(d, n, sphere_samples(100_000, s)) for s in range(4)]
        assert (max(vals) - min(vals)) / np.mean(vals) < 0.01

    def test_gradient(self):
        rng = np.random.default_rng(10)
        n = sphere_samples(3, 11)
        d = rng.normal(size=(3, 9))
        _, gd, gn = losses.loss_transfer_match(d, n, DIRS, with_grad=True)
        np.testing.assert_allclose(gd, finite_difference(lambda: losses.loss_transfer_match(d, n, DIRS), d, 1e-6), atol=1e-8)
        np.testing.assert_allclose(gn, finite_difference(lambda: losses.loss_transfer_match(d, n, DIRS), n, 1e-6), atol=1e-7)


class TestShadowOnly:
    def test_equal(self):
        c = np.random.default_rng(0).random((5, 3))
        assert losses.loss_shadow_only(c, c) == 0.0

    def test_brighter(self):
        c = np.random.default_rng(1).random((5, 3))
        assert losses.loss_shadow_only(c + 0.3, c) == pytest.approx(0.09, rel=1e-12)

    def test_darker(self):
        c = np.random.default_rng(2).random((5, 3))
        assert losses.loss_shadow_only(c - 0.1, c) == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(3)
        cs, cu = rng.random((2, 6, 3))
        _, gs_, gu = losses.loss_shadow_only(cs, cu, with_grad=True)
        np.testing.assert_allclose(gs_, finite_difference(lambda: losses.loss_shadow_only(cs, cu), cs, 1e-7), atol=1e-8)
        np.testing.assert_allclose(gu, finite_difference(lambda: losses.loss_shadow_only(cs, cu), cu, 1e-7), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_all_terms_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(5, 9))
    n = sphere_samples(5, seed)
    dirs = sphere_samples(32, seed + 1)
    assert losses.loss_01(d, dirs) >= 0
    assert losses.loss_positive_light(rng.normal(size=(3, 9)), dirs) >= 0
    assert losses.loss_transfer_match(d, n, dirs) >= 0
    assert losses.loss_shadow_only(rng.random((5, 3)), rng.random((5, 3))) >= 0


class TestGeometric:
    def test_fronto_parallel_surfel(self):
        from surfelight.scene import Camera, Surfels, logit

        cam = Camera(8.0, 8.0, 7.5, 7.5, 16, 16)
        s = Surfels([[0, 0, 2.0]], [[0.0, 1.0, 0.0, 0.0]], [[np.log(50.0)] * 2], [logit(0.999)], [[0.0] * 3], [np.zeros(9)])
        res = rasterizer.render(s, np.array([[0.0, 0.0, -1.0]]), cam)
        nc = losses.normal_consistency(res.alpha, res.depth_sum, res.features, cam)
        dd = losses.depth_distortion(res.distortion)
        assert abs(nc) < 1e-3 and dd == 0.0

    def test_two_fragment_distortion(self):
        assert losses.pair_distortion([0.5, 0.25], [1.0, 2.0]) == pytest.approx(0.125)

    def test_distortion_matches_pair_loop(self):
        rng = np.random.default_rng(12)
        w, z = rng.random(7), rng.random(7) * 5
        assert losses.pair_distortion(w, z) == pytest.approx(pair_distortion(list(zip(w, z))), rel=1e-12)

    def test_normal_consistency_gradient(self):
        rng = np.random.default_rng(13)
        s, cam = random_scene(rng, k=12, size=10, spread=0.4, scale=(-0.6, -0.2), facing=True)
        s.opacity_logit[:] = 3.0
        res = rasterizer.render(s, rng.normal(size=(len(s), 3)), cam)
        A = res.alpha.copy()
        D = res.depth_sum.copy()
        nr = rng.normal(size=res.features.shape)
        v, gA, gD, gn = losses.normal_consistency(A, D, nr, cam, with_grad=True)
        assert v != 0.0
        f = lambda: losses.normal_consistency(A, D, nr, cam)  # noqa: E731
        np.testing.assert_allclose(gA, finite_difference(f, A, 1e-7), atol=1e-6)
        np.testing.assert_allclose(gD, finite_difference(f, D, 1e-7), atol=1e-6)
        np.testing.assert_allclose(gn, finite_difference(f, nr, 1e-7), atol=1e-6)


class TestReport:
    def test_zero(self):
        r = LossReport()
        for name in ("a", "b"):
            r.add(name, 0.0, 1.0)
        assert r.total == 0.0

    def test_single_term(self):
        r = LossReport()
        r.add("a", 0.0, 5.0)
        r.add("b", 3.0, 0.25)
        assert r.total == 0.75

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(14)
        r = LossReport()
        vals, ws = rng.random(6), rng.random(6)
        for i in range(6):
            r.add(f"t{i}", vals[i], ws[i])
        assert r.total == pytest.approx(float(np.sum(vals * ws)), rel=1e-14)

    def test_first_nonfinite(self):
        r = LossReport()
        r.add("ok", 1.0, 1.0)
        r.add("bad", float("nan"), 1.0)
        assert r.first_nonfinite() == "bad"


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_01, w.lambda_positive, w.lambda_transfer_match, w.lambda_ssim) == (0.001, 0.05, 1.0, 0.2)
        assert w.stage_weights(1) == {"rec_unshadowed": 1.0, "rec_shadowed": 0.0, "shadow": 10.0}
        assert w.stage_weights(2)["shadow"] == 0.001 and w.stage_weights(2)["rec_shadowed"] == 1.0
        assert w.mc_samples == 64

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_01=-1.0)

    def test_sphere_sampler_uniform(self):
        d = losses.sample_sphere(200_000, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        assert np.abs(d.mean(axis=0)).max() < 1e-2
        assert abs(np.mean(d[:, 2] ** 2) - 1 / 3) < 1e-2
