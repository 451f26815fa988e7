import math

import numpy as np
import pytest

from surfelight import lighting, sh
from surfelight.errors import ContractViolation
from surfelight.lighting import RenderBuffers
from surfelight.scene import Camera, Surfels, logit, surfel_normal

from oracles import finite_difference
from scenes import random_scene


def constant_light(v=1.0):
    light = np.zeros((3, 9))
    light[:, 0] = v * 2 * math.sqrt(math.pi)
    return light


def scene_with(transfer=None, albedo=None, seed=0, k=12):
    rng = np.random.default_rng(seed)
    s, cam = random_scene(rng, k=k, facing=True)
    if albedo is not None:
        s.albedo_param[:] = logit(np.clip(albedo, 1e-12, 1 - 1e-12))
    if isinstance(transfer, str):
        s.transfer = sh.clamped_cosine_coeffs(surfel_normal(s))
    elif transfer is not None:
        s.transfer = np.asarray(transfer, dtype=float) * np.ones((k, 9))
    return s, cam, rng


class TestUnshadowed:
    def test_zero_light(self):
        s, cam, _ = scene_with()
        assert np.all(lighting.unshadowed_radiance(s, np.zeros((3, 9)), cam) == 0)

    def test_constant_environment(self):
        s, cam, _ = scene_with(albedo=1 - 1e-12)
        np.testing.assert_allclose(lighting.unshadowed_radiance(s, constant_light(), cam), math.pi, rtol=1e-9)

    def test_doubling(self):
        s, cam, rng = scene_with()
        light = rng.normal(size=(3, 9))
        a = lighting.unshadowed_radiance(s, light, cam)
        b = lighting.unshadowed_radiance(s, 2 * light, cam)
        np.testing.assert_allclose(b, 2 * a, rtol=1e-14)

    def test_uses_oriented_normal(self):
        # A normal pointing away from the camera is shaded as its flip.
        s, cam, rng = scene_with(k=1)
        light = rng.normal(size=(3, 9))
        flipped = Surfels(**{**s.arrays()})
        q = flipped.rotation[0]
        flipped.rotation[0] = [-q[2], q[3], q[0], -q[1]]  # 180 deg about the local x axis
        np.testing.assert_allclose(
            lighting.unshadowed_radiance(s, light, cam), lighting.unshadowed_radiance(flipped, light, cam), atol=1e-10
        )


class TestShadowed:
    def test_zero_transfer(self):
        s, cam, rng = scene_with(transfer=np.zeros(9))
        assert np.all(lighting.shadowed_radiance(s, rng.normal(size=(3, 9)), cam) == 0)

    def test_cosine_transfer_matches_unshadowed(self):
        s, cam, rng = scene_with(transfer="cosine")
        light = rng.normal(size=(3, 9))
        np.testing.assert_allclose(
            lighting.shadowed_radiance(s, light, cam), lighting.unshadowed_radiance(s, light, cam), atol=1e-10
        )

    def test_black_albedo(self):
        s, cam, rng = scene_with(albedo=0.0)
        assert np.abs(lighting.shadowed_radiance(s, rng.normal(size=(3, 9)), cam)).max() < 1e-10

    def test_bilinear(self):
        s, cam, rng = scene_with()
        l1, l2 = rng.normal(size=(2, 3, 9))
        d1, d2 = rng.normal(size=(2, len(s), 9))

        def rad(light, d):
            return lighting.shadowed_radiance(Surfels(**{**s.arrays(), "transfer": d}), light, cam)

        np.testing.assert_allclose(rad(l1 + 2 * l2, d1), rad(l1, d1) + 2 * rad(l2, d1), atol=1e-12)
        np.testing.assert_allclose(rad(l1, d1 - d2), rad(l1, d1) - rad(l1, d2), atol=1e-12)

    def test_bad_light_shape(self):
        s, cam, _ = scene_with()
        with pytest.raises(ContractViolation):
            lighting.shade(s, np.zeros(9), cam)


def buffers(irr):
    h, w = irr.shape[:2]
    z = np.zeros((h, w, 3))
    return RenderBuffers(z, z, z, np.zeros((h, w)), irr, np.ones((h, w)))


class TestShadowMap:
    def test_identical(self):
        irr = np.random.default_rng(0).random((4, 4, 3))
        assert np.all(lighting.shadow_map(buffers(irr), buffers(irr)) == 0)

    def test_brighter_shadowed_is_zero(self):
        assert lighting.shadow_map(buffers(np.full((1, 1, 3), 0.9)), buffers(np.full((1, 1, 3), 0.2)))[0, 0] == 0

    def test_gray_gap(self):
        out = lighting.shadow_map(buffers(np.full((1, 1, 3), 0.1)), buffers(np.full((1, 1, 3), 0.5)))
        assert out[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            lighting.shadow_map(buffers(np.zeros((2, 2, 3))), buffers(np.zeros((3, 2, 3))))

    def test_cosine_init_scene_has_no_shadow(self):
        s, cam, rng = scene_with(transfer="cosine", k=20)
        light = rng.normal(size=(3, 9))
        shadowed, unshadowed = lighting.render_lit(s, light, cam)
        assert np.abs(shadowed.color - unshadowed.color).max() < 1e-4
        assert lighting.shadow_map(shadowed, unshadowed).max() < 1e-4


class TestRenderLit:
    def test_irradiance_is_composited(self):
        s, cam, rng = scene_with(k=15)
        light = rng.normal(size=(3, 9))
        shadowed, unshadowed = lighting.render_lit(s, light, cam)
        assert shadowed.color.shape == (cam.height, cam.width, 3)
        assert np.array_equal(shadowed.albedo, unshadowed.albedo)
        assert np.all(np.isfinite(shadowed.irradiance))
        np.testing.assert_allclose(shadowed.transmittance + (1 - shadowed.transmittance), 1.0)


def test_shade_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    s, cam = random_scene(rng, k=6)
    light = rng.normal(size=(3, 9))
    gu, gs_, gn, ga, geu, ges = rng.normal(size=(6, len(s), 3))

    def f():
        sd = lighting.shade(s, light, cam)
        return float(
            np.sum(sd.radiance_unshadowed * gu) + np.sum(sd.radiance_shadowed * gs_) + np.sum(sd.normal * gn)
            + np.sum(sd.albedo * ga) + np.sum(sd.irradiance_unshadowed * geu) + np.sum(sd.irradiance_shadowed * ges)
        )

    sd = lighting.shade(s, light, cam)
    g = lighting.shade_backward(s, light, sd, gu, gs_, gn, ga, geu, ges)
    np.testing.assert_allclose(g.rotation, finite_difference(f, s.rotation, 1e-6), atol=1e-6)
    np.testing.assert_allclose(g.albedo_param, finite_difference(f, s.albedo_param, 1e-6), atol=1e-6)
    np.testing.assert_allclose(g.transfer, finite_difference(f, s.transfer, 1e-6), atol=1e-6)
    np.testing.assert_allclose(g.light, finite_difference(f, light, 1e-6), atol=1e-6)
