import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from physrelight import formation, synth
from physrelight.lighting import DirectionalLight

from conftest import sphere_scene

floats01 = st.floats(0, 1, width=32)


def test_shading_basic_cases():
    l = DirectionalLight([0, 0.6, 0.8])
    n = np.array([[[0, 0.6, 0.8], [1, 0, 0], [0, -0.6, -0.8], [0, 0, 0]]], np.float32)
    s = formation.shading(n, l)
    assert s.shape == (1, 4, 3)
    np.testing.assert_allclose(s[0, 0], 1, atol=1e-6)
    np.testing.assert_array_equal(s[0, 1:], 0)


def test_shading_matches_oracle_sphere():
    scene = sphere_scene()
    light = DirectionalLight([0, 0, 1])
    f = synth.render_olat(scene, light)
    np.testing.assert_array_equal(formation.shading(f.normals, light), f.shading)


def test_diffuse_and_compose_identities(rng):
    a = rng.uniform(size=(4, 5, 3))
    s = rng.uniform(size=(4, 5, 3))
    np.testing.assert_array_equal(formation.diffuse_render(np.ones_like(s), s), s)
    np.testing.assert_array_equal(formation.diffuse_render(a, np.zeros_like(s)), 0)
    d = a * s
    r = rng.normal(size=d.shape)
    np.testing.assert_array_equal(formation.compose(d, np.zeros_like(d), np.ones((4, 5, 1))), d)
    np.testing.assert_array_equal(formation.compose(d, r, np.zeros((4, 5, 1))), 0)
    # negative residual subtracts light and is not clamped
    out = formation.compose(d, -2 * np.ones_like(d), np.ones((4, 5, 1)))
    assert np.all(out < 0)


def test_shape_errors():
    with pytest.raises(ValueError):
        formation.diffuse_render(np.ones((2, 2, 3)), np.ones((2, 3, 3)))
    with pytest.raises(ValueError):
        formation.compose(np.ones((2, 2, 3)), np.ones((2, 2, 3)), np.ones((2, 3, 1)))
    with pytest.raises(ValueError):
        formation.shading(np.ones((2, 2, 2)), DirectionalLight([0, 0, 1]))


def test_compose_reconstructs_oracle(scene, rig):
    for f in synth.render_stack(scene, list(rig)[:8]):
        out = formation.compose(formation.diffuse_render(f.albedo, f.shading), f.residual, f.visibility)
        assert np.max(np.abs(out - f.image)) <= 1e-6


def test_relight_diffuse_reproduces_lambertian():
    scene = sphere_scene()
    light = DirectionalLight([0.3, 0.2, 1])
    f = synth.render_olat(scene, light)
    np.testing.assert_allclose(formation.relight_diffuse(f.albedo, f.normals, light), f.image, atol=1e-5)
    assert np.all(formation.relight_diffuse(np.zeros_like(f.albedo), f.normals, light) == 0)


def test_relight_diffuse_misses_shadows(scene, rig):
    for light in rig:
        f = synth.render_olat(scene, light)
        shadowed = (f.visibility[..., 0] == 0) & (f.shading.max(axis=-1) > 0) & (f.albedo.max(axis=-1) > 0)
        if shadowed.any():
            pred = formation.relight_diffuse(f.albedo, f.normals, light)
            assert np.all(pred[shadowed].max(axis=-1) > 0)
            assert np.all(f.image[shadowed] == 0)
            return
    pytest.fail("no shadowed pixel found")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (3, 4, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (3, 4, 1), elements=st.floats(0, 1)),
       st.floats(-3, 3))
def test_compose_linear(d, r, v, c):
    lhs = formation.compose(c * d + r, r, v)
    rhs = c * formation.compose(d, np.zeros_like(r), v) + formation.compose(r, r, v)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-1, 1)), st.floats(0, 4), st.floats(0, 4))
def test_shading_linear_in_intensity(n, s, t):
    l = DirectionalLight([0.2, -0.3, 0.9], [s, s, s])
    m = DirectionalLight([0.2, -0.3, 0.9], [t, t, t])
    lm = DirectionalLight([0.2, -0.3, 0.9], [s + t] * 3)
    np.testing.assert_allclose(formation.shading(n, l) + formation.shading(n, m),
                               formation.shading(n, lm), atol=1e-12)


def test_shading_vjp_finite_difference(rng):
    light = DirectionalLight([0.3, -0.5, 0.8], [1.0, 0.7, 0.4])
    n = rng.normal(size=(6, 7, 3))
    cos = formation.cosine(n, light)[..., 0]
    keep = np.abs(cos) > 1e-3
    g = rng.normal(size=(6, 7, 3))
    analytic = formation.shading_vjp(n, light, g)
    h = 1e-6
    worst = 0.0
    for idx in np.ndindex(n.shape):
        if not keep[idx[:2]]:
            continue
        e = np.zeros_like(n)
        e[idx] = h
        fd = np.sum(g * (formation.shading(n + e, light) - formation.shading(n - e, light))) / (2 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    assert worst < 1e-6


def test_formation_batch_run(rng):
    light = DirectionalLight([0, 0, 1])
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1
    b = formation.FormationBatch(light, albedo=np.full((2, 2, 3), 0.5), normals=n).run()
    np.testing.assert_allclose(b.output, 0.5)
    with pytest.raises(ValueError):
        formation.FormationBatch(light, albedo=np.ones((2, 2, 3)), visibility=np.full((2, 2, 1), 2.0)).validate()
    with pytest.raises(ValueError):
        formation.FormationBatch(light, albedo=np.ones((2, 2, 3)), shading=np.ones((3, 2, 3))).validate()
