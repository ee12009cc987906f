import numpy as np
import pytest

from physrelight import formation
from physrelight.learner import model as M
from physrelight.learner.model import ModelParams, TrainConfig
from physrelight.lighting import DirectionalLight

from conftest import tiny_config

L1 = DirectionalLight([0.2, 0.3, 0.9])
L2 = DirectionalLight([-0.4, 0.1, 0.8], [0.8, 0.8, 0.8])


def perturbed(cfg, seed=0, std=0.05):
    m = ModelParams(cfg)
    rng = np.random.default_rng(seed)
    for t in m.tensors.values():
        t.data = (t.data + rng.normal(0, std, t.data.shape)).astype(t.data.dtype)
    return m


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.learning_rate == 2e-4 and cfg.depth == 3 and cfg.base_channels == 16
    assert "normals" not in cfg.losses and set(cfg.losses.values()) == {"dssim"}
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(losses={"final": "lpips"})
    with pytest.raises(ValueError):
        TrainConfig(weights={"final": 0.0})
    assert set(cfg.with_loss("l1").losses.values()) == {"l1"}


def test_initial_output_is_diffuse_solution(rng):
    cfg = tiny_config()
    m = ModelParams(cfg)
    img = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
    out = M.generator_forward(m, img, [L1, L2], [L2, L1])
    np.testing.assert_allclose(out["albedo"].data, 0.5)
    n = out["normals"].data
    np.testing.assert_allclose(n[..., 2], 1, atol=1e-6)
    assert np.all(out["residual"].data == 0)
    vis = 1 / (1 + np.exp(-M.VIS_BIAS_INIT))
    np.testing.assert_allclose(out["visibility"].data, vis, rtol=1e-6)


def test_outputs_follow_formation(rng):
    m = perturbed(tiny_config())
    img = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
    out = M.generator_forward(m, img, [L1, L2], [L2, L1])
    d = {k: v.data for k, v in out.items()}
    np.testing.assert_allclose(np.linalg.norm(d["normals"], axis=-1), 1, atol=1e-5)
    for i, l in enumerate([L2, L1]):
        np.testing.assert_array_equal(d["shading"][i], formation.shading(d["normals"][i], l))
    np.testing.assert_array_equal(d["diffuse"], formation.diffuse_render(d["albedo"], d["shading"]))
    np.testing.assert_array_equal(d["final"], formation.compose(d["diffuse"], d["residual"], d["visibility"]))
    assert d["final"].shape == (2, 16, 16, 3) and d["visibility"].shape == (2, 16, 16, 1)


def test_graceful_degradation_to_diffuse(rng):
    m = perturbed(tiny_config())
    for k in ("stage2.residual.out", "stage2.visibility.out"):
        m.tensors[k + ".w"].data[:] = 0
    m.tensors["stage2.residual.out.b"].data[:] = 0
    m.tensors["stage2.visibility.out.b"].data[:] = 60.0  # sigmoid saturates to 1
    img = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    out = M.generator_forward(m, img, [L1], [L2])
    expect = formation.relight_diffuse(out["albedo"].data[0], out["normals"].data[0], L2)
    np.testing.assert_allclose(out["final"].data[0], expect, atol=1e-6)


def test_relight_deterministic_and_clamped(rng):
    m = perturbed(tiny_config(), std=0.3)
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    a = M.relight(m, img, L1, L2)
    b = M.relight(m, img, L1, L2)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1 and a.dtype == np.float32


def test_unknown_source_ignores_light(rng):
    m = perturbed(tiny_config(known_source_illumination=False))
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(M.relight(m, img, L1, L2), M.relight(m, img, L2, L2))
    k = perturbed(tiny_config())
    assert not np.array_equal(M.relight(k, img, L1, L2), M.relight(k, img, L2, L2))


def test_size_must_divide(rng):
    m = ModelParams(tiny_config())
    with pytest.raises(ValueError):
        M.relight(m, rng.uniform(size=(18, 16, 3)), L1, L2)


def test_layer_specs_consistent():
    cfg = TrainConfig()
    params = M.init_params(cfg)
    for name, cin, cout, _ in M.layer_specs(cfg):
        assert params[f"{name}.w"].shape == (3, 3, cin, cout)
    # grouped heads: each head reads half of the final decoder features
    assert params["stage1.albedo.hid.w"].shape[2] == cfg.base_channels // 2
    assert ModelParams(cfg).n_parameters() == sum(v.size for v in params.values())


def test_network_range():
    np.testing.assert_array_equal(M.to_network_range(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])),
                                  [-1, -1, 0, 1, 1])
