import numpy as np
import pytest

from biasguard.diffcore import Tensor, seeded_rng
from biasguard.errors import ContractViolation, DimensionError
from biasguard.model import (
    CRITIC_GROUP, JOINT_GROUP, ModelConfig, atf_fuse, critic_value, discriminate_A, discriminate_B,
    encode, generate, init_parameters, parameter_shapes,
)

CFG = ModelConfig(d_visual=6, k_semantic=3, d_latent=2, k_proj=4)


def _params(cfg=CFG, seed=0):
    return init_parameters(cfg, seeded_rng(seed, "init"))


def _with(params, **values):
    return params.with_tensors({name.replace("__", "."): Tensor(v) for name, v in values.items()})


def _softplus(z):
    return np.logaddexp(0.0, z)


def test_parameter_layout_and_groups():
    params = _params()
    assert list(params.tensors) == list(parameter_shapes(CFG))
    critic = set(params.names(CRITIC_GROUP))
    joint = set(params.names(JOINT_GROUP))
    assert critic == {"disc_a.trunk.w", "disc_a.trunk.b", "disc_a.critic.w", "disc_a.critic.b"}
    assert not critic & joint
    assert critic | joint == set(params.tensors)


def test_initial_alpha_scale_is_one():
    params = _params()
    zeroed = _with(params, alpha__w2=np.zeros((6, 1)))
    s = np.ones((2, 3))
    theta_free = _with(zeroed, theta__w2=np.zeros((6, 6)), theta__b2=np.zeros(6))
    x = np.arange(12.0).reshape(2, 6)
    np.testing.assert_allclose(atf_fuse(x, s, theta_free).data, x, rtol=1e-12)


def test_zero_scale_returns_offset():
    params = _params()
    v = np.array([0.5, -1.0, 2.0, 0.0, 3.0, 1.0])
    degenerate = _with(params, alpha__w2=np.zeros((6, 1)), alpha__b2=np.array([-800.0]),
                       theta__w2=np.zeros((6, 6)), theta__b2=v)
    rng = np.random.default_rng(1)
    for _ in range(3):
        out = atf_fuse(rng.standard_normal(6), rng.standard_normal(3), degenerate)
        np.testing.assert_array_equal(out.data, v)


def test_fusion_matches_hand_composed_forward_pass():
    params = _params(seed=4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 6))
    s = rng.standard_normal((5, 3))
    p = {name: t.data for name, t in params.tensors.items()}
    alpha = _softplus(np.maximum(s @ p["alpha.w1"] + p["alpha.b1"], 0) @ p["alpha.w2"] + p["alpha.b2"])
    theta = np.maximum(s @ p["theta.w1"] + p["theta.b1"], 0) @ p["theta.w2"] + p["theta.b2"]
    np.testing.assert_allclose(atf_fuse(x, s, params).data, alpha * x + theta, rtol=1e-12, atol=1e-12)


def test_concat_fusion_keeps_visual_dimension():
    cfg = ModelConfig(d_visual=6, k_semantic=3, d_latent=2, k_proj=4, fusion_mode="CONCAT")
    params = _params(cfg)
    assert "concat.w" in params.tensors and "alpha.w1" not in params.tensors
    out = atf_fuse(np.ones((4, 6)), np.ones((4, 3)), params)
    assert out.shape == (4, 6)


def test_fusion_dimension_mismatch():
    params = _params()
    with pytest.raises(DimensionError):
        atf_fuse(np.ones(5), np.ones(3), params)
    with pytest.raises(DimensionError):
        atf_fuse(np.ones((2, 6)), np.ones((3, 3)), params)


def test_encode_zero_noise_gives_mean():
    params = _params()
    x = np.random.default_rng(2).standard_normal((3, 6))
    latent = encode(x, np.zeros((3, 2)), params)
    np.testing.assert_array_equal(latent.z.data, latent.mu.data)


def test_encode_unit_variance_adds_noise():
    params = _params()
    params = _with(params, enc__logvar__w=np.zeros((12, 2)), enc__logvar__b=np.zeros(2))
    noise = np.array([[0.3, -0.7]])
    latent = encode(np.ones((1, 6)), noise, params)
    np.testing.assert_allclose(latent.z.data, latent.mu.data + noise)


def test_encode_moments_do_not_depend_on_noise():
    params = _params()
    x = np.ones(6)
    a = encode(x, np.array([1.0, 2.0]), params)
    b = encode(x, np.array([-1.0, 0.5]), params)
    np.testing.assert_array_equal(a.mu.data, b.mu.data)
    np.testing.assert_array_equal(a.logvar.data, b.logvar.data)
    assert not np.array_equal(a.z.data, b.z.data)


def test_generator_with_zero_weights_returns_bias():
    params = _params()
    bias = np.linspace(-1, 1, 6)
    params = _with(params, gen__w2=np.zeros((4, 6)), gen__b2=bias)
    np.testing.assert_array_equal(generate(np.array([3.0, -2.0]), params).data, bias)


def test_generator_is_reproducible():
    z = np.array([[0.1, 0.2], [0.3, -0.4]])
    np.testing.assert_array_equal(generate(z, _params(seed=3)).data, generate(z, _params(seed=3)).data)


def test_discriminator_a_heads():
    params = _params()
    x = np.random.default_rng(6).standard_normal((2, 6))
    X, critic = discriminate_A(np.vstack([x[0], x[0]]), params)
    np.testing.assert_allclose(X.data[0], X.data[1], rtol=1e-12)
    assert critic.shape == (2,)
    assert critic.data[0] == pytest.approx(critic.data[1], rel=1e-12)
    np.testing.assert_array_equal(critic_value(x, params).data, discriminate_A(x, params)[1].data)
    single_X, single_critic = discriminate_A(x[0], params)
    assert single_X.shape == (4,) and single_critic.shape == ()


@pytest.mark.parametrize("cfg", [ModelConfig(d_visual=64, k_semantic=16, k_proj=24), ModelConfig.full_scale(64, 16)],
                         ids=["desk", "full"])
def test_discriminator_heads_at_projection_width(cfg):
    params = _params(cfg)
    x = np.random.default_rng(2).standard_normal((3, 64))
    X, critic = discriminate_A(x, params)
    assert X.shape == (3, cfg.k_proj) and critic.shape == (3,)
    assert np.all(np.isfinite(X.data)) and np.all(np.isfinite(critic.data))
    assert discriminate_B(x, params).shape == (3, cfg.k_proj)


def test_full_scale_profile():
    cfg = ModelConfig.full_scale(64, 16)
    assert (cfg.d_latent, cfg.k_proj) == (500, 900)
    assert (cfg.d_visual, cfg.k_semantic) == (64, 16)


def test_discriminator_a_zero_trunk_gives_projection_bias():
    params = _params()
    bias = np.array([1.0, 2.0, 3.0, 4.0])
    params = _with(params, disc_a__trunk__w=np.zeros((6, 12)), disc_a__trunk__b=np.zeros(12),
                   disc_a__proj__b=bias)
    X, _ = discriminate_A(np.random.default_rng(0).standard_normal(6), params)
    np.testing.assert_array_equal(X.data, bias)


def test_discriminator_b_is_deterministic():
    params = _params()
    x = np.random.default_rng(8).standard_normal((3, 6))
    np.testing.assert_array_equal(discriminate_B(x, params).data, discriminate_B(x.copy(), params).data)
    assert discriminate_B(x, params).shape == (3, 4)


def test_invalid_model_config():
    with pytest.raises(ContractViolation):
        ModelConfig(d_latent=0)
    with pytest.raises(ContractViolation):
        ModelConfig(fusion_mode="SUM")
