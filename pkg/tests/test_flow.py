import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecflow.errors import ConfigurationError, NumericDivergenceError, UsageError
from codecflow.flow import (
    FlowConfig,
    FlowModel,
    NormStats,
    RunningStats,
    cfg_velocity,
    cfm_loss,
    convert,
    denormalize,
    drop_condition,
    euler_solve,
    fuse_condition,
    normalize,
    transport_path,
)
from codecflow.numerics import Tensor, backward, double_precision
from codecflow.numerics.gradcheck import numeric_grad
from codecflow.velocity_net import UConformerConfig
from toy_tasks import TOY_D, TOY_MEANS, TOY_T


class Stub:
    """Velocity-field stand-in: ``field(state, cond, t)`` with a fixed null vector."""

    def __init__(self, field, null=None, p_drop=0.0):
        self.field = field
        self.null = null
        self.cfg = FlowConfig(p_drop=p_drop)

    def velocity(self, state, cond, t):
        return self.field(state, cond, t)

    def null_cond(self, b, n):
        c = self.null.shape[0]
        return Tensor(np.broadcast_to(self.null.reshape(1, c, 1), (b, c, n)))


def small_model(rng, d=3, c=4):
    net = UConformerConfig(latent_dim=d, cond_dim=c, model_dim=8, heads=2, ffn_dim=8, enc_layers=1, dec_layers=1, conv_kernel=3)
    model = FlowModel(FlowConfig(latent_dim=d, cond_dim=c, label_dim=2, net=net), rng)
    model.stats = NormStats.identity(d)
    return model


# ---------------------------------------------------------------- transport path


def test_path_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    z0, z1 = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
    with double_precision():
        np.testing.assert_array_equal(transport_path(z0, z1, 0.0)[0].data, z0)
        np.testing.assert_array_equal(transport_path(z0, z1, 1.0)[0].data, z1)
        psi, target = transport_path(z0, z1, 0.5)
    np.testing.assert_allclose(psi.data, (z0 + z1) / 2, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(target.data, z1 - z0)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 1))
def test_degenerate_path(t):
    z = np.random.default_rng(1).normal(size=(2, 3, 4))
    with double_precision():
        psi, target = transport_path(z, z, t)
    np.testing.assert_allclose(psi.data, z, rtol=1e-15)
    assert not target.data.any()


def test_path_per_item_times():
    z0, z1 = np.zeros((2, 1, 3)), np.ones((2, 1, 3))
    psi, _ = transport_path(z0, z1, np.array([0.25, 0.75]))
    np.testing.assert_allclose(psi.data[:, 0, 0], [0.25, 0.75])


def test_path_errors():
    with pytest.raises(UsageError):
        transport_path(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), 0.5)
    with pytest.raises(UsageError):
        transport_path(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), 1.5)


# ---------------------------------------------------------------- CFM objective


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 4), t=st.integers(1, 6), seed=st.integers(0, 1000))
def test_cfm_loss_zero_for_oracle(b, t, seed):
    rng = np.random.default_rng(seed)
    z0, z1 = rng.normal(size=(b, 2, t)), rng.normal(size=(b, 2, t))
    with double_precision():
        oracle = Stub(lambda s, c, tt: Tensor(z1 - z0), null=np.zeros(3))
        loss = cfm_loss(oracle, z1, np.zeros((b, 3, t)), rng, z0=z0)
    assert float(loss.data) == 0.0


def test_cfm_loss_closed_form_for_zero_model():
    rng = np.random.default_rng(2)
    z1 = rng.normal(size=(3, 2, 5))
    with double_precision():
        zero = Stub(lambda s, c, tt: Tensor(np.zeros(s.shape)), null=np.zeros(3))
        loss = cfm_loss(zero, z1, np.zeros((3, 3, 5)), rng, z0=np.zeros_like(z1))
    assert float(loss.data) == pytest.approx(np.mean(z1**2), rel=1e-12)


def test_cfm_draws_time_per_item_and_drops_whole_items():
    seen = {}

    def field(state, cond, t):
        seen["t"] = np.asarray(t)
        seen["cond"] = cond.data.copy()
        return Tensor(np.zeros(state.shape))

    stub = Stub(field, null=np.full(3, 7.0), p_drop=0.5)
    rng = np.random.default_rng(3)
    cfm_loss(stub, np.zeros((64, 2, 4)), np.ones((64, 3, 4)), rng)
    assert seen["t"].shape == (64,) and np.unique(seen["t"]).size == 64
    per_item = seen["cond"].reshape(64, -1)
    dropped = np.all(per_item == 7.0, axis=1)
    kept = np.all(per_item == 1.0, axis=1)
    assert np.all(dropped | kept)
    assert 10 < dropped.sum() < 54


def test_drop_condition_mask():
    cond = Tensor(np.ones((2, 3, 4)))
    null = Tensor(np.zeros((2, 3, 4)))
    out = drop_condition(cond, null, np.array([1, 0]))
    assert not out.data[0].any() and np.all(out.data[1] == 1)


def test_null_condition_gets_gradient_when_dropped():
    rng = np.random.default_rng(4)
    model = small_model(rng)
    cond = fuse_condition(model, rng.normal(size=(2, 3, 5)), np.ones((2, 5), dtype=int))
    backward(cfm_loss(model, rng.normal(size=(2, 3, 5)), cond, rng, drop=np.array([True, False])))
    assert np.abs(model.null_condition.grad).max() > 0


def test_paper_defaults():
    cfg = FlowConfig()
    assert cfg.p_drop == 0.1 and cfg.guidance == 1.5 and cfg.steps == 25


# ---------------------------------------------------------------- guidance


def guided_stub():
    # conditional and unconditional predictions that differ by a fixed offset
    return Stub(lambda s, c, t: Tensor(s.data * 0.5 + c.data[:, :2]), null=np.array([-1.0, 2.0, 0.0]))


def test_alpha_one_is_conditional_and_zero_unconditional():
    rng = np.random.default_rng(5)
    state, cond = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 3, 4))
    stub = guided_stub()
    with double_precision():
        v1 = cfg_velocity(state, cond, 0.3, 1.0, stub).data
        v0 = cfg_velocity(state, cond, 0.3, 0.0, stub).data
        vc = stub.velocity(Tensor(state), Tensor(cond), 0.3).data
        vu = stub.velocity(Tensor(state), stub.null_cond(2, 4), 0.3).data
    np.testing.assert_array_equal(v1, vc)
    np.testing.assert_array_equal(v0, vu)


@settings(max_examples=30, deadline=None)
@given(a1=st.floats(0, 5), a2=st.floats(0, 5))
def test_guidance_is_affine(a1, a2):
    rng = np.random.default_rng(6)
    state, cond = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 3, 4))
    stub = guided_stub()
    with double_precision():
        lhs = cfg_velocity(state, cond, 0.3, a1, stub).data + cfg_velocity(state, cond, 0.3, a2, stub).data
        rhs = 2 * cfg_velocity(state, cond, 0.3, (a1 + a2) / 2, stub).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_guidance_formula():
    rng = np.random.default_rng(7)
    state, cond = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 3, 3))
    stub = guided_stub()
    with double_precision():
        vc = stub.velocity(Tensor(state), Tensor(cond), 0.1).data
        vu = stub.velocity(Tensor(state), stub.null_cond(1, 3), 0.1).data
        got = cfg_velocity(state, cond, 0.1, 1.5, stub).data
    np.testing.assert_allclose(got, vu + 1.5 * (vc - vu), rtol=1e-14)


def test_negative_guidance_is_usage_error():
    with pytest.raises(UsageError):
        cfg_velocity(np.zeros((1, 2, 3)), np.zeros((1, 3, 3)), 0.0, -0.5, guided_stub())


def test_batched_guidance_matches_two_forwards():
    rng = np.random.default_rng(8)
    with double_precision():
        model = small_model(rng)
        state, cond = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 4, 5))
        vc = model.velocity(Tensor(state), Tensor(cond), 0.4).data
        vu = model.velocity(Tensor(state), model.null_cond(2, 5), 0.4).data
        got = cfg_velocity(state, cond, 0.4, 1.5, model).data
    np.testing.assert_allclose(got, vu + 1.5 * (vc - vu), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- Euler


@pytest.mark.parametrize("steps", [1, 3, 8, 25])
def test_constant_field_is_exact(steps):
    u = np.array([0.5, -0.25, 2.0]).reshape(1, 3, 1)
    z0 = np.array([1.0, 0.0, -3.0]).reshape(1, 3, 1)
    with double_precision():
        out = euler_solve(z0, np.zeros((1, 1, 1)), steps, 1.0, Stub(lambda s, c, t: Tensor(u), np.zeros(1))).data
    np.testing.assert_allclose(out, z0 + u, rtol=0, atol=1e-14)


def test_linear_field_first_order():
    z0 = np.ones((1, 1, 1))
    stub = Stub(lambda s, c, t: s, np.zeros(1))
    with double_precision():
        errors = [abs(float(euler_solve(z0, np.zeros((1, 1, 1)), n, 1.0, stub).data.item()) - np.e) for n in (10, 20, 40, 80)]
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios >= 1.7) & (ratios <= 2.3))
    # closed form of forward Euler on z' = z
    assert errors[0] == pytest.approx(np.e - 1.1**10, rel=1e-12)


def test_divergence_reports_step():
    stub = Stub(lambda s, c, t: s * 1e200, np.zeros(1))
    with double_precision():
        with pytest.raises(NumericDivergenceError) as info:
            euler_solve(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 10, 1.0, stub)
    assert info.value.step == 1


def test_zero_steps_is_usage_error():
    with pytest.raises(UsageError):
        euler_solve(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 0, 1.0, Stub(lambda s, c, t: s, np.zeros(1)))


# ---------------------------------------------------------------- normalisation


def test_normalize_round_trip_and_mean():
    rng = np.random.default_rng(9)
    mean, std = rng.normal(size=4), rng.uniform(0.5, 2, 4)
    z = rng.normal(size=(2, 4, 6)).astype(np.float32)
    np.testing.assert_allclose(denormalize(normalize(z, mean, std), mean, std), z, atol=1e-5)
    np.testing.assert_allclose(normalize(np.broadcast_to(mean[None, :, None], (1, 4, 3)), mean, std), 0.0, atol=1e-6)
    zt = Tensor(z)
    np.testing.assert_allclose(denormalize(normalize(zt, mean, std), mean, std).data, z, atol=1e-5)


def test_normalize_dim_mismatch():
    with pytest.raises(ConfigurationError):
        normalize(np.zeros((1, 3, 2)), np.zeros(4), np.ones(4))


def test_running_stats_match_two_pass():
    rng = np.random.default_rng(10)
    chunks = [rng.normal(3.0, 2.0, size=(int(rng.integers(1, 4)), 5, int(rng.integers(1, 50)))) for _ in range(12)]
    rs = RunningStats(5)
    for c in chunks:
        rs.update(c)
    flat = np.concatenate([c.transpose(1, 0, 2).reshape(5, -1) for c in chunks], axis=1)
    mean = flat.sum(axis=1) / flat.shape[1]
    var = ((flat - mean[:, None]) ** 2).sum(axis=1) / flat.shape[1]
    np.testing.assert_allclose(rs.mean, mean, atol=1e-6)
    np.testing.assert_allclose(rs.std(), np.sqrt(var), atol=1e-6)


def test_std_floor():
    rs = RunningStats(2)
    rs.update(np.ones((1, 2, 10)))
    assert np.all(rs.std() == 1e-5)
    assert np.all(NormStats(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2)).hr_std == 1e-5)


# ---------------------------------------------------------------- condition fusion


def test_fuse_keeps_length_and_sees_labels():
    rng = np.random.default_rng(11)
    model = small_model(rng)
    z_l = rng.normal(size=(1, 3, 7))
    a = fuse_condition(model, z_l, np.full((1, 7), 2))
    b = fuse_condition(model, z_l, np.full((1, 7), 1))
    assert a.shape == (1, 4, 7)
    assert np.max(np.abs(a.data - b.data)) > 1e-4


def test_fuse_gradients_reach_both_paths():
    rng = np.random.default_rng(12)
    with double_precision():
        model = small_model(rng)
        z_l = Tensor(rng.normal(size=(1, 3, 5)), requires_grad=True)
        s = np.array([[0, 1, 2, 2, 1]])
        w = Tensor(rng.normal(size=(1, 4, 5)))

        def loss():
            return (fuse_condition(model, z_l, s) * w).sum()

        backward(loss())
        for p in (z_l, model.label_table.table):
            num = numeric_grad(loss, p)
            assert np.abs(num).max() > 1e-6
            np.testing.assert_allclose(p.grad, num, rtol=1e-6, atol=1e-9)


def test_fuse_errors():
    rng = np.random.default_rng(13)
    model = small_model(rng)
    with pytest.raises(UsageError):
        fuse_condition(model, np.zeros((1, 3, 4)), np.array([[0, 1, 3, 1]]))
    with pytest.raises(UsageError):
        fuse_condition(model, np.zeros((1, 3, 4)), np.array([[0, 1, 2]]))
    model.stats = None
    with pytest.raises(ConfigurationError):
        fuse_condition(model, np.zeros((1, 3, 4)), np.zeros((1, 4), dtype=int))


# ---------------------------------------------------------------- convert


def test_convert_shape_and_determinism():
    rng = np.random.default_rng(14)
    model = small_model(rng)
    model.stats = NormStats(np.zeros(3), np.ones(3), np.full(3, 2.0), np.full(3, 0.5))
    z_l = rng.normal(size=(2, 3, 6))
    s = np.ones((2, 6), dtype=int)
    a = convert(model, z_l, s, steps=4, alpha=1.5, seed=3).data
    b = convert(model, z_l, s, steps=4, alpha=1.5, seed=3).data
    assert a.shape == z_l.shape
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, convert(model, z_l, s, steps=4, alpha=1.5, seed=4).data)


def test_convert_without_stats():
    rng = np.random.default_rng(15)
    model = small_model(rng)
    model.stats = None
    with pytest.raises(ConfigurationError):
        convert(model, np.zeros((1, 3, 2)), np.zeros((1, 2), dtype=int))


def test_toy_task_recovers_conditional_means(toy_flow):
    model, losses = toy_flow
    assert np.mean(losses[-50:]) < np.mean(losses[:10])
    for label, mean in TOY_MEANS.items():
        out = convert(model, np.zeros((256, TOY_D, TOY_T)), np.full((256, TOY_T), label), steps=25, alpha=1.0, seed=1).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), mean, atol=0.1)
