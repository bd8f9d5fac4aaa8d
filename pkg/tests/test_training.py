import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import generic_points
from udfforge.field import AnalyticField, FieldArch, NeuralField, init_field
from udfforge.sampling import SamplerConfig, allocate_roots, sample_plane_batch
from udfforge.surfel import gen_scene
from udfforge.training import (
    Adam,
    TrainConfig,
    TrainingAborted,
    cosine_lr,
    loss_far,
    loss_near,
    nearest,
    project_surfels,
    pull,
    total_gradient,
    train,
)

PLANE = AnalyticField("plane")
SPHERE = AnalyticField("sphere", {"radius": 1.0})


class ConstField:
    """Returns preset values; enough for value-only loss checks."""

    def __init__(self, values):
        self.values = np.asarray(values, float)

    def eval(self, p):
        return self.values


def brute_chamfer_sq(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


# ---------------------------------------------------------------- pull


@pytest.mark.parametrize(
    "field,q,expected",
    [
        (SPHERE, (2.0, 0, 0), (1.0, 0, 0)),
        (PLANE, (0.3, -0.2, 0.7), (0.3, -0.2, 0.0)),
        (SPHERE, (0.5, 0, 0), (1.0, 0, 0)),
    ],
)
def test_pull_examples(field, q, expected):
    np.testing.assert_allclose(pull(field, np.array([q])).points[0], expected, atol=1e-15)


def test_pull_degenerate_left_in_place():
    q = np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]])  # sphere center has no gradient
    p = pull(SPHERE, q)
    np.testing.assert_array_equal(p.degenerate, [True, False])
    np.testing.assert_array_equal(p.points[0], q[0])


def test_pull_lands_on_zero_set(rng):
    q = rng.uniform(-2, 2, (1000, 3))
    q = q[np.linalg.norm(q, axis=1) > 1e-3]
    for f in (PLANE, SPHERE):
        assert np.abs(f.eval(pull(f, q).points)).max() < 1e-10


# ---------------------------------------------------------------- far loss


def test_loss_far_examples():
    # queries above the plane pull straight down onto it
    assert loss_far(PLANE, [[0, 0, 0.5]], [[1.0, 0, 0]]).value == 2.0
    assert loss_far(PLANE, [[0, 0, 0.3], [2, 0, -0.7]], [[0.0, 0, 0]]).value == 2.0
    assert loss_far(PLANE, [[0, 0, 0.3], [2, 0, -0.7]], [[0, 0, 0.0], [2, 0, 0]]).value == 0.0


def test_loss_far_matches_brute_force(rng):
    for _ in range(50):
        n, m = rng.integers(1, 301, size=2)
        q = rng.uniform(-2, 2, (n, 3))
        mu = rng.uniform(-1, 1, (m, 3))
        pulled = pull(SPHERE, q)
        keep = ~pulled.degenerate
        # independent closed-form projection onto the unit sphere
        proj = q[keep] / np.linalg.norm(q[keep], axis=1, keepdims=True)
        val = loss_far(SPHERE, q, mu).value
        assert val == pytest.approx(brute_chamfer_sq(proj, mu), rel=1e-12)
        # exact agreement given the same projected points
        d = pulled.points[keep][:, None, :] - mu[None]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        assert val == float(np.sum(d2.min(1)) / keep.sum() + np.sum(d2.min(0)) / m)


def test_nearest_ties_lowest_index():
    dst = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0]])
    idx, d2 = nearest(np.zeros((1, 3)), dst)
    assert idx[0] == 0 and d2[0] == 1.0


def test_loss_far_all_degenerate_skipped():
    r = loss_far(SPHERE, np.zeros((3, 3)), [[1.0, 0, 0]])
    assert math.isnan(r.value) and r.grad is None and r.degenerate_fraction == 1.0


def _param_fd(fun, params, j, h):
    e = np.zeros_like(params)
    e[j] = h
    return (fun(params + e) - fun(params - e)) / (2 * h)


def test_loss_far_full_gradient_matches_fd(small_field, rng):
    q = generic_points(small_field, 40, rng)
    mu = rng.uniform(-1, 1, (30, 3))
    g = loss_far(small_field, q, mu, mode="full").grad

    def L(params):
        return loss_far(NeuralField(small_field.arch, params), q, mu, want_grad=False).value

    for j in rng.choice(small_field.params.size, 50, replace=False):
        fd = _param_fd(L, small_field.params, j, 1e-6)
        assert abs(g[j] - fd) <= 1e-3 * max(abs(fd), 1e-6)


def test_loss_far_first_order_freezes_direction(small_field, rng):
    q = generic_points(small_field, 40, rng)
    mu = rng.uniform(-1, 1, (30, 3))
    g = loss_far(small_field, q, mu, mode="first_order").grad
    frozen = pull(small_field, q).direction

    def L(params):
        v = NeuralField(small_field.arch, params).eval(q)
        return brute_chamfer_sq(q - v[:, None] * frozen, mu)

    for j in rng.choice(small_field.params.size, 50, replace=False):
        fd = _param_fd(L, small_field.params, j, 1e-6)
        assert abs(g[j] - fd) <= 1e-3 * max(abs(fd), 1e-6)


# ---------------------------------------------------------------- near loss


def test_loss_near_examples():
    assert loss_near(ConstField([0.05]), np.zeros((1, 3)), [0.02]).value == pytest.approx(0.03, abs=1e-15)
    assert loss_near(ConstField([0.05, 0.0]), np.zeros((2, 3)), [0.02, 0.01]).value == pytest.approx(0.02, abs=1e-15)


def test_loss_near_zero_on_clean_plane():
    c = gen_scene("disk", 500, 0.0, seed=2).cloud
    s = sample_plane_batch(c, np.arange(500), allocate_roots(c, SamplerConfig()), SamplerConfig(), np.random.default_rng(0))
    assert loss_near(PLANE, s).value < 1e-12


def test_loss_near_gradient_matches_fd(small_field, rng):
    pts = generic_points(small_field, 30, rng)
    t = rng.uniform(0, 0.02, 30)
    g = loss_near(small_field, pts, t).grad

    def L(params):
        return loss_near(NeuralField(small_field.arch, params), pts, t, want_grad=False).value

    for j in rng.choice(small_field.params.size, 50, replace=False):
        fd = _param_fd(L, small_field.params, j, 1e-7)
        assert abs(g[j] - fd) <= 1e-3 * max(abs(fd), 1e-6)


# ---------------------------------------------------------------- projection


def test_projection_examples():
    p = project_surfels(PLANE, [[0, 0, 0.1]], 1.0)
    np.testing.assert_allclose(p.centers, [[0, 0, 0]], atol=1e-15)
    assert p.l_proj == pytest.approx(0.1)
    p = project_surfels(PLANE, [[0.3, 0.4, 0.0]], 1.0)
    np.testing.assert_array_equal(p.centers, [[0.3, 0.4, 0.0]])
    assert p.l_proj == 0.0
    p = project_surfels(SPHERE, [[1.2, 0, 0]], 0.5)
    np.testing.assert_allclose(p.centers, [[1.1, 0, 0]], atol=1e-15)


def test_projection_full_step_lands_on_oracle(rng):
    mu = rng.uniform(-1.5, 1.5, (500, 3))
    for f in (PLANE, SPHERE, AnalyticField("disk", {"radius": 0.75})):
        p = project_surfels(f, mu, 1.0)
        ok = ~p.degenerate
        assert np.abs(f.eval(p.centers[ok])).max() <= 1e-10


def test_projection_subset_and_degenerate():
    mu = np.array([[0.0, 0, 0], [2.0, 0, 0], [0, 3.0, 0]])
    p = project_surfels(SPHERE, mu, 1.0, indices=[0, 1])
    np.testing.assert_array_equal(p.centers[0], mu[0])  # degenerate, frozen
    np.testing.assert_allclose(p.centers[1], [1, 0, 0])
    np.testing.assert_array_equal(p.centers[2], mu[2])  # not selected


# ---------------------------------------------------------------- optimizer


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    opt = Adam(2)
    opt.step(p, np.zeros(2), 1e-3)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_hand_simulation():
    b1, b2, eps = 0.9, 0.999, 1e-8
    p = np.array([0.5])
    opt = Adam(1)
    lrs = [1e-3, 8e-4, 5e-4]
    m = v = 0.0
    ref = 0.5
    for t, lr in enumerate(lrs, start=1):
        opt.step(p, np.array([1.0]), lr)
        m = b1 * m + (1 - b1)
        v = b2 * v + (1 - b2)
        ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert p[0] == pytest.approx(ref, rel=1e-15)
    # constant gradient: every bias-corrected step is lr / (1 + eps)
    assert p[0] == pytest.approx(0.5 - sum(lrs) / (1 + eps), rel=1e-14)


def test_adam_non_finite_leaves_state():
    p = np.array([1.0, 2.0])
    opt = Adam(2)
    assert not opt.step(p, np.array([np.nan, 1.0]), 1e-3)
    np.testing.assert_array_equal(p, [1.0, 2.0])
    assert opt.t == 0 and not opt.m.any()


# ---------------------------------------------------------------- config / gradients


def test_config_paper_defaults():
    c = TrainConfig()
    assert (c.lambda_far, c.lambda_near, c.lambda_proj, c.lr0) == (1.0, 1.0, 0.1, 1e-3)
    assert c.far_only_until == 500
    assert (c.lambda_rgb_ssim, c.lambda_depth, c.lambda_norm) == (0.2, 1000.0, 0.05)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig(lambda_near=-1)
    with pytest.raises(ValueError):
        TrainConfig(total_iters=10, far_only_until=11)


def test_total_gradient_linear_in_weights(small_field, rng):
    c = gen_scene("disk", 40, seed=0).cloud
    q = generic_points(small_field, 40, rng)
    s = sample_plane_batch(c, np.arange(40), allocate_roots(c, SamplerConfig()), SamplerConfig(), rng)
    base = TrainConfig(total_iters=10, arch=small_field.arch)

    def G(a, b):
        return total_gradient(small_field, q, c.centers, s, replace(base, lambda_far=a, lambda_near=b))[0]

    far, near = G(1.0, 0.0), G(0.0, 1.0)
    assert np.array_equal(G(2.0, 0.0), 2.0 * far)
    np.testing.assert_allclose(G(1.0, 1.0), far + near, rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(G(0.3, 2.5), 0.3 * far + 2.5 * near, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- training loop

SMALL = FieldArch(4, 32, 2)


def _cfg(**kw):
    base = dict(total_iters=30, arch=SMALL, sampler=SamplerConfig(planes_per_batch=64))
    base.update(kw)
    return TrainConfig(**base)


def test_train_log_schema_and_schedule():
    c = gen_scene("disk", 200, seed=0).cloud
    st = train(c, _cfg())
    assert len(st.log) == 30
    assert set(st.log[0]) == {"iter", "l_far", "l_near", "l_proj", "lr", "degenerate_fraction"}
    assert all(r["l_near"] is None and r["l_proj"] is None for r in st.log[:3])
    assert all(r["l_near"] is not None and r["l_proj"] is not None for r in st.log[3:])
    assert st.log[0]["lr"] == 1e-3


def test_train_without_near_or_proj_weights():
    c = gen_scene("disk", 200, seed=0).cloud
    st = train(c, _cfg(lambda_near=0.0, lambda_proj=0.0))
    assert all(r["l_near"] is None and r["l_proj"] is None for r in st.log)
    np.testing.assert_array_equal(st.cloud.centers, c.centers)


def test_train_deterministic():
    c = gen_scene("disk", 200, 0.01, seed=0).cloud
    a, b = train(c, _cfg()), train(c, _cfg())
    assert a.log == b.log
    assert a.field.params.tobytes() == b.field.params.tobytes()


def test_train_split_run_is_bit_identical():
    c = gen_scene("disk", 200, 0.01, seed=0).cloud
    full = train(c, _cfg())

    class Stop(Exception):
        pass

    holder = {}

    def stop_at_12(state, rec):
        if state.iter == 12:
            holder["state"] = state
            raise Stop

    with pytest.raises(Stop):
        train(c, _cfg(), on_iter=stop_at_12)
    rest = train(c, _cfg(), state=holder["state"])
    assert rest.log == full.log
    assert rest.field.params.tobytes() == full.field.params.tobytes()


def test_train_rotations_and_scales_frozen():
    c = gen_scene("disk", 200, 0.02, seed=0).cloud
    st = train(c, _cfg())
    np.testing.assert_array_equal(st.cloud.rotations, c.rotations)
    np.testing.assert_array_equal(st.cloud.scales, c.scales)
    assert not np.array_equal(st.cloud.centers, c.centers)


def test_train_aborts_on_persistent_degeneracy():
    c = gen_scene("disk", 50, seed=0).cloud
    arch = FieldArch(2, 4, 0)
    st = train(c, _cfg(total_iters=1, arch=arch))
    st.field.params[:] = 0.0  # zero field: every gradient vanishes
    st.optimizer = Adam(st.field.params.size)
    st.iter = 0
    with pytest.raises(TrainingAborted):
        train(c, _cfg(total_iters=200, arch=arch, lambda_near=0.0), state=st)


def test_train_empty_cloud():
    c = gen_scene("disk", 5, seed=0).cloud
    with pytest.raises(ValueError):
        train(c.with_centers(np.zeros((0, 3))), _cfg())


def test_near_loss_drops_on_clean_plane():
    c = gen_scene("disk", 500, 0.0, seed=0).cloud
    st = train(c, _cfg(total_iters=400, far_only_until=0, lambda_proj=0.0, sampler=SamplerConfig(planes_per_batch=200)))
    tail = [r["l_near"] for r in st.log[-20:]]
    assert np.mean(tail) < 5e-3
