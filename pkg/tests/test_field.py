import math
import threading

import numpy as np
import pytest

from conftest import central_diff_input, generic_points
from udfforge.field import (
    AnalyticField,
    FieldArch,
    NeuralField,
    SceneTransform,
    encode,
    init_field,
    load_checkpoint,
    save_checkpoint,
)


# ---------------------------------------------------------------- encoding


def test_encode_zero_input():
    e = encode(np.zeros(3), 6)
    assert e.shape == (39,)
    np.testing.assert_array_equal(e[:3], 0.0)
    for k in range(6):
        np.testing.assert_array_equal(e[3 + 6 * k : 6 + 6 * k], 0.0)  # sin
        np.testing.assert_array_equal(e[6 + 6 * k : 9 + 6 * k], 1.0)  # cos


def test_encode_identity_when_no_frequencies():
    p = np.array([0.3, -1.7, 2.2])
    np.testing.assert_array_equal(encode(p, 0), p)


def test_encode_one_frequency_by_hand():
    # sin(pi/2) = 1, cos(pi/2) = 0, sin(0) = 0, cos(0) = 1
    e = encode(np.array([0.5, 0.0, 0.0]), 1)
    expected = [0.5, 0, 0, 1, 0, 0, 0, 1, 1]
    np.testing.assert_allclose(e, expected, atol=1e-15)


def test_encode_rejects_negative_frequencies():
    with pytest.raises(ValueError):
        encode(np.zeros(3), -1)


# ---------------------------------------------------------------- arch / init


def test_default_param_count_closed_form():
    # widths [39, 256 x 7, 1]
    expected = (39 * 256 + 256) + 6 * (256 * 256 + 256) + (256 * 1 + 1)
    assert expected == 405249
    f = init_field(FieldArch(), seed=0)
    assert f.params.size == expected == FieldArch().num_params


@pytest.mark.parametrize("kw", [{"num_layers": 1}, {"hidden_width": 0}, {"encoding_frequencies": -1}])
def test_invalid_arch(kw):
    with pytest.raises(ValueError):
        FieldArch(**kw)


def test_init_deterministic_and_seed_dependent():
    arch = FieldArch(4, 16, 2)
    a, b, c = init_field(arch, 3), init_field(arch, 3), init_field(arch, 4)
    assert a.params.tobytes() == b.params.tobytes()
    assert not np.array_equal(a.params, c.params)


def test_init_fan_in_scaling():
    f = init_field(FieldArch(3, 512, 0), seed=1)
    for W in f.weights[1:-1]:
        assert abs(W.mean()) < 0.01
        assert W.std() == pytest.approx(math.sqrt(2.0 / W.shape[0]), rel=0.05)


def test_sphere_init_approximates_sphere_udf():
    f = init_field(FieldArch(8, 256, 6), seed=0, sphere_radius=0.5)
    p = np.random.default_rng(0).uniform(-1, 1, (500, 3))
    r = np.linalg.norm(p, axis=1)
    v = f.eval(p)
    # the initial field is roughly |r - 0.5| and exact at the origin
    assert np.corrcoef(v, np.abs(r - 0.5))[0, 1] > 0.7
    assert f.eval(np.zeros(3)) == pytest.approx(0.5, abs=1e-12)


def test_param_vector_shape_checked():
    with pytest.raises(ValueError):
        NeuralField(FieldArch(2, 4, 0), np.zeros(3))


# ---------------------------------------------------------------- eval


def test_analytic_examples():
    sphere = AnalyticField("sphere", {"radius": 1.0})
    assert sphere.eval(np.array([2.0, 0, 0])) == 1.0
    plane = AnalyticField("plane")
    assert plane.eval(np.array([5.0, -3.0, 0.0])) == 0.0
    v, g = sphere.eval_with_input_grad(np.array([2.0, 0, 0]))
    assert v == 1.0
    np.testing.assert_array_equal(g, [1, 0, 0])
    v, g = sphere.eval_with_input_grad(np.array([0.5, 0, 0]))
    assert v == 0.5
    np.testing.assert_array_equal(g, [-1, 0, 0])


def test_neural_eval_nonnegative(default_field, rng):
    p = rng.uniform(-3, 3, (2000, 3))
    assert np.all(default_field.eval(p) >= 0)


def test_eval_rejects_non_finite(small_field):
    with pytest.raises(ValueError):
        small_field.eval(np.array([np.nan, 0, 0]))
    with pytest.raises(ValueError):
        AnalyticField("plane").eval(np.array([np.inf, 0, 0]))


def test_single_and_batched_agree(small_field, rng):
    p = rng.uniform(-1, 1, (5, 3))
    batch = small_field.eval(p)
    for i in range(5):
        assert small_field.eval(p[i]) == pytest.approx(batch[i], rel=1e-14)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("which", ["small", "default"])
def test_input_grad_matches_finite_differences(which, small_field, default_field, rng):
    f = small_field if which == "small" else default_field
    p = generic_points(f, 100, rng)
    _, g = f.eval_with_input_grad(p)
    fd = central_diff_input(f, p)
    rel = np.linalg.norm(g - fd, axis=1) / np.linalg.norm(fd, axis=1)
    assert rel.max() < 1e-3


def test_kink_convention():
    # a 2-layer net with zero weights: every pre-activation is exactly 0
    arch = FieldArch(2, 3, 0)
    f = NeuralField(arch, np.zeros(arch.num_params))
    v, g = f.eval_with_input_grad(np.array([0.1, 0.2, 0.3]))
    assert v == 0.0
    np.testing.assert_array_equal(g, 0.0)  # rectifier'(0) = 0 kills the path
    # output kink only: identity-like first layer, |x|' at 0 taken as +1
    p = np.zeros(arch.num_params)
    W0 = p[: 3 * 3].reshape(3, 3)
    W0[:] = np.eye(3)
    p[12:15] = 1.0  # last layer weights
    f = NeuralField(arch, p)
    v, g = f.eval_with_input_grad(np.array([0.0, 0.0, 0.0]))
    assert v == 0.0
    np.testing.assert_array_equal(g, 0.0)
    v, g = f.eval_with_input_grad(np.array([0.5, 0.0, 0.0]))
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


def _param_fd(field, pts, up, j, h=1e-5):
    e = np.zeros(field.params.size)
    e[j] = h
    fp = NeuralField(field.arch, field.params + e)
    fm = NeuralField(field.arch, field.params - e)
    return (np.dot(up, fp.eval(pts)) - np.dot(up, fm.eval(pts))) / (2 * h)


def test_backward_matches_parameter_perturbation(small_field, rng):
    p = generic_points(small_field, 1, rng)
    g = small_field.backward(p, [1.0])
    for j in rng.choice(small_field.params.size, 50, replace=False):
        fd = _param_fd(small_field, p, np.array([1.0]), j)
        assert abs(g[j] - fd) <= 1e-3 * max(abs(fd), abs(g[j]), 1e-8)


def test_backward_zero_upstream(small_field, rng):
    p = rng.uniform(-1, 1, (7, 3))
    np.testing.assert_array_equal(small_field.backward(p, np.zeros(7)), 0.0)


def test_backward_linear_in_upstream(small_field, rng):
    p = rng.uniform(-1, 1, (2, 3))
    a, b = 0.7, -2.5
    both = small_field.backward(p, [a, b])
    sep = a * small_field.backward(p[:1], [1.0]) + b * small_field.backward(p[1:], [1.0])
    np.testing.assert_allclose(both, sep, rtol=1e-12, atol=1e-14)


def test_backward_dimension_mismatch(small_field):
    with pytest.raises(ValueError):
        small_field.backward(np.zeros((3, 3)), [1.0, 2.0])


def test_directional_param_grad_matches_fd(small_field, rng):
    p = generic_points(small_field, 10, rng)
    v = rng.normal(size=p.shape)
    g = small_field._directional_param_grad(small_field._forward(p), v)

    def s(params):
        return np.sum(v * NeuralField(small_field.arch, params).eval_with_input_grad(p).grad)

    for j in rng.choice(small_field.params.size, 20, replace=False):
        e = np.zeros(small_field.params.size)
        e[j] = 1e-6
        fd = (s(small_field.params + e) - s(small_field.params - e)) / 2e-6
        assert abs(g[j] - fd) <= 1e-5 * max(abs(fd), 1e-6)


def test_concurrent_reads_are_consistent(small_field, rng):
    p = rng.uniform(-1, 1, (200, 3))
    ref = small_field.eval_with_input_grad(p)
    out = [None] * 4

    def work(i):
        out[i] = small_field.eval_with_input_grad(p)

    ts = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for o in out:
        np.testing.assert_array_equal(o.value, ref.value)
        np.testing.assert_array_equal(o.grad, ref.grad)


# ---------------------------------------------------------------- analytic oracles


def _closed_form_cases():
    R = 0.8
    yield AnalyticField("plane"), lambda p: np.abs(p[:, 2]), lambda p: np.stack([0 * p[:, 0], 0 * p[:, 0], np.sign(p[:, 2])], 1)

    def sph_v(p):
        return np.abs(np.sqrt((p**2).sum(1)) - R)

    def sph_g(p):
        r = np.sqrt((p**2).sum(1))
        return np.sign(r - R)[:, None] * p / r[:, None]

    yield AnalyticField("sphere", {"radius": R}), sph_v, sph_g

    def two_v(p):
        return np.minimum(np.abs(p[:, 2] - 0.25), np.abs(p[:, 2] + 0.25))

    def two_g(p):
        z = np.where(np.abs(p[:, 2] - 0.25) < np.abs(p[:, 2] + 0.25), p[:, 2] - 0.25, p[:, 2] + 0.25)
        return np.stack([0 * z, 0 * z, np.sign(z)], 1)

    yield AnalyticField("two_planes", {"gap": 0.25}), two_v, two_g


@pytest.mark.parametrize("case", list(_closed_form_cases()), ids=["plane", "sphere", "two_planes"])
def test_analytic_matches_closed_form(case, rng):
    field, fv, fg = case
    p = rng.uniform(-1, 1, (500, 3))
    v, g = field.eval_with_input_grad(p)
    np.testing.assert_allclose(v, fv(p), atol=1e-12)
    np.testing.assert_allclose(g, fg(p), atol=1e-12)


def _brute_disk_distance(p, R, m=400):
    # dense polar sampling of the disk as an independent (approximate) oracle
    r = np.linspace(0, R, m)
    th = np.linspace(0, 2 * np.pi, 4 * m, endpoint=False)
    rr, tt = np.meshgrid(r, th)
    q = np.stack([rr.ravel() * np.cos(tt.ravel()), rr.ravel() * np.sin(tt.ravel()), 0 * rr.ravel()], 1)
    return np.array([np.min(np.linalg.norm(q - x, axis=1)) for x in p])


def test_disk_against_dense_sampling(rng):
    R = 0.75
    f = AnalyticField("disk", {"radius": R})
    p = rng.uniform(-1, 1, (40, 3))
    np.testing.assert_allclose(f.eval(p), _brute_disk_distance(p, R), atol=2e-3)
    # gradient vs finite differences away from the rim circle and the disk
    _, g = f.eval_with_input_grad(p)
    np.testing.assert_allclose(g, central_diff_input(f, p, h=1e-6), atol=1e-6)


def test_spherical_cap_against_dense_sampling(rng):
    R, th0 = 1.2, 0.7
    c = np.array([0.0, 0.0, -0.9])
    f = AnalyticField("spherical_cap", {"radius": R, "center": c.tolist(), "half_angle": th0})
    t = np.linspace(0, th0, 300)
    ph = np.linspace(0, 2 * np.pi, 1200, endpoint=False)
    tt, pp = np.meshgrid(t, ph)
    q = c + R * np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], -1).reshape(-1, 3)
    p = rng.uniform(-1, 1, (40, 3))
    brute = np.array([np.min(np.linalg.norm(q - x, axis=1)) for x in p])
    np.testing.assert_allclose(f.eval(p), brute, atol=5e-3)
    _, g = f.eval_with_input_grad(p)
    np.testing.assert_allclose(g, central_diff_input(f, p, h=1e-6), atol=1e-6)


def test_unknown_analytic_kind():
    with pytest.raises(ValueError):
        AnalyticField("torus")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, small_field):
    path = tmp_path / "f.ckpt"
    tr = SceneTransform(2.5, (0.1, -0.2, 0.3))
    save_checkpoint(path, small_field, tr, {"extra": np.arange(4.0)}, {"iter": 12})
    f, t, arrays, meta = load_checkpoint(path)
    assert f.arch == small_field.arch
    assert f.params.tobytes() == small_field.params.tobytes()
    assert t == tr
    np.testing.assert_array_equal(arrays["extra"], np.arange(4.0))
    assert meta == {"iter": 12}


def test_checkpoint_layout_is_header_plus_le_doubles(tmp_path, small_field):
    import json

    path = tmp_path / "f.ckpt"
    save_checkpoint(path, small_field)
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    assert header["arrays"] == [["params", small_field.params.size]]
    payload = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    np.testing.assert_array_equal(payload, small_field.params)


def test_checkpoint_analytic(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, AnalyticField("sphere", {"radius": 0.6}))
    f, *_ = load_checkpoint(path)
    assert f.kind == "sphere" and f.params["radius"] == 0.6


def test_checkpoint_truncated(tmp_path, small_field):
    path = tmp_path / "f.ckpt"
    save_checkpoint(path, small_field)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="payload"):
        load_checkpoint(path)
