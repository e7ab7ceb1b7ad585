import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvdalab import nn
from pvdalab.errors import (
    MalformedHeaderError,
    NumericalError,
    ShapeMismatchError,
    TruncatedPayloadError,
)


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else np.linalg.norm(a - b) / den


def test_linear_identity():
    np.testing.assert_array_equal(nn.linear_forward(np.eye(2), np.zeros(2), [1.0, 2.0]), [1.0, 2.0])


def test_linear_backward_rows():
    x = np.array([3.0, -1.0, 2.0])
    w = np.arange(6.0).reshape(2, 3)
    dw, db, dx = nn.linear_backward(w, x, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(dw[0], x)
    np.testing.assert_array_equal(dw[1], 0.0)
    np.testing.assert_array_equal(db, [1.0, 0.0])
    np.testing.assert_array_equal(dx, w[0])


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        nn.linear_forward(np.eye(2), np.zeros(2), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        nn.linear_backward(np.eye(2), np.ones(2), np.ones(3))


@pytest.mark.parametrize("seed", range(5))
def test_linear_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(2, 4))
    up = rng.normal(size=(2, 3))

    def f_w(wv):
        return float((nn.linear_forward(wv, b, x) * up).sum())

    def f_x(xv):
        return float((nn.linear_forward(w, b, xv) * up).sum())

    def f_b(bv):
        return float((nn.linear_forward(w, bv, x) * up).sum())

    dw, db, dx = nn.linear_backward(w, x, up)
    assert rel_err(dw, central_diff(f_w, w)) < 1e-6
    assert rel_err(db, central_diff(f_b, b)) < 1e-6
    assert rel_err(dx, central_diff(f_x, x)) < 1e-6


def test_relu_values():
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    x = -np.abs(np.random.default_rng(0).normal(size=5))
    np.testing.assert_array_equal(nn.relu(x), 0.0)
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(5)), 0.0)
    assert nn.relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_relu_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    x = x[np.abs(x) >= 1e-4]
    up = rng.normal(size=x.shape)
    num = central_diff(lambda v: float((nn.relu(v) * up).sum()), x)
    assert rel_err(nn.relu_backward(x, up), num) < 1e-6


def test_softmax_examples():
    np.testing.assert_array_equal(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    p = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)
    assert nn.cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    with pytest.raises(ValueError):
        nn.cross_entropy(np.array([0.5, 0.5]), 2)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((1, 2)), [3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(logits):
    p = nn.softmax(np.array(logits))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_ce_gradient_property(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(3, 5))
    labels = rng.integers(0, 5, size=3)
    losses, grad = nn.softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(losses, [nn.cross_entropy(nn.softmax(l), y) for l, y in zip(logits, labels)], rtol=1e-10)
    num = central_diff(lambda z: float(nn.softmax_cross_entropy(z, labels)[0].sum()), logits)
    assert rel_err(grad, num) < 1e-4


def test_grl():
    g = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(nn.grl_backward(g, 1.0), -g)
    np.testing.assert_array_equal(nn.grl_backward(g, 0.0), 0.0)
    np.testing.assert_array_equal(nn.grl_backward(np.array([1.0, -1.0]), 2.0), [-2.0, 2.0])
    assert nn.grl_forward(g) is g


def test_sgd_examples():
    p = {"w": np.array([0.5, -1.0])}
    out, _ = nn.sgd_step(p, {"w": np.zeros(2)}, 0.1, 0.9)
    np.testing.assert_array_equal(out["w"], p["w"])

    out, _ = nn.sgd_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, 0.1, 0.0)
    assert out["w"] == pytest.approx(-0.1)

    # hand recurrence: v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
    params, vel = {"w": np.array(0.0)}, {}
    params, vel = nn.sgd_step(params, {"w": np.array(1.0)}, 0.1, 0.9, vel)
    assert params["w"] == pytest.approx(-0.1, abs=1e-15)
    params, vel = nn.sgd_step(params, {"w": np.array(1.0)}, 0.1, 0.9, vel)
    assert params["w"] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_rejects_bad_gradients():
    with pytest.raises(ValueError):
        nn.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)
    with pytest.raises(NumericalError):
        nn.sgd_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, 0.1)


def _stack(params, x, labels, with_grl=False, alpha=1.0):
    """linear -> relu -> [grl] -> linear -> softmax CE (sum over rows)."""
    h1 = nn.linear_forward(params["w1"], params["b1"], x)
    a1 = nn.relu(h1)
    a1g = nn.grl_forward(a1) if with_grl else a1
    z = nn.linear_forward(params["w2"], params["b2"], a1g)
    losses, dz = nn.softmax_cross_entropy(z, labels)
    grads = {}
    grads["w2"], grads["b2"], da = nn.linear_backward(params["w2"], a1g, dz)
    if with_grl:
        da = nn.grl_backward(da, alpha)
    dh = nn.relu_backward(h1, da)
    grads["w1"], grads["b1"], _ = nn.linear_backward(params["w1"], x, dh)
    return float(losses.sum()), grads


def _stack_params(rng):
    return {
        "w1": rng.normal(size=(6, 4)),
        "b1": rng.normal(size=6) * 0.1,
        "w2": rng.normal(size=(3, 6)),
        "b2": rng.normal(size=3) * 0.1,
    }


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_stack(seed):
    rng = np.random.default_rng(seed)
    params = _stack_params(rng)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
    report = nn.grad_check(lambda p: _stack(p, x, y), params)
    assert report.passed, report.per_param
    assert report.max_rel_error < 1e-4


def test_grl_negates_upstream_gradients():
    rng = np.random.default_rng(3)
    params = _stack_params(rng)
    x, y = rng.normal(size=(4, 4)), rng.integers(0, 3, size=4)
    _, plain = _stack(params, x, y)
    _, rev = _stack(params, x, y, with_grl=True, alpha=1.0)
    np.testing.assert_array_equal(rev["w1"], -plain["w1"])
    np.testing.assert_array_equal(rev["b1"], -plain["b1"])
    np.testing.assert_array_equal(rev["w2"], plain["w2"])
    _, rev2 = _stack(params, x, y, with_grl=True, alpha=2.5)
    np.testing.assert_allclose(rev2["w1"], -2.5 * plain["w1"], rtol=1e-14)


def test_grad_check_constant():
    report = nn.grad_check(lambda p: (3.0, {"w": np.zeros(3)}), {"w": np.ones(3)})
    assert report.max_rel_error == 0.0 and report.passed


def test_grad_check_flags_wrong_gradient():
    report = nn.grad_check(lambda p: (float((p["w"] ** 2).sum()), {"w": 3 * p["w"]}), {"w": np.ones(3)})
    assert not report.passed


def test_mlp_matches_manual_composition():
    rng = np.random.default_rng(0)
    mlp = nn.MLP("f", [4, 5, 3])
    params = {}
    mlp.init(params, rng)
    x = rng.normal(size=(2, 4))
    y, _ = mlp.forward(params, x)
    manual = nn.linear_forward(params["f.1.weight"], params["f.1.bias"], nn.relu(nn.linear_forward(params["f.0.weight"], params["f.0.bias"], x)))
    np.testing.assert_array_equal(y, manual)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    mlp = nn.MLP("g", [3, 7, 4, 2], activate_last=True)
    params = {}
    mlp.init(params, rng)
    for name in params:
        if name.endswith("bias"):
            params[name] = rng.normal(size=params[name].shape) * 0.5  # keep pre-activations off the kink
    x = rng.normal(size=(6, 3))
    up = rng.normal(size=(6, 2))

    def fn(p):
        y, tape = mlp.forward(p, x)
        grads = {}
        mlp.backward(p, tape, up, grads)
        return float((y * up).sum()), grads

    assert nn.grad_check(fn, params).passed


def test_training_step_determinism():
    def one_step():
        rng = np.random.default_rng(42)
        params = _stack_params(rng)
        x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
        _, g = _stack(params, x, y)
        return nn.sgd_step(params, g, 0.01, 0.9)[0]

    a, b = one_step(), one_step()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.weight": rng.normal(size=(3, 2)), "scalar": np.array(2.5), "vec": rng.normal(size=4), "ünï": np.zeros((0, 3))}
    path = tmp_path / "p.bin"
    nn.save_checkpoint(path, tensors)
    back = nn.load_checkpoint(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float64).tobytes()
    assert path.read_bytes()[:8] == b"PVDAPAR1"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "p.bin"
    nn.save_checkpoint(path, {"w": np.ones((2, 2))})
    blob = path.read_bytes()
    (tmp_path / "m").write_bytes(b"PVDALAB1" + blob[8:])
    with pytest.raises(MalformedHeaderError):
        nn.load_checkpoint(tmp_path / "m")
    (tmp_path / "t").write_bytes(blob[:-1])
    with pytest.raises(TruncatedPayloadError):
        nn.load_checkpoint(tmp_path / "t")
    (tmp_path / "x").write_bytes(blob + b"\x00")
    with pytest.raises(ShapeMismatchError):
        nn.load_checkpoint(tmp_path / "x")
