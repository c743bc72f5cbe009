from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage, signal

from replayvo import autodiff as ad
from oracles import central_difference, rel_error


def _eval(node):
    return ad.forward(node)


def _grad_check(build, arrays, tol=1e-4, h=1e-5):
    """Compare backward() to central differences for ``sum(build(*leaves) * w)``."""
    leaves = [ad.leaf(a.copy(), dtype=np.float64) for a in arrays]
    out = build(*leaves)
    w = np.random.default_rng(123).normal(size=out.shape)
    root = ad.sum_(out * ad.const(w, dtype=np.float64))
    ad.forward(root)
    grads = ad.backward(root)

    def f(*arrs):
        ls = [ad.const(a, dtype=np.float64) for a in arrs]
        return float(ad.forward(ad.sum_(build(*ls) * ad.const(w, dtype=np.float64))))

    numeric = central_difference(f, [a.astype(np.float64).copy() for a in arrays], h=h)
    for lf, num in zip(leaves, numeric):
        ana = grads.get(lf.id, np.zeros_like(num))
        assert rel_error(ana, num) < tol, (lf, rel_error(ana, num))


def _away_from(x, points, margin=1e-3, shift=5e-3):
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += shift
    return x


# ------------------------------------------------------------ forward values

def test_scalar_add():
    assert _eval(ad.add(ad.const(2.0), ad.const(3.0))) == 5.0


def test_scalar_square():
    x = ad.leaf(3.0)
    assert _eval(x * x) == 9.0


def test_random_graph_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    a, b, c = (rng.normal(size=(2, 2)) for _ in range(3))
    na, nb, nc = (ad.leaf(v, dtype=np.float64) for v in (a, b, c))
    root = ad.exp(na * nb - nc) / (ad.abs_(nc) + 1.0)
    direct = np.exp(a * b - c) / (np.abs(c) + 1.0)
    np.testing.assert_allclose(_eval(root), direct, rtol=0, atol=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.const(np.zeros((2, 3))), ad.const(np.zeros((4, 3))))


def test_forward_non_finite():
    with pytest.raises(ad.NonFiniteError):
        _eval(ad.log(ad.const(np.array([-1.0, 1.0]))))


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    outs = [_eval(ad.conv2d(ad.const(x), ad.const(w), padding=1)) for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_conv2d_matches_scipy():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride in (1, 2):
        got = _eval(ad.conv2d(ad.const(x, np.float64), ad.const(w, np.float64),
                              ad.const(b, np.float64), stride=stride, padding=1))
        ref = np.zeros((2, 4, 7, 9))
        for n in range(2):
            for o in range(4):
                ref[n, o] = b[o] + sum(signal.correlate2d(x[n, c], w[o, c], mode="same")
                                       for c in range(3))
        np.testing.assert_allclose(got, ref[:, :, ::stride, ::stride], atol=1e-12)


def test_grid_sample_matches_map_coordinates():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(1, 2, 6, 8))
    coords = np.stack([rng.uniform(-1, 8, size=(5, 7)), rng.uniform(-1, 6, size=(5, 7))], -1)[None]
    got = _eval(ad.grid_sample(ad.const(img, np.float64), ad.const(coords, np.float64)))
    for c in range(2):
        ref = ndimage.map_coordinates(img[0, c], [coords[0, ..., 1], coords[0, ..., 0]],
                                      order=1, mode="grid-constant", cval=0.0)
        np.testing.assert_allclose(got[0, c], ref, atol=1e-12)


def test_avg_pool_and_pad():
    x = np.arange(2 * 5 * 4, dtype=np.float64).reshape(1, 2, 5, 4)
    got = _eval(ad.avg_pool2d(ad.pad2d(ad.const(x, np.float64), 1), 3))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    ref = ndimage.uniform_filter(padded, size=(1, 1, 3, 3))[:, :, 1:-1, 1:-1]
    np.testing.assert_allclose(got, ref, atol=1e-12)


# ------------------------------------------------------------ backward values

def test_square_gradient():
    x = ad.leaf(3.0, dtype=np.float64)
    root = x * x
    ad.forward(root)
    assert ad.backward(root)[x.id] == pytest.approx(6.0)


def test_constant_graph_has_no_gradients():
    c = ad.const(np.ones(4))
    root = ad.sum_(c)
    ad.forward(root)
    assert ad.backward(root) == {}


def test_backward_before_forward():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ad.GraphStateError):
        ad.backward(ad.sum_(x))


def test_backward_needs_scalar_root():
    x = ad.leaf(np.ones(3))
    root = x * 2.0
    ad.forward(root)
    with pytest.raises(ad.ShapeError):
        ad.backward(root)


def test_random_ten_op_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 1.5, size=(3, 4))
    b = rng.uniform(0.5, 1.5, size=(4, 2))

    def build(x, y):
        z = ad.matmul(x, y)                    # 1
        z = ad.exp(z * 0.1)                    # 2, 3
        z = ad.sqrt(z + 1.0)                   # 4, 5
        z = ad.log(z) / (ad.sum_(x) + 2.0)     # 6, 7, 8
        return ad.mean(ad.sigmoid(z) - z * z)  # 9, 10, 11

    _grad_check(build, [a, b], tol=1e-4)


def test_linearity_of_backward():
    rng = np.random.default_rng(4)
    x = ad.leaf(rng.normal(size=5), dtype=np.float64)
    g1 = ad.sum_(ad.sin(x) * x)
    g2 = ad.mean(ad.exp(x * 0.3))
    both = g1 + g2
    for r in (g1, g2, both):
        ad.forward(r)
    d1, d2, d12 = ad.backward(g1)[x.id], ad.backward(g2)[x.id], ad.backward(both)[x.id]
    np.testing.assert_allclose(d12, d1 + d2, rtol=1e-12)


# --------------------------------------------- per-primitive gradient checks

def _unary_cases(rng):
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.2, 2.0, size=(3, 4))
    yield "neg", lambda a: ad.neg(a), [x]
    yield "exp", lambda a: ad.exp(a), [x]
    yield "log", lambda a: ad.log(a), [pos]
    yield "sqrt", lambda a: ad.sqrt(a), [pos]
    yield "abs", lambda a: ad.abs_(a), [_away_from(x, [0.0])]
    yield "sin", lambda a: ad.sin(a), [x]
    yield "cos", lambda a: ad.cos(a), [x]
    yield "relu", lambda a: ad.relu(a), [_away_from(x, [0.0])]
    yield "sigmoid", lambda a: ad.sigmoid(a), [x]
    yield "clamp", lambda a: ad.clamp(a, -0.5, 0.5), [_away_from(x, [-0.5, 0.5])]
    yield "sum", lambda a: ad.sum_(a, axis=1), [x]
    yield "mean", lambda a: ad.mean(a, axis=0, keepdims=True), [x]
    yield "reshape", lambda a: ad.reshape(a, (2, 6)), [x]
    yield "transpose", lambda a: ad.transpose(a, (1, 0)), [x]
    yield "getitem", lambda a: a[1:, ::2], [x]
    yield "broadcast", lambda a: ad.broadcast_to(a, (2, 3, 4)), [x]
    yield "rodrigues_a", lambda a: ad.rodrigues_a(a), [rng.uniform(0, 3, size=(6,))]
    yield "rodrigues_b", lambda a: ad.rodrigues_b(a), [rng.uniform(0, 3, size=(6,))]
    yield "rodrigues_small", lambda a: ad.rodrigues_a(a) + ad.rodrigues_b(a), \
        [rng.uniform(0.0, 5e-5, size=(6,))]


def _binary_cases(rng):
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    row = rng.normal(size=(1, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    yield "add", ad.add, [x, row]
    yield "sub", ad.sub, [x, y]
    yield "mul", ad.mul, [x, row]
    yield "div", ad.div, [x, pos]
    gap = np.where(np.abs(x - y) < 1e-3, 5e-3, 0.0)
    yield "minimum", ad.minimum, [x + gap, y]
    yield "matmul", ad.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]
    yield "concat", lambda a, b: ad.concat([a, b], axis=1), [x, rng.normal(size=(3, 2))]


def _image_cases(rng):
    img = rng.normal(size=(2, 3, 6, 7))
    yield "conv2d_s1", lambda a, w, b: ad.conv2d(a, w, b, stride=1, padding=1), \
        [img, rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]
    yield "conv2d_s2", lambda a, w: ad.conv2d(a, w, stride=2, padding=1), \
        [img, rng.normal(size=(2, 3, 3, 3))]
    yield "avg_pool2d", lambda a: ad.avg_pool2d(a, 3, 1), [img]
    yield "pad2d_reflect", lambda a: ad.pad2d(a, 1, "reflect"), [img]
    yield "pad2d_zero", lambda a: ad.pad2d(a, 2, "zero"), [img]
    yield "upsample2x", lambda a: ad.upsample2x(a), [img]
    coords = np.stack([rng.uniform(-1.5, 7.5, size=(2, 4, 5)),
                       rng.uniform(-1.5, 6.5, size=(2, 4, 5))], -1)
    frac = coords - np.floor(coords)
    coords = np.where(frac < 1e-3, coords + 5e-3, coords)
    coords = np.where(frac > 1 - 1e-3, coords - 5e-3, coords)
    yield "grid_sample", ad.grid_sample, [img, coords]


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    for gen in (_unary_cases, _binary_cases, _image_cases):
        for name, build, arrays in gen(rng):
            try:
                _grad_check(build, arrays, tol=1e-4)
            except AssertionError as exc:
                raise AssertionError(f"{name}: {exc}") from None


# ------------------------------------------------------------------- optimizer

def _group(values, trainable=True, name="g"):
    return ad.ParamGroup(name, [ad.leaf(np.asarray(v, dtype=np.float32)) for v in values], trainable)


def test_adam_zero_gradients_only_advance_timestep():
    grp = _group([np.array([1.0, -2.0]), np.array([[0.5]])])
    before = [t.value.copy() for t in grp.tensors]
    state = ad.OptState(lr=0.1)
    grads = {t.id: np.zeros(t.shape, dtype=np.float32) for t in grp.tensors}
    ad.optimizer_step([grp], grads, state)
    assert state.step == 1
    for t, b in zip(grp.tensors, before):
        assert t.value.tobytes() == b.tobytes()


def test_adam_first_step_moves_by_lr():
    grp = _group([np.array(1.0)])
    p = grp.tensors[0]
    ad.optimizer_step([grp], {p.id: np.array(1.0)}, ad.OptState(lr=0.1))
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    assert float(p.value) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-6)


def test_adam_matches_hand_recurrence():
    grp = _group([np.array([0.3, -0.7])])
    p = grp.tensors[0]
    state = ad.OptState(lr=0.01)
    x = np.array([0.3, -0.7])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate([np.array([1.0, -2.0]), np.array([0.5, 0.5]), np.array([-1.0, 3.0])], 1):
        ad.optimizer_step([grp], {p.id: g.astype(np.float32)}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.value, x, atol=1e-6)


def test_frozen_group_is_untouched():
    frozen = _group([np.array([1.0, 2.0])], trainable=False, name="enc")
    live = _group([np.array([1.0, 2.0])], name="dec")
    before = frozen.tensors[0].value.tobytes()
    grads = {t.id: np.ones(2, dtype=np.float32) for t in frozen.tensors + live.tensors}
    ad.optimizer_step([frozen, live], grads, ad.OptState(lr=0.1))
    assert frozen.tensors[0].value.tobytes() == before
    assert not np.array_equal(live.tensors[0].value, [1.0, 2.0])


def test_adam_gradient_shape_mismatch():
    grp = _group([np.zeros(3)])
    with pytest.raises(ad.ShapeError):
        ad.optimizer_step([grp], {grp.tensors[0].id: np.zeros(4)}, ad.OptState())


def test_tensor_in_two_groups_rejected():
    t = ad.leaf(np.zeros(2))
    with pytest.raises(ValueError):
        ad.optimizer_step([ad.ParamGroup("a", [t]), ad.ParamGroup("b", [t])],
                          {t.id: np.zeros(2)}, ad.OptState())


# ------------------------------------------------------------------ checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    groups = [_group([rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)], name="depth.encoder"),
              _group([rng.normal(size=(7,))], trainable=False, name="pose.decoder")]
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, groups)
    loaded = ad.load_checkpoint(path)
    assert list(loaded) == ["depth.encoder", "pose.decoder"]
    assert loaded["pose.decoder"][0] is False
    for grp in groups:
        for t, a in zip(grp.tensors, loaded[grp.name][1]):
            assert a.dtype == np.float32
            assert t.value.tobytes() == a.tobytes()
    ad.save_checkpoint(tmp_path / "again.bin", loaded)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_checkpoint(p)


def test_snapshot_is_immutable_and_isolated():
    grp = _group([np.array([1.0, 2.0])])
    snap = ad.snapshot([grp])
    arr = snap["g"][1][0]
    with pytest.raises(ValueError):
        arr[0] = 5.0
    ad.optimizer_step([grp], {grp.tensors[0].id: np.ones(2, dtype=np.float32)}, ad.OptState(lr=0.1))
    np.testing.assert_array_equal(arr, [1.0, 2.0])


def test_no_grad_blocks_tracking():
    x = ad.leaf(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
