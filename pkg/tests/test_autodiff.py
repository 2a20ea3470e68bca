import numpy as np
import pytest

from embedmask import autodiff as ad
from embedmask.autodiff import Tensor


def _t(arr, rg=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


def test_exp_identity():
    assert float(ad.exp(_t([0.0])).data[0]) == pytest.approx(1.0)


def test_relu_definition():
    out = ad.relu(_t([-2.0, 3.0]))
    assert np.allclose(out.data, [0.0, 3.0])


def test_sqdist_zero():
    out = ad.sqdist(_t([1.0, 2.0]), _t([1.0, 2.0]))
    assert float(out.data) == 0.0


def test_backward_square():
    x = _t([3.0])
    ad.backward(ad.tsum(x * x))
    assert np.allclose(x.grad, [6.0])


def test_backward_exp():
    x = _t([0.0])
    ad.backward(ad.tsum(ad.exp(x)))
    assert np.allclose(x.grad, [1.0])


def test_backward_rejects_nonscalar():
    x = _t([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * x)


def test_backward_twice_identical():
    # repeated backward on the same recorded graph recomputes, it does
    # not accumulate
    x = _t([[1.0, -2.0], [0.5, 3.0]])
    root = ad.tsum(ad.exp(x) * x)
    ad.backward(root)
    first = x.grad.copy()
    ad.backward(root)
    assert np.array_equal(x.grad, first)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(_t([1.0, 2.0]), _t([1.0, 2.0, 3.0]))


def test_checking_mode_rejects_nonfinite():
    with ad.checking():
        with pytest.raises(ValueError, match="non-finite"):
            ad.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))
    # outside checking mode the same call is permitted
    ad.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_scalar_broadcast_only():
    x = _t(np.ones((2, 3)))
    out = x * 2.0 + 1.0
    assert out.shape == (2, 3)
    with pytest.raises(ad.ShapeError):
        ad.mul(x, _t(np.ones(3)))


def _rand(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


_PRIMITIVE_CASES = [
    ("add", lambda r: (ad.add, [_rand(r, (3, 4)), _rand(r, (3, 4))])),
    ("add_scalar", lambda r: (ad.add, [_rand(r, (3, 4)), _rand(r, ())])),
    ("sub", lambda r: (ad.sub, [_rand(r, (3, 4)), _rand(r, (3, 4))])),
    ("mul", lambda r: (ad.mul, [_rand(r, (5,)), _rand(r, (5,))])),
    ("div", lambda r: (ad.div, [_rand(r, (5,)), r.uniform(0.5, 2.0, 5)])),
    ("neg", lambda r: (ad.neg, [_rand(r, (4,))])),
    ("exp", lambda r: (ad.exp, [_rand(r, (4,))])),
    ("log", lambda r: (ad.log, [r.uniform(0.2, 3.0, 4)])),
    ("sqrt", lambda r: (ad.sqrt, [r.uniform(0.2, 3.0, 4)])),
    ("relu", lambda r: (ad.relu, [_rand(r, (6,)) + 0.05])),
    ("maximum", lambda r: (lambda t: ad.maximum(t, 0.3), [r.uniform(-1, 1, 6) + 1e-3])),
    ("sigmoid", lambda r: (ad.sigmoid, [_rand(r, (6,))])),
    ("sum", lambda r: (ad.tsum, [_rand(r, (3, 4))])),
    ("sum_axis", lambda r: (lambda t: ad.tsum(ad.tsum(t, axis=0)), [_rand(r, (3, 4))])),
    ("mean", lambda r: (ad.tmean, [_rand(r, (3, 4))])),
    ("mean_axis", lambda r: (lambda t: ad.tsum(ad.tmean(t, axis=1)), [_rand(r, (3, 4))])),
    ("matmul", lambda r: (ad.matmul, [_rand(r, (3, 4)), _rand(r, (4, 2))])),
    ("reshape", lambda r: (lambda t: ad.reshape(t, (6,)), [_rand(r, (2, 3))])),
    ("transpose", lambda r: (lambda t: ad.transpose(t, (1, 0)), [_rand(r, (2, 3))])),
    ("take_rows", lambda r: (lambda t: t[np.array([0, 2, 2])], [_rand(r, (4, 3))])),
    ("sqdist", lambda r: (ad.sqdist, [_rand(r, (5, 3)), _rand(r, (5, 3))])),
    ("sqdist_center", lambda r: (ad.sqdist, [_rand(r, (5, 3)), _rand(r, (3,))])),
    ("conv2d_s1", lambda r: (lambda x, w, b: ad.conv2d(x, w, b, stride=1),
                             [_rand(r, (2, 5, 5)), _rand(r, (3, 2, 3, 3)), _rand(r, (3,))])),
    ("conv2d_s2", lambda r: (lambda x, w, b: ad.conv2d(x, w, b, stride=2),
                             [_rand(r, (2, 6, 5)), _rand(r, (3, 2, 3, 3)), _rand(r, (3,))])),
    ("resize_up", lambda r: (lambda t: ad.bilinear_resize(t, (7, 6)), [_rand(r, (4, 3, 2))])),
    ("resize_down", lambda r: (lambda t: ad.bilinear_resize(t, (3, 2)), [_rand(r, (5, 6))])),
    ("sigmoid_softplus", lambda r: (ad.softplus, [_rand(r, (6,))])),
    ("minimum_t", lambda r: (ad.minimum_t, [_rand(r, (6,)), _rand(r, (6,)) + 1e-3])),
]


@pytest.mark.parametrize("idx,name,case", [(i, c[0], c[1]) for i, c in enumerate(_PRIMITIVE_CASES)],
                         ids=[c[0] for c in _PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(idx, name, case):
    # 100+ randomized trials in aggregate across the suite
    for trial in range(4):
        rng = np.random.default_rng(10_000 + idx * 97 + trial)
        op, arrays = case(rng)
        pts = [Tensor(a, requires_grad=True) for a in arrays]
        # a fixed random weighting makes the scalarized objective exercise
        # every output coordinate
        w_fixed = np.asarray(np.random.default_rng(trial).uniform(
            0.5, 1.5, size=op(*[Tensor(a) for a in arrays]).shape))

        def g(*ts):
            out = op(*ts)
            return ad.tsum(out * Tensor(w_fixed, dtype=np.float64))

        err = ad.finite_diff_check(g, pts, step=1e-5)
        assert err < 1e-4, f"{name} trial {trial}: rel err {err}"


def test_finite_diff_constant_gradient():
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, 7), requires_grad=True)
    err = ad.finite_diff_check(lambda t: ad.tsum(t), x, step=1e-4)
    assert err < 1e-10


def test_finite_diff_rejects_bad_step():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError, match="step"):
        ad.finite_diff_check(lambda t: ad.tsum(t), x, step=0.0)


def test_finite_diff_reports_nonfinite_coordinate():
    # finite at the base point, log(0) at one perturbed point
    x = Tensor(np.array([1.0, 1e-4]))
    with pytest.raises(ValueError, match="coordinate 1"):
        ad.finite_diff_check(lambda t: ad.tsum(ad.log(t)), x, step=1e-4)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-1, 1, (3, 8, 9)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ad.conv2d(x, Tensor(w))
    assert np.allclose(out.data, x.data)


def test_conv2d_stride2_extents():
    x = Tensor(np.zeros((1, 64, 64)))
    w = Tensor(np.zeros((4, 1, 3, 3)))
    assert ad.conv2d(x, w, stride=2).shape == (4, 32, 32)
    with pytest.raises(ValueError, match="stride"):
        ad.conv2d(x, w, stride=3)


def test_conv2d_channel_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match="mismatch"):
        ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv2d_matches_direct_computation():
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, (2, 6, 7))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    for stride in (1, 2):
        got = ad.conv2d(Tensor(x), Tensor(w), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ho = (6 + 2 - 3) // stride + 1
        wo = (7 + 2 - 3) // stride + 1
        ref = np.zeros((3, ho, wo))
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[o, i, j] = (patch * w[o]).sum()
        assert np.allclose(got, ref, atol=1e-12)


def test_bilinear_resize_identity():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (6, 5, 2))
    out = ad.bilinear_resize(Tensor(x), (6, 5))
    assert np.array_equal(out.data, x)


def test_bilinear_resize_constant_map():
    x = np.full((4, 4), 0.7)
    out = ad.bilinear_resize(Tensor(x), (9, 3))
    assert np.allclose(out.data, 0.7)


def test_bilinear_resize_hand_case():
    # 2x2 [[0,1],[2,3]] -> 3x3, corner aligned: center is the mean 1.5
    out = ad.bilinear_resize(Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])), (3, 3))
    expect = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    assert np.allclose(out.data, expect)


def test_bilinear_resize_rejects_zero_extent():
    with pytest.raises(ValueError, match="extents"):
        ad.bilinear_resize(Tensor(np.zeros((2, 2))), (0, 3))


def test_tensor_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.uniform(-3, 3, (2, 3, 4)).astype(np.float32)
    path = tmp_path / "t.emtn"
    ad.save_tensor(path, arr)
    back = ad.load_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"EMTN"


def test_tensor_serialization_rejects_corruption(tmp_path):
    path = tmp_path / "t.emtn"
    ad.save_tensor(path, np.ones((2, 2), dtype=np.float32))
    data = bytearray(path.read_bytes())
    data[0] = ord("X")
    bad = tmp_path / "bad.emtn"
    bad.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="magic"):
        ad.load_tensor(bad)
    trunc = tmp_path / "trunc.emtn"
    trunc.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        ad.load_tensor(trunc)


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.tsum(x * x)
    assert not out._tracked()


def test_nonparticipating_tensor_untouched():
    x = Tensor(np.ones(3), requires_grad=True)
    bystander = Tensor(np.ones(3), requires_grad=True)
    bystander.grad = np.full(3, 7.0)
    ad.backward(ad.tsum(x))
    assert np.array_equal(bystander.grad, np.full(3, 7.0))
    assert np.array_equal(x.grad, np.ones(3))
