import numpy as np
import pytest

from oatdar import autodiff as ad


def fd_check(build, arrays, n_coords=8, h=1e-5, tol=1e-6, seed=0):
    """Central finite differences vs backward() on sampled coordinates."""
    rng = np.random.default_rng(seed)
    tensors = {k: ad.Tensor(v.copy(), requires_grad=True)
               for k, v in arrays.items()}
    loss = build(tensors)
    loss.backward()

    def value(arrs):
        ts = {k: ad.Tensor(v) for k, v in arrs.items()}
        return float(build(ts).data)

    for name, arr in arrays.items():
        grad = tensors[name].grad
        assert grad is not None, f"no grad for {name}"
        assert grad.shape == arr.shape
        flat_idx = rng.choice(arr.size, size=min(n_coords, arr.size),
                              replace=False)
        for idx in flat_idx:
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name].ravel()[idx] += h
            minus[name].ravel()[idx] -= h
            fd = (value(plus) - value(minus)) / (2 * h)
            ana = grad.ravel()[idx]
            err = abs(ana - fd) / max(abs(ana), abs(fd), 1e-8)
            assert err <= tol, f"{name}[{idx}]: ana={ana} fd={fd} err={err}"


def _r(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def test_add_broadcast():
    fd_check(lambda t: ad.sum_(ad.mul(ad.add(t["a"], t["b"]), t["a"])),
             {"a": _r((3, 4), 1), "b": _r((4,), 2)})


def test_sub_neg_div():
    fd_check(lambda t: ad.sum_(ad.div(ad.sub(t["a"], t["b"]), t["c"])),
             {"a": _r((2, 3), 3), "b": _r((2, 3), 4),
              "c": _r((2, 3), 5, lo=0.5, hi=2.0)})


def test_pow_exp_log():
    fd_check(lambda t: ad.sum_(ad.powc(t["a"], 3.0)), {"a": _r((5,), 6)})
    fd_check(lambda t: ad.sum_(ad.exp(t["a"])), {"a": _r((5,), 7)})
    fd_check(lambda t: ad.sum_(ad.log(t["a"])),
             {"a": _r((5,), 8, lo=0.5, hi=3.0)})


def test_reshape_transpose_concat():
    def build(t):
        x = ad.reshape(t["a"], (2, 6))
        y = ad.transpose(t["b"], (1, 0))
        return ad.sum_(ad.mul(ad.concat([x, y], axis=0), t["c"]))

    fd_check(build, {"a": _r((3, 4), 9), "b": _r((6, 2), 10),
                     "c": _r((4, 6), 11)})


def test_sum_mean_axes():
    fd_check(lambda t: ad.sum_(ad.mean_(t["a"], axis=1, keepdims=True)),
             {"a": _r((3, 5), 12)})
    fd_check(lambda t: ad.mean_(ad.sum_(t["a"], axis=0)), {"a": _r((3, 5), 13)})


def test_matmul_2d():
    fd_check(lambda t: ad.sum_(ad.matmul(t["a"], t["b"])),
             {"a": _r((3, 4), 14), "b": _r((4, 2), 15)})


def test_matmul_batched_and_broadcast():
    fd_check(lambda t: ad.sum_(ad.matmul(t["a"], t["b"])),
             {"a": _r((2, 3, 4), 16), "b": _r((2, 4, 5), 17)})
    # 2-D rhs broadcast over a 3-D batch
    fd_check(lambda t: ad.sum_(ad.matmul(t["a"], t["b"])),
             {"a": _r((2, 3, 4), 18), "b": _r((4, 5), 19)})


def test_relu_silu_sigmoid():
    # keep points away from the relu kink
    a = _r((4, 4), 20)
    a[np.abs(a) < 0.05] = 0.5
    fd_check(lambda t: ad.sum_(ad.relu(t["a"])), {"a": a})
    fd_check(lambda t: ad.sum_(ad.silu(t["a"])), {"a": _r((4, 4), 21)})
    fd_check(lambda t: ad.sum_(ad.sigmoid(t["a"])), {"a": _r((4, 4), 22)})


def test_softmax():
    fd_check(lambda t: ad.sum_(ad.mul(ad.softmax(t["a"], axis=-1), t["w"])),
             {"a": _r((3, 5), 23), "w": _r((3, 5), 24)})


def test_softmax_rows_sum_to_one():
    s = ad.softmax(ad.Tensor(_r((6, 9), 25) * 10), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s.data >= 0)


def test_conv2d():
    fd_check(lambda t: ad.sum_(ad.mul(
        ad.conv2d(t["x"], t["w"], t["b"], pad=1), t["m"])),
        {"x": _r((2, 3, 5, 5), 26), "w": _r((4, 3, 3, 3), 27),
         "b": _r((4,), 28), "m": _r((2, 4, 5, 5), 29)}, n_coords=6)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(30)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 4, 4))
    for f in range(3):
        for i in range(4):
            for j in range(4):
                want[0, f, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[f])
    assert np.allclose(out, want, atol=1e-12)


def test_avg_and_max_pool():
    fd_check(lambda t: ad.sum_(ad.mul(ad.avg_pool2(t["x"]), t["m"])),
             {"x": _r((2, 3, 4, 4), 31), "m": _r((2, 3, 2, 2), 32)})
    # distinct values keep argmax stable under the fd step
    x = np.arange(2 * 2 * 4 * 4, dtype=np.float64).reshape(2, 2, 4, 4)
    x += _r((2, 2, 4, 4), 33) * 0.1
    fd_check(lambda t: ad.sum_(ad.mul(ad.max_pool2(t["x"]), t["m"])),
             {"x": x, "m": _r((2, 2, 2, 2), 34)})


def test_max_pool_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert ad.max_pool2(ad.Tensor(x)).data[0, 0, 0, 0] == 4.0


def test_upsample_bilinear():
    uh, uw = ad.upsample2_matrices(3, 4)
    fd_check(lambda t: ad.sum_(ad.mul(
        ad.upsample2_bilinear(t["x"], uh, uw), t["m"])),
        {"x": _r((2, 2, 3, 4), 35), "m": _r((2, 2, 6, 8), 36)})


def test_upsample_shapes_and_values():
    uh, uw = ad.upsample2_matrices(2, 2)
    x = ad.Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    up = ad.upsample2_bilinear(x, uh, uw).data
    assert up.shape == (1, 1, 4, 4)
    assert up[0, 0, 0, 0] == 0.0 and up[0, 0, 3, 3] == 3.0
    # interior interpolated between neighbors
    assert 0.0 < up[0, 0, 1, 1] < 3.0


def test_grad_accumulates_on_reuse():
    a = ad.Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.sum_(ad.mul(a, a))
    loss.backward()
    assert a.grad[0] == pytest.approx(4.0)


def test_no_tape_without_requires_grad():
    a = ad.Tensor(np.ones((2, 2)))
    b = ad.Tensor(np.ones((2, 2)))
    out = ad.mul(a, b)
    assert out._vjp is None and not out.requires_grad


def test_dtype_preserved():
    x = ad.Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = ad.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = ad.silu(ad.conv2d(x, w))
    assert out.dtype == np.float32
    ad.sum_(out).backward()
    assert x.grad.dtype == np.float32


def test_group_norm():
    fd_check(lambda t: ad.sum_(ad.mul(
        ad.group_norm(t["x"], t["g"], t["b"], groups=2), t["m"])),
        {"x": _r((2, 4, 3, 3), 40), "g": _r((4,), 41, lo=0.5, hi=1.5),
         "b": _r((4,), 42), "m": _r((2, 4, 3, 3), 43)}, n_coords=6, tol=5e-6)


def test_group_norm_statistics():
    x = ad.Tensor(np.random.default_rng(44).standard_normal((3, 8, 5, 5)) * 4)
    out = ad.group_norm(x, ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)),
                        groups=4, eps=1e-12).data
    grouped = out.reshape(3, 4, -1)
    assert np.allclose(grouped.mean(axis=2), 0.0, atol=1e-9)
    assert np.allclose(grouped.std(axis=2), 1.0, atol=1e-5)
