"""Finite-difference and naive-oracle checks for the autodiff engine."""
import numpy as np
import pytest

from coronagan import autodiff as ad
from coronagan.autodiff import Tensor


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(build, arrays, eps=1e-6, tol=1e-7):
    """build(tensors) -> scalar Tensor; compares backward against FD."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    for k, (t, a) in enumerate(zip(tensors, arrays)):
        def f(_a, k=k):
            probe = [Tensor(arr) for arr in arrays]
            return build(probe).item()

        num = fd_grad(f, a, eps=eps)
        assert t.grad is not None, f"input {k} got no gradient"
        err = np.abs(t.grad - num).max()
        scale = max(np.abs(num).max(), 1e-8)
        assert err / scale < tol, f"input {k}: max abs err {err}, scale {scale}"


def naive_conv2d(x, w, b, stride, padding, pad_mode="zeros"):
    """Direct quadruple-loop convolution used as the independent oracle."""
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        if pad_mode == "zeros":
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode="symmetric")
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    out = np.zeros((bs, cout, oh, ow))
    for n in range(bs):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = x[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


def naive_conv_transpose2d(x, w, b, stride, padding, output_padding):
    bs, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    full = np.zeros((bs, cout, (h - 1) * stride + kh + output_padding, (wd - 1) * stride + kw + output_padding))
    for n in range(bs):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += (
                        x[n, ci, i, j] * w[ci]
                    )
    out = full[:, :, padding : padding + oh, padding : padding + ow]
    return out + b.reshape(1, cout, 1, 1)


class TestForwardOracles:
    def test_conv2d_matches_naive(self):
        rng = np.random.default_rng(0)
        for stride, padding, mode in [(1, 0, "zeros"), (2, 1, "zeros"), (1, 2, "zeros"), (1, 1, "symmetric"), (1, 3, "symmetric")]:
            x = rng.normal(size=(2, 3, 8, 9))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, pad_mode=mode)
            want = naive_conv2d(x, w, b, stride, padding, mode)
            np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_conv2d_7x7_stem_matches_naive(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 8, 8))
        w = rng.normal(size=(2, 1, 7, 7))
        b = rng.normal(size=2)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=3, pad_mode="symmetric")
        want = naive_conv2d(x, w, b, 1, 3, "symmetric")
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_conv_transpose2d_matches_naive(self):
        rng = np.random.default_rng(2)
        for stride, padding, outpad in [(2, 1, 1), (2, 0, 0), (1, 1, 0), (2, 1, 0)]:
            x = rng.normal(size=(2, 3, 5, 4))
            w = rng.normal(size=(3, 2, 3, 3))
            b = rng.normal(size=2)
            got = ad.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, output_padding=outpad)
            want = naive_conv_transpose2d(x, w, b, stride, padding, outpad)
            np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_conv_transpose_doubles_size(self):
        x = np.zeros((1, 2, 6, 10))
        w = np.zeros((2, 3, 3, 3))
        out = ad.conv_transpose2d(Tensor(x), Tensor(w), stride=2, padding=1, output_padding=1)
        assert out.shape == (1, 3, 12, 20)

    def test_instance_norm_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.normal(2.0, 3.0, size=(2, 4, 6, 5))
        out = ad.instance_norm(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(2, 3)), 1, atol=1e-4)

    def test_cross_entropy_uniform_logits(self):
        logits = np.zeros((2, 3, 4, 4))
        labels = np.random.default_rng(4).integers(0, 3, size=(2, 4, 4))
        loss = ad.cross_entropy_mean(Tensor(logits), labels)
        assert abs(loss.item() - np.log(3)) < 1e-12

    def test_cross_entropy_rejects_bad_labels(self):
        logits = Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ValueError, match="label values"):
            ad.cross_entropy_mean(logits, np.full((1, 2, 2), 3))


class TestGradients:
    def test_arithmetic_and_reductions(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))

        check_grads(lambda ts: ad.mean_all(ad.square(ts[0] - 1.5) * ts[1] + ts[0]), [a, b])
        check_grads(lambda ts: ad.mean_all(ad.absolute(ts[0] - ts[1])), [a, b])

    def test_broadcast_add(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(1, 3, 1))
        check_grads(lambda ts: ad.mean_all(ad.square(ts[0] + ts[1])), [a, b])

    def test_activations(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 4, 4)) + 0.05  # keep away from relu kink
        check_grads(lambda ts: ad.mean_all(ad.square(ad.relu(ts[0]))), [x])
        check_grads(lambda ts: ad.mean_all(ad.square(ad.leaky_relu(ts[0], 0.2))), [x])
        check_grads(lambda ts: ad.mean_all(ad.square(ad.sigmoid(ts[0]))), [x])

    @pytest.mark.parametrize(
        "stride,padding,mode",
        [(1, 0, "zeros"), (2, 1, "zeros"), (1, 1, "symmetric"), (1, 3, "symmetric")],
    )
    def test_conv2d_grads(self, stride, padding, mode):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 2, 6, 7))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        b = rng.normal(size=3)

        def build(ts):
            return ad.mean_all(ad.square(ad.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding, pad_mode=mode)))

        check_grads(build, [x, w, b])

    def test_conv2d_7x7_symmetric_grads(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(1, 1, 8, 8))
        w = rng.normal(size=(2, 1, 7, 7)) * 0.3
        b = rng.normal(size=2)

        def build(ts):
            return ad.mean_all(ad.square(ad.conv2d(ts[0], ts[1], ts[2], stride=1, padding=3, pad_mode="symmetric")))

        check_grads(build, [x, w, b])

    def test_conv_transpose2d_grads(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        b = rng.normal(size=2)

        def build(ts):
            return ad.mean_all(ad.square(ad.conv_transpose2d(ts[0], ts[1], ts[2], stride=2, padding=1, output_padding=1)))

        check_grads(build, [x, w, b])

    def test_instance_norm_grads(self):
        # weight the normalized output by a fixed field: the raw mean of
        # IN(x)^2 is constant by construction and would hide real gradients
        rng = np.random.default_rng(15)
        x = rng.normal(size=(2, 3, 5, 4))
        c = Tensor(rng.normal(size=(2, 3, 5, 4)))
        check_grads(lambda ts: ad.mean_all(ad.square(ad.instance_norm(ts[0]) * c + 0.3)), [x], tol=1e-6)

    def test_cross_entropy_grads(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(2, 3, 4, 4))
        labels = rng.integers(0, 3, size=(2, 4, 4))
        check_grads(lambda ts: ad.cross_entropy_mean(ts[0], labels), [logits])

    def test_residual_fan_in_accumulation(self):
        # the same upstream grad array reaches x twice through x + f(x)
        rng = np.random.default_rng(18)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3)) * 0.5
        b = rng.normal(size=2)

        def build(ts):
            y = ts[0] + ad.conv2d(ts[0], ts[1], ts[2], padding=1)
            return ad.mean_all(ad.square(y))

        check_grads(build, [x, w, b])

    def test_1x1_spatial_symmetric_pad(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(1, 3, 1, 1))
        w = rng.normal(size=(3, 3, 3, 3)) * 0.5
        b = rng.normal(size=3)

        def build(ts):
            return ad.mean_all(ad.square(ad.conv2d(ts[0], ts[1], ts[2], padding=1, pad_mode="symmetric")))

        check_grads(build, [x, w, b])


class TestEngineBehavior:
    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.no_grad():
            y = ad.mean_all(ad.square(x))
        assert not y.requires_grad
        assert y._parents == ()

    def test_detach_cuts_flow(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.mean_all(ad.square(x.detach()))
        assert not y.requires_grad

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        ad.mean_all(ad.square(x)).backward()
        first = x.grad.copy()
        ad.mean_all(ad.square(x)).backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_dtype_preserved_float32(self):
        x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32), requires_grad=True)
        w = Tensor(np.ones((2, 2, 3, 3), dtype=np.float32), requires_grad=True)
        y = ad.mean_all(ad.absolute(ad.sigmoid(ad.conv2d(x, w, padding=1)) - 0.5))
        assert y.dtype == np.float32
        y.backward()
        assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
