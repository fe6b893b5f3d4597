import math

import numpy as np
import pytest

from oracles import central_difference, cross_entropy_oracle
from stackseg import autodiff as ad
from stackseg.autodiff import Tensor, checkpoint
from stackseg.errors import LabelOutOfRange, ScheduleExhausted, ShapeMismatch

FD_TOL = 1e-4


def rel_err(a, b):
    return abs(a - b) / max(1e-6, abs(a) + abs(b))


def gradcheck(build, inputs, rng, probes=6):
    """``build(*tensors)`` -> Tensor. Checks d<r, out>/d input against central differences."""
    out = build(*inputs)
    r = rng.standard_normal(out.shape) if out.data.ndim else np.array(1.0)
    for t in inputs:
        t.zero_grad()
    out.backward(r)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        for _ in range(probes):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            f = lambda: float((build(*[Tensor(u.data) for u in inputs]).data * r).sum())
            worst = max(worst, rel_err(central_difference(f, t.data, idx), t.grad[idx]))
    return worst


def leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


SEEDS = range(20)


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x)
        x3 = rng.standard_normal((1, 1, 3, 4, 2))
        assert np.array_equal(ad.conv3d(Tensor(x3), Tensor(np.ones((1, 1, 1, 1, 1)))).data, x3)

    def test_counting(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")
        assert out.shape == (1, 1, 3, 3) and np.all(out.data == 9.0)

    def test_cross_correlation_not_convolution(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        k = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ad.conv2d(Tensor(x), Tensor(k)).data[0, 0]
        # a centred impulse reproduces the flipped kernel under cross-correlation
        assert np.array_equal(out, k[0, 0, ::-1, ::-1])

    def test_stride(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.conv2d(Tensor(np.ones((2, 1, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_even_kernel_same(self):
        with pytest.raises(ShapeMismatch):
            ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    @pytest.mark.parametrize("c_in,c_out", [(2, 4), (4, 2)])  # both execution routes
    def test_gradcheck_2d(self, c_in, c_out):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            stride, padding = (1, "same") if seed % 2 else (2, "valid")
            x, w = leaf(rng, (c_in, 2, 6, 5)), leaf(rng, (c_out, c_in, 3, 3))
            assert gradcheck(lambda a, b: ad.conv2d(a, b, stride, padding), [x, w], rng) < FD_TOL

    @pytest.mark.parametrize("c_in,c_out", [(1, 3), (3, 2)])
    def test_gradcheck_3d(self, c_in, c_out):
        for seed in SEEDS:
            rng = np.random.default_rng(100 + seed)
            x, w = leaf(rng, (c_in, 1, 4, 5, 3)), leaf(rng, (c_out, c_in, 3, 3, 3))
            assert gradcheck(lambda a, b: ad.conv3d(a, b), [x, w], rng) < FD_TOL


class TestElementwise:
    def test_relu_values(self):
        assert ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]

    def test_concat_shape(self):
        out = ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5)))], axis=1)

    def test_add_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_relu_gradcheck(self):
        for seed in SEEDS:
            rng = np.random.default_rng(200 + seed)
            x = leaf(rng, (3, 4))
            # keep probes away from the kink
            x.data[np.abs(x.data) < 1e-3] += 0.01
            assert gradcheck(ad.relu, [x], rng) < FD_TOL

    def test_concat_gradcheck(self):
        for seed in SEEDS:
            rng = np.random.default_rng(300 + seed)
            a, b = leaf(rng, (2, 3)), leaf(rng, (2, 5))
            assert gradcheck(lambda u, v: ad.concat([u, v], axis=1), [a, b], rng) < FD_TOL

    def test_concat_routes_slices(self):
        a, b = Tensor(np.zeros((2, 3)), True), Tensor(np.zeros((2, 5)), True)
        g = np.arange(16.0).reshape(2, 8)
        ad.concat([a, b], axis=1).backward(g)
        assert np.array_equal(a.grad, g[:, :3]) and np.array_equal(b.grad, g[:, 3:])

    def test_add_gradcheck(self):
        for seed in SEEDS:
            rng = np.random.default_rng(400 + seed)
            a, b = leaf(rng, (3, 2)), leaf(rng, (3, 2))
            assert gradcheck(ad.add, [a, b], rng) < FD_TOL

    def test_affine_gradcheck(self):
        for seed in SEEDS:
            rng = np.random.default_rng(500 + seed)
            x, w, b = leaf(rng, (3, 2, 4)), leaf(rng, (3,)), leaf(rng, (3,))
            assert gradcheck(ad.channel_affine, [x, w, b], rng) < FD_TOL

    def test_scale_and_sum_gradcheck(self):
        for seed in SEEDS:
            rng = np.random.default_rng(600 + seed)
            x = leaf(rng, (4, 3))
            assert gradcheck(lambda t: ad.total(ad.scale(t, 0.3)), [x], rng) < FD_TOL


class TestCrossEntropy:
    def test_uniform(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((4, 2, 3))), np.zeros((2, 3), int))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident(self):
        logits = np.zeros((3, 5))
        t = np.array([0, 1, 2, 1, 0])
        logits[t, np.arange(5)] = 10.0 + 5.0
        assert ad.softmax_cross_entropy(Tensor(logits), t).item() < 1e-4

    def test_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 2, 1]))

    def test_matches_voxel_loop(self):
        rng = np.random.default_rng(7)
        logits = 5 * rng.standard_normal((3, 2, 3, 4))
        t = rng.integers(0, 3, (2, 3, 4))
        assert ad.softmax_cross_entropy(Tensor(logits), t).item() == pytest.approx(
            cross_entropy_oracle(logits, t), rel=1e-12)

    def test_stable_for_large_logits(self):
        logits = np.array([[1000.0], [0.0]])
        assert ad.softmax_cross_entropy(Tensor(logits), np.array([1])).item() == pytest.approx(1000.0)

    def test_gradcheck_hard(self):
        for seed in SEEDS:
            rng = np.random.default_rng(700 + seed)
            x = leaf(rng, (3, 2, 4), 2.0)
            t = rng.integers(0, 3, (2, 4))
            assert gradcheck(lambda u: ad.softmax_cross_entropy(u, t), [x], rng) < FD_TOL

    def test_gradcheck_soft_and_sum(self):
        for seed in SEEDS:
            rng = np.random.default_rng(800 + seed)
            x = leaf(rng, (3, 5))
            p = rng.random((3, 5))
            p /= p.sum(axis=0)
            assert gradcheck(lambda u: ad.softmax_cross_entropy(u, p, reduction="sum"), [x], rng) < FD_TOL


class TestTape:
    def test_linearity(self):
        rng = np.random.default_rng(9)
        x = leaf(rng, (2, 1, 4, 4))
        w = leaf(rng, (3, 2, 3, 3))
        t1, t2 = rng.integers(0, 3, (1, 4, 4)), rng.integers(0, 3, (1, 4, 4))

        def loss(t):
            return ad.softmax_cross_entropy(ad.conv2d(x, w), t)

        loss(t1).backward()
        g1 = w.grad.copy()
        w.zero_grad()
        loss(t2).backward()
        g2 = w.grad.copy()
        w.zero_grad()
        ad.add(loss(t1), loss(t2)).backward()
        np.testing.assert_allclose(w.grad, g1 + g2, rtol=1e-12, atol=1e-14)

    def test_shared_node_visited_once(self):
        x = Tensor(np.array([2.0]), True)
        y = ad.relu(x)
        z = ad.add(y, y)  # diamond
        order = ad.topological_order(z)
        assert len(order) == len({id(n) for n in order}) == 3
        z.backward(np.array([1.0]))
        assert x.grad.tolist() == [2.0]

    def test_bit_deterministic(self):
        def run():
            rng = np.random.default_rng(10)
            x, w = leaf(rng, (2, 2, 5, 5, 5)), leaf(rng, (4, 2, 3, 3, 3))
            loss = ad.softmax_cross_entropy(ad.conv3d(x, w), rng.integers(0, 4, (2, 5, 5, 5)))
            loss.backward()
            return loss.data.tobytes(), w.grad.tobytes(), x.grad.tobytes()

        assert run() == run()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones((1, 1, 3, 3)), True)
        with ad.no_grad():
            y = ad.conv2d(x, Tensor(np.ones((1, 1, 3, 3)), True))
        assert not y.requires_grad and y._parents == ()

    def test_nonfinite_detected(self):
        with pytest.raises(ad.NonFiniteValue), np.errstate(over="ignore"):
            ad.scale(Tensor(np.array([1e308]), True), 1e10)


class TestAdam:
    def test_poly_boundaries(self):
        sched = ad.PolyLR(max_iter=100, power=0.9)
        st = ad.AdamState(base_lr=5e-4, schedule=sched)
        assert st.lr(0) == 5e-4
        assert st.lr(99) < 5e-4 * 0.02
        assert st.lr(50) == pytest.approx(5e-4 * 0.5 ** 0.9, rel=1e-15)
        with pytest.raises(ScheduleExhausted):
            st.lr(100)

    def test_step_exhausted_raises(self):
        p = Tensor(np.zeros(2), True)
        p.grad = np.ones(2)
        st = ad.AdamState(schedule=ad.PolyLR(max_iter=1))
        ad.adam_step([p], st)
        with pytest.raises(ScheduleExhausted):
            ad.adam_step([p], st)

    def test_textbook_update(self):
        p = Tensor(np.array([1.0, -2.0]), True)
        st = ad.AdamState(base_lr=0.1, eps=1e-10)
        m = v = np.zeros(2)
        ref = p.data.copy()
        rng = np.random.default_rng(11)
        for t in range(1, 6):
            g = rng.standard_normal(2)
            p.grad = g.copy()
            ad.adam_step([p], st)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-10)
        np.testing.assert_allclose(p.data, ref, rtol=1e-14)
        assert st.step == 5

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), True)
        p.grad = np.array([3.0])
        ad.adam_step([p], ad.AdamState(base_lr=1e-3))
        assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), True)
        st = ad.AdamState(base_lr=0.1)
        for _ in range(500):
            p.grad = 2 * p.data
            ad.adam_step([p], st)
        assert np.abs(p.data).max() < 1e-2


class TestInit:
    def test_gaussian_sigma(self):
        t = ad.init_gaussian((100_000,), 0.0, 0.01, seed=3)
        assert abs(t.data.std() - 0.01) < 0.05 * 0.01
        assert abs(t.data.mean()) < 1e-3

    def test_same_seed(self):
        assert np.array_equal(ad.init_gaussian((5, 5), seed=1).data, ad.init_gaussian((5, 5), seed=1).data)
        assert np.array_equal(ad.init_he((4, 50), seed=2).data, ad.init_he((4, 50), seed=2).data)

    def test_he_variance(self):
        t = ad.init_he((2000, 50), seed=4)
        assert abs(t.data.var() - 0.04) < 0.1 * 0.04

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            ad.init_gaussian((2,), sigma=0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    params = {"a.w": rng.standard_normal((2, 3, 3)), "b": rng.standard_normal(4)}
    checkpoint.save(tmp_path / "m.ckpt", params, {"lr": 5e-4, "arch": "x"})
    back, hyper = checkpoint.load(tmp_path / "m.ckpt")
    assert hyper == {"lr": 5e-4, "arch": "x"}
    assert list(back) == ["a.w", "b"]
    for k in params:
        assert np.array_equal(back[k], params[k])
    assert checkpoint.dumps(params, {"lr": 5e-4, "arch": "x"}) == (tmp_path / "m.ckpt").read_bytes()
    raw = (tmp_path / "m.ckpt").read_bytes()
    mlen = int(raw.split(b"\n", 1)[0].split()[1])
    payload = raw.split(b"\n", 1)[1][mlen:]
    assert np.array_equal(np.frombuffer(payload[:18 * 8], "<f8"), params["a.w"].ravel())
