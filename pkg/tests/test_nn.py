import numpy as np
import pytest
from scipy import ndimage

from ctjbf import nn
from ctjbf.errors import DomainError, FormatError, ShapeError, StateError
from ctjbf.nn import Adam, LayerSpec, Network, Tensor, finite_diff_check


def conv_oracle(x, w, b):
    """Valid cross-correlation via scipy, per (out, in) channel pair."""
    co, ci, kz, ky, kx = w.shape
    _, z, y, xw = x.shape
    zo, yo, xo = z - kz + 1, y - ky + 1, xw - kx + 1
    out = np.zeros((co, zo, yo, xo))
    for o in range(co):
        for i in range(ci):
            full = ndimage.correlate(x[i], w[o, i], mode="constant")
            out[o] += full[kz // 2 : kz // 2 + zo, ky // 2 : ky // 2 + yo, kx // 2 : kx // 2 + xo]
        out[o] += b[o]
    return out


def seq(specs, in_shape, seed=0):
    return Network.build([LayerSpec(**s) for s in specs], in_shape, seed)


class TestForwardShapes:
    def test_conv3d_shape_chain(self):
        net = seq(
            [dict(kind="conv3d-valid", filters=32, kernel=(3, 3, 3))] * 4,
            (1, 9, 64, 64),
            seed=1,
        )
        x = np.zeros((2, 1, 9, 64, 64))
        assert net.forward(x).shape == (2, 32, 1, 56, 56)

    def test_deconv_growth(self):
        net = seq([dict(kind="deconv2d", filters=8, kernel=(3, 3))] * 4, (8, 1, 56, 56), seed=2)
        x = np.zeros((1, 8, 1, 56, 56))
        assert net.forward(x).shape == (1, 8, 1, 64, 64)

    def test_meanpool_floor(self):
        net = seq([dict(kind="mean-pool")], (3, 1, 29, 29))
        assert net.forward(np.ones((1, 3, 1, 29, 29))).shape == (1, 3, 1, 14, 14)

    def test_fc_shape(self):
        net = seq([dict(kind="fully-connected", filters=5)], (2, 1, 3, 3))
        assert net.forward(np.zeros((4, 2, 1, 3, 3))).shape == (4, 5)

    def test_bad_input_shape_reports_layer(self):
        net = seq([dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3))], (1, 5, 8, 8))
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 1, 4, 8, 8)))

    def test_undersized_topology_reports_layer(self):
        with pytest.raises(ShapeError, match="layer 1"):
            seq(
                [
                    dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)),
                    dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)),
                ],
                (1, 3, 8, 8),
            )


class TestForwardValues:
    def test_identity_kernel_crops_input(self):
        net = seq([dict(kind="conv3d-valid", filters=1, kernel=(3, 3, 3))], (1, 5, 7, 7))
        w = net.layers[0].w
        w.data[...] = 0.0
        w.data[0, 0, 1, 1, 1] = 1.0
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 5, 7, 7))
        out = net.forward(x)
        assert np.allclose(out[0, 0], x[0, 0, 1:-1, 1:-1, 1:-1])

    def test_conv_matches_scipy(self):
        rng = np.random.default_rng(1)
        for kernel, shape in [((3, 3, 3), (2, 5, 8, 9)), ((1, 3, 3), (3, 1, 7, 8)), ((1, 3, 3), (3, 4, 7, 8))]:
            net = seq([dict(kind="conv3d-valid" if kernel[0] > 1 else "conv2d-valid", filters=4, kernel=kernel)], shape, seed=3)
            x = rng.standard_normal((2, *shape))
            out = net.forward(x)
            for bi in range(2):
                ref = conv_oracle(x[bi], net.layers[0].w.data, net.layers[0].b.data)
                assert np.allclose(out[bi], ref, atol=1e-10)

    def test_leaky_relu_values(self):
        net = seq([dict(kind="leaky-relu")], (1, 1, 1, 2))
        out = net.forward(np.array([-1.0, 2.0]).reshape(1, 1, 1, 1, 2))
        assert np.allclose(out.ravel(), [-0.01, 2.0])

    def test_sigmoid_at_zero(self):
        net = seq([dict(kind="fully-connected", filters=1), dict(kind="sigmoid")], (2,))
        net.layers[0].w.data[...] = 0.0
        assert net.forward(np.ones((1, 2)))[0, 0] == 0.5

    def test_transposed_conv_scatter_example(self):
        # 2x2 input, 3x3 kernel, stride 1 -> 4x4 output; expected values are
        # the hand-computed scatter out[i+di, j+dj] += x[i, j] * k[di, dj]
        net = Network.build(
            [LayerSpec(kind="deconv2d", filters=1, kernel=(3, 3))], (1, 1, 2, 2), seed=0
        )
        net.layers[0].w.data[0, 0, 0] = np.arange(9.0).reshape(3, 3)
        net.layers[0].b.data[...] = 0.0
        x = np.arange(4.0).reshape(1, 1, 1, 2, 2)
        out = net.forward(x)[0, 0, 0]
        expected = np.array(
            [[0, 0, 1, 2], [0, 5, 11, 11], [6, 23, 29, 23], [12, 32, 37, 24]], dtype=float
        )
        assert np.array_equal(out, expected)

    def test_mean_pool_values(self):
        net = seq([dict(kind="mean-pool")], (1, 1, 2, 3))
        x = np.array([[1.0, 2.0, 9.0], [3.0, 4.0, 9.0]]).reshape(1, 1, 1, 2, 3)
        out = net.forward(x)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.ravel()[0] == 2.5  # trailing odd column dropped

    def test_batch_matches_per_sample(self):
        specs = [
            dict(kind="conv3d-valid", filters=3, kernel=(3, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="fully-connected", filters=4),
        ]
        net = seq(specs, (1, 3, 6, 6), seed=9)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 1, 3, 6, 6))
        batched = net.forward(x)
        for i in range(5):
            single = net.forward(x[i : i + 1])
            assert np.allclose(batched[i], single[0], atol=1e-12)

    def test_same_seed_same_weights(self):
        s = [dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)), dict(kind="fully-connected", filters=2)]
        a = seq(s, (1, 3, 5, 5), seed=42)
        b = seq(s, (1, 3, 5, 5), seed=42)
        for ta, tb in zip(a.params(), b.params()):
            assert np.array_equal(ta.data, tb.data)


class TestBackward:
    def test_backward_before_forward_raises(self):
        net = seq([dict(kind="fully-connected", filters=1)], (2,))
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 1)))

    def test_zero_loss_grad_gives_zero_weight_grads(self):
        net = seq(
            [dict(kind="conv3d-valid", filters=2, kernel=(3, 3, 3)), dict(kind="fully-connected", filters=3)],
            (1, 3, 5, 5),
            seed=4,
        )
        net.zero_grads()
        out = net.forward(np.random.default_rng(0).standard_normal((2, 1, 3, 5, 5)))
        net.backward(np.zeros_like(out))
        for p in net.params():
            assert np.all(p.grad == 0.0)

    def test_residual_input_gradient_sums_branches(self):
        # y = x + x (residual from input through an identity path)
        net = seq(
            [dict(kind="leaky-relu"), dict(kind="residual-add", source=-1)],
            (1, 1, 2, 2),
            seed=0,
        )
        x = np.abs(np.random.default_rng(1).standard_normal((1, 1, 1, 2, 2))) + 0.1
        out = net.forward(x)
        assert np.allclose(out, 2 * x)
        din = net.backward(np.ones_like(out))
        assert np.allclose(din.data, 2.0)

    def test_gradients_accumulate_across_backwards(self):
        net = seq([dict(kind="fully-connected", filters=1)], (2,), seed=1)
        x = np.ones((1, 2))
        net.zero_grads()
        out = net.forward(x)
        net.backward(np.ones_like(out))
        g1 = net.layers[0].w.grad.copy()
        out = net.forward(x)
        net.backward(np.ones_like(out))
        assert np.allclose(net.layers[0].w.grad, 2 * g1)


class TestFiniteDifferences:
    def test_linear_fully_connected_tight(self):
        net = seq([dict(kind="fully-connected", filters=3)], (4,), seed=5)
        x = np.random.default_rng(3).standard_normal((2, 4))
        report = finite_diff_check(net, x)
        assert report.max_rel_error < 1e-7
        assert report.input_max_rel_error < 1e-7

    def test_small_guidance_style_net(self):
        specs = [
            dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="deconv2d", filters=4, kernel=(3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="residual-add", source=1),
            dict(kind="deconv2d", filters=1, kernel=(3, 3)),
            dict(kind="residual-add", source=-1),
        ]
        net = seq(specs, (1, 5, 10, 10), seed=6)
        x = np.random.default_rng(4).standard_normal((1, 1, 5, 10, 10))
        report = finite_diff_check(net, x)
        assert report.max_rel_error < 1e-4
        assert report.input_max_rel_error < 1e-4

    def test_small_head_style_nets(self):
        trunk_param = [
            dict(kind="conv3d-valid", filters=4, kernel=(3, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="conv3d-valid", filters=6, kernel=(3, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="conv2d-valid", filters=6, kernel=(1, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="fully-connected", filters=8),
            dict(kind="leaky-relu"),
            dict(kind="fully-connected", filters=2),
        ]
        net = seq(trunk_param, (1, 5, 9, 9), seed=7)
        x = np.random.default_rng(5).standard_normal((1, 1, 5, 9, 9))
        assert finite_diff_check(net, x).max_rel_error < 1e-4

        pooled = [
            dict(kind="conv2d-valid", filters=4, kernel=(1, 3, 3)),
            dict(kind="leaky-relu"),
            dict(kind="mean-pool"),
            dict(kind="fully-connected", filters=1),
            dict(kind="sigmoid"),
        ]
        net2 = seq(pooled, (1, 1, 10, 10), seed=8)
        x2 = np.random.default_rng(6).standard_normal((2, 1, 1, 10, 10))
        assert finite_diff_check(net2, x2, target=np.full((2, 1), 0.3)).max_rel_error < 1e-4

    def test_weight_limit_enforced(self):
        net = seq([dict(kind="fully-connected", filters=200)], (200,), seed=0)
        with pytest.raises(DomainError):
            finite_diff_check(net, np.zeros((1, 200)))


class TestAdam:
    def test_zero_gradient_leaves_weights(self):
        t = Tensor(np.array([1.0, -2.0]))
        t.zero_grad()
        opt = Adam(lr=0.1)
        opt.step([t])
        assert np.array_equal(t.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        t = Tensor(np.array([0.0]))
        t.ensure_grad()
        t.grad[...] = 1.0
        opt = Adam(lr=0.1)
        opt.step([t])
        # bias-corrected first step moves by ~ -lr * sign(g)
        assert t.data[0] == pytest.approx(-0.1, abs=1e-7)

    def test_determinism(self):
        def run():
            net = seq([dict(kind="fully-connected", filters=2)], (3,), seed=11)
            opt = Adam(lr=1e-3)
            rng = np.random.default_rng(0)
            for _ in range(5):
                x = rng.standard_normal((4, 3))
                net.zero_grads()
                out = net.forward(x)
                net.backward(2 * out / out.size)
                opt.step(net.params())
            return [p.data.copy() for p in net.params()]

        a, b = run(), run()
        for ta, tb in zip(a, b):
            assert np.array_equal(ta, tb)


class TestCheckpoint:
    def make_net(self, seed=13):
        return seq(
            [
                dict(kind="conv3d-valid", filters=3, kernel=(3, 3, 3)),
                dict(kind="leaky-relu"),
                dict(kind="fully-connected", filters=2),
            ],
            (1, 3, 5, 5),
            seed=seed,
        )

    def test_round_trip(self, tmp_path):
        net = self.make_net()
        path = tmp_path / "w.ckpt"
        nn.save_network(net, path)
        other = self.make_net(seed=99)
        nn.load_network(other, path)
        for ta, tb in zip(net.params(), other.params()):
            assert np.array_equal(ta.data, tb.data)

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NNWT2\n")
        with pytest.raises(FormatError):
            nn.load_network(self.make_net(), path)

    def test_topology_mismatch_rejected(self, tmp_path):
        net = self.make_net()
        path = tmp_path / "w.ckpt"
        nn.save_network(net, path)
        other = seq([dict(kind="fully-connected", filters=2)], (4,), seed=0)
        with pytest.raises(FormatError):
            nn.load_network(other, path)

    def test_clone_is_independent(self):
        net = self.make_net()
        copy = net.clone()
        x = np.random.default_rng(1).standard_normal((1, 1, 3, 5, 5))
        assert np.allclose(net.forward(x), copy.forward(x))
        net.params()[0].data += 1.0
        assert not np.allclose(net.forward(x), copy.forward(x))
