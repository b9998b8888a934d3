import numpy as np
import pytest

from gaussianhead.autodiff import Tensor
from gaussianhead.nn import (Adam, ConvLayer, ConvStack, DenseLayer, MLP,
                             conv3x3, zero_init_last_layer)


def _brute_conv3x3(x, w, b):
    """Reference same-padding 3x3 convolution, nested loops."""
    h, wd, cin = x.shape
    cout = w.shape[3]
    pad = np.zeros((h + 2, wd + 2, cin))
    pad[1:-1, 1:-1] = x
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            patch = pad[i:i + 3, j:j + 3]
            for o in range(cout):
                out[i, j, o] = (patch * w[:, :, :, o]).sum() + b[o]
    return out


class TestConv3x3:
    def test_identity_center_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (6, 6, 3))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[1, 1, c, c] = 1.0
        out = conv3x3(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (5, 7, 2))
        w = rng.normal(0, 1, (3, 3, 2, 4))
        b = rng.normal(0, 1, 4)
        out = conv3x3(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, _brute_conv3x3(x, w, b), atol=1e-12)

    def test_gradients_match_brute_force_fd(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(0, 1, (4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(0, 1, (3, 3, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, 3), requires_grad=True)
        scale = Tensor(rng.normal(0, 1, (4, 4, 3)))

        def loss_val():
            return float((_brute_conv3x3(x.data, w.data, b.data)
                          * scale.data).sum())

        (conv3x3(x, w, b) * scale).sum().backward()
        h = 1e-6
        for t in (x, w, b):
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss_val()
                flat[i] = old - h
                down = loss_val()
                flat[i] = old
                assert abs(gflat[i] - (up - down) / (2 * h)) < 1e-6


class TestDense:
    def test_affine_values(self):
        layer = DenseLayer(3, 2, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).normal(0, 1, (5, 3))
        out = layer(Tensor(x))
        assert np.allclose(out.data, x @ layer.weight.data + layer.bias.data)

    def test_mlp_hidden_relu(self):
        net = MLP([2, 4, 1], rng=np.random.default_rng(0))
        x = np.random.default_rng(1).normal(0, 1, (3, 2))
        h = np.maximum(x @ net.layers[0].weight.data + net.layers[0].bias.data, 0)
        expected = h @ net.layers[1].weight.data + net.layers[1].bias.data
        assert np.allclose(net(Tensor(x)).data, expected)


class TestZeroInit:
    def test_zero_output_any_input(self):
        net = MLP([3, 8, 5], rng=np.random.default_rng(0))
        zero_init_last_layer(net)
        x = np.random.default_rng(1).normal(0, 3, (10, 3))
        assert np.all(net(Tensor(x)).data == 0.0)

    def test_non_final_layers_unchanged(self):
        net = MLP([3, 8, 5], rng=np.random.default_rng(0))
        first = net.layers[0].weight.data.copy()
        zero_init_last_layer(net)
        assert np.array_equal(net.layers[0].weight.data, first)

    def test_bias_override(self):
        net = MLP([3, 8, 4], rng=np.random.default_rng(0))
        bias = np.array([1.0, 2.0, 3.0, 4.0])
        zero_init_last_layer(net, bias=bias)
        x = np.random.default_rng(1).normal(0, 1, (2, 3))
        assert np.allclose(net(Tensor(x)).data, np.tile(bias, (2, 1)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.ones(4), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(4)
        opt.step()
        assert np.array_equal(p.data, np.ones(4))

    def test_first_step_closed_form(self):
        # hand-computed Adam step 1: m_hat = g, v_hat = g^2,
        # update = lr * g / (|g| + eps)
        g = np.array([0.3, -0.7, 2.0])
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([p], lr=1e-4)
        p.grad = g.copy()
        opt.step()
        expected = -1e-4 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, rtol=1e-10)

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(5)
            p = Tensor(rng.normal(0, 1, (3, 3)), requires_grad=True)
            opt = Adam([p], lr=1e-3)
            for _ in range(20):
                opt.zero_grad()
                ((p * p).sum()).backward()
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_state_round_trip(self):
        rng = np.random.default_rng(6)
        p = Tensor(rng.normal(0, 1, 5), requires_grad=True)
        opt = Adam([p], lr=1e-2)
        for _ in range(3):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        state = {k: v.copy() for k, v in opt.state_tensors().items()}
        q = Tensor(p.data.copy(), requires_grad=True)
        opt2 = Adam([q], lr=1e-2)
        opt2.load_state_tensors(state)
        for o, pp in ((opt, p), (opt2, q)):
            o.zero_grad()
            (pp * pp).sum().backward()
            o.step()
        assert np.array_equal(p.data, q.data)


class TestConvStack:
    def test_shapes(self):
        net = ConvStack([3, 8, 5], rng=np.random.default_rng(0))
        out = net(Tensor(np.zeros((9, 9, 3))))
        assert out.data.shape == (9, 9, 5)

    def test_conv_layer_rejects_bad_channels(self):
        layer = ConvLayer(4, 2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            layer(Tensor(np.zeros((5, 5, 3))))
