import numpy as np
import pytest

from fdg.errors import ScheduleError, ShapeError
from fdg.layers import (Conv2d3x3, Dense, Flatten, Network, ReLU, SoftmaxCrossEntropy, build_network,
                        load_weights, module_backward, module_forward, save_weights)
from fdg.packets import ActivationPacket, GradientPacket
from fdg.partition import make_partition
from fdg.verification import grad_check


def test_dense_forward_hand():
    d = Dense(2, 2)
    d.params["W"] = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert d.forward(np.array([[1.0, 1.0]]), {}).tolist() == [[3.0, 7.0]]


def test_dense_shapes():
    d = Dense(3, 5, np.random.default_rng(0))
    assert d.params["W"].shape == (5, 3) and d.params["b"].shape == (5,)
    limit = np.sqrt(6.0 / 8)
    assert np.all(np.abs(d.params["W"]) <= limit) and not d.params["b"].any()


def test_relu_forward_and_zero_grad_at_negatives():
    r, cache = ReLU(), {}
    assert r.forward(np.array([-2.0, 5.0]), cache).tolist() == [0.0, 5.0]
    _, gx = r.backward(np.array([3.0, 3.0]), cache)
    assert gx[0] == 0.0 and gx[1] == 3.0


def test_conv_delta_kernel_is_identity():
    c = Conv2d3x3(1, 1)
    c.params["W"] = np.zeros((1, 1, 3, 3))
    c.params["W"][0, 0, 1, 1] = 1.0
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    assert np.array_equal(c.forward(x, {}), x)


def test_conv_matches_direct_loop(rng):
    c = Conv2d3x3(2, 3, rng)
    x = rng.normal(size=(2, 2, 4, 5))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 4, 5))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * c.params["W"][o]) + c.params["b"][o]
    assert np.allclose(c.forward(x, {}), ref, atol=1e-12)


def test_head_gradient_is_probs_minus_onehot(rng):
    head, cache = SoftmaxCrossEntropy(), {}
    logits, labels = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
    head.forward(logits, cache, labels)
    _, g = head.backward(np.asarray(1.0), cache)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert np.allclose(g, (p - np.eye(3)[labels]) / 4, atol=1e-15)


def test_head_needs_labels():
    with pytest.raises(ShapeError):
        SoftmaxCrossEntropy().forward(np.zeros((2, 3)), {})


@pytest.mark.parametrize("arch,shape", [
    ("dense:6,relu,dense:3,head", (4,)),
    ("conv:3,relu,flatten,dense:3,head", (2, 4, 4)),
    ("conv:2,relu,conv:2,flatten,dense:3,head", (1, 4, 4)),
])
def test_finite_differences_all_kinds(arch, shape, rng):
    net = build_network(arch, shape, seed=3)
    x = rng.normal(size=(3,) + shape)
    report = grad_check(net, x, np.array([0, 1, 2]), eps=1e-5, check_input=True)
    assert report["max_rel_err"] < 1e-6, report["entries"]


def test_finite_differences_headless_module(rng):
    layers = build_network("dense:5,relu,dense:4", (3,), seed=1).layers
    assert grad_check(layers, rng.normal(size=(6, 3)), check_input=True)["pass"]


def test_pure_relu_module_passes_vacuously(rng):
    report = grad_check([ReLU()], rng.normal(size=(3, 4)))
    assert report["pass"] and report["checked"] == 0


def test_corrupted_dense_backward_fails(rng):
    class TransposedDense(Dense):
        def backward(self, grad, cache):
            g, _ = super().backward(grad, cache)
            return g, grad @ cache["W"].T  # wrong: should not transpose

    bad = TransposedDense(4, 4, rng)
    layers = [Dense(4, 4, rng), ReLU(), bad, SoftmaxCrossEntropy()]
    report = grad_check(layers, rng.normal(size=(5, 4)), np.array([0, 1, 2, 3, 0]))
    assert not report["pass"]


def test_grad_check_preconditions(rng):
    net = build_network("dense:2,head", (2,), dtype="float32")
    with pytest.raises(ValueError):
        grad_check(net, rng.normal(size=(2, 2)).astype(np.float32), np.array([0, 1]))
    with pytest.raises(ValueError):
        grad_check([ReLU()], rng.normal(size=(2, 2)), eps=1e-2)


def test_single_module_equals_network_forward(rng):
    net = build_network("dense:5,relu,dense:3,head", (4,), seed=0)
    x, y = rng.normal(size=(6, 4)), np.array([0, 1, 2, 0, 1, 2])
    out, _ = module_forward(net.layers, ActivationPacket(1, x), 1, y)
    assert float(out.tensor) == net.loss_and_grads(x, y)[0]


def test_two_module_composition_bit_exact(rng):
    net = build_network("dense:8,relu,dense:3,head", (4,), seed=0)
    x, y = rng.normal(size=(6, 4)), np.array([0, 1, 2, 0, 1, 2])
    loss, grads, gin = net.loss_and_grads(x, y)
    lo, hi = make_partition(net, 2).split(net.layers)
    a1, g1 = module_forward(lo, ActivationPacket(1, x), 1)
    a2, g2 = module_forward(hi, a1, 2, y)
    assert float(a2.tensor) == loss
    r2 = module_backward(hi, GradientPacket(1, np.asarray(1.0)), g2)
    r1 = module_backward(lo, GradientPacket(1, r2.input_grad), g1)
    for want, got in zip(grads, r1.param_grads + r2.param_grads):
        for name in want:
            assert np.array_equal(want[name], got[name])
    assert np.array_equal(r1.input_grad, gin)
    assert r1.input_grad.shape == x.shape


def test_shrink_scales_grads_and_beta_one_is_identity(rng):
    layers = build_network("dense:5,relu,dense:3", (4,), seed=0).layers
    x = rng.normal(size=(3, 4))
    _, graph = module_forward(layers, ActivationPacket(2, x))
    g = rng.normal(size=(3, 3))
    full = module_backward(layers, GradientPacket(2, g), graph)
    same = module_backward(layers, GradientPacket(2, g), graph, shrink=1.0)
    half = module_backward(layers, GradientPacket(2, g), graph, shrink=0.5)
    for a, b, c in zip(full.param_grads, same.param_grads, half.param_grads):
        for name in a:
            assert np.array_equal(a[name], b[name])
            assert np.array_equal(c[name], 0.5 * a[name])
    zero = module_backward(layers, GradientPacket(2, np.zeros((3, 3))), graph)
    assert not zero.input_grad.any()
    assert all(not v.any() for lg in zero.param_grads for v in lg.values())


def test_module_errors(rng):
    layers = [Dense(2, 2, rng)]
    with pytest.raises(ShapeError):
        module_forward(layers, ActivationPacket(1, np.zeros((0, 2))))
    _, graph = module_forward(layers, ActivationPacket(1, np.ones((1, 2))))
    with pytest.raises(ScheduleError):
        module_backward(layers, GradientPacket(2, np.ones((1, 2))), graph)
    with pytest.raises(ValueError):
        module_backward(layers, GradientPacket(1, np.ones((1, 2))), graph, shrink=0.0)


def test_head_must_be_last():
    with pytest.raises(ValueError):
        Network([SoftmaxCrossEntropy(), Dense(2, 2)], (2,))


def test_build_network_errors():
    with pytest.raises(ValueError):
        build_network("dense:4,softmax", (3,))
    with pytest.raises(ShapeError):
        build_network("conv:2,dense:3", (1, 4, 4))


def test_flat_round_trip_and_copy(rng):
    net = build_network("dense:4,relu,dense:2,head", (3,), seed=0)
    flat = net.get_flat()
    assert flat.size == sum(net.param_counts())
    clone = net.copy()
    net.set_flat(rng.normal(size=flat.size))
    assert np.array_equal(clone.get_flat(), flat)
    with pytest.raises(ShapeError):
        net.set_flat(np.zeros(flat.size + 1))


def test_weights_checkpoint_round_trip(tmp_path):
    net = build_network("conv:2,relu,flatten,dense:3,head", (1, 3, 3), seed=4)
    path = tmp_path / "w.bin"
    save_weights(net, path)
    other = build_network("conv:2,relu,flatten,dense:3,head", (1, 3, 3), seed=5)
    load_weights(other, path)
    assert np.array_equal(other.get_flat(), net.get_flat())
    with pytest.raises(ShapeError):
        load_weights(build_network("dense:3,head", (9,)), path)


def test_flatten_round_trip(rng):
    f, cache = Flatten(), {}
    x = rng.normal(size=(2, 3, 4))
    assert f.forward(x, cache).shape == (2, 12)
    assert f.backward(np.ones((2, 12)), cache)[1].shape == x.shape
