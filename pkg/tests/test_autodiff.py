import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossexam import autodiff as ad
from crossexam.autodiff import ShapeError, Tape, Tensor
from crossexam.nn import Model, ModelSpec, desk_cnn, forward
from crossexam.optim import AdamState, NonFiniteGradient, adam_step

from conftest import rel_err

H = 1e-3


def grad_of(fn, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    return loss.item(), [t.grad for t in ts]


def fd_grad(fn, arrays, i):
    """Central differences of fn's scalar output with respect to arrays[i]."""
    base = [np.asarray(a, dtype=np.float32) for a in arrays]
    out = np.zeros(base[i].shape, dtype=np.float64)
    for idx in np.ndindex(base[i].shape):
        vals = []
        for step in (H, -H):
            xs = [a.copy() for a in base]
            xs[i][idx] += step
            vals.append(float(fn(*[Tensor(x) for x in xs]).data))
        out[idx] = (vals[0] - vals[1]) / (2 * H)
    return out


def weighted(op, shape, seed=0):
    """sum(op(...) * R) for a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    return lambda *ts: ad.tsum(ad.mul(op(*ts), Tensor(r)))


rng = np.random.default_rng(42)
A23 = rng.normal(size=(2, 3))
B23 = rng.normal(size=(2, 3))
POS = rng.uniform(0.5, 2.0, size=(2, 3))
AWAY = np.where(rng.random((2, 3)) < 0.5, -1, 1) * rng.uniform(0.3, 1.5, size=(2, 3))

PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [A23, B23], (2, 3)),
    "add_scalar": (lambda a: ad.add(a, 0.7), [A23], (2, 3)),
    "add_bias": (lambda a, b: ad.add_bias(a, b), [A23, rng.normal(size=3)], (2, 3)),
    "mul": (lambda a, b: ad.mul(a, b), [A23, B23], (2, 3)),
    "scale": (lambda a: ad.scale(a, -1.7), [A23], (2, 3)),
    "power": (lambda a: ad.power(a, -1.5), [POS], (2, 3)),
    "exp": (lambda a: ad.exp(a), [A23], (2, 3)),
    "log": (lambda a: ad.log(a), [POS], (2, 3)),
    "sqrt": (lambda a: ad.sqrt(a), [POS], (2, 3)),
    "abs": (lambda a: ad.tabs(a), [AWAY], (2, 3)),
    "relu": (lambda a: ad.relu(a), [AWAY], (2, 3)),
    "sigmoid": (lambda a: ad.sigmoid(a), [A23], (2, 3)),
    "sum_axis": (lambda a: ad.tsum(a, axis=1), [A23], (2,)),
    "mean_axis": (lambda a: ad.mean(a, axis=0), [A23], (3,)),
    "max": (lambda a: ad.tmax(a, axis=1), [A23], (2,)),
    "reshape": (lambda a: ad.reshape(a, (3, 2)), [A23], (3, 2)),
    "transpose": (lambda a: ad.transpose(a), [A23], (3, 2)),
    "matmul": (lambda a, b: ad.matmul(a, b), [A23, rng.normal(size=(3, 4))], (2, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [A23, B23], (2, 6)),
    "broadcast_channels": (lambda m: ad.broadcast_channels(m, 3), [A23], (3, 2, 3)),
    "broadcast_batch": (lambda x: ad.broadcast_batch(x, 4), [A23], (4, 2, 3)),
    "blend": (lambda m, p, x: ad.blend(m, p, x),
              [rng.uniform(size=(4, 4)), rng.uniform(size=(2, 4, 4)), rng.uniform(size=(2, 2, 4, 4))], (2, 2, 4, 4)),
    "conv2d": (lambda x, w: ad.conv2d(x, w), [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)) * 0.3],
               (2, 3, 4, 4)),
    "maxpool": (lambda x: ad.maxpool2x2(x), [rng.permutation(32).reshape(1, 2, 4, 4) * 0.1], (1, 2, 2, 2)),
    "log_softmax": (lambda z: ad.log_softmax(z), [A23], (2, 3)),
    "softmax": (lambda z: ad.softmax(z), [A23], (2, 3)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_finite_differences(name):
    op, arrays, out_shape = PRIMITIVES[name]
    fn = weighted(op, out_shape)
    _, grads = grad_of(fn, arrays)
    for i in range(len(arrays)):
        assert rel_err(grads[i], fd_grad(fn, arrays, i)) <= 1e-3, f"{name} input {i}"


def test_cross_entropy_gradient_matches_finite_differences():
    z = rng.normal(size=(3, 4))
    fn = lambda t: ad.cross_entropy(t, [0, 3, 1])
    _, (g,) = grad_of(fn, [z])
    assert rel_err(g, fd_grad(fn, [z], 0)) <= 1e-3


def conv_oracle(x, w):
    """Direct-loop same-padded 3x3 convolution in float64."""
    n, c, h, wd = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[:, o, i, j] = np.sum(xp[:, :, i:i + 3, j:j + 3] * w[o], axis=(1, 2, 3))
    return out


def test_conv2d_weight_gradient_on_6x6_input():
    r = np.random.default_rng(7)
    x = r.normal(size=(1, 1, 6, 6)).astype(np.float32)
    w = r.normal(size=(2, 1, 3, 3)).astype(np.float32)
    weights = r.normal(size=(1, 2, 6, 6))
    xt, wt = Tensor(x), Tensor(w, requires_grad=True)
    with Tape() as tape:
        out = ad.conv2d(xt, wt)
        loss = ad.tsum(ad.mul(out, Tensor(weights)))
    tape.backward(loss)
    np.testing.assert_allclose(out.data, conv_oracle(x, w), rtol=1e-5, atol=1e-5)
    fd = np.zeros(w.shape)
    for idx in np.ndindex(w.shape):
        wp, wm = w.astype(np.float64), w.astype(np.float64)
        wp = wp.copy(); wp[idx] += H
        wm = wm.copy(); wm[idx] -= H
        fd[idx] = (np.sum(conv_oracle(x, wp) * weights) - np.sum(conv_oracle(x, wm) * weights)) / (2 * H)
    assert rel_err(wt.grad, fd) <= 1e-3


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_softmax_cross_entropy_gradient_identity():
    z = np.array([[0.3, -1.2, 2.0, 0.1]])
    y = 2
    t = Tensor(z, requires_grad=True)
    with Tape() as tape:
        loss = ad.cross_entropy(t, [y])
    tape.backward(loss)
    soft = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(t.grad, soft - np.eye(4)[y], atol=1e-6)


def test_unused_tensor_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        _ = y * 2.0
        loss = (x * x).sum()
    tape.backward(loss)
    assert y.grad.tolist() == [0.0, 0.0]
    assert x.grad.shape == x.shape


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 3.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_tape_records_inputs_before_outputs():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        z = ad.mul(y, y)
        ad.tsum(z)
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen or not t._tracked for t in node.inputs)
        seen.add(id(node.out))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_backward_is_linear_in_the_loss(a, b, seed):
    r = np.random.default_rng(seed)
    data = r.normal(size=(3, 4))
    l1 = lambda t: ad.tsum(ad.mul(ad.sigmoid(t), ad.sigmoid(t)))
    l2 = lambda t: ad.tsum(ad.exp(ad.scale(t, 0.5)))
    _, (g1,) = grad_of(l1, [data])
    _, (g2,) = grad_of(l2, [data])
    _, (g,) = grad_of(lambda t: ad.add(ad.scale(l1(t), a), ad.scale(l2(t), b)), [data])
    np.testing.assert_allclose(g, a * g1.astype(np.float64) + b * g2, atol=1e-5, rtol=1e-6)


def test_forward_and_backward_are_deterministic():
    spec = desk_cnn(5)
    x = np.random.default_rng(0).uniform(size=(4, 3, 16, 16)).astype(np.float32)
    results = []
    for _ in range(2):
        model = Model.initialise(spec, seed=3)
        with Tape() as tape:
            logits, _ = model.forward(x, probes=())
            loss = ad.cross_entropy(logits, [0, 1, 2, 3])
        tape.backward(loss)
        results.append((logits.data.tobytes(), b"".join(p.grad.tobytes() for p in model.params.values())))
    assert results[0] == results[1]


# ---- forward -----------------------------------------------------------------

def test_identity_model_returns_its_input():
    spec = ModelSpec((1, 1, 4), [{"kind": "flatten", "probe": "flat"}, {"kind": "dense", "out": 4}])
    model = Model(spec, {"l1.weight": Tensor(np.eye(4)), "l1.bias": Tensor(np.zeros(4))})
    batch = np.random.default_rng(1).normal(size=(5, 1, 1, 4)).astype(np.float32)
    logits, probes = forward(model, batch)
    np.testing.assert_array_equal(logits.data, batch.reshape(5, 4))
    assert probes["flat"].shape == (5, 4)


def test_two_layer_mlp_matches_hand_composition():
    spec = ModelSpec((1, 1, 3), [{"kind": "flatten"}, {"kind": "dense", "out": 5}, {"kind": "relu", "probe": "h"},
                                 {"kind": "dense", "out": 2}])
    model = Model.initialise(spec, seed=11)
    x = np.random.default_rng(2).normal(size=(4, 1, 1, 3)).astype(np.float32)
    p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    flat = x.reshape(4, 3).astype(np.float64)
    hidden = np.maximum(flat @ p["l1.weight"] + p["l1.bias"], 0)
    expected = hidden @ p["l3.weight"] + p["l3.bias"]
    logits, probes = forward(model, x)
    np.testing.assert_allclose(logits.data, expected, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(probes["h"].data, hidden, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("n", [1, 3, 8])
def test_every_probe_has_one_row_per_sample(n):
    model = Model.initialise(desk_cnn(5), seed=0)
    logits, probes = forward(model, np.zeros((n, 3, 16, 16), dtype=np.float32))
    assert logits.shape == (n, 5)
    assert set(probes) == {"layer1", "layer2", "layer4"}
    assert all(a.shape[0] == n for a in probes.values())


def test_forward_rejects_wrong_input_shape():
    model = Model.initialise(desk_cnn(5), seed=0)
    with pytest.raises(ShapeError, match=r"expected input \(n, 3, 16, 16\), got \(2, 3, 8, 8\)"):
        forward(model, np.zeros((2, 3, 8, 8), dtype=np.float32))


def test_model_spec_requires_a_probe_on_the_last_hidden_layer():
    with pytest.raises(ValueError, match="last hidden layer"):
        ModelSpec((1, 1, 3), [{"kind": "flatten", "probe": "x"}, {"kind": "dense", "out": 4}, {"kind": "relu"},
                              {"kind": "dense", "out": 2}])
    with pytest.raises(ValueError, match="no probe"):
        ModelSpec((1, 1, 3), [{"kind": "flatten"}, {"kind": "dense", "out": 2}])


def test_desk_cnn_probe_names():
    spec = desk_cnn(5)
    assert spec.probe_names() == ["layer1", "layer2", "layer4"]
    assert spec.probe_dims() == {"layer1": 8 * 8 * 8, "layer2": 16 * 4 * 4, "layer4": 64}


# ---- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = {"w": Tensor(np.array([1.5, -2.0]), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
    assert p["w"].data.tolist() == [1.5, -2.0]
    assert state.step == 1 and np.all(state.m["w"] == 0) and np.all(state.v["w"] == 0)


def test_adam_first_step_is_minus_lr():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    adam_step(p, {"w": np.ones(1, dtype=np.float32)}, AdamState(), lr=0.01)
    assert p["w"].data[0] == pytest.approx(-0.01, rel=1e-5)


def test_adam_converges_on_a_quadratic_like_the_scalar_recurrence():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState()
    ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        with Tape() as tape:
            loss = ad.tsum(ad.power(ad.add(w, -3.0), 2.0))
        tape.backward(loss)
        adam_step({"w": w}, {"w": w.grad}, state, lr=0.1)
        g = 2 * (ref - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(w.data[0] - 3.0) < 0.05
    assert w.data[0] == pytest.approx(ref, abs=1e-4)


def test_adam_refuses_nan_gradient_and_names_the_tensor():
    p = {"layer.weight": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NonFiniteGradient, match="layer.weight"):
        adam_step(p, {"layer.weight": np.array([np.nan, 0.0], dtype=np.float32)}, AdamState(), lr=0.1)
    assert p["layer.weight"].data.tolist() == [0.0, 0.0]


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        adam_step({"w": Tensor(np.zeros(1))}, {}, AdamState(), lr=0.0)


def test_adam_is_deterministic():
    outs = []
    for _ in range(2):
        p = {"w": Tensor(np.linspace(-1, 1, 5), requires_grad=True)}
        state = AdamState()
        for k in range(5):
            adam_step(p, {"w": np.sin(p["w"].data + k).astype(np.float32)}, state, lr=0.05)
        outs.append(p["w"].data.tobytes())
    assert outs[0] == outs[1]
