import numpy as np
import pytest

from conftest import prepare_toy
from zernet import mesh as M
from zernet.errors import ConfigError, DivergenceError, DomainError, ShapeError, StateError
from zernet.network import (
    Adam,
    Linear,
    ModelSpec,
    Network,
    PreparedMesh,
    ReLU,
    Softmax,
    TrainConfig,
    ZerConv,
    layer_from_dict,
    layer_to_dict,
    parse_architecture,
    softmax,
    train,
)

SMALL_R0 = 0.7
SMALL_K = 6


@pytest.fixture(scope="module")
def small_mesh():
    return prepare_toy(M.icosphere(1), r0=SMALL_R0, k=SMALL_K, seed=0)


def small_spec(directional=False, loss="cross_entropy", seed=3):
    arch = "conv4,conv3,lin5,lin8,softmax" if loss == "cross_entropy" else "conv4,conv3,lin2"
    layers = parse_architecture(arch, SMALL_R0, SMALL_K, 4, directional)
    return ModelSpec(layers, 3, loss, seed)


def check_gradients(model, data, h=1e-6, per_param=6, seed=0):
    """Max relative error of analytic vs central-difference gradients.

    Biases are first moved off zero: with zero bias a dead upstream ReLU
    puts the next pre-activation exactly on the kink.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if name.endswith("bias"):
            p += rng.uniform(-0.1, 0.1, p.shape)
    model.loss_and_grad(data)
    grads = {k: v.copy() for k, v in model.gradients().items()}
    worst = 0.0
    for name, p in model.parameters().items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, min(per_param, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            hi = model.loss(data)
            flat[i] = old - h
            lo = model.loss(data)
            flat[i] = old
            num = (hi - lo) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    return worst


class TestArchitecture:
    def test_parse_toy(self):
        layers = parse_architecture("conv16,conv32,lin64,lin8,softmax", 0.3)
        assert layers == (ZerConv(16, 0.3), ReLU(), ZerConv(32, 0.3), ReLU(),
                          Linear(64), ReLU(), Linear(8), Softmax())

    def test_parse_unknown(self):
        with pytest.raises(ConfigError):
            parse_architecture("conv16,pool,lin8", 0.3)

    def test_dict_round_trip(self):
        spec = small_spec(directional=True)
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        assert layer_from_dict(layer_to_dict(ZerConv(4, 0.2, 10, 8, True))) == ZerConv(4, 0.2, 10, 8, True)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            ModelSpec((Linear(3), Softmax()))
        with pytest.raises(ConfigError):
            ModelSpec((ZerConv(4, 0.3), Linear(3)), loss="cross_entropy")
        with pytest.raises(ConfigError):
            ModelSpec((ZerConv(4, 0.3),), loss="hinge")
        with pytest.raises(ConfigError):
            layer_from_dict({"type": "Dropout"})

    def test_out_channels_and_keys(self):
        spec = small_spec()
        assert spec.out_channels == 8
        assert spec.patch_keys == [(SMALL_R0, SMALL_K)]

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(beta1=1.0)


class TestForward:
    def test_softmax_rows(self, small_mesh):
        out = Network(small_spec()).forward(small_mesh)
        assert out.shape == (small_mesh.n_vertices, 8)
        np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-9)
        assert (out >= 0).all()

    def test_softmax_stable(self):
        p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])

    def test_deterministic(self, small_mesh):
        a = Network(small_spec()).forward(small_mesh)
        b = Network(small_spec()).forward(small_mesh)
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_init(self, small_mesh):
        a = Network(small_spec(seed=1)).forward(small_mesh)
        b = Network(small_spec(seed=2)).forward(small_mesh)
        assert not np.allclose(a, b)

    def test_single_conv_constant_input(self, small_mesh):
        # a constant field has only a piston coefficient, so every vertex agrees
        spec = ModelSpec((ZerConv(2, SMALL_R0, SMALL_K),), 1, "mse")
        data = PreparedMesh(np.ones((small_mesh.n_vertices, 1)), small_mesh.operators)
        out = Network(spec).forward(data)
        np.testing.assert_allclose(out, np.tile(out[0], (len(out), 1)), atol=1e-9)

    def test_input_width_checked(self, small_mesh):
        data = PreparedMesh(np.ones((small_mesh.n_vertices, 2)), small_mesh.operators)
        with pytest.raises(ShapeError):
            Network(small_spec()).forward(data)

    def test_missing_operator(self, small_mesh):
        spec = ModelSpec(parse_architecture("conv4,lin8,softmax", 0.5, SMALL_K))
        with pytest.raises(StateError):
            Network(spec).forward(small_mesh)

    def test_last_directional_conv_pools(self, small_mesh):
        layers = (ZerConv(4, SMALL_R0, SMALL_K, directional=True), ReLU(),
                  ZerConv(3, SMALL_R0, SMALL_K, directional=True), Linear(2))
        out = Network(ModelSpec(layers, loss="mse")).forward(small_mesh)
        assert out.shape == (small_mesh.n_vertices, 2)

    def test_predict_classes(self, small_mesh):
        pred = Network(small_spec()).predict(small_mesh)
        assert pred.dtype.kind == "i" and pred.shape == (small_mesh.n_vertices,)


class TestGradients:
    @pytest.mark.parametrize("directional", [False, True])
    def test_cross_entropy(self, small_mesh, directional):
        model = Network(small_spec(directional))
        assert check_gradients(model, small_mesh) < 1e-3

    def test_mse(self, small_mesh):
        target = np.random.default_rng(0).normal(size=(small_mesh.n_vertices, 2))
        data = PreparedMesh(small_mesh.x, small_mesh.operators, target)
        assert check_gradients(Network(small_spec(loss="mse")), data) < 1e-3

    def test_input_gradient(self, small_mesh):
        model = Network(small_spec(directional=True))
        model.forward(small_mesh, logits=True)
        w = np.random.default_rng(1).normal(size=(small_mesh.n_vertices, 8))
        gx = model.backward(w, skip_softmax=True)
        x = small_mesh.x.copy()
        rng = np.random.default_rng(2)
        for _ in range(5):
            i, c = rng.integers(len(x)), rng.integers(3)
            h = 1e-6
            vals = []
            for sgn in (1, -1):
                xp = x.copy()
                xp[i, c] += sgn * h
                d = PreparedMesh(xp, small_mesh.operators)
                vals.append(np.sum(model.forward(d, logits=True) * w))
            num = (vals[0] - vals[1]) / (2 * h)
            assert abs(num - gx[i, c]) <= 1e-3 * max(abs(num), 1e-6)

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            Network(small_spec()).backward(np.zeros((42, 8)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam()
        for _ in range(5):
            opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_zero_lr(self):
        p = {"w": np.array([1.0, -2.0])}
        Adam(lr=0.0).step(p, {"w": np.array([3.0, 1.0])})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_bounded(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=50)}
        before = p["w"].copy()
        Adam(lr=0.01).step(p, {"w": rng.normal(size=50) * 100})
        assert np.abs(p["w"] - before).max() <= 0.01 * (1 + 1e-8)

    def test_matches_reference(self):
        g = np.array([0.5, -1.5])
        p = {"w": np.zeros(2)}
        opt = Adam(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        m = v = np.zeros(2)
        ref = np.zeros(2)
        for t in range(1, 4):
            opt.step(p, {"w": g * t})
            m = 0.9 * m + 0.1 * g * t
            v = 0.999 * v + 0.001 * (g * t) ** 2
            ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-14)


class TestTraining:
    def test_zero_lr_keeps_params(self, small_mesh):
        spec = small_spec()
        res = train(spec, TrainConfig(lr=0.0, epochs=3), [small_mesh])
        fresh = Network(spec).parameters()
        for name, p in res.model.parameters().items():
            np.testing.assert_array_equal(p, fresh[name])

    def test_early_loss_decreases(self, toy_train):
        spec = ModelSpec(parse_architecture("conv16,conv32,lin64,lin8,softmax", 0.3))
        hist = train(spec, TrainConfig(epochs=5), [toy_train]).history
        losses = [h[1] for h in hist]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_overfits_small_mesh(self, small_mesh):
        spec = ModelSpec(parse_architecture("conv8,conv8,lin16,lin8,softmax", SMALL_R0, SMALL_K))
        res = train(spec, TrainConfig(lr=0.01, epochs=200), [small_mesh])
        assert res.history[-1][2] == 1.0

    def test_history_rows(self, small_mesh):
        hist = train(small_spec(), TrainConfig(epochs=3), [small_mesh]).history
        assert [h[0] for h in hist] == [1, 2, 3]
        assert all(0.0 <= h[2] <= 1.0 for h in hist)

    def test_checkpoint_callback(self, small_mesh):
        seen = []
        train(small_spec(), TrainConfig(epochs=5, checkpoint_interval=2), [small_mesh],
              checkpoint=lambda m, e: seen.append(e))
        assert seen == [2, 4]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, small_mesh):
        model = Network(small_spec())
        model.parameters()["4.weight"][0, 0] = np.inf
        with pytest.raises(DivergenceError):
            train(small_spec(), TrainConfig(epochs=1), [small_mesh], model=model)

    def test_nonfinite_input_rejected(self, small_mesh):
        data = PreparedMesh(np.full_like(small_mesh.x, np.nan), small_mesh.operators,
                            small_mesh.target)
        with pytest.raises(DomainError):
            Network(small_spec()).forward(data)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train(small_spec(), TrainConfig(), [])

    def test_regression_reduces_error(self, small_mesh):
        target = small_mesh.x[:, :2] * 2.0
        data = PreparedMesh(small_mesh.x, small_mesh.operators, target)
        spec = ModelSpec(parse_architecture("conv8,conv8,lin2", SMALL_R0, SMALL_K), loss="mse")
        hist = train(spec, TrainConfig(lr=0.01, epochs=100), [data]).history
        assert hist[-1][1] < 0.01 * hist[0][1]

    def test_resume_continues(self, small_mesh):
        spec = small_spec()
        first = train(spec, TrainConfig(lr=0.01, epochs=4), [small_mesh])
        again = train(spec, TrainConfig(lr=0.01, epochs=2), [small_mesh], model=first.model)
        assert again.model is first.model


class TestLoadParameters:
    def test_round_trip(self, small_mesh):
        a, b = Network(small_spec(seed=1)), Network(small_spec(seed=2))
        b.load_parameters({k: v.copy() for k, v in a.parameters().items()})
        np.testing.assert_array_equal(a.forward(small_mesh), b.forward(small_mesh))

    def test_shape_mismatch(self):
        a = Network(small_spec())
        params = {k: v.copy() for k, v in a.parameters().items()}
        params["0.base"] = np.zeros((21, 3, 4))
        with pytest.raises(ShapeError):
            a.load_parameters(params)

    def test_name_mismatch(self):
        with pytest.raises(ShapeError):
            Network(small_spec()).load_parameters({"x": np.zeros(1)})
