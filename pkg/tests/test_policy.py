import numpy as np
import pytest

from dexhand.errors import EmptyDatasetError, ParseError, ShapeError
from dexhand.policy import (
    TINY_SPEC,
    AdamConfig,
    CnnModel,
    ModelSpec,
    TrainConfig,
    adam_init,
    adam_update,
    forward,
    joint_accuracy,
    load_checkpoint,
    logits,
    loss_and_grad,
    numeric_grad,
    predict_commands,
    save_checkpoint,
    train,
)
from dexhand.demodata import Dataset


def _batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n,) + spec.input_shape)
    y = (rng.random((n, spec.outputs)) < 0.3).astype(float)
    return x, y


def _random_point(spec, seed):
    """He-initialised weights plus random biases, so no unit sits exactly on
    a relu kink (zero biases meeting an all-zero input would)."""
    model = CnnModel.initialise(spec, seed)
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        if name.endswith(".b"):
            value[:] = rng.normal(0.0, 0.1, value.shape)
    return model


def _naive_logits(model, x):
    """Loop-based reference network: zero padding, cross-correlation, relu."""
    spec, p = model.spec, model.params
    k, s, pad = spec.kernel, spec.stride, spec.padding
    h = x
    for i in range(1, len(spec.conv_channels) + 1):
        w, b = p[f"conv{i}.w"], p[f"conv{i}.b"]
        n, hh, ww, cin = h.shape
        hp = np.zeros((n, hh + 2 * pad, ww + 2 * pad, cin))
        hp[:, pad:pad + hh, pad:pad + ww] = h
        ho, wo = (hh + 2 * pad - k) // s + 1, (ww + 2 * pad - k) // s + 1
        out = np.zeros((n, ho, wo, w.shape[3]))
        for r in range(ho):
            for c in range(wo):
                patch = hp[:, r * s:r * s + k, c * s:c * s + k, :]
                out[:, r, c, :] = np.einsum("nijc,ijco->no", patch, w) + b
        h = np.maximum(out, 0)
    h = h.reshape(len(h), -1)
    n_dense = len(spec.dense) + 1
    for i in range(1, n_dense + 1):
        h = h @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
        if i < n_dense:
            h = np.maximum(h, 0)
    return h


class TestArchitecture:
    def test_default_shapes(self):
        spec = ModelSpec()
        assert spec.conv_shapes() == [(80, 160), (40, 80), (20, 40)]
        assert spec.flat_features == 20 * 40 * 32
        shapes = spec.param_shapes()
        assert shapes["conv1.w"] == (5, 5, 3, 8)
        assert shapes["dense3.w"] == (64, 15)

    def test_zero_weights_give_one_half(self):
        model = CnnModel.zeros(ModelSpec())
        p = forward(model, np.zeros((160, 320, 3), np.float32))
        assert p.shape == (15,) and np.all(p == 0.5)
        assert not predict_commands(model, np.zeros((160, 320, 3))).any()

    def test_outputs_open_interval(self):
        model = CnnModel.initialise(TINY_SPEC, seed=1)
        x, _ = _batch(TINY_SPEC, 6, 0)
        p = forward(model, x * 50)
        assert p.shape == (6, 15) and np.all((p > 0) & (p < 1))

    def test_matches_naive_reference(self):
        model = CnnModel.initialise(TINY_SPEC, seed=2)
        x, _ = _batch(TINY_SPEC, 3, 1)
        assert np.allclose(logits(model, x), _naive_logits(model, x), rtol=1e-10, atol=1e-12)

    def test_shape_error(self):
        model = CnnModel.initialise(TINY_SPEC)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((8, 8, 3)))
        with pytest.raises(ShapeError):
            loss_and_grad(model, np.zeros((2, 8, 16, 3)), np.zeros((2, 14)))


class TestLoss:
    def _constant_model(self, bias):
        model = CnnModel.zeros(TINY_SPEC)
        model.params["dense3.b"][:] = bias
        return model

    def test_half_probability_is_ln2(self):
        x, y = _batch(TINY_SPEC, 4, 3)
        loss, _ = loss_and_grad(self._constant_model(0.0), x, y)
        assert loss == pytest.approx(np.log(2), rel=1e-12)

    def test_saturated_correct_prediction(self):
        x, _ = _batch(TINY_SPEC, 2, 4)
        loss, _ = loss_and_grad(self._constant_model(40.0), x, np.ones((2, 15)))
        assert loss < 1e-6
        loss, _ = loss_and_grad(self._constant_model(-800.0), x, np.ones((2, 15)))
        assert np.isfinite(loss) and loss == pytest.approx(800.0)

    def test_gradient_check(self):
        model = _random_point(TINY_SPEC, seed=5)
        x, y = _batch(TINY_SPEC, 3, 5)
        _, grads = loss_and_grad(model, x, y)
        rng = np.random.default_rng(6)
        names = sorted(model.params)
        for _ in range(10):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(d)) for d in model.params[name].shape)
            num = numeric_grad(model, x, y, name, idx)
            ana = grads[name][idx]
            rel = abs(num - ana) / max(abs(num) + abs(ana), 1e-8)
            assert rel < 1e-4, (name, idx, num, ana)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.arange(4.0)}
        new, _ = adam_update(params, {"w": np.zeros(4)}, adam_init(params), 1)
        assert np.array_equal(new["w"], params["w"])

    def test_first_step_magnitude_is_lr(self):
        params = {"w": np.zeros(3)}
        grads = {"w": np.array([1e-3, -5.0, 200.0])}
        new, _ = adam_update(params, grads, adam_init(params), 1, AdamConfig(lr=0.01))
        assert np.allclose(new["w"], -0.01 * np.sign(grads["w"]), rtol=1e-4)

    def test_reference_two_steps(self):
        # hand-unrolled update rule
        cfg = AdamConfig(lr=0.1, beta1=0.5, beta2=0.75, eps=0.0)
        params = {"w": np.array([1.0])}
        state = adam_init(params)
        params, state = adam_update(params, {"w": np.array([2.0])}, state, 1, cfg)
        params, state = adam_update(params, {"w": np.array([-1.0])}, state, 2, cfg)
        m = 0.5 * (0.5 * 2.0) + 0.5 * -1.0
        v = 0.75 * (0.25 * 4.0) + 0.25 * 1.0
        expected = 0.9 - 0.1 * (m / 0.75) / np.sqrt(v / (1 - 0.75**2))
        assert params["w"][0] == pytest.approx(expected, rel=1e-12)

    def test_step_must_start_at_one(self):
        params = {"w": np.zeros(1)}
        with pytest.raises(ValueError):
            adam_update(params, params, adam_init(params), 0)


class TestTraining:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.steps_per_epoch) == (45, 75, 45)

    def test_overfits_five_samples(self):
        x, y = _batch(TINY_SPEC, 5, 7)
        cfg = TrainConfig(lr=1e-2, epochs=200, steps_per_epoch=1, batch_size=5,
                          augment_prob=0.0, model=TINY_SPEC)
        model, report = train(Dataset(x, y), cfg)
        assert report.epoch_loss[-1] < 0.01
        assert np.all(joint_accuracy(model, x, y) == 1.0)

    def test_deterministic(self):
        x, y = _batch(TINY_SPEC, 12, 8)
        cfg = TrainConfig(epochs=3, steps_per_epoch=2, batch_size=5, model=TINY_SPEC)
        a, ra = train(Dataset(x, y), cfg)
        b, rb = train(Dataset(x, y), cfg)
        assert ra.epoch_loss == rb.epoch_loss
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert ra.config_hash == cfg.digest()

    def test_empty_dataset(self):
        with pytest.raises(EmptyDatasetError):
            train(Dataset(np.zeros((0, 8, 16, 3)), np.zeros((0, 15))), TrainConfig(model=TINY_SPEC))


class TestCheckpoint:
    @pytest.mark.parametrize("spec", [TINY_SPEC, ModelSpec()])
    def test_roundtrip_bit_exact(self, tmp_path, spec):
        model = CnnModel.initialise(spec, seed=9)
        path = save_checkpoint(model, tmp_path / "m.bin", {"lr": 0.001})
        back = load_checkpoint(path)
        assert back.spec == spec
        x = np.random.default_rng(0).random((2,) + spec.input_shape).astype(spec.dtype)
        assert np.array_equal(forward(back, x), forward(model, x))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"nope")
        with pytest.raises(ParseError):
            load_checkpoint(path)
