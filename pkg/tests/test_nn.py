import math

import numpy as np
import pytest

from foglab import data, nn
from foglab.errors import NumericError, SpecError, ValidationError
from oracles import central_difference_grads, max_relative_error, random_small_model


def _tiny_specs(dropout=0.0, filters=2, units=3):
    return [nn.LayerSpec.conv1d(filters, 2, 1, "relu"), nn.LayerSpec.lstm(units),
            nn.LayerSpec.dropout(dropout), nn.LayerSpec.dense(1, "sigmoid")]


class TestInit:
    def test_dense_shapes_and_zero_bias(self):
        specs = [nn.LayerSpec.lstm(4), nn.LayerSpec.dense(1, "sigmoid")]
        w = nn.init_weights(specs, (5, 2), seed=0)
        assert w["1.dense.W"].shape == (4, 1)
        assert w["1.dense.b"].shape == (1,) and w["1.dense.b"][0] == 0.0

    def test_deterministic(self):
        a = nn.init_weights(_tiny_specs(), (6, 3), seed=9)
        b = nn.init_weights(_tiny_specs(), (6, 3), seed=9)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_lstm_param_count(self):
        w = nn.init_weights([nn.LayerSpec.lstm(3), nn.LayerSpec.dense(1, "sigmoid")], (4, 2), 0)
        lstm = sum(v.size for k, v in w.items() if ".lstm." in k)
        assert lstm == 4 * (3 * (2 + 3) + 3) == 72

    def test_forget_bias_one(self):
        w = nn.init_weights([nn.LayerSpec.lstm(3), nn.LayerSpec.dense(1, "sigmoid")], (4, 2), 0)
        np.testing.assert_array_equal(w["0.lstm.b"], [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])

    def test_glorot_limits(self):
        w = nn.init_weights([nn.LayerSpec.lstm(8), nn.LayerSpec.dense(1, "sigmoid")], (4, 6), 1)
        assert np.abs(w["0.lstm.Wx"]).max() <= math.sqrt(6 / (6 + 32))

    @pytest.mark.parametrize("specs,shape", [
        ([nn.LayerSpec.conv1d(2, 5), nn.LayerSpec.lstm(2), nn.LayerSpec.dense(1, "sigmoid")], (4, 1)),
        ([nn.LayerSpec.dense(1, "sigmoid")], (4, 1)),
        ([nn.LayerSpec.lstm(2), nn.LayerSpec.dense(2, "sigmoid")], (4, 1)),
        ([nn.LayerSpec.lstm(2), nn.LayerSpec.dropout(1.0), nn.LayerSpec.dense(1, "sigmoid")], (4, 1)),
    ])
    def test_bad_chains(self, specs, shape):
        with pytest.raises(SpecError):
            nn.init_weights(specs, shape, 0)


class TestForward:
    def test_zero_weights_half(self):
        specs = nn.default_architecture(units=4, filters=3)
        w = {k: np.zeros_like(v) for k, v in nn.init_weights(specs, (8, 6), 0).items()}
        probs, _ = nn.forward(w, specs, np.random.default_rng(0).normal(size=(5, 8, 6)))
        np.testing.assert_array_equal(probs, 0.5)
        np.testing.assert_array_equal(nn.predict(w, specs, np.ones((3, 8, 6))), 0.5)

    def test_no_dropout_modes_agree(self):
        specs = _tiny_specs(0.0)
        w = nn.init_weights(specs, (6, 3), 2)
        x = np.random.default_rng(1).normal(size=(4, 6, 3))
        np.testing.assert_array_equal(nn.forward(w, specs, x, "train", 5)[0], nn.forward(w, specs, x, "infer")[0])

    def test_conv_identity_filter(self):
        specs = [nn.LayerSpec.conv1d(1, 3, 1, "linear"), nn.LayerSpec.lstm(1), nn.LayerSpec.dense(1, "sigmoid")]
        w = nn.init_weights(specs, (5, 1), 0)
        w["0.conv1d.W"] = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)
        x = np.array([2.0, 5.0, 3.0, 7.0, 1.0]).reshape(1, 5, 1)
        _, cache = nn.forward(w, specs, x)
        # hand computation: out[t] = 1*x[t] + 0*x[t+1] + 0*x[t+2]
        np.testing.assert_array_equal(cache.layers[0]["z"][0, :, 0], [2.0, 5.0, 3.0])

    def test_non_finite_input(self):
        specs = _tiny_specs()
        w = nn.init_weights(specs, (4, 1), 0)
        with pytest.raises(NumericError):
            nn.forward(w, specs, np.full((1, 4, 1), np.nan))

    def test_sigmoid_strictly_inside(self):
        specs = [nn.LayerSpec.lstm(1), nn.LayerSpec.dense(1, "sigmoid")]
        w = nn.init_weights(specs, (2, 1), 0)
        for b in (-1e4, 1e4):
            w["1.dense.b"] = np.array([b])
            p = nn.predict(w, specs, np.zeros((1, 2, 1)))
            assert 0 < p[0] < 1

    def test_predict_shape_mismatch(self):
        specs = _tiny_specs()
        w = nn.init_weights(specs, (6, 3), 0)
        with pytest.raises(ValueError):
            nn.predict(w, specs, np.zeros((2, 6, 4)))

    def test_dropout_expectation(self):
        specs = _tiny_specs(dropout=0.3)
        w = nn.init_weights(specs, (6, 3), 4)
        x = np.random.default_rng(2).normal(size=(1, 6, 3))
        _, infer = nn.forward(w, specs, x, "infer")
        _, train = nn.forward(w, specs, np.repeat(x, 20000, axis=0), "train", dropout_seed=11)
        scale = np.abs(w["3.dense.W"]).sum() * np.abs(infer.layers[1]["hs"][-1]).max()
        assert abs(train.logits.mean() - infer.logits[0]) <= 0.02 * max(abs(infer.logits[0]), scale)


class TestLoss:
    def test_ln2(self):
        assert nn.loss_bce(np.full(7, 0.5), np.r_[np.ones(3), np.zeros(4)]) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect(self):
        assert nn.loss_bce(np.array([0.0, 1.0]), np.array([0, 1])) < 1e-7

    def test_hand_value(self):
        expected = (-math.log(0.9) - math.log(0.8)) / 2
        assert nn.loss_bce(np.array([0.9, 0.2]), np.array([1, 0])) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.164252, abs=1e-6)

    def test_l2_matrices_only(self):
        w = {"a.W": np.array([[1.0, 2.0]]), "a.b": np.array([10.0])}
        assert nn.loss_bce([0.5], [1], w, 0.1) == pytest.approx(math.log(2) + 0.5)


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_check(self, seed):
        specs, w, x, y = random_small_model(seed)
        _, cache = nn.forward(w, specs, x, "train", 0)
        analytic = nn.backward(cache, y, l2_lambda=0.01)
        numeric = central_difference_grads(w, specs, x, y, l2=0.01)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_gradient_with_dropout_mask(self):
        specs = _tiny_specs(dropout=0.4)
        w = nn.init_weights(specs, (5, 2), 3)
        x = np.random.default_rng(3).normal(size=(4, 5, 2))
        y = np.array([1, 0, 1, 1])
        _, cache = nn.forward(w, specs, x, "train", 0)
        analytic = nn.backward(cache, y)
        numeric = central_difference_grads(w, specs, x, y)  # same dropout seed each call
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_l2_adds_two_lambda_w(self):
        specs, w, x, y = random_small_model(7)
        _, cache = nn.forward(w, specs, x, "train", 0)
        g0 = nn.backward(cache, y, 0.0)
        g1 = nn.backward(cache, y, 0.25)
        for k in w:
            extra = 2 * 0.25 * w[k] if w[k].ndim >= 2 else 0.0
            np.testing.assert_allclose(g1[k], g0[k] + extra, rtol=0, atol=1e-15)

    def test_small_step_does_not_increase_loss(self):
        for seed in range(20):
            specs, w, x, y = random_small_model(100 + seed)
            p, cache = nn.forward(w, specs, x, "train", 0)
            before = nn.loss_bce(p, y)
            g = nn.backward(cache, y)
            stepped = {k: w[k] - 1e-4 * g[k] for k in w}
            after = nn.loss_bce(nn.forward(stepped, specs, x, "train", 0)[0], y)
            assert after <= before

    def test_gradient_vanishes_at_fit(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(16, 4, 1))
        x[:8] += 3.0
        y = np.r_[np.ones(8, int), np.zeros(8, int)]
        specs = [nn.LayerSpec.conv1d(2, 2, 1, "relu"), nn.LayerSpec.lstm(2), nn.LayerSpec.dense(1, "sigmoid")]
        ws = data.WindowSet(x, y, np.zeros(16, int), 4, 4)
        res = nn.fit(ws, nn.TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=1500, patience=0,
                                        validation_fraction=0.25, seed=1), specs)
        _, cache = nn.forward(res.weights, specs, x, "train")
        g = nn.backward(cache, y)
        assert max(np.abs(v).max() for v in g.values()) < 1e-3
        assert np.all(nn.hard_labels(nn.predict(res.weights, specs, x)) == y)


class TestAdam:
    def test_zero_gradient(self):
        w = {"w": np.array([1.0, -2.0])}
        st = nn.AdamState.fresh(w)
        w2, st2 = nn.adam_step(w, {"w": np.zeros(2)}, st, 0.001)
        np.testing.assert_array_equal(w2["w"], w["w"])
        assert st2.t == 1 and not st2.m["w"].any() and not st2.v["w"].any()

    def test_first_step(self):
        w = {"w": np.array([0.5])}
        w2, _ = nn.adam_step(w, {"w": np.array([1.0])}, nn.AdamState.fresh(w), 0.001, t=1)
        # m_hat = v_hat = 1  ->  step = lr / (1 + eps)
        assert w2["w"][0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)

    def test_deterministic(self):
        w = {"w": np.array([0.3, 0.1])}
        g = {"w": np.array([0.2, -0.4])}
        st = nn.AdamState.fresh(w)
        a = nn.adam_step(w, g, st, 0.01)
        b = nn.adam_step(w, g, st, 0.01)
        assert a[0]["w"].tobytes() == b[0]["w"].tobytes() and a[1].m["w"].tobytes() == b[1].m["w"].tobytes()


def _separable_windows(seed=3):
    ds = data.generate_synthetic(2, 600, 0.5, seed=seed, separation=2.0)
    return data.make_windows(ds, 16, 8)


class TestFit:
    def test_patience_zero_runs_all_epochs(self):
        ws = _separable_windows()
        res = nn.fit(ws, nn.TrainConfig(max_epochs=5, patience=0, learning_rate=0.01), _tiny_specs())
        assert res.epochs_run == 5 and len(res.history["val_loss"]) == 5

    def test_deterministic(self):
        ws = _separable_windows()
        cfg = nn.TrainConfig(max_epochs=3, patience=0, learning_rate=0.01, seed=4)
        a = nn.fit(ws, cfg, _tiny_specs(0.3))
        b = nn.fit(ws, cfg, _tiny_specs(0.3))
        assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)

    def test_separable_reaches_high_accuracy(self):
        ws = _separable_windows()
        specs = nn.default_architecture(units=8, filters=8)
        res = nn.fit(ws, nn.TrainConfig(max_epochs=50, patience=10, learning_rate=0.01, seed=0), specs)
        acc = np.mean(nn.hard_labels(nn.predict(res.weights, specs, ws.windows)) == ws.labels)
        assert res.epochs_run <= 50 and acc >= 0.95

    def test_early_stopping_stops(self):
        ws = _separable_windows()
        res = nn.fit(ws, nn.TrainConfig(max_epochs=200, patience=2, learning_rate=0.05), _tiny_specs())
        assert res.epochs_run < 200

    def test_single_class_rejected(self):
        ws = _separable_windows()
        ws = ws.subset(np.flatnonzero(ws.labels == 0))
        with pytest.raises(ValidationError):
            nn.fit(ws, nn.TrainConfig(), _tiny_specs())

    def test_zero_epochs_returns_initial(self):
        ws = _separable_windows()
        w0 = nn.init_weights(_tiny_specs(), ws.windows.shape[1:], 0)
        res = nn.fit(ws, nn.TrainConfig(max_epochs=0), _tiny_specs(), w0)
        assert res.epochs_run == 0 and all(np.array_equal(res.weights[k], w0[k]) for k in w0)


def test_hard_labels_threshold():
    assert nn.hard_labels([0.49, 0.51, 0.5]).tolist() == [0, 1, 0]


def test_scaling_output_weight_moves_away_from_half():
    specs = _tiny_specs()
    w = nn.init_weights(specs, (6, 3), 5)
    x = np.random.default_rng(5).normal(size=(10, 6, 3))
    before = nn.predict(w, specs, x)
    w["3.dense.W"] = w["3.dense.W"] * 3.0
    after = nn.predict(w, specs, x)
    assert np.all(np.sign(after - 0.5) == np.sign(before - 0.5))
    assert np.all(np.abs(after - 0.5) >= np.abs(before - 0.5))


def test_weight_file_round_trip(tmp_path):
    specs = nn.default_architecture(units=5, filters=4)
    w = nn.init_weights(specs, (10, 6), 3)
    w = {k: v + np.random.default_rng(0).normal(size=v.shape) / 3 for k, v in w.items()}
    nn.save_weights(tmp_path / "w.json", w, specs)
    back, specs2 = nn.load_weights(tmp_path / "w.json")
    assert specs2 == specs and list(back) == list(w)
    assert all(back[k].tobytes() == w[k].tobytes() for k in w)
