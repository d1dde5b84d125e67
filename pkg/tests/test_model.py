import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from codestream import build_linear_schedule, init_model, input_grad, loss_and_param_grads, predict_eps
from codestream.model import LAYERS, time_embedding


def test_init_is_deterministic():
    a, b = init_model(16, 4, seed=7), init_model(16, 4, seed=7)
    for name in LAYERS:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    c = init_model(16, 4, seed=8)
    assert not np.array_equal(a.params['W1'], c.params['W1'])


def test_default_dims_parameter_count():
    model = init_model(128, 32, seed=0)
    assert model.parameter_count() == 21_378
    assert model.hidden_width == 128 and model.embed_width == 32
    assert {name: model.params[name].shape for name in LAYERS} == model.expected_shapes()
    bound = 1 / np.sqrt(34)
    assert np.abs(model.params['W1']).max() <= bound


@pytest.mark.parametrize("hidden, embed, activation", [(0, 4, 'silu'), (8, 3, 'silu'), (8, 0, 'silu'), (8, 4, 'relu')])
def test_init_rejects_invalid_dims(hidden, embed, activation):
    with pytest.raises(ValueError):
        init_model(hidden, embed, activation=activation)


def test_zero_model_predicts_zero():
    sched = build_linear_schedule(10)
    model = init_model(8, 4)
    for name in LAYERS:
        model.params[name][...] = 0
    assert_array_equal(predict_eps(model, np.random.default_rng(0).standard_normal((5, 2)), 3, sched), 0)


def test_hand_set_linear_model():
    sched = build_linear_schedule(10)
    model = init_model(2, 2, activation='identity')
    model.params.update(
        W1=np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [-1.0, 0.5]]),
        b1=np.array([0.1, -0.2]),
        W2=np.array([[1.0, -1.0], [0.5, 0.0]]),
        b2=np.array([0.0, 0.3]),
        W3=np.array([[2.0, 0.0], [0.0, -1.0]]),
        b3=np.array([0.05, 0.0]),
    )
    x, t = np.array([[1.0, -2.0]]), 4
    # One frequency (base^0 = 1): the embedding is [sin(t/T), cos(t/T)].
    s, c = np.sin(0.4), np.cos(0.4)
    z1 = np.array([1.0 + s - c + 0.1, -4.0 + s + 0.5 * c - 0.2])
    z2 = np.array([z1[0] + 0.5 * z1[1], -z1[0] + 0.3])
    expected = np.array([2 * z2[0] + 0.05, -z2[1]])
    assert_allclose(predict_eps(model, x, t, sched)[0], expected, rtol=1e-12)
    assert_allclose(time_embedding(np.array([t]), 10, 2), [[s, c]])


def test_batching_is_consistent(tiny_model):
    sched = build_linear_schedule(100)
    gen = np.random.default_rng(1)
    x = gen.standard_normal((6, 2))
    t = gen.integers(1, 101, size=6)
    batch = predict_eps(tiny_model, x, t, sched)
    for i in range(6):
        assert_allclose(predict_eps(tiny_model, x[i:i + 1], t[i:i + 1], sched)[0], batch[i], rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        predict_eps(tiny_model, x, t[:3], sched)
    with pytest.raises(ValueError):
        predict_eps(tiny_model, x, 101, sched)


def _loss(model, x0, eps, t, sched):
    return loss_and_param_grads(model, x0, eps, t, sched).loss


def _rel_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)


@pytest.mark.parametrize("activation", ['silu', 'tanh'])
def test_param_grads_match_finite_differences(activation):
    sched = build_linear_schedule(50)
    gen = np.random.default_rng(10)
    h = 1e-6
    for instance in range(20):
        model = init_model(5, 4, seed=instance, activation=activation)
        n = int(gen.integers(1, 6))
        x0 = gen.normal(5, 2, size=(n, 2))
        eps = gen.standard_normal((n, 2))
        t = gen.integers(1, 51, size=n)
        bundle = loss_and_param_grads(model, x0, eps, t, sched)
        for name in LAYERS:
            numeric = np.zeros_like(model.params[name])
            for idx in np.ndindex(numeric.shape):
                orig = model.params[name][idx]
                model.params[name][idx] = orig + h
                up = _loss(model, x0, eps, t, sched)
                model.params[name][idx] = orig - h
                down = _loss(model, x0, eps, t, sched)
                model.params[name][idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            assert bundle.grads[name].shape == model.params[name].shape
            assert _rel_error(bundle.grads[name], numeric) <= 1e-6, (instance, name)


def test_perfect_prediction_has_zero_loss_and_gradient():
    sched = build_linear_schedule(10)
    model = init_model(4, 2)
    for name in LAYERS:
        model.params[name][...] = 0
    x0 = np.random.default_rng(0).standard_normal((4, 2))
    bundle = loss_and_param_grads(model, x0, np.zeros((4, 2)), np.array([1, 2, 3, 4]), sched)
    assert bundle.loss == 0
    for name in LAYERS:
        assert_array_equal(bundle.grads[name], 0)


def test_duplicated_batch_gives_same_mean(tiny_model):
    sched = build_linear_schedule(30)
    gen = np.random.default_rng(4)
    x0, eps = gen.standard_normal((2, 7, 2))
    t = gen.integers(1, 31, size=7)
    once = loss_and_param_grads(tiny_model, x0, eps, t, sched)
    twice = loss_and_param_grads(tiny_model, np.tile(x0, (2, 1)), np.tile(eps, (2, 1)), np.tile(t, 2), sched)
    assert twice.loss == pytest.approx(once.loss, rel=1e-12)
    for name in LAYERS:
        assert_allclose(twice.grads[name], once.grads[name], rtol=1e-10, atol=1e-14)


def test_sharded_gradients_are_deterministic(tiny_model):
    sched = build_linear_schedule(30)
    gen = np.random.default_rng(5)
    x0, eps = gen.standard_normal((2, 50, 2))
    t = gen.integers(1, 31, size=50)
    serial = loss_and_param_grads(tiny_model, x0, eps, t, sched)
    a = loss_and_param_grads(tiny_model, x0, eps, t, sched, shards=3)
    b = loss_and_param_grads(tiny_model, x0, eps, t, sched, shards=3)
    assert a.loss == b.loss
    assert a.loss == pytest.approx(serial.loss, rel=1e-12)
    for name in LAYERS:
        assert_array_equal(a.grads[name], b.grads[name])
        assert_allclose(a.grads[name], serial.grads[name], rtol=1e-10, atol=1e-14)


def test_loss_rejects_bad_batches(tiny_model):
    sched = build_linear_schedule(10)
    with pytest.raises(ValueError):
        loss_and_param_grads(tiny_model, np.empty((0, 2)), np.empty((0, 2)), np.empty(0, dtype=int), sched)
    with pytest.raises(ValueError):
        loss_and_param_grads(tiny_model, np.zeros((3, 2)), np.zeros((2, 2)), np.ones(3, dtype=int), sched)


@pytest.mark.parametrize("activation", ['silu', 'tanh'])
def test_input_grad_matches_finite_differences(activation):
    sched = build_linear_schedule(50)
    gen = np.random.default_rng(20)
    h = 1e-6
    for instance in range(20):
        model = init_model(6, 4, seed=100 + instance, activation=activation)
        x = gen.normal(5, 2, size=2)
        c = gen.standard_normal(2)
        t = int(gen.integers(1, 51))
        analytic = input_grad(model, x, t, c, sched)
        numeric = np.array([
            (c @ (predict_eps(model, [x + h * e], t, sched)[0] - predict_eps(model, [x - h * e], t, sched)[0])) / (2 * h)
            for e in np.eye(2)])
        assert _rel_error(analytic, numeric) <= 1e-6, instance


def test_input_grad_of_linear_model(tiny_model):
    sched = build_linear_schedule(20)
    model = init_model(8, 4, seed=3, activation='identity')
    p = model.params
    gen = np.random.default_rng(6)
    x, c = gen.standard_normal((2, 5, 2))
    assert_allclose(input_grad(model, x, 7, c, sched), c @ (p['W1'][:2] @ p['W2'] @ p['W3']).T, rtol=1e-12)
    assert_array_equal(input_grad(tiny_model, x[0], 7, np.zeros(2), sched), 0)
    assert input_grad(tiny_model, x[0], 7, c[0], sched).shape == (2,)
    with pytest.raises(ValueError):
        input_grad(tiny_model, x[0], 0, c[0], sched)
    with pytest.raises(ValueError):
        input_grad(tiny_model, x, 3, c[:2], sched)
