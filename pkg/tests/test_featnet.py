import numpy as np
import pytest

from equimap.featnet import (Conv2D, ConvNetClassifier, Dense, MaxPool, ReLU, TrainConfig, TrainingDivergedError,
                             build_t3, grad_check, load_network, save_network, softmax_logloss, train)
from equimap.imaging import synth_classification_set


def away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct(rng, shape):
    return rng.permutation(np.arange(int(np.prod(shape)), dtype=float)).reshape(shape) / 10


@pytest.mark.parametrize("layer,shape,fn", [
    (Conv2D(3, 4, 3, 1, 1, rng=0), (2, 6, 6, 3), None),
    (Conv2D(1, 5, 5, 2, 2, rng=1), (2, 9, 9, 1), None),
    (Conv2D(2, 3, 1, 1, 0, rng=2), (1, 4, 5, 2), None),
    (Dense(12, 5, rng=0), (3, 12), None),
    (Dense(2 * 3 * 4, 3, rng=0), (2, 2, 3, 4), None),
    (ReLU(), (2, 4, 4, 3), away_from_zero),
    (MaxPool(2), (2, 6, 6, 3), distinct),
])
def test_gradients(layer, shape, fn):
    assert grad_check(layer, shape, seed=3, input_fn=fn) < 1e-4


def test_softmax_logloss_gradient(rng):
    z = rng.standard_normal((5, 3))
    y = rng.integers(0, 3, 5)
    loss, g = softmax_logloss(z, y)
    h = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (softmax_logloss(zp, y)[0] - softmax_logloss(zm, y)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-7)
    assert loss > 0


def test_network_end_to_end_gradient(rng):
    net = build_t3(2, seed=0, input_size=16)
    x = rng.uniform(size=(2, 16, 16))
    y = np.array([0, 1])
    _, g = softmax_logloss(net.run(x), y)
    net.backward(g)
    W = net.layers[0].params["W"]
    analytic = net.layers[0].grads["W"].copy()
    h = 1e-5
    for idx in [(0, 0, 0, 0), (2, 3, 0, 5), (4, 4, 0, 15)]:
        old = W[idx]
        W[idx] = old + h
        lp = softmax_logloss(net.run(x), y)[0]
        W[idx] = old - h
        lm = softmax_logloss(net.run(x), y)[0]
        W[idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(num - analytic[idx]) <= 1e-5 * max(1.0, abs(num))


def test_t3_probe_geometry():
    net = build_t3(2, input_size=32)
    g1 = net.probe(1).geometry
    assert g1.stride == 2 and g1.offset == (0.0, 0.0)
    g2 = net.probe(2).geometry
    assert g2.stride == 4 and g2.offset == (1.0, 1.0)
    assert net.probe(3).feature_shape == (8, 8, 32)
    with pytest.raises(ValueError):
        net.probe(4)


def test_convolution_is_translation_equivariant(rng):
    conv = Conv2D(1, 3, 5, 2, 2, rng=0)
    x = rng.standard_normal((1, 20, 20, 1))
    shifted = np.roll(x, (4, 6), axis=(1, 2))
    a = conv.forward(x)
    b = conv.forward(shifted)
    # a shift by 2*stride pixels shifts the field by 2 sites; compare away from borders and wrap
    np.testing.assert_allclose(b[0, 4:8, 5:8], a[0, 2:6, 2:5], atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = build_t3(3, seed=4, input_size=16)
    save_network(net, tmp_path / "n", hyper=TrainConfig())
    back = load_network(tmp_path / "n")
    x = rng.uniform(size=(3, 16, 16))
    np.testing.assert_array_equal(back.run(x), net.run(x))


def test_training_reduces_loss():
    ds = synth_classification_set(0, 200, 2, 32)
    net = build_t3(2, seed=0, input_size=32)
    _, hist = train(net, ds, TrainConfig(lr=0.02, epochs=3))
    assert hist["loss"][-1] < hist["loss"][0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = synth_classification_set(0, 64, 2, 32)
    net = build_t3(2, seed=0, input_size=32)
    with pytest.raises(TrainingDivergedError):
        train(net, ds, TrainConfig(lr=1e6, momentum=0.99, epochs=3))


def test_sklearn_classifier():
    ds = synth_classification_set(0, 100, 2, 32)
    clf = ConvNetClassifier(epochs=1, lr=0.02).fit(ds.images, ds.labels)
    p = clf.predict_proba(ds.images[:5])
    np.testing.assert_allclose(p.sum(1), 1)
    assert clf.get_params()["epochs"] == 1
    assert set(clf.predict(ds.images)) <= {0, 1}
