import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tft.backbone import Backbone
from tft.core import Tft, TftConfig
from tft.data import ThetaRanges, warp_image
from tft.estimators import BackboneClassifier, FeatureInverter, TftTransformer, check_images
from tft.affine import TransformParams


def blobs(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    ys, xs = np.indices((size, size))
    y = rng.integers(0, 2, size=n)
    cx = np.where(y == 0, 5.0, 10.0) + rng.uniform(-0.5, 0.5, n)
    X = np.exp(-((xs - cx[:, None, None]) ** 2 + (ys - 8.0) ** 2) / 4.0)
    return X, np.where(y == 0, "left", "right")


def test_check_images():
    assert check_images(np.zeros((2, 3, 3))).dtype == np.float64
    with pytest.raises(ValueError):
        check_images(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 3), 1.5))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 3), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 3, 4)), square=True)


def test_classifier_params_and_clone():
    clf = BackboneClassifier(channels=(3, 4), hidden=8, epochs=2)
    params = clf.get_params()
    assert params["channels"] == (3, 4) and params["epochs"] == 2
    twin = clone(clf)
    assert twin.get_params() == params and not hasattr(twin, "backbone_")
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((1, 16, 16)))


def test_classifier_fit_predict_string_labels():
    X, y = blobs(60)
    clf = BackboneClassifier(channels=(4, 4), kernel=3, hidden=8, epochs=6, lr=1e-2, batch_size=8, seed=1).fit(X, y)
    assert list(clf.classes_) == ["left", "right"]
    assert clf.score(X, y) > 0.9
    assert len(clf.loss_curve_) == 6
    again = BackboneClassifier(channels=(4, 4), kernel=3, hidden=8, epochs=6, lr=1e-2, batch_size=8, seed=1).fit(X, y)
    assert again.loss_curve_ == clf.loss_curve_
    with pytest.raises(ValueError):
        clf.fit(X, y[:-1])


@pytest.fixture
def bb():
    return Backbone(channels=(3, 4), kernel=3, hidden=8, input_size=16, rng=np.random.default_rng(0))


def test_tft_transformer(bb):
    X, _ = blobs(8)
    est = TftTransformer(bb, n_branches=2, hidden=2, steps=3, batch_size=4, dtype="float64")
    out = est.fit(X).transform(X[:2])
    assert out.shape == (2, 16, 16, 3) and len(est.loss_history_) == 1
    est.set_params(theta=20.0)
    assert not np.allclose(est.transform(X[:2]), out)
    with pytest.raises(NotFittedError):
        TftTransformer(bb).transform(X)
    with pytest.raises(ValueError):
        TftTransformer("nope", steps=1).fit(X)


def test_tft_transformer_second_tap(bb):
    X, _ = blobs(4)
    est = TftTransformer(bb, tap=2, n_branches=2, hidden=2, steps=2, batch_size=2, ranges=ThetaRanges.identity(),
                         dtype="float64").fit(X)
    assert (est.tft_.tap, est.tft_.stride, est.tft_.config.channels) == (2, 2, 4)
    assert est.transform(X[:1]).shape == (1, 8, 8, 4)


def test_feature_inverter(bb):
    X, _ = blobs(2)
    zero = Tft(TftConfig(channels=3, n_branches=2, hidden=2, kernel=3), zero=True)
    inv = FeatureInverter(bb, {1: zero}, tx=2.0, iterations=60)
    out = inv.fit().transform(X)
    assert out.shape == X.shape and out.min() >= 0 and out.max() <= 1
    want = np.stack([warp_image(x, TransformParams(tx=2.0)) for x in X])
    assert np.mean((out - want) ** 2) < np.mean((X - want) ** 2)
    with pytest.raises(ValueError):
        FeatureInverter(bb, {}).fit()
    with pytest.raises(NotFittedError):
        FeatureInverter(bb, {1: zero}).transform(X)
