"""scikit-learn style wrappers around the backbone, the TFT and feature inversion."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .affine import TransformParams
from .backbone import Backbone, train_backbone
from .core import Tft, TftConfig
from .data import OnlineTuples, ThetaRanges
from .pipelines import InversionConfig, TrainConfig, invert_features, train_tft


def check_images(X, square=False):
    """Validate an image batch: ``(n, H, W)`` floats in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected an (n, H, W) image batch, got shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if square and X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images, got {X.shape[1]}x{X.shape[2]}")
    return X


def _control(est):
    return TransformParams(est.theta, est.scale, est.tx, est.ty)


class BackboneClassifier(ClassifierMixin, BaseEstimator):
    """Conv+ReLU+pool classifier trained with ADAM on softmax cross-entropy."""

    def __init__(self, channels=(16, 32, 64), kernel=5, hidden=128, epochs=5, lr=1e-3, batch_size=32, seed=0):
        self.channels = channels
        self.kernel = kernel
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = check_images(X, square=True)
        self.classes_, codes = np.unique(y, return_inverse=True)
        init = Backbone(self.channels, self.kernel, self.hidden, len(self.classes_), X.shape[1],
                        rng=np.random.default_rng(self.seed))
        self.backbone_, self.loss_curve_ = train_backbone(
            X, codes, self.epochs, self.lr, self.batch_size, seed=self.seed, backbone=init
        )
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "backbone_")
        return self.classes_[self.backbone_.predict(check_images(X))]


class TftTransformer(TransformerMixin, BaseEstimator):
    """Learns a TFT for one tap of a fitted backbone; ``transform`` maps images to transformed tap features.

    ``fit`` harvests fresh (f, f_theta) pairs from ``X`` for each minibatch,
    with controls drawn from ``ranges`` (default: the MNIST training grid).
    ``transform`` applies the control ``(theta, scale, tx, ty)``.
    """

    def __init__(self, backbone=None, tap=1, n_branches=4, hidden=4, kernel=3, depth=2, steps=1000,
                 batch_size=32, lr=1e-3, l2=1e-4, seed=0, ranges=None, theta=0.0, scale=1.0, tx=0.0, ty=0.0,
                 dtype="float32"):
        self.backbone = backbone
        self.tap = tap
        self.n_branches = n_branches
        self.hidden = hidden
        self.kernel = kernel
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.l2 = l2
        self.seed = seed
        self.ranges = ranges
        self.theta = theta
        self.scale = scale
        self.tx = tx
        self.ty = ty
        self.dtype = dtype

    def _backbone(self):
        bb = self.backbone
        if isinstance(bb, BackboneClassifier):
            check_is_fitted(bb, "backbone_")
            bb = bb.backbone_
        if not isinstance(bb, Backbone):
            raise ValueError("backbone must be a Backbone or a fitted BackboneClassifier")
        return bb

    def fit(self, X, y=None):
        X = check_images(X)
        bb = self._backbone()
        cfg = TftConfig(channels=bb.tap_channels(self.tap), n_branches=self.n_branches, hidden=self.hidden,
                        kernel=self.kernel, depth=self.depth)
        self.tft_ = Tft(cfg, tap=self.tap, stride=bb.stride(self.tap), rng=np.random.default_rng(self.seed),
                        dtype=np.dtype(self.dtype))
        ranges = self.ranges if self.ranges is not None else ThetaRanges.mnist_grid()
        source = OnlineTuples(bb, X, ranges, self.tap, np.dtype(self.dtype))
        tcfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, l2=self.l2, seed=self.seed,
                           tap=self.tap)
        _, self.loss_history_ = train_tft(self.tft_, source, tcfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "tft_")
        X = check_images(X)
        bb = self._backbone()
        feats = bb.taps(X, self.tap)[self.tap].data
        return self.tft_(feats.astype(self.tft_.pre.kernels[0].dtype), _control(self)).data


class FeatureInverter(TransformerMixin, BaseEstimator):
    """Generates transformed images by inverting TFT-transformed backbone features.

    ``tfts`` maps tap ids to trained TFTs. Stateless: ``fit`` only validates.
    """

    def __init__(self, backbone=None, tfts=None, theta=0.0, scale=1.0, tx=0.0, ty=0.0, iterations=300,
                 step_size=0.05, beta=None, init="source", seed=0):
        self.backbone = backbone
        self.tfts = tfts
        self.theta = theta
        self.scale = scale
        self.tx = tx
        self.ty = ty
        self.iterations = iterations
        self.step_size = step_size
        self.beta = beta
        self.init = init
        self.seed = seed

    def fit(self, X=None, y=None):
        if not self.tfts:
            raise ValueError("need at least one TFT")
        if X is not None:
            check_images(X)
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        X = check_images(X)
        bb = self.backbone.backbone_ if isinstance(self.backbone, BackboneClassifier) else self.backbone
        cfg = InversionConfig(alphas={k: 1.0 for k in self.tfts}, beta=self.beta, iterations=self.iterations,
                              step_size=self.step_size, init=self.init, seed=self.seed)
        return np.stack([invert_features(bb, self.tfts, x, _control(self), cfg).image for x in X])
