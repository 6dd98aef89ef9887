import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_blobs
from sklearn.exceptions import NotFittedError
from sklearn.preprocessing import StandardScaler

from wavepmp.estimator import WavePMPClassifier, WavePMPRegressor
from wavepmp.models import dataset_linreg


def test_params_and_clone():
    est = WavePMPRegressor(hidden_layer_sizes=(4,), eta=0.05)
    assert est.get_params()["eta"] == 0.05
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_linear_regressor_fits_planted_model():
    X, Y, W, b = dataset_linreg(64, 3, 1, noise=0.0, seed=0)
    est = WavePMPRegressor(hidden_layer_sizes=(), eta=0.5, budget=1500).fit(X.T, Y[0])
    assert est.score(X.T, Y[0]) > 1 - 1e-8
    assert est.predict(X.T).shape == (64,)


def test_mlp_regressor_multi_output():
    X, Y, _, _ = dataset_linreg(48, 2, 2, seed=1)
    T = np.tanh(Y).T
    est = WavePMPRegressor(hidden_layer_sizes=(8,), budget=1500).fit(X.T, T)
    assert est.predict(X.T).shape == (48, 2)
    assert est.score(X.T, T) > 0.8


def test_classifier_on_blobs():
    X, y = make_blobs(90, centers=3, random_state=0)
    X = StandardScaler().fit_transform(X)
    clf = WavePMPClassifier(hidden_layer_sizes=(8,), budget=1500).fit(X, y)
    assert clf.score(X, y) > 0.9
    P = clf.predict_proba(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert set(clf.predict(X)) <= set(clf.classes_)


def test_errors():
    with pytest.raises(NotFittedError):
        WavePMPRegressor().predict(np.ones((2, 2)))
    est = WavePMPRegressor(hidden_layer_sizes=(), budget=10).fit(np.ones((4, 2)), np.ones(4))
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))
    with pytest.raises(ValueError):
        WavePMPClassifier(budget=5).fit(np.ones((4, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        WavePMPRegressor(metric="odd", budget=5).fit(np.ones((4, 2)), np.ones(4))
