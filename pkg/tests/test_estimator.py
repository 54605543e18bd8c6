import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowins.estimator import FlowAidedINS, ProcrustesAligner
from flowins.flowio import write_dataset


def test_params_round_trip():
    est = FlowAidedINS(use_gnss=False, max_points=60)
    params = est.get_params()
    assert params["max_points"] == 60 and params["use_gnss"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(smooth=False)
    assert est.smooth is False


def test_fit_predict_score(short_dataset):
    est = FlowAidedINS().fit(short_dataset)
    assert est.config_.label == "INS+GNSS+dense+unc"
    t = short_dataset.truth.t[::100]
    pos = est.predict(t)
    assert pos.shape == (len(t), 3)
    score = est.score(short_dataset)
    assert -5.0 < score <= 0.0


def test_fit_from_manifest(short_dataset, tmp_path):
    path = write_dataset(short_dataset, tmp_path)
    a = FlowAidedINS(use_dense_flow=False, smooth=False).fit(path)
    b = FlowAidedINS(use_dense_flow=False, smooth=False).fit(short_dataset)
    t = short_dataset.truth.t[::300]
    # flow is stored in single precision but not used here
    np.testing.assert_allclose(a.predict(t), b.predict(t), atol=1e-9)


def test_estimator_validation(short_dataset):
    with pytest.raises(NotFittedError):
        FlowAidedINS().predict([0.0])
    with pytest.raises(TypeError):
        FlowAidedINS().fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        FlowAidedINS(use_sparse_flow=True).fit(short_dataset)
    with pytest.raises(ValueError):
        FlowAidedINS(max_points=0).fit(short_dataset)
    est = FlowAidedINS(use_dense_flow=False, smooth=False).fit(short_dataset)
    with pytest.raises(ValueError):
        est.predict([2.0, 1.0])
    with pytest.raises(ValueError):
        est.predict([np.nan])


def test_aligner(rng):
    X = rng.normal(size=(40, 3))
    R = Rotation.from_rotvec([0.3, -0.2, 1.0]).as_matrix()
    y = X @ R.T + [1.0, 2.0, 3.0]
    al = ProcrustesAligner().fit(X, y)
    np.testing.assert_allclose(al.rotation_, R, atol=1e-12)
    np.testing.assert_allclose(al.transform(X), y, atol=1e-12)
    np.testing.assert_allclose(al.inverse_transform(y), X, atol=1e-12)
    assert al.score(X, y) > -1e-12
    np.testing.assert_allclose(ProcrustesAligner().fit_transform(X, y), y, atol=1e-12)


def test_aligner_validation(rng):
    with pytest.raises(ValueError):
        ProcrustesAligner().fit(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    with pytest.raises(ValueError):
        ProcrustesAligner().fit(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)))
    with pytest.raises(NotFittedError):
        ProcrustesAligner().transform(rng.normal(size=(5, 3)))
