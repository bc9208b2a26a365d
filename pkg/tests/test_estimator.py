import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from posedesc import synth
from posedesc.estimator import DescriptorLearner, check_image, check_pairs, check_points


@pytest.fixture(scope="module")
def pairs():
    return [p for p, _ in synth.generate_pairs(synth.SynthConfig(count=2, image_size=32, seed=5))]


def tiny(**kw):
    return DescriptorLearner(epochs=1, queries=8, coarse_dim=8, fine_dim=8, window_fraction=0.5, lr=1e-3, **kw)


def test_params_roundtrip_and_clone():
    est = tiny(lam=0.2)
    assert est.get_params()["lam"] == 0.2
    c = clone(est)
    assert c.get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        c.transform([np.zeros((32, 32))])


def test_fit_transform_predict_score(pairs):
    est = tiny().fit(pairs)
    maps = est.transform([pairs[0].image1])
    coarse, fine = maps[0]
    assert coarse.shape == (8, 4, 4) and fine.shape == (8, 16, 16)
    pts = np.array([[3.0, 4.0], [20.0, 10.0]])
    pred = est.predict([(pairs[0].image1, pairs[0].image2, pts)])[0]
    assert pred.shape == (2, 2) and np.all((pred >= 0) & (pred <= 31))
    desc = est.describe(pairs[0].image1, pts)
    assert desc.shape == (2, est.n_features_out_)
    assert 0.0 <= est.score(pairs) <= 1.0
    assert len(est.history_) == 1


def test_fit_is_deterministic(pairs):
    a = tiny(seed=3).fit(pairs).transform([pairs[0].image1])[0][1]
    b = tiny(seed=3).fit(pairs).transform([pairs[0].image1])[0][1]
    np.testing.assert_array_equal(a, b)


def test_input_validation(pairs):
    with pytest.raises(ValueError):
        check_image(np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        check_image(np.full((8, 8), np.nan))
    with pytest.raises(ValueError):
        check_image(np.zeros((10, 16)), multiple_of=8)
    with pytest.raises(ValueError):
        check_points([[1.0, 2.0, 3.0]])
    with pytest.raises(ValueError):
        check_points([[40.0, 2.0]], size=(32, 32))
    assert check_points([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ValueError):
        check_pairs([])
    with pytest.raises(TypeError):
        check_pairs([1])
    bare = synth.TrainingPair(pairs[0].image1, pairs[0].image2, pairs[0].K1, pairs[0].K2, pairs[0].pose, "easy", 1.0)
    with pytest.raises(ValueError):
        check_pairs([bare], need_oracle=True)
    # pose-only fitting does not need the oracle
    tiny().fit([bare])
