import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from multiprize import MPTClassifier
from multiprize.data import synth_splits
from multiprize.errors import ShapeError


@pytest.fixture(scope="module")
def blobs():
    train, test = synth_splits(1, 200, 100, 2, (3, 8, 8))
    names = np.array(["cat", "dog"])
    return train.images, names[train.labels], test.images, names[test.labels]


def test_params_round_trip_and_clone():
    clf = MPTClassifier(prune_ratio=0.7, alpha=2.0)
    assert clf.get_params()["prune_ratio"] == 0.7
    clf.set_params(alpha=3.0)
    assert clone(clf).get_params() == clf.get_params()


def test_fit_predict_string_labels(blobs):
    x, y, xt, yt = blobs
    clf = MPTClassifier(epochs=3, batch_size=16).fit(x, y)
    assert set(clf.classes_) == {"cat", "dog"}
    assert clf.predict(xt).dtype == yt.dtype
    assert clf.score(xt, yt) > 0.7
    proba = clf.predict_proba(xt[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1, rtol=1e-6)
    assert len(clf.history_) == 3


def test_fit_is_deterministic(blobs):
    x, y, xt, _ = blobs
    a = MPTClassifier(epochs=1, random_state=4).fit(x, y).predict_proba(xt)
    b = MPTClassifier(epochs=1, random_state=4).fit(x, y).predict_proba(xt)
    np.testing.assert_array_equal(a, b)


def test_flat_input_with_shape(blobs):
    x, y, xt, _ = blobs
    clf = MPTClassifier(epochs=1, input_shape=(3, 8, 8)).fit(x.reshape(len(x), -1), y)
    assert clf.predict(xt.reshape(len(xt), -1)).shape == (len(xt),)
    with pytest.raises(ShapeError):
        MPTClassifier(epochs=1).fit(x.reshape(len(x), -1), y)


def test_threshold_selection_and_finetune(blobs):
    x, y, _, _ = blobs
    clf = MPTClassifier(epochs=1, selection="threshold").fit(x, y)
    before = [w.copy() for w in clf.checkpoint_.weights]
    clf.finetune(x, y, scope="last_layer", epochs=1)
    assert clf.checkpoint_.phase == "finetune"
    assert before[0].tobytes() == clf.checkpoint_.weights[0].tobytes()
    assert len(clf.history_) == 2


def test_validation_errors(blobs):
    x, y, _, _ = blobs
    with pytest.raises(NotFittedError):
        MPTClassifier().predict(x)
    with pytest.raises(ValueError):
        MPTClassifier().fit(x, np.zeros(len(x)))
    with pytest.raises(ValueError):
        MPTClassifier().fit(x[:5], y[:4])
    clf = MPTClassifier(epochs=1).fit(x, y)
    with pytest.raises(ValueError, match="unseen"):
        clf.finetune(x, np.full(len(x), "eel"), epochs=1)
