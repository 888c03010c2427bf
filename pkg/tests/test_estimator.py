import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from auattn import AUDetector
from auattn.exceptions import ContractError, DimensionError

SMALL = dict(input_size=16, block_filters=(4, 4, 8, 8, 8, 8), pool_schedule="110000", attention_hidden=4,
             epochs=2, batch_size=16, deterministic=True, random_state=3)


@pytest.fixture(scope="module")
def data(tiny_index):
    return tiny_index.load_batch(range(len(tiny_index))), tiny_index.labels.astype(int)


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return AUDetector(**SMALL).fit(X[:48], y[:48], eval_set=(X[48:], y[48:]))


def test_params_round_trip():
    est = AUDetector(**SMALL)
    assert est.get_params()["pool_schedule"] == "110000"
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.set_params(lr=0.01)
    assert twin.lr == 0.01 and est.lr == 1e-3


def test_unfitted():
    with pytest.raises(NotFittedError):
        AUDetector().predict(np.zeros((1, 112, 112, 3)))


def test_fit_outputs(fitted, data):
    X, _ = data
    assert fitted.n_outputs_ == 12 and len(fitted.log_) == 2
    proba = fitted.predict_proba(X[:5])
    assert proba.shape == (5, 12) and np.all((proba > 0) & (proba < 1))
    assert np.array_equal(fitted.predict(X[:5]), (proba >= 0.5).astype(int))
    assert fitted.transform(X[:5]).shape == (5, 8)
    assert 0 <= fitted.score(X[48:], data[1][48:]) <= 1


def test_uint8_matches_float(fitted, data):
    X, _ = data
    u8 = np.rint(X[:4] * 255).astype(np.uint8)
    np.testing.assert_allclose(fitted.predict_proba(u8), fitted.predict_proba(X[:4]), atol=1e-6)


def test_single_image(fitted, data):
    assert fitted.predict_proba(data[0][0]).shape == (1, 12)


def test_refit_deterministic(fitted, data):
    X, y = data
    again = clone(fitted).fit(X[:48], y[:48], eval_set=(X[48:], y[48:]))
    assert [e.row() for e in again.log_] == [e.row() for e in fitted.log_]


@pytest.mark.parametrize("bad", [np.zeros((2, 17, 17, 3)), np.zeros((2, 16, 16, 1)), np.zeros((16, 16))])
def test_rejects_bad_shapes(fitted, bad):
    with pytest.raises(DimensionError):
        fitted.predict(bad)


def test_rejects_out_of_range(fitted):
    with pytest.raises(ContractError):
        fitted.predict(np.full((1, 16, 16, 3), 2.0))
    with pytest.raises(ContractError):
        AUDetector(**SMALL).fit(np.zeros((2, 16, 16, 3)), np.full((2, 12), 3))


def test_label_rows_must_match(data):
    X, y = data
    with pytest.raises(DimensionError):
        AUDetector(**SMALL).fit(X[:4], y[:3])
