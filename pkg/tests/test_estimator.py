import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xil.estimator import XILPolicy, validate_chunks, validate_goals, validate_states

SMALL = dict(d_model=16, n_heads=2, n_layers=1, steps=30, batch_size=16)


def toy_data(rng, n=40, h=1):
    X = rng.uniform(-1, 1, (n, h, 2))
    y = np.tanh(X[:, -1:, :] @ np.array([[0.5, -0.2], [0.1, 0.4]]))
    return X, y


def test_get_params_and_clone():
    est = XILPolicy(head="rf", d_model=32)
    p = est.get_params()
    assert p["head"] == "rf" and p["d_model"] == 32 and p["backbone"] == "transformer"
    c = clone(est).set_params(backbone="mamba")
    assert c.backbone == "mamba" and est.backbone == "transformer"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        XILPolicy().predict(np.zeros((2, 2)))


@pytest.mark.parametrize("head", ["bc", "beso", "ddpm", "rf"])
def test_fit_predict_shapes(rng, head):
    X, y = toy_data(rng)
    est = XILPolicy(head=head, **SMALL).fit(X, y)
    out = est.predict(X[:5])
    assert out.shape == (5, 1, 2) and np.isfinite(out).all()
    assert len(est.loss_curve_) == 30 and est.n_features_in_ == 2


def test_bc_learns_and_prediction_is_seeded(rng):
    X, y = toy_data(rng, n=64)
    est = XILPolicy(head="bc", **{**SMALL, "steps": 300}).fit(X[:, 0], y[:, 0])
    assert np.mean(est.loss_curve_[-20:]) < 0.2 * np.mean(est.loss_curve_[:5])
    np.testing.assert_array_equal(est.predict(X[:4]), est.predict(X[:4]))


def test_history_and_goals(rng):
    X, y = toy_data(rng, h=3)
    g = rng.integers(0, 4, len(X))
    est = XILPolicy(head="bc", **SMALL).fit(X, y, goals=g)
    assert est.predict(X[:3], goals=g[:3]).shape == (3, 1, 2)
    with pytest.raises(ValueError, match="history 3"):
        est.predict(X[:3, :1])


def test_validation_errors():
    with pytest.raises(ValueError):
        validate_states([[np.nan, 1.0]])
    with pytest.raises(ValueError, match="shape"):
        validate_states(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        validate_chunks(np.full((2, 2), 1.5), 2)
    with pytest.raises(ValueError, match="actions must be"):
        validate_chunks(np.zeros((3, 2)), 2)
    with pytest.raises(ValueError, match="integers"):
        validate_goals(np.zeros(2), 2, 4)
    with pytest.raises(ValueError, match=r"\[0, 4\)"):
        validate_goals(np.array([0, 4]), 2, 4)
    assert validate_states(np.zeros((5, 3))).shape == (5, 1, 3)
