import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wbgs import WidebandGaussianField
from wbgs.estimator import check_X, check_X_y
from wbgs.scene import room, write_scene

TINY = dict(W=24, H=12, n_surface=30, n_volume=10, att_width=16, h_dim=8, rad_width=8, L_pos=3, L_freq=2,
            densify_interval=2)


def data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform([1, 0.5, 0.5], [4.5, 3.5, 2.5], size=(n, 3)),
                         rng.choice([1e9, 10e9, 94e9], size=n)])
    return X, rng.uniform(0, 1, size=(n, 12, 24))


def test_get_params_and_clone():
    est = WidebandGaussianField(scene=room(), iterations=7, lr_net=5e-4)
    p = est.get_params()
    assert p["iterations"] == 7 and p["lr_net"] == 5e-4
    c = clone(est)
    assert c.get_params()["lr_net"] == 5e-4 and not hasattr(c, "state_")
    est.set_params(lam=0.5)
    assert est.lam == 0.5


def test_validation_helpers():
    assert check_X([1.0, 2.0, 3.0, 1e9]).shape == (1, 4)
    with pytest.raises(ValueError, match="shape"):
        check_X(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        check_X([[1.0, 2.0, np.nan, 1e9]])
    with pytest.raises(ValueError, match="> 0"):
        check_X([[1.0, 2.0, 3.0, 0.0]])
    X, y = data()
    with pytest.raises(ValueError, match="shape"):
        check_X_y(X, y[:, :5], 24, 12)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_X_y(X, y + 1.0, 24, 12)
    with pytest.raises(ValueError, match="at least one"):
        check_X_y(np.zeros((0, 4)), np.zeros((0, 12, 24)), 24, 12)


def test_unfitted_and_sceneless_errors():
    est = WidebandGaussianField(**TINY)
    with pytest.raises(NotFittedError):
        est.predict([[1.0, 1.0, 1.0, 1e9]])
    X, y = data()
    with pytest.raises(ValueError, match="scene"):
        est.fit(X, y)


def test_fit_predict_score_save_load(tmp_path):
    X, y = data()
    est = WidebandGaussianField(scene=room(), iterations=4, **TINY).fit(X, y)
    assert len(est.history_.loss) == 4
    pred = est.predict(X)
    assert pred.shape == (4, 12, 24) and np.all(np.isfinite(pred))
    assert est.score(X, pred) == pytest.approx(1.0)
    s = est.score(X, y)
    assert -1.0 <= s <= 1.0
    assert est.score(X, y, sample_weight=np.ones(4)) == pytest.approx(s)
    assert len(est.evaluate(X, y).rows) == len(set(X[:, 3]))
    est.save(tmp_path / "m.ckpt")
    back = WidebandGaussianField.load(tmp_path / "m.ckpt")
    assert np.array_equal(back.predict(X), pred)
    assert back.get_params()["iterations"] == 4 and back.get_params()["att_width"] == 16


def test_scene_path_and_partial_fit_matches_fit(tmp_path):
    write_scene(room(), tmp_path / "room.json")
    X, y = data()
    full = WidebandGaussianField(scene=str(tmp_path / "room.json"), iterations=4, **TINY).fit(X, y)
    part = WidebandGaussianField(scene=room(), iterations=4, **TINY)
    part.partial_fit(X, y, 2).partial_fit(X, y, 2)
    assert np.array_equal(full.predict(X), part.predict(X))
    assert len(part.history_.loss) == 4
