import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedgai import SketchDistiller, SketchGAN
from fedgai.synthdata import StyleProfile, generate_dataset


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(StyleProfile(stroke_width_px=2.0, seed=11), 8, 16)
    return ds.images, ds.sketches


@pytest.fixture(scope="module")
def fitted(data):
    return SketchGAN(n_epochs=1, batch_size=4, random_state=3).fit(*data)


def test_transform_shape_and_range(fitted, data):
    out = fitted.transform(data[0])
    assert out.shape == (8, 1, 16, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert len(fitted.history_) == 1 and set(fitted.history_[0]) >= {"gram", "total"}


def test_score_is_negative_proxy_fid(fitted, data):
    s = fitted.score(*data)
    assert np.isfinite(s) and s <= 0.0


def test_fit_is_deterministic(data):
    a = SketchGAN(n_epochs=1, batch_size=4, random_state=3).fit(*data).transform(data[0])
    b = SketchGAN(n_epochs=1, batch_size=4, random_state=3).fit(*data).transform(data[0])
    np.testing.assert_array_equal(a, b)


def test_params_roundtrip_and_clone():
    est = SketchGAN(n_epochs=4, gamma_clip=3.0)
    params = est.get_params()
    assert params["n_epochs"] == 4 and params["gamma_clip"] == 3.0
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "client_")
    assert est.set_params(batch_size=2).batch_size == 2


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        SketchGAN().transform(np.zeros((2, 3, 16, 16)))


@pytest.mark.parametrize(
    "X, y, match",
    [
        (np.zeros((2, 1, 16, 16)), np.zeros((2, 1, 16, 16)), "shape"),
        (np.zeros((2, 3, 12, 12)), np.zeros((2, 1, 12, 12)), "divisible by 8"),
        (np.full((2, 3, 16, 16), 2.0), np.zeros((2, 1, 16, 16)), r"\[0, 1\]"),
        (np.zeros((2, 3, 16, 16)), np.zeros((3, 1, 16, 16)), "different lengths"),
    ],
)
def test_fit_validation(X, y, match):
    with pytest.raises(ValueError, match=match):
        SketchGAN(n_epochs=0).fit(X, y)


def test_three_dim_sketches_accepted(data):
    est = SketchGAN(n_epochs=0).fit(data[0], data[1][:, 0])
    assert est.transform(data[0][:2]).shape == (2, 1, 16, 16)


def test_distiller(fitted, data):
    student = SketchDistiller(teacher=fitted, n_epochs=1, batch_size=4).fit()
    out = student.transform(data[0])
    assert out.shape == (8, 1, 16, 16) and out.min() >= 0 and out.max() <= 1
    assert np.isfinite(student.score(*data))
    assert student.resolution_ == 16


def test_distiller_needs_teacher():
    with pytest.raises(ValueError, match="teacher"):
        SketchDistiller().fit()
    with pytest.raises(NotFittedError):
        SketchDistiller(teacher=SketchGAN()).fit()
