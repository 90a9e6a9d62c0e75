import numpy as np
import pytest
import torch
from torch import nn

from reenactor_errors import DataError, PluginError
from toy_estimators import (
    IdentityClassifier,
    LandmarkRegressor,
    load_estimator,
    predict_landmarks,
    save_estimator,
    train_identity_classifier,
    train_landmark_regressor,
)


@pytest.fixture(scope="module")
def images(toy_samples):
    return torch.stack([s.image for s in toy_samples])


def test_identity_classifier_embedding(images, toy_samples):
    ids = torch.tensor([s.identity_id for s in toy_samples])
    model = train_identity_classifier(images, ids, steps=5, batch_size=4)
    assert model.n_identities == 4
    assert not model.training
    with torch.no_grad():
        embedding = model.embed(images)
    assert embedding.shape == (len(images), model.embedding_dim)
    torch.testing.assert_close(embedding.norm(dim=1), torch.ones(len(images)))


def test_landmark_regressor_predicts_unit_square(images, toy_samples):
    landmarks = np.stack([s.landmarks.points for s in toy_samples])
    model = train_landmark_regressor(images, landmarks, resolution=32, steps=5, batch_size=4)
    points = predict_landmarks(model, images[:3])
    assert points.shape == (3, landmarks.shape[1], 2)
    assert points.dtype == np.float64
    assert ((points >= 0) & (points <= 1)).all()


def test_landmark_regressor_ignores_missing_points(images, toy_samples):
    """NaN targets (absent gaze points) do not poison the loss."""
    landmarks = np.stack([s.landmarks.points for s in toy_samples])
    landmarks[:, -2:] = np.nan
    model = train_landmark_regressor(images, landmarks, resolution=32, steps=3, batch_size=4)
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_save_and_load(tmp_path):
    classifier = IdentityClassifier(3, embedding_dim=8)
    regressor = LandmarkRegressor(70, 32)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    for model in (classifier, regressor):
        path = save_estimator(model, tmp_path / f"{type(model).__name__}.pt")
        loaded = load_estimator(path)
        assert type(loaded) is type(model)
        with torch.no_grad():
            torch.testing.assert_close(loaded(x), model.eval()(x))


def test_estimator_errors(tmp_path):
    with pytest.raises(PluginError):
        load_estimator(tmp_path / "absent.pt")
    with pytest.raises(PluginError):
        save_estimator(nn.Linear(2, 2), tmp_path / "linear.pt")
    with pytest.raises(DataError):
        train_identity_classifier(torch.zeros(0, 3, 32, 32), torch.zeros(0, dtype=torch.long))
    with pytest.raises(DataError):
        train_landmark_regressor(torch.zeros(0, 3, 32, 32), np.zeros((0, 70, 2)), 32)
