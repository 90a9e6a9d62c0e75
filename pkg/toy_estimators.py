"""Small estimators trained on the toy faces.

IdentityClassifier gives the identity embedding (its penultimate layer) used
by the identity loss and the identity metric. LandmarkRegressor recovers
landmarks from generated images so pose and expression can be measured.
"""

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from action_log import log_action
from reenactor_errors import DataError, PluginError


def _conv_stack(channels, in_channels=3):
    layers = []
    for ch in channels:
        layers += [nn.Conv2d(in_channels, ch, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        in_channels = ch
    return nn.Sequential(*layers)


class IdentityClassifier(nn.Module):
    def __init__(self, n_identities, embedding_dim=32, channels=(16, 32, 64)):
        super().__init__()
        self.n_identities = n_identities
        self.embedding_dim = embedding_dim
        self.features = nn.Sequential(
            _conv_stack(channels),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(channels[-1], embedding_dim),
        )
        self.head = nn.Linear(embedding_dim, n_identities)

    def embed(self, images):
        return F.normalize(self.features(images), dim=1)

    def forward(self, images):
        return self.head(self.embed(images))


class LandmarkRegressor(nn.Module):
    def __init__(self, n_points, resolution, channels=(16, 32, 64, 64)):
        super().__init__()
        self.n_points = n_points
        self.resolution = resolution
        self.features = _conv_stack(channels)
        side = resolution // 2 ** len(channels)
        self.head = nn.Linear(channels[-1] * side * side, 2 * n_points)

    def forward(self, images):
        x = self.features(images).flatten(1)
        return torch.sigmoid(self.head(x)).view(-1, self.n_points, 2)


def _batches(n, batch_size, generator):
    while True:
        yield torch.randperm(n, generator=generator)[:batch_size]


def train_identity_classifier(images, identity_ids, n_identities=None, steps=300, lr=2e-3, batch_size=16, seed=0):
    """Fit the toy identity classifier on (N, 3, H, W) images"""
    if len(images) == 0:
        raise DataError("No images to train the identity classifier on")
    torch.manual_seed(seed)
    n_identities = n_identities or int(identity_ids.max()) + 1
    model = IdentityClassifier(n_identities)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    batches = _batches(len(images), batch_size, generator)
    for _ in tqdm(range(steps), desc="identity classifier", leave=False):
        idx = next(batches)
        # light noise so the embedding tolerates synthesis artefacts
        x = images[idx] + 0.05 * torch.randn(images[idx].shape, generator=generator)
        loss = F.cross_entropy(model(x.clamp(-1, 1)), identity_ids[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    log_action(f"Identity classifier trained on {len(images)} images, {n_identities} identities (final loss {loss.item():.4f})")
    return model.eval()


def train_landmark_regressor(images, landmarks, resolution, steps=600, lr=2e-3, batch_size=16, seed=0):
    """Fit the toy landmark regressor; landmarks is (N, L, 2) with NaN for missing points"""
    if len(images) == 0:
        raise DataError("No images to train the landmark regressor on")
    torch.manual_seed(seed)
    target = torch.as_tensor(np.asarray(landmarks), dtype=torch.float32)
    valid = torch.isfinite(target)
    target = torch.nan_to_num(target)
    model = LandmarkRegressor(target.shape[1], resolution)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    batches = _batches(len(images), batch_size, generator)
    for _ in tqdm(range(steps), desc="landmark regressor", leave=False):
        idx = next(batches)
        pred = model(images[idx])
        mask = valid[idx]
        loss = ((pred - target[idx]) ** 2)[mask].mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    log_action(f"Landmark regressor trained on {len(images)} images (final mse {loss.item():.6f})")
    return model.eval()


def predict_landmarks(regressor, images):
    with torch.no_grad():
        return regressor(images).cpu().numpy().astype(np.float64)


def save_estimator(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, IdentityClassifier):
        meta = {"kind": "identity_classifier", "n_identities": model.n_identities, "embedding_dim": model.embedding_dim}
    elif isinstance(model, LandmarkRegressor):
        meta = {"kind": "landmark_regressor", "n_points": model.n_points, "resolution": model.resolution}
    else:
        raise PluginError(type(model).__name__, f"Cannot save estimator of type {type(model).__name__}")
    torch.save({"meta": meta, "state": model.state_dict()}, path)
    return path


def load_estimator(path):
    path = Path(path)
    if not path.exists():
        raise PluginError(path.name, f"Estimator file {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = payload["meta"]
    if meta["kind"] == "identity_classifier":
        model = IdentityClassifier(meta["n_identities"], meta["embedding_dim"])
    elif meta["kind"] == "landmark_regressor":
        model = LandmarkRegressor(meta["n_points"], meta["resolution"])
    else:
        raise PluginError(meta["kind"], f"Unknown estimator kind '{meta['kind']}' in {path}")
    model.load_state_dict(payload["state"])
    return model.eval()
