import os

import pytest
import torch

from face_dataset_workflow import build_manifest, load_samples, write_manifest
from reenactor_config import desk_config
from synthetic_faces import generate_synthetic_dataset

TEST_RESOLUTION = 32


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with REENACTOR_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("REENACTOR_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set REENACTOR_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fixed_seed():
    torch.manual_seed(0)


@pytest.fixture
def desk32():
    """Desk config at 32x32 with CPU friendly step counts"""
    config = desk_config(TEST_RESOLUTION)
    config.optim.batch_size = 2
    config.optim.max_steps = 4
    config.optim.fusion_steps = 2
    config.optim.checkpoint_every = 2
    config.optim.log_every = 1
    return config


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """4 identities x 4 samples of synthetic faces at 32x32"""
    root = tmp_path_factory.mktemp("toy_faces")
    generate_synthetic_dataset(root, n_identities=4, samples_per_identity=4, resolution=TEST_RESOLUTION, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_manifest_dir(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_manifest")
    write_manifest(build_manifest(toy_root, split_ratio=0.8, seed=0), out)
    return out


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    return build_manifest(toy_root, split_ratio=0.8, seed=0)


@pytest.fixture(scope="session")
def toy_samples(toy_manifest):
    return load_samples(toy_manifest, None, TEST_RESOLUTION)


@pytest.fixture(scope="session")
def trained_toy_run(tmp_path_factory):
    """A desk-scale run on 6 identities x 6 faces; only slow tests ask for it"""
    from training_workflow import train

    base = tmp_path_factory.mktemp("toy_run")
    generate_synthetic_dataset(base / "faces", n_identities=6, samples_per_identity=6, resolution=TEST_RESOLUTION, seed=2)
    manifest = build_manifest(base / "faces", split_ratio=0.7, seed=0)
    config = desk_config(TEST_RESOLUTION)
    config.optim.max_steps = 1500
    config.optim.fusion_steps = 300
    config.optim.checkpoint_every = 500
    state = train(config, manifest, base / "run", progress=False)
    return config, manifest, state, base / "run"
