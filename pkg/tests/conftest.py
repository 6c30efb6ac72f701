import numpy as np
import pytest

from dmuq.detector import DetectorConfig, PreparedSet, init_model, train
from dmuq.scenegen import SceneConfig, generate_dataset

SMALL = SceneConfig(
    world_width=24.0,
    world_length=24.0,
    grid_cells=16,
    n_agents=2,
    n_objects=3,
    n_scenes=2,
    frames_per_scene=60,
    sensing_radius=16.0,
    seed=7,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return SMALL


@pytest.fixture(scope="session")
def small_splits():
    train = generate_dataset(SMALL)
    val = generate_dataset(SMALL.replace(n_scenes=1, frames_per_scene=20), first_scene=2)
    test = generate_dataset(SMALL.replace(n_scenes=1, frames_per_scene=20), first_scene=3)
    return {"train": train, "val": val, "test": test}


@pytest.fixture(scope="session")
def small_cfg():
    return DetectorConfig(epochs=40)


@pytest.fixture(scope="session")
def trained_img(small_splits, small_cfg):
    """A small IMG detector trained long enough to match some validation boxes."""
    model = init_model(SMALL, "IMG", small_cfg, seed=3)
    data = PreparedSet(small_splits["train"], model, "early")
    return train(model, data, seed=3).model


@pytest.fixture(scope="session")
def trained_none(small_splits, small_cfg):
    model = init_model(SMALL, None, small_cfg, seed=3)
    data = PreparedSet(small_splits["train"], model, "early")
    return train(model, data, seed=3).model


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
