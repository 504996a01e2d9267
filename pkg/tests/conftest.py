from pathlib import Path

import numpy as np
import pytest

from precmotion.arm import ArmModel, Environment, load_environment, load_model

DATA = Path(__file__).resolve().parents[1] / "src" / "precmotion" / "data"
ENV_NAMES = ("open_shelf", "pillars", "ring_cage")


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def model() -> ArmModel:
    return load_model(DATA / "arm_default.json")


@pytest.fixture(scope="session")
def envs() -> dict[str, Environment]:
    return {name: load_environment(DATA / f"env_{name}.json") for name in ENV_NAMES}


@pytest.fixture(scope="session")
def empty_env() -> Environment:
    return Environment("empty", np.zeros((0, 3)))
