import numpy as np
import pytest

from tools.common import settings
from tools.common.rng import stream
from tools.estimators.working_models import SYNTHETIC_WORKING_MODEL
from tools.synthetic.generator import generate_scenario
from tools.synthetic.scenarios import default_registry
from tools.tabular.dataset import Dataset, binary, continuous


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch):
    for name in (settings.ENV_OUTPUT_DIR, settings.ENV_TRUTH_CACHE, settings.ENV_N_JOBS):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return stream(20240401, 1)


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def base_spec():
    return default_registry().scenario("X1", "Y1.1", "M1.1", n=2000)


@pytest.fixture(scope="session")
def base_draw(base_spec):
    return generate_scenario(base_spec, stream(11, 3))


@pytest.fixture
def working():
    return SYNTHETIC_WORKING_MODEL


def logistic_dataset(n: int, beta, seed: int = 0) -> Dataset:
    """y ~ Bernoulli(expit(b0 + b1·x + b2·z))，x 二值、z 连续"""
    gen = stream(seed, n)
    x = (gen.random(n) < 0.4).astype(float)
    z = gen.standard_normal(n)
    eta = beta[0] + beta[1] * x + beta[2] * z
    y = (gen.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    return Dataset.from_columns((binary("Y"), binary("X"), continuous("Z")), {"Y": y, "X": x, "Z": z})


@pytest.fixture
def make_logistic():
    return logistic_dataset
