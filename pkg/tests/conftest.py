import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sceneforge.config import RunConfig
from sceneforge.data import FeatureCache
from sceneforge.model import make_batch
from sceneforge.pipeline import build_model, tiny_corpus

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    logging.getLogger("sceneforge").setLevel(logging.ERROR)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_config(**over) -> RunConfig:
    cfg = RunConfig()
    m = cfg.model
    m.d_emb, m.n_heads, m.region_heads, m.n_layers, m.region_layers, m.ffn_dim = 16, 2, 2, 1, 1, 32
    for k, v in over.items():
        from sceneforge.config import set_option

        set_option(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return tiny_corpus(seed=0, directory=tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def model(corpus):
    return build_model(small_config(), corpus)


@pytest.fixture
def batch(corpus):
    return make_batch(corpus.records[:4], FeatureCache(), corpus.header.hierarchy)


@pytest.fixture(scope="session")
def frozen_model(corpus):
    """Shared read-only model for property tests that draw many inputs."""
    return build_model(small_config(), corpus)


@pytest.fixture(scope="session")
def frozen_batch(corpus):
    return make_batch(corpus.records[:4], FeatureCache(), corpus.header.hierarchy)
