import os

import pytest

from bodygen.body import make_toy_body
from bodygen.fields import load_or_build_template

CACHE_DIR = os.environ.get("BODYGEN_TEST_CACHE", "/tmp/bodygen-test-cache")

# CLI invocations inside the tests share the same template-grid cache
os.environ.setdefault("XDG_CACHE_HOME", CACHE_DIR)


def cached_template(model, resolution):
    return load_or_build_template(model, resolution, cache_dir=CACHE_DIR)


@pytest.fixture(scope="session")
def toy16():
    return make_toy_body(16, 64, 0)


@pytest.fixture(scope="session")
def toy2():
    return make_toy_body(2, 16, 0)


@pytest.fixture(scope="session")
def template96(toy16):
    return cached_template(toy16, 96)


@pytest.fixture(scope="session")
def template32_toy2(toy2):
    return cached_template(toy2, 32)
