from __future__ import annotations

import numpy as np
import pytest

from editpipe.gateway import BackendConfig, Gateway
from editpipe.mocks import MockBackend


@pytest.fixture
def backend() -> MockBackend:
    return MockBackend()


@pytest.fixture
def gateway(backend) -> Gateway:
    return Gateway(backend, BackendConfig(max_retries=2, backoff=0.01), sleep=lambda _: None)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
