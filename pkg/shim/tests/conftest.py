from __future__ import annotations

import numpy as np
import pytest
from fastapi.testclient import TestClient

from editshim.app import create_app
from editshim.config import ShimConfig

# The pipeline's gateway is the reference consumer of the wire protocol; the
# contract suite drives the shim through it, exactly as the primary mock
# suite does.
from editpipe.gateway import BackendConfig, BackendStatusError, Gateway, TransportError


class ClientTransport:
    """Adapts the ASGI test client to the gateway's transport interface."""

    def __init__(self, client: TestClient, api_key: str | None = None):
        self.client = client
        self.api_key = api_key

    def request(self, capability: str, body: dict) -> dict:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.client.post(f"/v1/{capability}", json=body, headers=headers)
        except Exception as exc:  # connection-level failures
            raise TransportError(f"{capability}: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendStatusError(capability, resp.status_code, resp.text)
        return resp.json()


@pytest.fixture
def client() -> TestClient:
    return TestClient(create_app(ShimConfig()))


@pytest.fixture
def gateway(client) -> Gateway:
    return Gateway(ClientTransport(client), BackendConfig(), sleep=lambda _: None)


@pytest.fixture
def scene() -> np.ndarray:
    """A photo-like scene: gradient background with one salient object."""
    h, w = 72, 96
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for y in range(h):
        img[y, :, 0] = 60 + y // 2
        img[y, :, 1] = 90 + y // 3
        img[y, :, 2] = 130
    img[28:46, 36:62] = (205, 40, 40)
    return img
