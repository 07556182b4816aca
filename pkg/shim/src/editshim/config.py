"""Shim configuration: one provider per capability, port, device, optional auth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

CAPABILITIES = ("chat", "detect", "segment", "inpaint", "vqa", "embed")

DEFAULT_PROVIDERS = {cap: "procedural" for cap in CAPABILITIES}


@dataclass
class ShimConfig:
    providers: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROVIDERS))
    port: int = 9000
    host: str = "127.0.0.1"
    device: str = "cpu"
    api_key: Optional[str] = None

    def __post_init__(self) -> None:
        unknown = set(self.providers) - set(CAPABILITIES)
        if unknown:
            raise ValueError(f"unknown capabilities in config: {sorted(unknown)}")
        for cap in CAPABILITIES:
            if cap in self.providers and not self.providers[cap]:
                raise ValueError(f"capability {cap!r} has an empty provider name")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ShimConfig":
        if path is None:
            return cls()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        providers = dict(DEFAULT_PROVIDERS)
        providers.update(data.get("providers", {}))
        return cls(
            providers=providers,
            port=int(data.get("port", 9000)),
            host=str(data.get("host", "127.0.0.1")),
            device=str(data.get("device", "cpu")),
            api_key=data.get("api_key"),
        )
