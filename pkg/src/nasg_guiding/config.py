"""Run configuration shared by the CLI and the progressive renderer."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

THREADS_ENV = "NASG_THREADS"


@dataclass
class RunConfig:
    scene: Optional[str] = None
    output: Optional[str] = None
    spp: int = 64
    components: int = 8
    capacity: int = 2**16  # S
    batch_size: int = 2**12  # t
    step_factor: int = 1  # nu
    lr: float = 0.002
    kl_blend: float = 0.2  # e
    blend_interval: int = 4  # M
    blend_steps: int = 64  # B
    seed: int = 0
    threads: int = 1
    guiding: bool = True
    model: str = "nasg"  # nasg | vmf | none
    reference: Optional[str] = None
    checkpoints: tuple = ()
    ramp: bool = True
    max_depth: int = 16
    rr_depth: int = 5
    exposure: float = 0.0

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.model not in ("nasg", "vmf", "none"):
            raise ValueError(f"unknown model {self.model!r}")
        self.checkpoints = tuple(int(c) for c in self.checkpoints)

    @property
    def guided(self) -> bool:
        return self.guiding and self.model != "none"

    def to_json(self) -> str:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def thread_count(requested: Optional[int] = None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, requested or 1)
