"""Named deterministic random streams."""

import hashlib
from typing import Any, Dict

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 generator derived from (seed, name)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _name_key(name)])))


class StreamRegistry:
    """Holds the run's named generators so their states can be checkpointed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = named_stream(self.seed, name)
        return self._streams[name]

    def state_dict(self) -> Dict[str, Any]:
        return {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())}

    def load_state_dict(self, states: Dict[str, Any]) -> None:
        for name, state in states.items():
            self.get(name).bit_generator.state = state
