"""Per-run random streams.

A run seed ``s`` is expanded with ``numpy.random.SeedSequence(s).spawn(5)``;
the children, in this order, drive model initialisation, the data stream,
the episodic buffer (reservoir draws and replay sampling), the semantic
memory gate and the Fisher gate. Streams are independent, so switching one
gate off does not shift any other draw.
"""
from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("init", "stream", "buffer", "semantic", "fisher")


@dataclass
class RunStreams:
    init: np.random.Generator
    stream: np.random.Generator
    buffer: np.random.Generator
    semantic: np.random.Generator
    fisher: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        children = np.random.SeedSequence(int(seed)).spawn(len(STREAM_NAMES))
        return cls(*(np.random.default_rng(c) for c in children))
