"""Batch-tagged messages exchanged between adjacent modules."""
from dataclasses import dataclass

import numpy as np


@dataclass
class ActivationPacket:
    batch_id: int
    tensor: np.ndarray
    source: int = 0

    def __post_init__(self):
        if self.batch_id < 1:
            raise ValueError(f"batch ids start at 1, got {self.batch_id}")


@dataclass
class GradientPacket:
    batch_id: int
    tensor: np.ndarray
    source: int = 0

    def __post_init__(self):
        if self.batch_id < 1:
            raise ValueError(f"batch ids start at 1, got {self.batch_id}")


@dataclass
class LabelPacket:
    batch_id: int
    labels: np.ndarray
