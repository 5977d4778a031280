from __future__ import annotations

import copy
import hashlib
from typing import ClassVar

import numpy as np

from ..grad import Tape, Tensor

MODEL_KINDS: dict[str, type["Model"]] = {}


def register(cls):
    MODEL_KINDS[cls.kind] = cls
    return cls


class Model:
    """A parameterized likelihood model.

    ``params`` is an ordered dict; its insertion order is the declaration
    order used by the checkpoint format. Forward methods accept an optional
    ``P`` mapping of tensors so callers can route gradients through a tape;
    without ``P`` they evaluate on the stored parameters with no tracking.
    """

    kind: ClassVar[str] = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_config(cls, cfg: dict) -> "Model":
        raise NotImplementedError

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def _p(self, P):
        return self.tensors() if P is None else P

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for k in self.params:
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = v.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
