from typing import Any, Dict, List, Literal

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr

from wsdiag.app.schemas.schemas import InputVariant, TrainConfig


class PcaModel(BaseModel):
    mean: List[float]
    components: List[List[float]]  # k rows, each of length dim
    explained_variance: List[float]  # non-increasing
    k: int
    total_variance: float  # trace of the sample covariance

    _arrays: Dict[str, np.ndarray] = PrivateAttr(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def mean_array(self) -> np.ndarray:
        if "mean" not in self._arrays:
            self._arrays["mean"] = np.asarray(self.mean, dtype=float)
        return self._arrays["mean"]

    @property
    def components_array(self) -> np.ndarray:
        if "components" not in self._arrays:
            self._arrays["components"] = np.asarray(self.components, dtype=float).reshape(self.k, self.dim)
        return self._arrays["components"]

    @property
    def explained_variance_ratio(self) -> List[float]:
        if self.total_variance <= 0:
            return [0.0] * self.k
        return [v / self.total_variance for v in self.explained_variance]


class ClassifierModel(BaseModel):
    weights: List[float]
    bias: float
    dim: int
    embedder_fingerprint: str
    trained_on: Literal["weak", "gold"]
    threshold: float = 0.5
    train_config: TrainConfig
    variant: InputVariant
    feature_mean: List[float]  # per-dimension standardization fitted on training chunks
    feature_scale: List[float]
    final_loss: float

    _arrays: Dict[str, np.ndarray] = PrivateAttr(default_factory=dict)

    def array(self, name: str) -> np.ndarray:
        if name not in self._arrays:
            self._arrays[name] = np.asarray(getattr(self, name), dtype=float)
        return self._arrays[name]


class StageRecord(BaseModel):
    fingerprint: str
    seed: int
    status: Literal["completed", "cached"]
    inputs: Dict[str, str] = Field(default_factory=dict)  # relative path -> sha256
    artifacts: Dict[str, str] = Field(default_factory=dict)  # relative path -> sha256


class RunManifest(BaseModel):
    tool_version: str
    config: Dict[str, Any]
    stages: Dict[str, StageRecord] = Field(default_factory=dict)
