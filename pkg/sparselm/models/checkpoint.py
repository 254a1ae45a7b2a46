from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from sparselm.models.plan import RecurrentSparsityPlan

CHECKPOINT_VERSION = "sparselm-checkpoint/1"


class ArrayEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)  # in elements, into the flat array file

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


class CheckpointManifest(BaseModel):
    """JSON side of a checkpoint; the arrays live in a flat little-endian float64 file next to it."""

    version: str = CHECKPOINT_VERSION
    gate_order: str = "ifgo"
    dtype: str = "<f8"
    task: str
    config: Dict[str, Any]
    vocabulary: Dict[str, Any]
    tagset: Optional[List[str]] = None
    plans: Dict[str, RecurrentSparsityPlan] = Field(default_factory=dict)
    embedding_lengths: List[int] = Field(default_factory=list)
    arrays: List[ArrayEntry] = Field(default_factory=list)
    epoch: int = 0
    metric_name: str = ""
    metric: Optional[float] = None

    @property
    def total_elements(self) -> int:
        return sum(a.size for a in self.arrays)
