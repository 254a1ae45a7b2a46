import math
from typing import List, Literal, Optional

from pydantic import BaseModel, model_validator

METRICS_HEADER = ["run_id", "task", "epoch", "split", "loss", "perplexity", "accuracy", "lr", "seconds"]


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


class MetricsRow(BaseModel):
    """One line of the metrics CSV."""

    run_id: str
    task: Literal["lm", "pos", "recite"]
    epoch: int
    split: Literal["train", "valid", "test"]
    loss: float
    perplexity: Optional[float] = None
    accuracy: Optional[float] = None
    lr: Optional[float] = None
    seconds: Optional[float] = None

    @model_validator(mode="after")
    def _perplexity_matches_loss(self):
        if self.perplexity is not None and math.isfinite(self.loss):
            expected = math.exp(min(self.loss, 700.0))
            if not math.isclose(self.perplexity, expected, rel_tol=1e-9):
                raise ValueError(f"perplexity {self.perplexity} != exp(loss) = {expected}")
        return self

    def to_csv_fields(self) -> List[str]:
        return [
            self.run_id,
            self.task,
            str(self.epoch),
            self.split,
            _fmt(self.loss),
            _fmt(self.perplexity),
            _fmt(self.accuracy),
            _fmt(self.lr),
            _fmt(self.seconds),
        ]


def perplexity_of(loss: float) -> float:
    return math.exp(min(loss, 700.0)) if math.isfinite(loss) else float("nan")
