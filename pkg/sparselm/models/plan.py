from typing import List

from pydantic import BaseModel, Field, model_validator


class ComponentSpec(BaseModel):
    """One dense LSTM component: reads inputs [input_offset, input_offset + input_width)."""

    input_offset: int = Field(ge=0)
    input_width: int = Field(ge=1)
    output_width: int = Field(ge=1)

    @property
    def input_stop(self) -> int:
        return self.input_offset + self.input_width


class RecurrentSparsityPlan(BaseModel):
    input_size: int = Field(ge=1)
    hidden_size: int = Field(ge=1)
    components: List[ComponentSpec]

    @model_validator(mode="after")
    def _check_layout(self):
        if not self.components:
            raise ValueError("a plan needs at least one component")
        widths = sum(c.output_width for c in self.components)
        if widths != self.hidden_size:
            raise ValueError(f"component outputs sum to {widths}, expected hidden_size {self.hidden_size}")
        for n, c in enumerate(self.components):
            if c.input_stop > self.input_size:
                raise ValueError(
                    f"component {n} window [{c.input_offset}, {c.input_stop}) exceeds input_size {self.input_size}"
                )
        return self

    @property
    def num_segments(self) -> int:
        return len(self.components)

    @property
    def output_offsets(self) -> List[int]:
        offsets, acc = [], 0
        for c in self.components:
            offsets.append(acc)
            acc += c.output_width
        return offsets

    @property
    def is_dense(self) -> bool:
        return len(self.components) == 1 and self.components[0].input_width == self.input_size
