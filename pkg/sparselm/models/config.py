import os
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

Task = Literal["lm", "pos", "recite"]
OrderStrategy = Literal["up", "down", "none"]
MatchBudget = Literal["match-budget"]

# hyperparameter names as written in experiment logs, accepted verbatim as config keys
HYPERPARAMETER_NAMES = {
    "optimizer": "optimizer",
    "learning rate": "learning_rate",
    "epochs": "epochs",
    "word level embedding dropout": "word_level_embedding_dropout",
    "variational embedding dropout": "variational_embedding_dropout",
    "DropConnect on W_hh": "dropconnect_w_hh",
    "batch size": "batch_size",
}

_TASK_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "pos": {
        "embedding_size": 20,
        "hidden_size": 10,
        "num_layers": 1,
        "optimizer": "adam",
        "learning_rate": 0.001,
        "lr_decay": 1.0,
        "epochs": 50,
        "clip_norm": None,
        "tie_weights": False,
    },
    "recite": {
        "optimizer": "sgd",
        "learning_rate": 10.0,
        "lr_decay": 0.97,
        "epochs": 150,
        "clip_norm": 5.0,
    },
    "lm": {
        "optimizer": "sgd",
        "learning_rate": 10.0,
        "lr_decay": 0.97,
        "epochs": 40,
        "clip_norm": 5.0,
        "dropconnect_w_hh": 0.5,
    },
}


def normalize_keys(raw: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in raw.items():
        key = HYPERPARAMETER_NAMES.get(key, key)
        out[key.replace("-", "_").replace(" ", "_")] = value
    return out


class DropoutSpec(BaseModel):
    word_embedding_p: float = Field(0.0, ge=0.0, lt=1.0)
    variational_p: float = Field(0.0, ge=0.0, lt=1.0)
    weight_drop_p: float = Field(0.0, ge=0.0, lt=1.0)
    hidden_p: float = Field(0.0, ge=0.0, lt=1.0)


class ExperimentConfig(BaseModel):
    """One training run. Unset fields take the task's documented defaults."""

    model_config = ConfigDict(extra="forbid")

    task: Task
    seed: int = Field(..., ge=0)
    run_id: Optional[str] = None

    # data
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    vocab_size: Optional[int] = Field(None, ge=1)
    num_tags: int = Field(49, ge=1)
    min_count: int = Field(1, ge=1)
    output_dir: Optional[str] = None

    # model dims
    embedding_size: int = Field(400, ge=1)
    hidden_size: int = Field(1150, ge=1)
    num_layers: int = Field(3, ge=1)
    tagger_hidden_size: int = Field(10, ge=1)
    tie_weights: bool = True

    # sparsity
    segments: Optional[List[int]] = None
    # per layer: a number or "match-budget"; a matched entry in a list also takes up the
    # budget that the layers before it left unused
    gammas: Union[List[Union[float, MatchBudget]], MatchBudget, None] = None
    match_embedding_size: Optional[int] = Field(None, ge=1)
    match_hidden_size: Optional[int] = Field(None, ge=1)
    embedding_density: float = Field(1.0, gt=0.0, le=1.0)
    embedding_bins: Optional[int] = Field(None, ge=1)
    order_strategy: OrderStrategy = "up"

    # regularization
    word_level_embedding_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    variational_embedding_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    dropconnect_w_hh: float = Field(0.0, ge=0.0, lt=1.0)
    variational_hidden_dropout: float = Field(0.0, ge=0.0, lt=1.0)

    # optimization
    optimizer: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(10.0, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    lr_decay: float = Field(1.0, gt=0.0, le=1.0)
    epochs: int = Field(1, ge=1)
    batch_size: int = Field(20, ge=1)
    bptt_len: int = Field(35, ge=1)
    clip_norm: Optional[float] = Field(None, gt=0.0)

    # bookkeeping
    record_wall_clock: bool = False
    save_checkpoint: bool = True

    @model_validator(mode="before")
    @classmethod
    def _apply_task_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = normalize_keys(data)
        defaults = _TASK_DEFAULTS.get(data.get("task"), {})
        return {**defaults, **data}

    @model_validator(mode="after")
    def _check_sparsity(self):
        layers = self.recurrent_layer_count
        if self.segments is not None and len(self.segments) != layers:
            raise ValueError(f"segments lists {len(self.segments)} layers, model has {layers}")
        if isinstance(self.gammas, list) and len(self.gammas) != layers:
            raise ValueError(f"gammas lists {len(self.gammas)} layers, model has {layers}")
        if self.matches_budget and self.match_hidden_size is None:
            raise ValueError("gammas 'match-budget' needs match_hidden_size (the dense reference)")
        # deferred import: the solvers live in the services layer
        from sparselm.services.networks import check_config_feasible

        check_config_feasible(self)
        return self

    @property
    def matches_budget(self) -> bool:
        return self.gammas == "match-budget" or (isinstance(self.gammas, list) and "match-budget" in self.gammas)

    @property
    def recurrent_layer_count(self) -> int:
        return 1 if self.task == "pos" else self.num_layers

    @property
    def layer_segments(self) -> List[int]:
        return list(self.segments) if self.segments is not None else [1] * self.recurrent_layer_count

    @property
    def dropout(self) -> DropoutSpec:
        return DropoutSpec(
            word_embedding_p=self.word_level_embedding_dropout,
            variational_p=self.variational_embedding_dropout,
            weight_drop_p=self.dropconnect_w_hh,
            hidden_p=self.variational_hidden_dropout,
        )

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.task}-seed{self.seed}"

    def resolved_output_dir(self) -> str:
        base = self.output_dir or os.getenv("SPARSELM_OUTPUT_DIR", "runs")
        return os.path.join(base, self.resolved_run_id)


def parse_override(text: str) -> Tuple[str, Any]:
    """'key=value' with the value parsed as a YAML scalar or list."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def read_config_mapping(path: Optional[str], overrides: Optional[List[str]] = None) -> Dict[str, Any]:
    raw: Dict[str, Any] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a key-value mapping")
        raw.update(loaded)
    for item in overrides or []:
        key, value = parse_override(item)
        raw[key] = value
    return raw


def split_sweep(raw: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, List[Any]]]:
    raw = dict(raw)
    sweep = normalize_keys(raw.pop("sweep", None) or {})
    for key, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ValueError(f"sweep values for {key!r} must be a non-empty list")
    return raw, sweep


def load_experiment(path: Optional[str], overrides: Optional[List[str]] = None) -> Tuple[ExperimentConfig, Dict[str, List[Any]]]:
    base, sweep = split_sweep(read_config_mapping(path, overrides))
    return ExperimentConfig.model_validate(base), sweep
