import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from sparselm.errors import ShapeMismatchError
from sparselm.models.config import DropoutSpec, ExperimentConfig
from sparselm.models.embedding import EmbeddingAllocation
from sparselm.models.plan import RecurrentSparsityPlan
from sparselm.services.autodiff import Tensor, concat, linear, mul, tanh
from sparselm.services.embedding import SparseEmbedding, allocate_embedding, solve_alpha, uniform_bins
from sparselm.services.recurrent import BiLstm, SparseLstmLayer, StackedLstm
from sparselm.services.regularization import (
    variational_dropout,
    weight_drop_layer,
    word_embedding_dropout,
)
from sparselm.services.sparsity import (
    count_lstm_params,
    dense_lstm_params,
    plan_matching_dense,
    plan_recurrent_layer,
    plan_within_budget,
)

log = logging.getLogger("networks")


class ParameterRow(NamedTuple):
    name: str
    shape: Tuple[int, ...]
    count: int


@dataclass
class ForwardMasks:
    """Dropout masks for one batch; None everywhere means evaluation mode."""

    word_scale: Optional[np.ndarray] = None  # (batch, T)
    embedding: Optional[np.ndarray] = None  # (batch, k)
    hidden: Optional[List[Optional[np.ndarray]]] = None  # between stacked layers
    weights: Optional[list] = None  # per layer (or direction), per component


class LinearLayer:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, initialize: bool = True,
                 name: str = "linear") -> None:
        bound = 1.0 / np.sqrt(in_features)
        if initialize:
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
            b = rng.uniform(-bound, bound, size=(out_features,))
        else:
            w, b = np.zeros((out_features, in_features)), np.zeros(out_features)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(b, requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# plan resolution


def lm_layer_dims(embedding_size: int, hidden_size: int, num_layers: int, tie_weights: bool) -> List[Tuple[int, int]]:
    """(input, hidden) per stacked layer: k -> h -> ... -> h, the last one back to k when tied."""
    dims = []
    for n in range(num_layers):
        inp = embedding_size if n == 0 else hidden_size
        out = embedding_size if (tie_weights and n == num_layers - 1) else hidden_size
        dims.append((inp, out))
    return dims


def _resolve_plans(config: ExperimentConfig, dims: Sequence[Tuple[int, int]],
                   dense_dims: Sequence[Tuple[int, int]]) -> List[RecurrentSparsityPlan]:
    plans = []
    dense_total, sparse_total = 0, 0
    for n, ((inp, out), (d_inp, d_out), segs) in enumerate(zip(dims, dense_dims, config.layer_segments)):
        dense_total += dense_lstm_params(d_inp, d_out)
        if config.gammas == "match-budget":
            plan = plan_matching_dense(d_inp, d_out, inp, out, segs)
        elif isinstance(config.gammas, list) and config.gammas[n] == "match-budget":
            plan = plan_within_budget(dense_total - sparse_total, inp, out, segs)
        else:
            gamma = 1.0 if config.gammas is None else config.gammas[n]
            plan = plan_recurrent_layer(inp, out, segs, gamma)
        sparse_total += count_lstm_params(plan)
        plans.append(plan)
    return plans


def resolve_lm_plans(config: ExperimentConfig) -> List[RecurrentSparsityPlan]:
    dims = lm_layer_dims(config.embedding_size, config.hidden_size, config.num_layers, config.tie_weights)
    dense_dims = lm_layer_dims(
        config.match_embedding_size or config.embedding_size,
        config.match_hidden_size or config.hidden_size,
        config.num_layers,
        config.tie_weights,
    )
    return _resolve_plans(config, dims, dense_dims)


def resolve_pos_plan(config: ExperimentConfig) -> RecurrentSparsityPlan:
    """Plan shared by both BiLSTM directions."""
    dims = [(config.embedding_size, config.hidden_size)]
    dense_dims = [(config.match_embedding_size or config.embedding_size, config.match_hidden_size or config.hidden_size)]
    return _resolve_plans(config, dims, dense_dims)[0]


def embedding_bin_widths(config: ExperimentConfig) -> List[int]:
    return uniform_bins(config.embedding_size, config.embedding_bins)


def embedding_allocation(config: ExperimentConfig, vocab_size: int) -> EmbeddingAllocation:
    return allocate_embedding(vocab_size, config.embedding_size, config.embedding_density, embedding_bin_widths(config))


def check_config_feasible(config: ExperimentConfig) -> None:
    """Raises InfeasibleSparsityError when any planner or the alpha solver has no solution."""
    if config.task == "pos":
        resolve_pos_plan(config)
    else:
        resolve_lm_plans(config)
    if config.embedding_density < 1.0:
        solve_alpha(config.embedding_size, config.embedding_density, embedding_bin_widths(config))


# ---------------------------------------------------------------------------
# models


def _embed_sequence(embedding: SparseEmbedding, ids: np.ndarray, masks: Optional[ForwardMasks]) -> List[Tensor]:
    steps = []
    for t in range(ids.shape[1]):
        scale = masks.word_scale[:, t] if masks is not None and masks.word_scale is not None else None
        x = embedding.lookup(ids[:, t], row_scale=scale)
        if masks is not None and masks.embedding is not None:
            x = mul(x, Tensor(masks.embedding))
        steps.append(x)
    return steps


class LanguageModel:
    """Sparse embedding -> stacked sparse LSTMs -> softmax decoder over the vocabulary."""

    def __init__(self, embedding: SparseEmbedding, rnn: StackedLstm, decoder_bias: Tensor,
                 decoder: Optional[LinearLayer] = None) -> None:
        if decoder is None and rnn.output_size != embedding.dim:
            raise ShapeMismatchError(
                f"tied decoder needs the last layer to output k={embedding.dim}, got {rnn.output_size}"
            )
        self.embedding = embedding
        self.rnn = rnn
        self.decoder_bias = decoder_bias
        self.decoder = decoder

    @property
    def tie_weights(self) -> bool:
        return self.decoder is None

    @property
    def vocab_size(self) -> int:
        return self.embedding.vocab_size

    def parameters(self) -> List[Tensor]:
        params = self.embedding.parameters() + self.rnn.parameters()
        params += self.decoder.parameters() if self.decoder is not None else [self.decoder_bias]
        return params

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def plans(self) -> Dict[str, RecurrentSparsityPlan]:
        return {layer.name: layer.plan for layer in self.rnn.layers}

    def init_state(self, batch: int):
        return self.rnn.init_state(batch)

    def sample_masks(self, dropout: DropoutSpec, ids: np.ndarray, rng: np.random.Generator) -> ForwardMasks:
        batch = ids.shape[0]
        layers = self.rnn.layers
        return ForwardMasks(
            word_scale=word_embedding_dropout(ids, dropout.word_embedding_p, rng) if dropout.word_embedding_p else None,
            embedding=variational_dropout((batch, self.embedding.dim), dropout.variational_p, rng)
            if dropout.variational_p else None,
            hidden=[variational_dropout((batch, layer.hidden_size), dropout.hidden_p, rng) for layer in layers[:-1]]
            if dropout.hidden_p else None,
            weights=[weight_drop_layer(layer.recurrent_shapes(), dropout.weight_drop_p, rng) for layer in layers]
            if dropout.weight_drop_p else None,
        )

    def forward(self, ids: np.ndarray, states=None, masks: Optional[ForwardMasks] = None):
        """Logits of shape (T * batch, V), time-major rows, and the final recurrent states."""
        ids = np.asarray(ids, dtype=np.int64)
        steps = _embed_sequence(self.embedding, ids, masks)
        outputs, states = self.rnn.forward(
            steps,
            states,
            hidden_masks=masks.hidden if masks is not None else None,
            weight_masks=masks.weights if masks is not None else None,
        )
        flat = concat(outputs, axis=0)
        if self.decoder is not None:
            return self.decoder(flat), states
        return linear(flat, self.embedding.masked_table(), self.decoder_bias), states


class PosTagger:
    """Sparse embedding -> BiLSTM -> tanh projection -> tag softmax."""

    def __init__(self, embedding: SparseEmbedding, bilstm: BiLstm, hidden: LinearLayer, output: LinearLayer) -> None:
        self.embedding = embedding
        self.bilstm = bilstm
        self.hidden = hidden
        self.output = output

    @property
    def num_tags(self) -> int:
        return self.output.weight.shape[0]

    def parameters(self) -> List[Tensor]:
        return (
            self.embedding.parameters()
            + self.bilstm.parameters()
            + self.hidden.parameters()
            + self.output.parameters()
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def plans(self) -> Dict[str, RecurrentSparsityPlan]:
        return {layer.name: layer.plan for layer in (self.bilstm.forward_layer, self.bilstm.backward_layer)}

    def sample_masks(self, dropout: DropoutSpec, ids: np.ndarray, rng: np.random.Generator) -> ForwardMasks:
        batch = ids.shape[0]
        directions = (self.bilstm.forward_layer, self.bilstm.backward_layer)
        return ForwardMasks(
            word_scale=word_embedding_dropout(ids, dropout.word_embedding_p, rng) if dropout.word_embedding_p else None,
            embedding=variational_dropout((batch, self.embedding.dim), dropout.variational_p, rng)
            if dropout.variational_p else None,
            weights=[weight_drop_layer(d.recurrent_shapes(), dropout.weight_drop_p, rng) for d in directions]
            if dropout.weight_drop_p else None,
        )

    def forward(self, ids: np.ndarray, masks: Optional[ForwardMasks] = None) -> Tensor:
        """Tag logits of shape (T * batch, tags), time-major rows."""
        ids = np.asarray(ids, dtype=np.int64)
        steps = _embed_sequence(self.embedding, ids, masks)
        outputs = self.bilstm.forward(steps, weight_masks=masks.weights if masks is not None else None)
        flat = concat(outputs, axis=0)
        return self.output(tanh(self.hidden(flat)))


def build_lm_model(config: ExperimentConfig, vocab_size: Optional[int] = None, initialize: bool = True) -> LanguageModel:
    vocab_size = vocab_size or config.vocab_size
    if not vocab_size:
        raise ValueError("vocabulary size unknown: give a training corpus or set vocab_size")
    rng = np.random.default_rng(config.seed)
    allocation = embedding_allocation(config, vocab_size)
    embedding = SparseEmbedding(allocation, rng, initialize=initialize, name="embedding")
    layers = [
        SparseLstmLayer(plan, rng, initialize, name=f"rnn.{n}") for n, plan in enumerate(resolve_lm_plans(config))
    ]
    rnn = StackedLstm(layers)
    if config.tie_weights:
        decoder = None
        bias = Tensor(np.zeros(vocab_size), requires_grad=True, name="decoder.bias")
    else:
        decoder = LinearLayer(rnn.output_size, vocab_size, rng, initialize, name="decoder")
        bias = decoder.bias
    model = LanguageModel(embedding, rnn, bias, decoder)
    log.info(f"Built {config.task} model: V={vocab_size}, {parameter_count(model):,} parameters")
    return model


def build_pos_model(config: ExperimentConfig, vocab_size: Optional[int] = None, num_tags: Optional[int] = None,
                    initialize: bool = True) -> PosTagger:
    vocab_size = vocab_size or config.vocab_size
    if not vocab_size:
        raise ValueError("vocabulary size unknown: give a training corpus or set vocab_size")
    num_tags = num_tags or config.num_tags
    rng = np.random.default_rng(config.seed)
    allocation = embedding_allocation(config, vocab_size)
    embedding = SparseEmbedding(allocation, rng, initialize=initialize, name="embedding")
    plan = resolve_pos_plan(config)
    bilstm = BiLstm(
        SparseLstmLayer(plan, rng, initialize, name="bilstm.fwd"),
        SparseLstmLayer(plan, rng, initialize, name="bilstm.bwd"),
    )
    hidden = LinearLayer(bilstm.output_size, config.tagger_hidden_size, rng, initialize, name="tagger.hidden")
    output = LinearLayer(config.tagger_hidden_size, num_tags, rng, initialize, name="tagger.output")
    model = PosTagger(embedding, bilstm, hidden, output)
    log.info(f"Built pos model: V={vocab_size}, {num_tags} tags, {parameter_count(model):,} parameters")
    return model


def parameter_table(model) -> List[ParameterRow]:
    """Trainable entries per array, from the live arrays; the embedding counts its unmasked entries."""
    rows = []
    for name, p in model.named_parameters():
        count = model.embedding.parameter_count() if p is model.embedding.table else int(p.size)
        rows.append(ParameterRow(name, tuple(p.shape), count))
    return rows


def parameter_count(model) -> int:
    return sum(row.count for row in parameter_table(model))


def format_parameter_table(rows: Sequence[ParameterRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'name':<{width}}  {'shape':<16} {'params':>12}"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {'x'.join(map(str, r.shape)):<16} {r.count:>12,}")
    total = sum(r.count for r in rows)
    lines.append(f"{'total':<{width}}  {'':<16} {total:>12,}  ({total / 1e6:.2f}M)")
    return "\n".join(lines)
