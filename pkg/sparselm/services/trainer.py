"""Training, evaluation and memorization harnesses for the lm, pos and recite tasks."""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import yaml

from sparselm.errors import CorpusError, DivergenceError, NonFiniteGradientError, ShapeMismatchError
from sparselm.models.checkpoint import CheckpointManifest
from sparselm.models.config import ExperimentConfig
from sparselm.models.metrics import MetricsRow, perplexity_of
from sparselm.services.autodiff import Tape, backward, softmax_cross_entropy
from sparselm.services.corpus import (
    TaggedCorpus,
    TagSet,
    Vocabulary,
    build_vocabulary,
    lm_batches,
    load_tagged_corpus,
    pos_batches,
    read_lm_corpus,
)
from sparselm.services.networks import LanguageModel, PosTagger, build_lm_model, build_pos_model
from sparselm.services.optimization import Optimizer, exp_decay_schedule
from sparselm.services.recurrent import detach_state
from sparselm.storage.checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from sparselm.storage.metrics import MetricsWriter

log = logging.getLogger("trainer")


@dataclass
class LmData:
    vocabulary: Vocabulary
    train: np.ndarray
    valid: Optional[np.ndarray] = None
    test: Optional[np.ndarray] = None


@dataclass
class PosData:
    train: TaggedCorpus
    valid: Optional[TaggedCorpus] = None
    test: Optional[TaggedCorpus] = None

    @property
    def vocabulary(self) -> Vocabulary:
        return self.train.vocabulary

    @property
    def tagset(self) -> TagSet:
        return self.train.tagset


@dataclass
class TrainResult:
    run_id: str
    task: str
    metric_name: str
    best_metric: float
    best_epoch: int
    summary_metric: float
    output_dir: str
    metrics_path: str
    checkpoint_path: Optional[str] = None
    rows: List[MetricsRow] = field(default_factory=list)


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise CorpusError(f"{what} is not configured")
    if not os.path.exists(path):
        raise CorpusError(f"{what} not found: {path}")
    return path


def load_lm_data(config: ExperimentConfig, vocabulary: Optional[Vocabulary] = None) -> LmData:
    """Vocabulary from the training split only; other splits map unseen words to the unknown id."""
    train_tokens = read_lm_corpus(_require(config.train_path, "train_path"))
    if vocabulary is None:
        vocabulary = build_vocabulary(train_tokens, config.min_count, config.order_strategy, config.seed)
    data = LmData(vocabulary, vocabulary.numericalize(train_tokens))
    if config.valid_path:
        data.valid = vocabulary.numericalize(read_lm_corpus(config.valid_path))
    if config.test_path:
        data.test = vocabulary.numericalize(read_lm_corpus(config.test_path))
    return data


def load_pos_data(config: ExperimentConfig, vocabulary: Optional[Vocabulary] = None,
                  tagset: Optional[TagSet] = None) -> PosData:
    train = load_tagged_corpus(
        _require(config.train_path, "train_path"),
        vocabulary=vocabulary,
        tagset=tagset,
        strategy=config.order_strategy,
        seed=config.seed,
        min_count=config.min_count,
    )
    data = PosData(train)
    if config.valid_path:
        data.valid = load_tagged_corpus(config.valid_path, train.vocabulary, train.tagset)
    if config.test_path:
        data.test = load_tagged_corpus(config.test_path, train.vocabulary, train.tagset)
    return data


# ---------------------------------------------------------------------------
# evaluation-mode passes (no tape, no masks)


def _eval_batch_size(ids: np.ndarray, batch_size: int) -> int:
    return max(1, min(batch_size, ids.size // 2))


class LmScores(NamedTuple):
    loss: float
    accuracy: float
    positions: int


def lm_pass(model: LanguageModel, ids: np.ndarray, batch_size: int, bptt_len: int) -> LmScores:
    """Mean next-token loss and greedy accuracy, recurrent state carried across segments."""
    states = model.init_state(batch_size)
    total_loss, correct, count = 0.0, 0, 0
    for inputs, targets in lm_batches(ids, batch_size, bptt_len):
        logits, states = model.forward(inputs, states)
        flat = targets.T.reshape(-1)
        total_loss += float(softmax_cross_entropy(logits, flat).data) * flat.size
        correct += int(np.sum(np.argmax(logits.data, axis=1) == flat))
        count += flat.size
    return LmScores(total_loss / count, correct / count, count)


def recite_accuracy(model: LanguageModel, ids: np.ndarray, bptt_len: int = 35) -> float:
    """Fraction of corpus positions whose next token is the argmax prediction.

    One stream over the whole corpus, so every one of the len(ids) - 1 positions is scored
    and the state runs contiguously from the first token.
    """
    return lm_pass(model, ids, 1, bptt_len).accuracy


def _tag_targets(tags: np.ndarray, unknown_id: int) -> Tuple[np.ndarray, np.ndarray]:
    flat = tags.T.reshape(-1)
    known = flat != unknown_id
    return np.where(known, flat, 0), known.astype(np.float64)


def pos_pass(model: PosTagger, corpus: TaggedCorpus, batch_size: int) -> Tuple[float, float]:
    """Mean loss over known-tag tokens and token accuracy; unknown-tag tokens count as errors."""
    unknown = corpus.tagset.unknown_id
    total_loss, known_total, correct, count = 0.0, 0.0, 0, 0
    for tokens, tags in pos_batches(corpus.sentences, batch_size):
        logits = model.forward(tokens)
        targets, weights = _tag_targets(tags, unknown)
        total_loss += float(softmax_cross_entropy(logits, targets, weights).data) * weights.sum()
        known_total += weights.sum()
        correct += int(np.sum((np.argmax(logits.data, axis=1) == targets) & (weights > 0)))
        count += targets.size
    if count == 0:
        raise CorpusError("cannot evaluate an empty tagged corpus")
    return total_loss / max(known_total, 1.0), correct / count


# ---------------------------------------------------------------------------
# training epochs


def _step(optimizer: Optimizer, tape: Tape, loss) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    optimizer.zero_grad()
    backward(tape, loss)
    optimizer.step()
    return value


def train_lm_epoch(model: LanguageModel, optimizer: Optimizer, ids: np.ndarray, config: ExperimentConfig,
                   rng: np.random.Generator) -> float:
    states = model.init_state(config.batch_size)
    total, count = 0.0, 0
    for inputs, targets in lm_batches(ids, config.batch_size, config.bptt_len):
        states = detach_state(states)
        masks = model.sample_masks(config.dropout, inputs, rng)
        flat = targets.T.reshape(-1)
        with Tape() as tape:
            logits, states = model.forward(inputs, states, masks)
            loss = softmax_cross_entropy(logits, flat)
        total += _step(optimizer, tape, loss) * flat.size
        count += flat.size
    return total / count


def train_pos_epoch(model: PosTagger, optimizer: Optimizer, corpus: TaggedCorpus, config: ExperimentConfig,
                    rng: np.random.Generator) -> float:
    unknown = corpus.tagset.unknown_id
    total, count = 0.0, 0.0
    for tokens, tags in pos_batches(corpus.sentences, config.batch_size, rng):
        masks = model.sample_masks(config.dropout, tokens, rng)
        targets, weights = _tag_targets(tags, unknown)
        with Tape() as tape:
            loss = softmax_cross_entropy(model.forward(tokens, masks), targets, weights)
        total += _step(optimizer, tape, loss) * weights.sum()
        count += weights.sum()
    return total / max(count, 1.0)


# ---------------------------------------------------------------------------
# harness


class _Harness:
    """Per-task glue between the generic epoch loop and the model/data."""

    metric_name = "valid_loss"
    higher_is_better = False

    model: Union[LanguageModel, PosTagger]

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config

    def train_epoch(self, optimizer: Optimizer, rng: np.random.Generator) -> float:
        raise NotImplementedError

    def split_rows(self, epoch: int, train_loss: float, lr: float, seconds: Optional[float]) -> Tuple[List[MetricsRow], float, float]:
        """Rows for this epoch, the selection metric and the summary value."""
        raise NotImplementedError

    def test_row(self, epoch: int) -> Optional[MetricsRow]:
        raise NotImplementedError

    def manifest_extras(self) -> Dict:
        raise NotImplementedError

    def _row(self, epoch, split, loss, accuracy=None, lr=None, seconds=None, perplexity=True) -> MetricsRow:
        return MetricsRow(
            run_id=self.config.resolved_run_id,
            task=self.config.task,
            epoch=epoch,
            split=split,
            loss=loss,
            perplexity=perplexity_of(loss) if perplexity else None,
            accuracy=accuracy,
            lr=lr,
            seconds=seconds,
        )


class LmHarness(_Harness):
    def __init__(self, config: ExperimentConfig, data: Optional[LmData] = None) -> None:
        super().__init__(config)
        self.data = data or load_lm_data(config)
        self.model = build_lm_model(config, len(self.data.vocabulary))
        if config.task == "recite":
            self.metric_name = "memorization_accuracy"
            self.higher_is_better = True

    def train_epoch(self, optimizer: Optimizer, rng: np.random.Generator) -> float:
        return train_lm_epoch(self.model, optimizer, self.data.train, self.config, rng)

    def split_rows(self, epoch, train_loss, lr, seconds):
        cfg = self.config
        if cfg.task == "recite":
            acc = recite_accuracy(self.model, self.data.train, cfg.bptt_len)
            return [self._row(epoch, "train", train_loss, acc, lr, seconds)], acc, acc
        rows = [self._row(epoch, "train", train_loss, None, lr, seconds)]
        if self.data.valid is None:
            return rows, train_loss, perplexity_of(train_loss)
        valid_loss = lm_pass(self.model, self.data.valid, _eval_batch_size(self.data.valid, cfg.batch_size), cfg.bptt_len).loss
        rows.append(self._row(epoch, "valid", valid_loss, None, lr))
        return rows, valid_loss, perplexity_of(valid_loss)

    def test_row(self, epoch: int) -> Optional[MetricsRow]:
        if self.data.test is None:
            return None
        ids = self.data.test
        loss = lm_pass(self.model, ids, _eval_batch_size(ids, self.config.batch_size), self.config.bptt_len).loss
        return self._row(epoch, "test", loss)

    def manifest_extras(self) -> Dict:
        return {"vocabulary": self.data.vocabulary.to_dict()}


class PosHarness(_Harness):
    def __init__(self, config: ExperimentConfig, data: Optional[PosData] = None) -> None:
        super().__init__(config)
        self.data = data or load_pos_data(config)
        self.model = build_pos_model(config, len(self.data.vocabulary), len(self.data.tagset))

    def train_epoch(self, optimizer: Optimizer, rng: np.random.Generator) -> float:
        return train_pos_epoch(self.model, optimizer, self.data.train, self.config, rng)

    def split_rows(self, epoch, train_loss, lr, seconds):
        rows = [self._row(epoch, "train", train_loss, None, lr, seconds, perplexity=False)]
        corpus = self.data.valid or self.data.train
        loss, acc = pos_pass(self.model, corpus, self.config.batch_size)
        if self.data.valid is not None:
            rows.append(self._row(epoch, "valid", loss, acc, lr, perplexity=False))
        else:
            rows[0] = self._row(epoch, "train", train_loss, acc, lr, seconds, perplexity=False)
        return rows, loss, acc

    def test_row(self, epoch: int) -> Optional[MetricsRow]:
        if self.data.test is None:
            return None
        loss, acc = pos_pass(self.model, self.data.test, self.config.batch_size)
        return self._row(epoch, "test", loss, acc, perplexity=False)

    def manifest_extras(self) -> Dict:
        return {"vocabulary": self.data.vocabulary.to_dict(), "tagset": self.data.tagset.itos}


def make_harness(config: ExperimentConfig):
    return PosHarness(config) if config.task == "pos" else LmHarness(config)


def _manifest(harness, epoch: int, metric: float) -> CheckpointManifest:
    model = harness.model
    return CheckpointManifest(
        task=harness.config.task,
        config=harness.config.model_dump(mode="json"),
        plans=model.plans(),
        embedding_lengths=model.embedding.allocation.lengths,
        epoch=epoch,
        metric_name=harness.metric_name,
        metric=metric,
        **harness.manifest_extras(),
    )


def _write_resolved_config(out_dir: str, config: ExperimentConfig) -> None:
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)


def train(config: ExperimentConfig, harness=None) -> TrainResult:
    """Run every epoch, log one MetricsRow per split and keep the best checkpoint."""
    run_id = config.resolved_run_id
    out_dir = config.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved_config(out_dir, config)
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))

    harness = harness or make_harness(config)
    model = harness.model
    optimizer = Optimizer(
        model.parameters(),
        lr=config.learning_rate,
        kind=config.optimizer,
        momentum=config.momentum,
        clip_norm=config.clip_norm,
    )
    # masks draw from their own stream so the model initialization is independent of the dropout settings
    rng = np.random.default_rng([config.seed, 1])

    best_metric, best_epoch, best_summary = None, -1, float("nan")
    best_arrays = None
    checkpoint_path = None
    log.info(f"Run {run_id}: {config.task}, {config.epochs} epochs, optimizer={config.optimizer}, output={out_dir}")

    for epoch in range(config.epochs):
        lr = exp_decay_schedule(config.learning_rate, epoch, config.lr_decay)
        optimizer.lr = lr
        started = time.perf_counter()
        try:
            train_loss = harness.train_epoch(optimizer, rng)
        except (DivergenceError, NonFiniteGradientError):
            writer.record(harness._row(epoch, "train", float("nan"), None, lr, perplexity=False))
            log.exception(f"Run {run_id} aborted at epoch {epoch}")
            raise
        elapsed = time.perf_counter() - started
        rows, metric, summary = harness.split_rows(
            epoch, train_loss, lr, elapsed if config.record_wall_clock else None
        )
        for row in rows:
            writer.record(row)
            log.info(
                f"[{run_id}] epoch {epoch} {row.split}: loss={row.loss:.4f}"
                + (f" ppl={row.perplexity:.2f}" if row.perplexity is not None else "")
                + (f" acc={row.accuracy:.4f}" if row.accuracy is not None else "")
                + f" lr={lr:.4g} ({elapsed:.1f}s)"
            )

        improved = best_metric is None or (metric > best_metric if harness.higher_is_better else metric < best_metric)
        if improved:
            best_metric, best_epoch, best_summary = metric, epoch, summary
            best_arrays = [p.data.copy() for p in model.parameters()]
            if config.save_checkpoint:
                checkpoint_path = save_checkpoint(
                    out_dir, _manifest(harness, epoch, metric), [(n, p.data) for n, p in model.named_parameters()]
                )

    if best_arrays is not None:
        for p, value in zip(model.parameters(), best_arrays):
            p.data = value
    test_row = harness.test_row(best_epoch)
    if test_row is not None:
        writer.record(test_row)
        log.info(f"[{run_id}] test (best epoch {best_epoch}): loss={test_row.loss:.4f}")
        if config.task == "pos":
            best_summary = test_row.accuracy
        else:
            best_summary = test_row.perplexity

    log.info(f"Run {run_id} done: best {harness.metric_name}={best_metric:.4f} at epoch {best_epoch}")
    return TrainResult(
        run_id=run_id,
        task=config.task,
        metric_name=harness.metric_name,
        best_metric=best_metric,
        best_epoch=best_epoch,
        summary_metric=best_summary,
        output_dir=out_dir,
        metrics_path=writer.path,
        checkpoint_path=checkpoint_path,
        rows=writer.rows,
    )


def load_model(checkpoint: str):
    """Rebuild the model recorded in a checkpoint; returns (model, config, manifest)."""
    manifest, arrays = load_checkpoint(checkpoint)
    config = ExperimentConfig.model_validate(manifest.config)
    vocabulary = Vocabulary.from_dict(manifest.vocabulary)
    if manifest.task == "pos":
        model = build_pos_model(config, len(vocabulary), len(manifest.tagset or []), initialize=False)
    else:
        model = build_lm_model(config, len(vocabulary), initialize=False)
    if manifest.embedding_lengths and manifest.embedding_lengths != model.embedding.allocation.lengths:
        raise ShapeMismatchError("embedding allocation differs from the one stored in the checkpoint")
    restore_parameters(model, arrays)
    return model, config, manifest


def evaluate(config: Optional[ExperimentConfig], checkpoint: str, split: str = "valid") -> MetricsRow:
    """Dropout-free metrics of a checkpoint on one split; ``config`` may redirect the data paths."""
    model, saved, manifest = load_model(checkpoint)
    config = config or saved
    vocabulary = Vocabulary.from_dict(manifest.vocabulary)
    paths = {"train": config.train_path, "valid": config.valid_path, "test": config.test_path}
    if split not in paths:
        raise ValueError(f"Unknown split: {split}")
    path = _require(paths[split], f"{split}_path")
    run_id = config.resolved_run_id

    if manifest.task == "pos":
        corpus = load_tagged_corpus(path, vocabulary, TagSet(manifest.tagset or []))
        loss, acc = pos_pass(model, corpus, config.batch_size)
        row = MetricsRow(run_id=run_id, task="pos", epoch=manifest.epoch, split=split, loss=loss, accuracy=acc)
    else:
        ids = vocabulary.numericalize(read_lm_corpus(path))
        # recite scores the whole corpus as one stream, matching the accuracy logged in training
        batch = 1 if manifest.task == "recite" else _eval_batch_size(ids, config.batch_size)
        loss, acc, _ = lm_pass(model, ids, batch, config.bptt_len)
        row = MetricsRow(
            run_id=run_id,
            task=manifest.task,
            epoch=manifest.epoch,
            split=split,
            loss=loss,
            perplexity=perplexity_of(loss),
            accuracy=acc if manifest.task == "recite" else None,
        )
    log.info(f"Evaluated {checkpoint} on {split}: loss={row.loss:.4f}")
    return row
