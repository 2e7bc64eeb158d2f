"""Siamese training: Adam updates, epochs, and hard-negative mining rounds."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, TextIO

import numpy as np

from .ann_index import ForestConfig
from .encoder import CharVocab, EncoderConfig, EncoderModel, Params, init_params, pair_batch_loss_and_grad
from .losses import contrastive_loss, cosine_distance, optimal_distance
from .pairs import PairSet, initial_pairs, mine_hard_negatives, sample_negative_pairs
from .refset import ReferenceSet

__all__ = [
    "AdamState",
    "NonFiniteLossError",
    "RoundRecord",
    "TrainConfig",
    "TrainResult",
    "contrastive_loss",
    "cosine_distance",
    "mean_pair_distance",
    "optimal_distance",
    "train_epoch",
    "train_similarity",
]

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient became NaN/inf; carries the offending batch."""

    def __init__(self, message: str, batch_index: int, pair):
        super().__init__(f"{message} (batch {batch_index}, first pair {pair!r})")
        self.batch_index = batch_index
        self.pair = pair


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs_per_round: int = 5
    rounds: int = 3
    hard_neg_k: int = 10
    seed: int = 0
    negative_ratio: float = 1.0
    positive_cap: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    index: ForestConfig = ForestConfig(n_trees=10)

    def __post_init__(self) -> None:
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "epochs_per_round", "rounds", "positive_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hard_neg_k < 0:
            raise ValueError("hard_neg_k must be non-negative")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")


class AdamState:
    """First/second moment estimates and step counter."""

    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _all_finite(grads: Params) -> bool:
    return all(np.isfinite(g).all() for g in grads.values())


def train_epoch(model: EncoderModel, pairs: PairSet, config: TrainConfig, optimizer: AdamState,
                rng: np.random.Generator) -> float:
    """One shuffled pass of mini-batch updates; returns the mean per-pair loss.

    ``model.params`` is updated in place.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    names_a, names_b, labels = pairs.arrays()
    order = rng.permutation(len(pairs))
    total = 0.0
    bs = config.batch_size
    for bi, start in enumerate(range(0, len(order), bs)):
        idx = order[start:start + bs]
        loss, grads, _, _ = pair_batch_loss_and_grad(
            model.params, model.config, model.vocab,
            [names_a[i] for i in idx], [names_b[i] for i in idx], labels[idx], config.margin,
        )
        if not np.isfinite(loss):
            raise NonFiniteLossError("non-finite loss", bi, pairs[int(idx[0])])
        if not _all_finite(grads):
            raise NonFiniteLossError("non-finite gradient", bi, pairs[int(idx[0])])
        optimizer.step(model.params, grads, config.learning_rate)
        total += loss * len(idx)
    return total / len(pairs)


def mean_pair_distance(model: EncoderModel, pairs: PairSet, margin: float = 1.0) -> float:
    """Mean cosine distance over ``pairs`` under the current model."""
    if len(pairs) == 0:
        return float("nan")
    a, b, y = pairs.arrays()
    _, _, _, delta = pair_batch_loss_and_grad(model.params, model.config, model.vocab, a, b, y, margin,
                                              with_grad=False)
    return float(delta.mean())


@dataclass
class RoundRecord:
    round: int
    pair_count: int
    epoch_losses: List[float]
    mined: int = 0
    mined_mean_distance: float = float("nan")
    random_mean_distance: float = float("nan")


@dataclass
class TrainResult:
    model: EncoderModel
    pairs: PairSet
    history: List[RoundRecord] = field(default_factory=list)
    log_lines: List[str] = field(default_factory=list)

    def metrics_log(self) -> str:
        return "".join(line + "\n" for line in self.log_lines)


def _training_vocab(refset: ReferenceSet, pairs: PairSet, max_len: int) -> CharVocab:
    chars = set()
    for _, name in refset.name_pairs():
        chars.update(name)
    for p in pairs:
        chars.update(p.name_a)
        chars.update(p.name_b)
    return CharVocab(chars, max_len)


def train_similarity(refset: ReferenceSet, domain_pairs: Optional[PairSet] = None,
                     config: TrainConfig = TrainConfig(), encoder_config: EncoderConfig = EncoderConfig(),
                     log_stream: Optional[TextIO] = None,
                     clock: Callable[[], float] = time.perf_counter,
                     on_round: Optional[Callable[[RoundRecord, EncoderModel], None]] = None) -> TrainResult:
    """Train an encoder from scratch with iterative hard-negative mining.

    Start from positives plus random negatives (plus ``domain_pairs``);
    each round trains ``epochs_per_round`` epochs, embeds the reference
    names, and adds their closest cross-entity neighbors as negatives.
    The mined-pair and fresh random-negative mean distances at mining time
    are kept in ``history`` for diagnostics.  ``on_round`` is called after
    each round's training epochs, before mining.
    """
    from .retrieval import embed_reference

    if len(refset) == 0:
        raise ValueError("reference set is empty")
    D = initial_pairs(refset, config.positive_cap, config.negative_ratio, config.seed)
    if domain_pairs is not None:
        D = D.union(domain_pairs)
    vocab = _training_vocab(refset, D, encoder_config.max_sequence_length)
    model = EncoderModel(encoder_config, vocab, init_params(encoder_config, vocab, config.seed))
    optimizer = AdamState(model.params, config.beta1, config.beta2, config.adam_eps)
    result = TrainResult(model, D)

    def emit(line: str) -> None:
        result.log_lines.append(line)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    emit("# round\tepoch\tmean_loss\tpair_count\twall_ms")
    for r in range(1, config.rounds + 1):
        counts = D.counts()
        emit("# pairs round=%d %s" % (r, " ".join(f"{k}={v}" for k, v in counts.items())))
        record = RoundRecord(r, len(D), [])
        for e in range(1, config.epochs_per_round + 1):
            t0 = clock()
            rng = np.random.default_rng([config.seed, r, e])
            loss = train_epoch(model, D, config, optimizer, rng)
            wall_ms = int(round((clock() - t0) * 1000))
            record.epoch_losses.append(loss)
            emit(f"{r}\t{e}\t{loss!r}\t{len(D)}\t{wall_ms}")
            log.info("round %d epoch %d loss %.6f pairs %d", r, e, loss, len(D))
        if on_round is not None:
            on_round(record, model)
        if config.hard_neg_k > 0:
            embedded = embed_reference(model, refset, config.index, fingerprint="training")
            mined = mine_hard_negatives(model, refset, embedded, config.hard_neg_k)
            record.mined = D.extend(mined)
            if len(mined):
                record.mined_mean_distance = mean_pair_distance(model, mined, config.margin)
                if len(refset) >= 2:
                    fresh = sample_negative_pairs(refset, len(mined), seed=config.seed + 1000 + r)
                    record.random_mean_distance = mean_pair_distance(model, fresh, config.margin)
            log.info("round %d mined %d new hard negatives", r, record.mined)
        result.history.append(record)
    result.pairs = D
    return result
