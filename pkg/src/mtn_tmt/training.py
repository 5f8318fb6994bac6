"""Optimisation: Noam-scheduled Adam, dev-perplexity model selection, grid search."""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, DialogBatch, Vocabulary, batch_and_pad, checkpoint_bytes, checkpoint_save
from .errors import ConformanceError, ContractError, NumericError
from .model import MtnTmt
from .tensor import Tape, backward

log = logging.getLogger(__name__)


def noam_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    if step < 1:
        raise ContractError("learning-rate step must be >= 1")
    if warmup < 1:
        raise ContractError("warmup must be >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def weight_decay_schedule(alpha0: float, beta0: float, epoch: int) -> tuple[float, float]:
    """Both weights shrink by 10% at epochs 10, 20, 30, ...

    Decimal arithmetic keeps 0.3 -> 0.27 -> 0.243 free of binary drift.
    """
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    factor = Decimal("0.9") ** (epoch // 10)
    return float(Decimal(repr(alpha0)) * factor), float(Decimal(repr(beta0)) * factor)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads: Sequence[np.ndarray], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConformanceError("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ConformanceError(f"gradient {g.shape} vs parameter {p.data.shape} ({p.name})")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# -- evaluation -------------------------------------------------------------------------

@dataclass
class DevScores:
    loss: float
    answer_loss: float
    perplexity: float
    token_accuracy: float


def nll_totals(model: MtnTmt, batches: Sequence[DialogBatch]) -> tuple[float, int, int]:
    """(summed answer NLL, answer token count, argmax-correct count) with dropout off."""
    total, count, correct = 0.0, 0, 0
    for batch in batches:
        out = model.forward(batch, translate=False)
        lengths = batch.answer.valid.sum(axis=1)
        total += float((out.answer_rows.data * lengths).sum())
        count += int(lengths.sum())
        pred = out.logits.data.argmax(axis=-1)
        correct += int(((pred == batch.answer.ids) & batch.answer.valid).sum())
    return total, count, correct


def perplexity_eval(model: MtnTmt, batches: Sequence[DialogBatch]) -> float:
    """exp of mean answer-token NLL over every non-pad answer token (eos included)."""
    total, count, _ = nll_totals(model, batches)
    if count == 0:
        raise ContractError("perplexity needs a nonempty dataset")
    return math.exp(total / count)


def dev_scores(model: MtnTmt, batches: Sequence[DialogBatch], alpha: float, beta: float) -> DevScores:
    if not batches:
        raise ContractError("dev evaluation needs a nonempty dataset")
    losses, weights = [], []
    for batch in batches:
        out = model.forward(batch, alpha, beta)
        losses.append(float(out.total.data))
        weights.append(batch.size)
    total, count, correct = nll_totals(model, batches)
    return DevScores(float(np.average(losses, weights=weights)), total / count,
                     math.exp(total / count), correct / count)


# -- training ----------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_answer_loss: float
    dev_perplexity: float
    dev_token_accuracy: float
    lr: float
    alpha: float
    beta: float
    steps: int


@dataclass
class RunRecord:
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_perplexity: float = math.inf
    best_checkpoint: str | None = None

    @property
    def alpha_trace(self) -> list[float]:
        return [e.alpha for e in self.epochs]

    @property
    def beta_trace(self) -> list[float]:
        return [e.beta for e in self.epochs]

    def to_lines(self) -> str:
        lines = [json.dumps({"type": "config", "seed": self.seed, **self.config}, sort_keys=True)]
        for e in self.epochs:
            lines.append(json.dumps({"type": "epoch", **e.__dict__}, sort_keys=True))
        lines.append(json.dumps({"type": "summary", "best_epoch": self.best_epoch,
                                 "best_dev_perplexity": (self.best_dev_perplexity
                                                         if math.isfinite(self.best_dev_perplexity) else None),
                                 "best_checkpoint": self.best_checkpoint,
                                 "steps": len(self.step_losses)}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_lines())

    @classmethod
    def read(cls, path) -> "RunRecord":
        record = None
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            kind = row.pop("type")
            if kind == "config":
                seed = row.pop("seed")
                record = cls(seed, row)
            elif kind == "epoch":
                record.epochs.append(EpochRecord(**row))
            else:
                record.best_epoch = row["best_epoch"]
                ppl = row["best_dev_perplexity"]
                record.best_dev_perplexity = math.inf if ppl is None else ppl
                record.best_checkpoint = row["best_checkpoint"]
        return record


@dataclass
class TrainResult:
    record: RunRecord
    model: MtnTmt
    best_params: bytes | None = None

    def restore_best(self) -> None:
        from .data import parse_checkpoint

        if self.best_params is None:
            return
        for name, value in parse_checkpoint(self.best_params).items():
            self.model.store[name].data[...] = value


def build_model(config: RunConfig, vocab: Vocabulary, dataset: Dataset | None = None) -> MtnTmt:
    widths = {}
    if config.task == "video-text":
        for modality in ("video", "audio"):
            declared = getattr(config, f"{modality}_width")
            widths[modality] = declared or (dataset.width(modality) if dataset is not None else 0)
    return MtnTmt(config, len(vocab), widths.get("video"), widths.get("audio"))


def train(config: RunConfig, train_set: Dataset, dev_set: Dataset, vocab: Vocabulary,
          seed: int | None = None, out_dir=None, model: MtnTmt | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Epoch loop: shuffle, multi-task loss, backward, clipped Adam with Noam lr, dev selection.

    Deterministic given ``seed`` (defaults to ``config.seed``). With ``out_dir``
    the best checkpoint and the run record are written there.
    """
    seed = config.seed if seed is None else seed
    config = config.replace(seed=seed)
    model = model or build_model(config, vocab, train_set)
    params = list(model.store.values())
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(seed)
    record = RunRecord(seed, config.to_dict())
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    modalities = model.modalities
    dev_batches = batch_and_pad(dev_set.examples, config.batch_size, vocab, dev_set, modalities)
    examples = train_set.examples
    result = TrainResult(record, model)
    step = 0
    for epoch in range(config.epochs):
        if config.decay_weights:
            alpha, beta = weight_decay_schedule(config.alpha, config.beta, epoch)
        else:
            alpha, beta = config.alpha, config.beta
        order = rng.permutation(len(examples))
        batches = batch_and_pad([examples[i] for i in order], config.batch_size, vocab, train_set, modalities)
        epoch_losses = []
        lr = 0.0
        for b_idx, batch in enumerate(batches):
            step += 1
            where = f"epoch {epoch} batch {b_idx} (examples {batch.keys[0]}..{batch.keys[-1]})"
            try:
                with Tape():
                    output = model.forward(batch, alpha, beta, training=True, seed=(seed, step))
                    loss = float(output.total.data)
                    if not math.isfinite(loss):
                        raise NumericError("loss is not finite")
                    grads = backward(output.total)
            except NumericError as exc:
                raise NumericError(f"non-finite values at {where}: {exc}") from None
            g, _ = clip_global_norm([grads[p] for p in params], config.clip_norm)
            lr = noam_lr(step, config.d_model, config.warmup, config.lr_factor)
            adam_step(params, g, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            epoch_losses.append(loss)
            record.step_losses.append(loss)
            if max_steps is not None and step >= max_steps:
                break
        scores = dev_scores(model, dev_batches, alpha, beta)
        record.epochs.append(EpochRecord(epoch, float(np.mean(epoch_losses)), scores.loss, scores.answer_loss,
                                         scores.perplexity, scores.token_accuracy, lr, alpha, beta, step))
        log.info("epoch %d train %.4f dev ppl %.4f acc %.4f", epoch, record.epochs[-1].train_loss,
                 scores.perplexity, scores.token_accuracy)
        if scores.perplexity < record.best_dev_perplexity:
            record.best_dev_perplexity = scores.perplexity
            record.best_epoch = epoch
            result.best_params = checkpoint_bytes((n, p.data) for n, p in model.store.items())
            if out:
                checkpoint_save(model.store, out / "best.ckpt")
                record.best_checkpoint = str(out / "best.ckpt")
            else:
                record.best_checkpoint = "memory"
        if max_steps is not None and step >= max_steps:
            break
    if out:
        record.write(out / "run.jsonl")
        (out / "config.txt").write_text(config.to_text())
        vocab.save(out / "vocab.txt")
    return result


# -- grid search and repeats -----------------------------------------------------------

def point_seed(seed: int, alpha: float, beta: float) -> int:
    """Seed for one grid point; depends on the point's values, not its enumeration position."""
    return seed + zlib.crc32(f"{alpha!r},{beta!r}".encode()) % 1_000_003


def _train_point(args):
    config, train_set, dev_set, vocab, alpha, beta, seed, out_dir = args
    result = train(config.replace(alpha=alpha, beta=beta), train_set, dev_set, vocab,
                   seed=point_seed(seed, alpha, beta), out_dir=out_dir)
    return alpha, beta, result.record


@dataclass
class GridResult:
    alpha: float
    beta: float
    record: RunRecord
    points: list[tuple[float, float, RunRecord]]


def grid_search(config: RunConfig, alpha_grid: Sequence[float], beta_grid: Sequence[float],
                train_set: Dataset, dev_set: Dataset, vocab: Vocabulary, seed: int | None = None,
                jobs: int = 1, out_dir=None) -> GridResult:
    """Train every (alpha, beta) point; the winner has the lowest best-dev perplexity.

    Ties go to the smaller alpha, then the smaller beta.
    """
    if not alpha_grid or not beta_grid:
        raise ContractError("grid search needs nonempty alpha and beta grids")
    seed = config.seed if seed is None else seed
    tasks = []
    for a in alpha_grid:
        for b in beta_grid:
            sub = Path(out_dir) / f"alpha{a}_beta{b}" if out_dir else None
            tasks.append((config, train_set, dev_set, vocab, float(a), float(b), seed, sub))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_train_point, tasks))
    else:
        points = [_train_point(t) for t in tasks]
    best = min(points, key=lambda p: (p[2].best_dev_perplexity, p[0], p[1]))
    return GridResult(best[0], best[1], best[2], points)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
