"""Adam training loop, evaluation and checkpoint round trips for toy models."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tape, backward
from .errors import CheckpointError, ContractError, TrainingError
from .model import ModelConfig, attention_param_count, init_model, logits, param_shapes, predict
from .numeric import make_rng
from .tasks import Dataset, TaskSpec, gen_task

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_acc", "seconds")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: AdamConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[k] -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class TrainReport:
    mechanism: str
    epochs: int
    final_train_loss: float
    val_accuracy: float
    train_accuracy: float
    wall_seconds: float
    param_count: int
    attention_param_count: int
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [h[1] for h in self.history]


def accuracy(params, cfg: ModelConfig, data: Dataset) -> float:
    pred = predict(params, cfg, data.tokens, data.tokens2)
    return float(np.mean(pred == data.labels)) if len(data) else math.nan


def train_step(params, cfg: ModelConfig, tokens, tokens2, labels):
    t = Tape()
    nodes = {k: t.param(v) for k, v in params.items()}
    loss = t.cross_entropy_logits(logits(t, nodes, cfg, tokens, tokens2), labels)
    grads = backward(t, loss)
    return float(loss.value[0, 0]), {k: grads[n.id] for k, n in nodes.items()}


def train(cfg: ModelConfig, task: TaskSpec, opt: AdamConfig = AdamConfig(), epochs: int = 30,
          seed: int = 0, out_dir=None, data: tuple[Dataset, Dataset] | None = None) -> TrainReport:
    """Train from a seeded init; writes ``model.dba1`` (+ sidecar) and ``log.csv``.

    ``data`` skips regeneration when the caller already holds ``gen_task(task)``.
    """
    train_set, val_set = data if data is not None else gen_task(task)
    params = init_model(cfg, seed)
    adam = Adam(params, opt)
    history = []
    start = time.perf_counter()
    loss_sum = math.nan
    for epoch in range(1, epochs + 1):
        order = make_rng(seed, epoch).permutation(len(train_set))
        loss_sum, count = 0.0, 0
        for b in range(0, len(order), opt.batch_size):
            idx = order[b:b + opt.batch_size]
            tokens, tokens2, labels = train_set.batch(idx)
            loss, grads = train_step(params, cfg, tokens, tokens2, labels)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} in epoch {epoch}", epoch=epoch)
            adam.step(params, grads)
            loss_sum += loss * len(idx)
            count += len(idx)
        loss_sum /= count
        val_acc = accuracy(params, cfg, val_set)
        history.append((epoch, loss_sum, val_acc, time.perf_counter() - start))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, loss_sum, val_acc)
    report = TrainReport(
        mechanism=cfg.mechanism, epochs=epochs, final_train_loss=loss_sum,
        val_accuracy=history[-1][2] if history else accuracy(params, cfg, val_set),
        train_accuracy=accuracy(params, cfg, train_set),
        wall_seconds=time.perf_counter() - start,
        param_count=int(sum(v.size for v in params.values())),
        attention_param_count=int(attention_param_count(params)),
        history=history)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.dba1"
        checkpoint.save(ckpt, params, {"model": cfg.to_dict(), "task": task.to_dict(),
                                       "seed": seed, "epochs": epochs,
                                       "train_accuracy": report.train_accuracy})
        write_log(history, out / "log.csv")
        report.checkpoint = str(ckpt)
    report._params = params  # kept for in-process callers; not serialized
    return report


def write_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for epoch, loss, acc, secs in history:
            w.writerow([epoch, repr(loss), repr(acc), f"{secs:.3f}"])


def load_model(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    """Tensors, model config and full metadata; shapes are checked against the config."""
    meta = checkpoint.load_meta(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model metadata for {path}: {exc}") from exc
    params = checkpoint.load(path)
    checkpoint.check_shapes(params, param_shapes(cfg))
    return params, cfg, meta


def evaluate(path, data: Dataset) -> float:
    """Argmax accuracy of a saved model on ``data``."""
    params, cfg, _ = load_model(path)
    return accuracy(params, cfg, data)


def variable_length_eval(path, lengths, task: TaskSpec | None = None) -> dict[int, float]:
    """Accuracy at each sequence length using the unchanged saved parameters.

    The validation set for each length comes from the stored task with only
    ``n`` replaced (or from ``task`` when given).
    """
    params, cfg, meta = load_model(path)
    if not cfg.attention(cfg.n).variable_length:
        raise ContractError(f"mechanism {cfg.mechanism!r} cannot run at other lengths")
    base = task or TaskSpec(**meta["task"])
    out = {}
    for n in lengths:
        _, val = gen_task(base.__class__(**{**base.to_dict(), "n": int(n)}))
        out[int(n)] = accuracy(params, cfg, val)
    return out
