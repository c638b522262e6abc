"""Cross-entropy, Adam with per-epoch learning-rate decay, and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ComputeRecord, Parameter, RngState, Tensor
from .checkpoint import load_checkpoint
from .data import Dataset, batches
from .errors import CompatibilityError, ConfigError, ContractError, NumericalError
from .model import ModelParams, forward

log = logging.getLogger(__name__)

# Dropout masks draw from their own Philox stream so they never alias shuffles.
DROPOUT_STREAM = 0xD0


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    decay_gamma: float = 0.97
    epochs: int = 80
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warm_start: str | None = None
    lr_schedule: str = "exponential"
    decay_step: int = 10

    def __post_init__(self):
        if not 0.0 < self.decay_gamma <= 1.0:
            raise ConfigError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.adam_eps <= 0:
            raise ConfigError("Adam constants out of range")
        if self.lr_schedule not in ("exponential", "step"):
            raise ConfigError(f"lr_schedule must be 'exponential' or 'step', got {self.lr_schedule!r}")
        if self.decay_step < 1:
            raise ConfigError("decay_step must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EpochReport:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    seconds: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Iterable[Parameter]) -> "AdamState":
        params = list(params)
        return cls({p.name: np.zeros_like(p.data) for p in params},
                   {p.name: np.zeros_like(p.data) for p in params})


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    z = logits.data
    if z.ndim == 1:
        z = z[None]
    b, k = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != b:
        raise ContractError(f"{labels.size} labels for {b} rows of logits")
    for i, lab in enumerate(labels):
        if not 0 <= lab < k:
            raise ContractError(f"sample {i}: label {lab} outside [0, {k})")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - shifted[rows, labels])
    shape = logits.shape

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g / b) * p.reshape(shape),)

    return ad.apply_op("cross_entropy", np.asarray(loss), (logits,), vjp)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are left for the caller to zero."""
    params = list(params)
    for p in params:
        if p.name not in state.m:
            raise ContractError(f"no Adam state for parameter {p.name}")
        if state.m[p.name].shape != p.grad.shape or p.grad.shape != p.data.shape:
            raise ContractError(f"{p.name}: gradient/state shape drift")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if config.lr_schedule == "step":
        return config.lr0 * config.decay_gamma ** (epoch // config.decay_step)
    return config.lr0 * config.decay_gamma ** epoch


def eval_logits(params: ModelParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Eval-mode logits for a stack of images, computed in chunks."""
    out = [forward(images[i:i + chunk], params).data for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    preds = eval_logits(params, dataset.images()).argmax(axis=1)
    return float(np.mean(preds == dataset.labels()))


def eval_loss(params: ModelParams, dataset: Dataset) -> float:
    return cross_entropy(Tensor(eval_logits(params, dataset.images())), dataset.labels()).item()


def warm_start(params: ModelParams, path) -> dict[str, str]:
    """Overwrite ``params`` with a checkpoint's tensors (configs must agree)."""
    donor, config, metadata = load_checkpoint(path)
    mine, theirs = params.config.to_dict(), config.to_dict()
    # dropout is a training-time knob and may legitimately differ
    mine.pop("dropout_p")
    theirs.pop("dropout_p")
    if mine != theirs:
        diff = sorted(k for k in mine if mine[k] != theirs[k])
        raise CompatibilityError(f"warm-start checkpoint {path} differs in {diff}")
    params.assign(donor.arrays())
    return metadata


def fit(params: ModelParams, dataset: Dataset, config: TrainConfig,
        callbacks: Sequence[Callable[[EpochReport], None]] = ()) -> list[EpochReport]:
    """Train in place; returns one report per epoch.

    ``EpochReport.loss`` is the sample-weighted mean training-mode loss over the
    epoch's batches; ``accuracy`` is eval-mode accuracy on the training set
    after the epoch's updates.
    """
    if len(dataset) == 0:
        raise ContractError("cannot fit on an empty dataset")
    k = params.config.num_classes
    labels = dataset.labels()
    if labels.max() >= k:
        raise ContractError(f"dataset label {labels.max()} outside [0, {k})")
    if config.warm_start:
        warm_start(params, config.warm_start)
        log.info("warm-started from %s", config.warm_start)

    images = dataset.images()
    plist = params.parameters()
    state = AdamState.for_params(plist)
    drop_rng = RngState(config.seed, DROPOUT_STREAM)
    reports = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, config)
        total = 0.0
        for bidx, idx in enumerate(batches(len(dataset), config.batch_size,
                                           RngState(config.seed ^ epoch))):
            params.zero_grads()
            with ComputeRecord() as record:
                logits = forward(images[idx], params, rng=drop_rng, training=True)
                loss = cross_entropy(logits, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {bidx}")
            record.backward(loss)
            adam_step(plist, state, lr, config.beta1, config.beta2, config.adam_eps)
            total += value * len(idx)
        params.zero_grads()
        report = EpochReport(epoch, total / len(dataset), accuracy(params, dataset), lr,
                             time.perf_counter() - started)
        log.info("epoch %d loss %.6f acc %.4f lr %.3g (%.2fs)", epoch, report.loss,
                 report.accuracy, lr, report.seconds)
        reports.append(report)
        for cb in callbacks:
            cb(report)
    return reports
