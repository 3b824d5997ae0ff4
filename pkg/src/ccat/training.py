"""MOS-weighted objective, Adam with coupled L2, length-bucketed batching and the fit loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .errors import ConfigError, DegenerateInput, DivergenceError, EmptyBatch, LabelError
from .metrics import pearson, rmse
from .model import CCATNetwork, forward_batch

log = logging.getLogger(__name__)

BUCKET_WIDTH = 100


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-5
    l2_lambda: float = 6e-3
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be >= 0")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


TABLE1_TRAIN = {
    "model1": TrainConfig(batch_size=4, learning_rate=1e-5, l2_lambda=6e-3),
    "model2": TrainConfig(batch_size=16, learning_rate=4.2e-4, l2_lambda=1e-3),
    "model3": TrainConfig(batch_size=4, learning_rate=1e-5, l2_lambda=6e-3),
}


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    dev_pcc: float
    dev_rmse: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Example:
    """One utterance ready for training: context features [T,F,C] and its MOS."""

    features: np.ndarray
    mos: float
    uid: str = ""

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    data: np.ndarray  # [B,T,F,C]
    mask: np.ndarray  # [B,T]
    labels: np.ndarray  # [B]
    indices: list[int] = field(default_factory=list)


# ------------------------------------------------------------------ objective

def mos_weight(M: float) -> float:
    """Frame-loss weight 10**(M - 5); shrinks the frame term for poor utterances."""
    if not 1.0 <= M <= 5.0:
        raise LabelError(f"MOS label {M} outside [1, 5]")
    return 10.0 ** (M - 5.0)


def ccat_loss(labels, utt_pred: nn.Tensor, frame_pred: nn.Tensor, mask) -> nn.Tensor:
    """Utterance MSE plus MOS-weighted frame MSE averaged over valid frames.

    labels: [X]; utt_pred: Tensor [X]; frame_pred: Tensor [X,T]; mask: [X,T].
    Padded frames are excluded from the frame term and from its normaliser.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    X = labels.size
    if X == 0:
        raise EmptyBatch("ccat_loss needs at least one utterance")
    if utt_pred.shape != (X,) or frame_pred.shape != mask.shape or mask.shape[0] != X:
        raise ValueError("prediction, label and mask shapes disagree")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptyBatch("an utterance has no valid frames")
    alpha = np.array([mos_weight(m) for m in labels])
    dt = utt_pred.dtype
    utt_term = nn.square(utt_pred - labels.astype(dt))
    frame_w = (mask * (alpha / counts)[:, None]).astype(dt)
    frame_err = nn.square(frame_pred - labels[:, None].astype(dt))
    frame_term = nn.reduce_sum(frame_err * frame_w, axis=1)
    return nn.reduce_sum(utt_term + frame_term) / X


# ------------------------------------------------------------------ optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[nn.Parameter], grads: dict[str, np.ndarray] | None,
              state: AdamState, lr: float, l2_lambda: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place.

    ``grads`` defaults to each parameter's ``.grad``.  Parameters flagged
    ``decay`` receive the extra gradient 2*l2_lambda*w.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        g = np.asarray(g, dtype=np.float64)
        if l2_lambda and p.decay:
            g = g + 2.0 * l2_lambda * p.value
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = (p.value - update).astype(p.dtype)


# ------------------------------------------------------------------- batching

def pad_batch(examples: Sequence[Example], indices: Sequence[int] | None = None) -> Batch:
    if not examples:
        raise EmptyBatch("cannot pad an empty batch")
    T = max(e.T for e in examples)
    F, C = examples[0].features.shape[1:]
    data = np.zeros((len(examples), T, F, C), dtype=np.float32)
    mask = np.zeros((len(examples), T), dtype=bool)
    for i, e in enumerate(examples):
        data[i, :e.T] = e.features
        mask[i, :e.T] = True
    labels = np.array([e.mos for e in examples], dtype=np.float64)
    return Batch(data, mask, labels, list(indices) if indices is not None else [])


def make_batches(examples: Sequence[Example], batch_size: int, seed: int,
                 epoch: int = 0, shuffle: bool = True) -> list[Batch]:
    """Group utterances into 100-frame length buckets and pad each batch to its longest member.

    Bucket contents and batch order are shuffled from (seed, epoch) when
    ``shuffle`` is set; otherwise order is by bucket then index.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    buckets: dict[int, list[int]] = {}
    for i, e in enumerate(examples):
        buckets.setdefault(e.T // BUCKET_WIDTH, []).append(i)
    groups: list[list[int]] = []
    for key in sorted(buckets):
        idx = buckets[key]
        if shuffle:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        groups.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    if shuffle:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [pad_batch([examples[i] for i in g], g) for g in groups]


# ------------------------------------------------------------------ fit loop

def predict_examples(net: CCATNetwork, examples: Sequence[Example],
                     batch_size: int = 16) -> np.ndarray:
    out = np.empty(len(examples))
    for b in make_batches(examples, batch_size, seed=0, shuffle=False):
        _, utt = forward_batch(net, b.data, b.mask, training=False)
        out[b.indices] = utt.value
    return out


def evaluate(net: CCATNetwork, examples: Sequence[Example]) -> tuple[float, float]:
    """(PCC, RMSE) of utterance predictions; PCC is 0.0 when undefined."""
    pred = predict_examples(net, examples)
    labels = np.array([e.mos for e in examples])
    try:
        pcc = pearson(pred, labels)
    except DegenerateInput:
        pcc = 0.0
    return pcc, rmse(pred, labels)


def train_step(net: CCATNetwork, batch: Batch, state: AdamState, cfg: TrainConfig,
               rng: np.random.Generator) -> float:
    net.zero_grad()
    try:
        # overflow is reported by the finiteness checks below, not by numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            frames, utt = forward_batch(net, batch.data, batch.mask, training=True, rng=rng)
            loss = ccat_loss(batch.labels, utt, frames, batch.mask)
            nn.backward(loss)
    except nn.NonFiniteError as exc:
        raise DivergenceError(f"non-finite activation: {exc}") from exc
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    for p in net.parameters():
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name}")
    with np.errstate(over="ignore", invalid="ignore"):
        adam_step(net.parameters(), None, state, cfg.learning_rate, cfg.l2_lambda,
                  (cfg.beta1, cfg.beta2), cfg.adam_eps)
    for p in net.parameters():
        if not np.all(np.isfinite(p.value)):
            raise DivergenceError(f"parameter {p.name} became non-finite")
    return value


def fit(net: CCATNetwork, train: Sequence[Example], dev: Sequence[Example],
        cfg: TrainConfig, log_path: str | Path | None = None
        ) -> tuple[CCATNetwork, list[EpochReport]]:
    """Train ``net`` in place; return a copy holding the best-dev-PCC weights and the history.

    Stops after ``early_stop_patience`` epochs without a dev PCC improvement.
    """
    best = net.copy()
    history: list[EpochReport] = []
    if cfg.max_epochs == 0:
        return best, history
    if not train:
        raise EmptyBatch("training set is empty")
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    best_pcc = -np.inf
    stale = 0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            start = time.perf_counter()
            losses, sizes = [], []
            for batch in make_batches(train, cfg.batch_size, cfg.seed, epoch):
                losses.append(train_step(net, batch, state, cfg, rng))
                sizes.append(len(batch.labels))
            pcc, err = evaluate(net, dev)
            report = EpochReport(epoch, float(np.average(losses, weights=sizes)), pcc, err,
                                 time.perf_counter() - start)
            history.append(report)
            if sink:
                sink.write(report.to_json() + "\n")
                sink.flush()
            log.info("epoch %d loss %.4f dev pcc %.4f rmse %.4f", epoch, report.train_loss, pcc, err)
            if pcc > best_pcc:
                best_pcc, stale = pcc, 0
                best.load_state(net.state())
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    finally:
        if sink:
            sink.close()
    return best, history
