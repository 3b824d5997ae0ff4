"""Seeded hyper-parameter search and ensembling of trained networks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CCATError, ConfigError, DivergenceError, EmptyEnsemble
from .frontend import FeatureConfig, Waveform, extract_features
from .model import CCATNetwork, ModelConfig, build, forward, save_checkpoint
from .training import Example, TrainConfig, evaluate, fit

log = logging.getLogger(__name__)


@dataclass
class SearchSpace:
    context_size: list[int] = field(default_factory=lambda: [7, 9, 11, 13])
    conv_filters: list[int] = field(default_factory=lambda: [8, 16, 32])
    conv_kernel: list[int] = field(default_factory=lambda: [3, 5])
    num_encoders: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    att_heads: list[int] = field(default_factory=lambda: [2, 4])
    ff_units: list[int] = field(default_factory=lambda: [128, 256, 512])
    fc_units: list[int] = field(default_factory=lambda: [128, 256, 512])
    fc_layers: list[int] = field(default_factory=lambda: [1, 2, 3])
    batch_size: list[int] = field(default_factory=lambda: [4, 8, 16])
    dropout: tuple[float, float] = (0.05, 0.3)
    learning_rate: tuple[float, float] = (1e-5, 1e-3)
    l2_lambda: tuple[float, float] = (1e-4, 1e-2)
    d_model: int = 64
    feature_kind: str = "STFT"

    def __post_init__(self):
        if any(c % 2 == 0 or c < 1 for c in self.context_size):
            raise ConfigError("context sizes must be positive odd integers")
        if any(self.d_model % h for h in self.att_heads):
            raise ConfigError(f"d_model {self.d_model} must be divisible by every head count")
        for name in ("dropout", "learning_rate", "l2_lambda"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} range is empty")
        if self.learning_rate[0] <= 0 or self.l2_lambda[0] <= 0:
            raise ConfigError("log-uniform ranges must be positive")
        self.dropout = tuple(self.dropout)
        self.learning_rate = tuple(self.learning_rate)
        self.l2_lambda = tuple(self.l2_lambda)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown search space keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dropout", "learning_rate", "l2_lambda"):
            d[k] = list(d[k])
        return d


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_config(space: SearchSpace, rng: np.random.Generator,
                  base: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Draw every hyper-parameter independently; categorical uniform, rates log-uniform."""
    def pick(options):
        return options[int(rng.integers(len(options)))]

    model = ModelConfig(
        feature_kind=space.feature_kind,
        context_size=int(pick(space.context_size)),
        conv_filters=int(pick(space.conv_filters)),
        conv_kernel=int(pick(space.conv_kernel)),
        num_encoders=int(pick(space.num_encoders)),
        att_heads=int(pick(space.att_heads)),
        ff_units=int(pick(space.ff_units)),
        fc_units=int(pick(space.fc_units)),
        fc_layers=int(pick(space.fc_layers)),
        d_model=space.d_model,
        dropout=float(rng.uniform(*space.dropout)),
    )
    train = replace(base or TrainConfig(),
                    batch_size=int(pick(space.batch_size)),
                    learning_rate=_log_uniform(rng, *space.learning_rate),
                    l2_lambda=_log_uniform(rng, *space.l2_lambda))
    return model, train


@dataclass
class Trial:
    trial_id: int
    model: ModelConfig
    train: TrainConfig
    dev_pcc: float = float("nan")
    dev_rmse: float = float("nan")
    checkpoint: str | None = None
    status: str = "done"
    message: str = ""

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else None

        return {"trial_id": self.trial_id, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "dev_pcc": num(self.dev_pcc),
                "dev_rmse": num(self.dev_rmse), "checkpoint": self.checkpoint,
                "status": self.status, "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "Trial":
        nan = float("nan")
        return cls(d["trial_id"], ModelConfig.from_dict(d["model"]),
                   TrainConfig.from_dict(d["train"]),
                   nan if d.get("dev_pcc") is None else d["dev_pcc"],
                   nan if d.get("dev_rmse") is None else d["dev_rmse"],
                   d.get("checkpoint"), d.get("status", "done"), d.get("message", ""))


def _rank_key(t: Trial):
    done = t.status == "done" and math.isfinite(t.dev_pcc)
    rmse = t.dev_rmse if math.isfinite(t.dev_rmse) else math.inf
    return (0 if done else 1, -t.dev_pcc if done else 0.0, rmse, t.trial_id)


def select_top_k(trials: Sequence[Trial], k: int) -> list[Trial]:
    """Best dev PCC first; ties by lower dev RMSE then trial id; diverged trials last."""
    return sorted(trials, key=_rank_key)[:max(k, 0)]


def run_search(space: SearchSpace, train: Sequence[Example], dev: Sequence[Example],
               n_trials: int = 24, epochs_per_trial: int = 30, seed: int = 0,
               out_dir: str | Path | None = None, base_train: TrainConfig | None = None,
               overrides: dict[int, dict] | None = None,
               sampler: Callable[[SearchSpace, np.random.Generator], tuple] | None = None,
               feature: FeatureConfig | None = None) -> list[Trial]:
    """Train ``n_trials`` sampled configurations and return them ranked.

    ``overrides`` maps a trial id to field replacements (keys of ModelConfig
    or TrainConfig) applied after sampling.  ``feature`` is stored in each
    checkpoint, with its context width adjusted to the trial's model.  Trials whose training diverges
    are recorded with status 'diverged' (other library errors as 'failed')
    and the search carries on.
    """
    rng = np.random.default_rng(seed)
    F_in = train[0].features.shape[1] if train else 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "trials.jsonl", "w")
    else:
        log_file = None
    base = replace(base_train or TrainConfig(), max_epochs=epochs_per_trial)
    trials: list[Trial] = []
    try:
        for tid in range(n_trials):
            if sampler is None:
                mcfg, tcfg = sample_config(space, rng, base)
            else:
                mcfg, tcfg = sampler(space, rng)
            tcfg = replace(tcfg, seed=seed * 1000 + tid, max_epochs=epochs_per_trial)
            for key, value in (overrides or {}).get(tid, {}).items():
                if key in ModelConfig.__dataclass_fields__:
                    mcfg = replace(mcfg, **{key: value})
                elif key in TrainConfig.__dataclass_fields__:
                    tcfg = replace(tcfg, **{key: value})
                else:
                    raise ConfigError(f"unknown override key {key!r}")
            trial = Trial(tid, mcfg, tcfg)
            try:
                context = train[0].features.shape[2]
                if context != mcfg.context_size:
                    train_t = [_recontext(e, mcfg.context_size) for e in train]
                    dev_t = [_recontext(e, mcfg.context_size) for e in dev]
                else:
                    train_t, dev_t = train, dev
                fdict = None
                if feature is not None:
                    fdict = replace(feature, kind=mcfg.feature_kind,
                                    context_half_width=mcfg.context_size // 2).to_dict()
                net = build(mcfg, F_in, seed=tcfg.seed, feature=fdict)
                best, history = fit(net, train_t, dev_t, tcfg)
                trial.dev_pcc, trial.dev_rmse = evaluate(best, dev_t)
                if out is not None:
                    path = out / f"trial_{tid:03d}.ccat"
                    save_checkpoint(best, path)
                    trial.checkpoint = str(path)
            except DivergenceError as exc:
                trial.status, trial.message = "diverged", str(exc)
                trial.dev_pcc = trial.dev_rmse = float("nan")
            except CCATError as exc:
                trial.status, trial.message = "failed", f"{type(exc).__name__}: {exc}"
                trial.dev_pcc = trial.dev_rmse = float("nan")
            log.info("trial %d %s pcc=%s", tid, trial.status, trial.dev_pcc)
            trials.append(trial)
            if log_file:
                log_file.write(json.dumps(trial.to_dict(), sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return select_top_k(trials, len(trials))


def _recontext(e: Example, C: int) -> Example:
    """Rebuild the context stack of an example for a different context size."""
    n_have = e.features.shape[2] // 2
    n_want = C // 2
    centre = e.features[:, :, n_have]
    T = centre.shape[0]
    padded = np.zeros((T + 2 * n_want,) + centre.shape[1:], dtype=e.features.dtype)
    padded[n_want:n_want + T] = centre
    data = np.stack([padded[j:j + T] for j in range(C)], axis=-1)
    return Example(data, e.mos, e.uid)


# ------------------------------------------------------------------ ensemble

def member_feature_config(net: CCATNetwork) -> FeatureConfig:
    if net.feature is not None:
        return FeatureConfig.from_dict(net.feature)
    return FeatureConfig(kind=net.config.feature_kind,
                         context_half_width=net.config.context_size // 2)


def ensemble_predict(models: Sequence[CCATNetwork | tuple[CCATNetwork, FeatureConfig]],
                     wav: Waveform) -> float:
    """Mean utterance score of every member, each using its own feature pipeline."""
    if not models:
        raise EmptyEnsemble("ensemble has no members")
    return member_mean([s for s, _ in ensemble_members(models, wav)])


def member_mean(scores: Sequence[float]) -> float:
    """Arithmetic mean taken as offsets from the first score.

    Identical members give back exactly that member's score, which a plain
    sum-then-divide does not guarantee.
    """
    if not scores:
        raise EmptyEnsemble("ensemble has no members")
    base = float(scores[0])
    return base + math.fsum(float(s) - base for s in scores) / len(scores)


def ensemble_members(models, wav: Waveform) -> list[tuple[float, np.ndarray]]:
    """(utterance score, frame scores) for every member."""
    out = []
    cache: dict[str, object] = {}
    for m in models:
        net, fcfg = m if isinstance(m, tuple) else (m, member_feature_config(m))
        key = fcfg.digest()
        if key not in cache:
            cache[key] = extract_features(wav, fcfg)
        pred = forward(net, cache[key], training=False)
        out.append((pred.utterance_score, pred.frame_scores))
    return out
