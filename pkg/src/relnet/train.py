"""Episodic few-shot training and minibatch zero-shot training."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from relnet.checkpoint import TrainingState, load_checkpoint, save_checkpoint
from relnet.data.episodes import EpisodeSpec, sample_episode
from relnet.data.images import DataError
from relnet.metrics import evaluate_fewshot
from relnet.model import ModelConfig, RelationNetwork, ZslConfig, ZslRelationNetwork, episode_loss
from relnet.optim import AdamState, adam_step

TRAIN_DOMAIN = 0x54524E

MODE_DEFAULTS = {
    "fewshot": {"base_lr": 1e-3, "lr_halving_period": 100_000, "weight_decay": 0.0},
    "zsl": {"base_lr": 1e-5, "lr_halving_period": 200_000, "weight_decay": 1e-5},
}


class NumericError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""


def lr_schedule(base_lr: float, step: int, period: int) -> float:
    """``base_lr * 0.5 ** floor(step / period)``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr * 0.5 ** (step // period)


@dataclass
class TrainConfig:
    """Budget, schedule and optimizer settings of one run.

    ``base_lr``, ``lr_halving_period`` and ``weight_decay`` default per
    ``mode`` when left as None.  ``batch_size`` applies to zero-shot runs.
    """

    mode: str = "fewshot"
    ways: int = 5
    shots: int = 1
    queries: int = 19
    total_episodes: int = 1000
    base_lr: float | None = None
    lr_halving_period: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float | None = None
    decoupled_decay: bool = True
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_episodes: int = 100
    eval_queries: int | None = None

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ValueError(f"unknown training mode {self.mode!r}")
        for key, value in MODE_DEFAULTS[self.mode].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.total_episodes < 1:
            raise ValueError("total_episodes must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.lr_halving_period < 1:
            raise ValueError("lr_halving_period must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.ways, self.shots, self.queries)

    def adam(self, decay_names=frozenset()) -> AdamState:
        return AdamState(lr=self.base_lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         weight_decay=self.weight_decay, decay_names=frozenset(decay_names),
                         decoupled=self.decoupled_decay)

    def lr(self, step: int) -> float:
        return lr_schedule(self.base_lr, step, self.lr_halving_period)


@dataclass
class TrainResult:
    state: TrainingState
    losses: list = field(default_factory=list)
    log: list = field(default_factory=list)
    checkpoint: Path | None = None


class MetricsLog:
    """Append-only ``step,loss,lr[,val_acc]`` CSV (kept in memory when no path is given)."""

    HEADER = ["step", "loss", "lr", "val_acc"]

    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list = []
        if path is not None and not path.exists():
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def append(self, step: int, loss: float, lr: float, val_acc: float | None = None) -> None:
        row = [step, repr(loss), repr(lr), "" if val_acc is None else repr(val_acc)]
        self.rows.append((step, loss, lr, val_acc))
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step}.rnc"


def train_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([TRAIN_DOMAIN, seed])


def _dump_nan(outdir: Path | None, step: int, info: dict) -> str:
    text = json.dumps({"step": step, **info}, indent=2, sort_keys=True, default=str)
    if outdir is not None:
        (outdir / "nan_dump.json").write_text(text)
    return text


def _start(config: TrainConfig, resume, fresh) -> TrainingState:
    if resume is None:
        return fresh()
    state = resume if isinstance(resume, TrainingState) else load_checkpoint(resume)
    want = state.extra.get("train_config")
    if want is not None and want.get("seed") != config.seed:
        raise ValueError("resume checkpoint was written with a different seed")
    return state


def _extra(config: TrainConfig, window: list) -> dict:
    return {"train_config": asdict(config), "loss_window": [repr(v) for v in window]}


def _run(config: TrainConfig, state: TrainingState, step_fn, outdir, validate=None) -> TrainResult:
    outdir = Path(outdir) if outdir is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(outdir / "metrics.csv" if outdir is not None else None)
    # partial logging window carried over from a checkpoint
    window = [float(v) for v in state.extra.get("loss_window", [])]
    result = TrainResult(state)
    model = state.model
    while state.step < config.total_episodes:
        lr = config.lr(state.step)
        rng_state = state.rng.bit_generator.state
        loss, info = step_fn(state.rng)
        value = loss.item()
        if not math.isfinite(value):
            dump = _dump_nan(outdir, state.step, {"loss": value, "rng_state": rng_state, **info})
            raise NumericError(f"non-finite loss at step {state.step}; episode dump:\n{dump}")
        loss.backward()
        adam_step(model.params, state.adam, lr)
        state.step += 1
        result.losses.append(value)
        window.append(value)
        if state.step % config.log_every == 0 or state.step == config.total_episodes:
            val = None
            if validate is not None and config.eval_every and state.step % config.eval_every == 0:
                val = validate(state.step)
            log.append(state.step, float(np.mean(window)), lr, val)
            window = []
        state.extra = _extra(config, window)
        if outdir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            result.checkpoint = save_checkpoint(outdir / checkpoint_name(state.step), model, state.adam,
                                                state.step, state.rng, state.extra)
    if outdir is not None:
        final = outdir / checkpoint_name(state.step)
        if result.checkpoint != final:
            result.checkpoint = save_checkpoint(final, model, state.adam, state.step, state.rng, state.extra)
    result.log = log.rows
    return result


def train_fewshot(config: TrainConfig, model_config: ModelConfig | None = None, train_ds=None, val_ds=None,
                  outdir=None, resume=None) -> TrainResult:
    """Episodic training: sample, score, MSE loss, backward, Adam with the scheduled rate.

    ``resume`` is a checkpoint path or :class:`TrainingState`; training then
    continues from its step with the stored parameters, moments and RNG.
    """
    if train_ds is None:
        raise ValueError("train_fewshot needs a training dataset")
    spec = config.episode_spec

    def fresh():
        model = RelationNetwork(model_config or ModelConfig.omniglot(), seed=config.seed, dtype=np.float32)
        return TrainingState(model, config.adam(), 0, train_rng(config.seed))

    state = _start(config, resume, fresh)
    model = state.model

    def step_fn(rng):
        episode = sample_episode(train_ds, spec, rng)
        loss = episode_loss(model.score_episode(episode, mode="train"))
        return loss, {"class_ids": episode.class_ids, "support_refs": episode.support_refs,
                      "query_refs": episode.query_refs}

    validate = None
    if val_ds is not None and config.eval_every:
        eval_spec = EpisodeSpec(config.ways, config.shots, config.eval_queries or config.queries)

        def validate(step):
            return evaluate_fewshot(model, val_ds, eval_spec, config.eval_episodes, seed=config.seed).mean

    return _run(config, state, step_fn, outdir, validate)


def train_zsl(config: TrainConfig, zsl_config: ZslConfig | None = None, table=None, outdir=None,
              resume=None) -> TrainResult:
    """Minibatch zero-shot training over seen-class items.

    Each step draws ``batch_size`` rows without replacement and scores them
    against every seen class; weight decay reaches the semantic MLP only.
    """
    if table is None:
        raise ValueError("train_zsl needs a feature table")
    stray = sorted(set(table.labels) & table.unseen)
    if stray:
        raise DataError(f"training features include unseen class {stray[0]!r}")
    seen = table.ordered("seen")
    rows, labels = table.rows_for(seen)
    attrs = table.attributes_for(seen)
    if len(rows) < config.batch_size:
        raise DataError(f"batch size {config.batch_size} exceeds the {len(rows)} training rows")

    def fresh():
        model = ZslRelationNetwork(zsl_config or ZslConfig(), seed=config.seed, dtype=np.float32)
        return TrainingState(model, config.adam(model.decay_names), 0, train_rng(config.seed))

    state = _start(config, resume, fresh)
    model = state.model
    if model.config.attribute_dim != table.attribute_dim or model.config.feature_dim != table.feature_dim:
        raise DataError(
            f"table dims (attributes {table.attribute_dim}, features {table.feature_dim}) do not match the model "
            f"({model.config.attribute_dim}, {model.config.feature_dim})"
        )

    def step_fn(rng):
        idx = np.sort(rng.choice(len(rows), size=config.batch_size, replace=False))
        scores = model.scores(attrs, rows[idx], seen, [labels[i] for i in idx])
        return episode_loss(scores), {"rows": idx.tolist()}

    return _run(config, state, step_fn, outdir)
