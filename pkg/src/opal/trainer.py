"""Two-stage training: soft-interest pre-training, then hard-interest fine-tuning.

Both stages run Adam on the sampled-softmax objective, project V and G rows
back to the unit sphere after every step, and early-stop on validation
Recall@200 with the best parameters restored at the end of the stage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TextIO

import numpy as np

from .data import DatasetSplit, iter_epoch
from .embedding import Checkpoint, EmbeddingStore, GruParams, init_params, param_dict, renormalize
from .errors import ConfigError, DivergenceError
from .evaluation import evaluate
from .objective import batch_objective

log = logging.getLogger(__name__)

LOG_COLUMNS = ("stage", "epoch", "main", "orth", "unif", "unique", "total", "val_recall200")


@dataclass
class TrainConfig:
    d: int = 64
    k: int = 4
    batch_size: int = 1024
    learning_rate: float = 0.001
    epsilon: float = 0.1
    # divisor of the max-interest scores in the main loss; 0 = use epsilon
    temperature: float = 0.0
    lambda_o: float = 10.0
    lambda_f: float = 1.0
    lambda_q: float = 1.0
    patience: int = 5
    max_epochs: int = 100
    max_len: int = 200
    min_history: int = 1
    future_window: int = 0  # 0 = the whole remaining sequence
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        ints = ("d", "k", "batch_size", "patience", "max_epochs", "max_len", "min_history")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("learning_rate", "epsilon", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_o", "lambda_f", "lambda_q", "future_window", "temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")


class Adam:
    """Adam with bias correction over a dict of named arrays, updated in place."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Adam, lr: float | None = None) -> None:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


@dataclass
class TrainState:
    stage: str
    epoch: int = 0
    best_recall: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    history: list[dict] = field(default_factory=list)
    adam: Adam | None = field(default=None, repr=False)


@dataclass
class TrainResult:
    store: EmbeddingStore
    gru: GruParams
    stage: str  # stage whose fusion rule serves this model
    states: list[TrainState]
    # parameters at the end of pre-training, when that stage ran
    pretrained: tuple[EmbeddingStore, GruParams] | None = None

    def checkpoint(self) -> Checkpoint:
        adam = self.states[-1].adam if self.states else None
        if adam is None or not adam.m:
            return Checkpoint(self.store, self.gru, self.stage)
        zeros = {n: np.zeros_like(a) for n, a in param_dict(self.store, self.gru).items()}
        m = {**zeros, **adam.m}
        v = {**zeros, **adam.v}
        return Checkpoint(self.store, self.gru, self.stage, m, v, adam.t)


class _CsvLog:
    def __init__(self, stream: TextIO | None):
        self.stream = stream
        if stream is not None:
            stream.write(",".join(LOG_COLUMNS) + "\n")

    def write(self, row: dict) -> None:
        if self.stream is None:
            return
        self.stream.write(",".join(
            f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS
        ) + "\n")
        self.stream.flush()


def _run_stage(
    stage: str,
    config: TrainConfig,
    split: DatasetSplit,
    store: EmbeddingStore,
    gru: GruParams,
    rng: np.random.Generator,
    out: _CsvLog,
    step_hook=None,
) -> TrainState:
    state = TrainState(stage)
    adam = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    state.adam = adam
    params = param_dict(store, gru)
    trainable = ["V", "G"] if stage == "pretrain" else list(params)
    best = (store.copy(), gru.copy())
    fw = config.future_window or None
    for epoch in range(1, config.max_epochs + 1):
        sums = np.zeros(5)
        n_batches = 0
        for batch in iter_epoch(
            split.train, rng, config.batch_size, split.catalog_size,
            config.min_history, fw, config.max_len,
        ):
            parts, grads = batch_objective(
                store, gru, batch, stage, config.epsilon,
                config.lambda_o, config.lambda_f, config.lambda_q, config.temperature or None,
            )
            if not math.isfinite(parts.total):
                raise DivergenceError(
                    f"{stage} epoch {epoch}: loss is {parts.total} "
                    f"(main={parts.main}, orth={parts.orth}, unif={parts.unif}, unique={parts.unique})"
                )
            adam.step({n: params[n] for n in trainable}, {n: grads[n] for n in trainable})
            renormalize(store)
            sums += (parts.main, parts.orth, parts.unif, parts.unique, parts.total)
            n_batches += 1
            if step_hook is not None:
                step_hook(stage, store, gru, parts)
        if n_batches == 0:
            raise ValueError("no training sequence is long enough to sample an instance")
        report = evaluate(store, gru, split.val, config.epsilon, stage, Ks=(200,), max_len=config.max_len)
        recall = report.recall[200]
        means = sums / n_batches
        row = dict(zip(LOG_COLUMNS, (stage, epoch, *map(float, means), recall)))
        state.history.append(row)
        out.write(row)
        log.info("%s epoch %d: total %.4f val recall@200 %.4f", stage, epoch, means[4], recall)
        state.epoch = epoch
        if recall > state.best_recall:
            state.best_recall, state.best_epoch, state.since_improvement = recall, epoch, 0
            best = (store.copy(), gru.copy())
        else:
            state.since_improvement += 1
            if state.since_improvement >= config.patience:
                break
    store.V[...] = best[0].V
    store.G[...] = best[0].G
    for name, arr in best[1].arrays().items():
        getattr(gru, name)[...] = arr
    return state


def pretrain(config, split, store, gru, rng, log_stream=None, step_hook=None) -> TrainState:
    return _run_stage("pretrain", config, split, store, gru, rng, _CsvLog(log_stream), step_hook)


def finetune(config, split, store, gru, rng, log_stream=None, step_hook=None) -> TrainState:
    return _run_stage("finetune", config, split, store, gru, rng, _CsvLog(log_stream), step_hook)


def train(
    config: TrainConfig,
    split: DatasetSplit,
    skip_pretrain: bool = False,
    skip_finetune: bool = False,
    log_stream: TextIO | None = None,
    step_hook=None,
    pretrained: tuple[EmbeddingStore, GruParams] | None = None,
) -> TrainResult:
    """Full two-stage run; the skip flags give the "no pre-train" / "no fine-tune" ablations.

    ``pretrained`` reuses an existing pre-trained (store, gru) pair instead of
    running the first stage; it is copied, not modified.
    """
    config.validate()
    if skip_pretrain and skip_finetune:
        raise ConfigError("both stages skipped: nothing to train")
    init_rng = np.random.default_rng([config.seed, 0])
    sample_rng = np.random.default_rng([config.seed, 1])
    if pretrained is not None:
        store, gru = pretrained[0].copy(), pretrained[1].copy()
    else:
        store, gru = init_params(split.catalog_size, config.d, config.k, init_rng)
    csv_log = _CsvLog(log_stream)
    states = []
    snapshot = None
    if not skip_pretrain and pretrained is None:
        states.append(_run_stage("pretrain", config, split, store, gru, sample_rng, csv_log, step_hook))
        snapshot = (store.copy(), gru.copy())
    stage = "pretrain"
    if not skip_finetune:
        states.append(_run_stage("finetune", config, split, store, gru, sample_rng, csv_log, step_hook))
        stage = "finetune"
    return TrainResult(store, gru, stage, states, snapshot)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
