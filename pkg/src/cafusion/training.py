"""End-to-end training: seeded shuffling, Adam, per-epoch validation, best-accuracy snapshot."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, mil_head, model
from .checkpoint import CheckpointState
from .config import ConfigError, TrainConfig, from_dict, to_dict
from .data.bundles import FeatureScaler, make_batch
from .data.types import ConceptBundle, FeatureBatch
from .metrics import compute_metrics
from .nn import NonFiniteError
from .optim import adam_step

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.cafc"
LOG_NAME = "train_log.jsonl"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: CheckpointState):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    state: CheckpointState
    log: list[dict]

    @property
    def config(self) -> TrainConfig:
        return from_dict(TrainConfig, self.state.config)

    @property
    def best_params(self) -> dict[str, np.ndarray]:
        return self.state.best_params

    def model(self, best: bool = True) -> "TrainedModel":
        return TrainedModel.from_state(self.state, best)


def batches_for(bundles: Sequence[ConceptBundle], config: TrainConfig,
                scaler: FeatureScaler | None = None) -> FeatureBatch:
    m = config.model
    if scaler is not None:
        bundles = scaler.transform(bundles)
    return make_batch(bundles, m.n_concepts, config.pad_sigma, config.seed, m.crop_size)


@dataclass
class TrainedModel:
    """Parameters plus everything needed to feed them new bundles."""

    params: dict[str, np.ndarray]
    config: TrainConfig
    scaler: FeatureScaler | None = None

    @classmethod
    def from_state(cls, state: CheckpointState, best: bool = True) -> "TrainedModel":
        config = from_dict(TrainConfig, state.config)
        params = state.best_params if best else state.params
        return cls(params, config, FeatureScaler.from_tensors(state.norm))

    @classmethod
    def load(cls, path, best: bool = True) -> "TrainedModel":
        return cls.from_state(checkpoint.load(path), best)

    def batch(self, bundles: Sequence[ConceptBundle]) -> FeatureBatch:
        return batches_for(bundles, self.config, self.scaler)

    def forward(self, batch: FeatureBatch) -> model.Outputs:
        """Eval-mode forward of a whole batch, no dropout."""
        out, _ = model.forward(self.params, batch.z_g_in, batch.z_l_in, batch.valid, self.config.model)
        return out

    def predict(self, bundles: Sequence[ConceptBundle] | FeatureBatch) -> np.ndarray:
        batch = bundles if isinstance(bundles, FeatureBatch) else self.batch(bundles)
        return predict_batch(self.params, batch, self.config.model, self.config.batch_size_eval)[0]


def predict_batch(params, batch: FeatureBatch, cfg, batch_size: int = 1):
    """Eval-mode forward in chunks; returns ``(predictions, o_pred, o_cam)``."""
    preds, logits, cams = [], [], []
    for start in range(0, len(batch), batch_size):
        sl = slice(start, start + batch_size)
        out, _ = model.forward(params, batch.z_g_in[sl], batch.z_l_in[sl], batch.valid[sl], cfg)
        logits.append(out.o_pred)
        cams.append(out.o_cam)
    o_pred = np.concatenate(logits)
    return mil_head.predict(o_pred), o_pred, np.concatenate(cams)


def _accuracy(params, batch: FeatureBatch, cfg, batch_size: int) -> float:
    pred, _, _ = predict_batch(params, batch, cfg, batch_size)
    return float(np.mean(pred == batch.labels))


def initial_state(config: TrainConfig) -> CheckpointState:
    params = model.init_params(config.model, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    return CheckpointState(
        params=params,
        adam_m={k: np.zeros_like(p) for k, p in params.items()},
        adam_v={k: np.zeros_like(p) for k, p in params.items()},
        step=0, epoch=0, rng_state=rng.bit_generator.state,
        best_params=copy.deepcopy(params), best_val_accuracy=None, best_epoch=0,
        config=to_dict(config), log=[],
    )


def train(
    train_data: Sequence[ConceptBundle] | FeatureBatch,
    val_data: Sequence[ConceptBundle] | FeatureBatch | None,
    config: TrainConfig,
    out_dir=None,
    resume: CheckpointState | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train until ``config.epochs`` (or ``stop_after`` epochs in this call).

    Bundles are standardised with a scaler fitted on ``train_data`` (when
    ``config.standardize``); prepared FeatureBatches are used as given.
    With ``out_dir`` the checkpoint and JSON-lines log are rewritten after
    every epoch, so an interruption leaves the last completed epoch on disk.
    """
    config.validate()
    cfg = config.model
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    state = copy.deepcopy(resume) if resume is not None else initial_state(config)
    if resume is not None and resume.config != to_dict(config):
        raise ConfigError("resume checkpoint was produced with a different configuration")
    scaler = FeatureScaler.from_tensors(state.norm)
    if scaler is None and resume is None and config.standardize and not isinstance(train_data, FeatureBatch):
        scaler = FeatureScaler.fit(train_data)
        if scaler is not None:
            state.norm = scaler.tensors()
    train_batch = _as_batch(train_data, config, scaler)
    val_batch = None
    if val_data is not None and len(val_data):
        val_batch = _as_batch(val_data, config, scaler)

    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    params, m, v = state.params, state.adam_m, state.adam_v
    out_dir = Path(out_dir) if out_dir is not None else None
    last_epoch = config.epochs if stop_after is None else min(config.epochs, state.epoch + stop_after)

    for epoch in range(state.epoch + 1, last_epoch + 1):
        good = copy.deepcopy(state)
        order = rng.permutation(len(train_batch))
        losses = []
        for start in range(0, len(order), config.batch_size_train):
            mb = train_batch.subset(order[start : start + config.batch_size_train])
            loss, grads, _ = model.loss_and_grads(params, mb.z_g_in, mb.z_l_in, mb.valid, mb.labels, cfg, rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}", good)
            try:
                adam_step(params, grads, m, v, state.step + 1, config.learning_rate,
                          config.beta1, config.beta2, config.epsilon)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"{exc} at epoch {epoch}", good) from exc
            state.step += 1
            losses.append(loss * len(mb))
        record = {
            "epoch": epoch,
            "step": state.step,
            "train_loss": float(np.sum(losses) / len(train_batch)),
            "train_accuracy": _accuracy(params, train_batch, cfg, max(config.batch_size_eval, 64)),
            "val_accuracy": None,
            "val_macro_f1": None,
        }
        if val_batch is not None:
            pred, _, _ = predict_batch(params, val_batch, cfg, config.batch_size_eval)
            rep = compute_metrics(val_batch.labels, pred, cfg.num_classes)
            record["val_accuracy"], record["val_macro_f1"] = rep.accuracy, rep.macro_f1
            score = rep.accuracy
        else:
            score = record["train_accuracy"]
        if state.best_val_accuracy is None or score > state.best_val_accuracy:
            state.best_val_accuracy = score
            state.best_epoch = epoch
            state.best_params = copy.deepcopy(params)
        state.epoch = epoch
        state.rng_state = rng.bit_generator.state
        state.log.append(record)
        log.info("epoch %d loss %.4f val_acc %s", epoch, record["train_loss"], record["val_accuracy"])
        if out_dir is not None:
            checkpoint.save(state, out_dir / CHECKPOINT_NAME)
            write_log(state.log, out_dir / LOG_NAME)
    return TrainResult(state, list(state.log))


def _as_batch(data, config: TrainConfig, scaler) -> FeatureBatch:
    return data if isinstance(data, FeatureBatch) else batches_for(data, config, scaler)


def write_log(records: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
