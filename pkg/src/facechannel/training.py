"""Optimisation loop, fine-tuning schemes and the experiment matrix."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Union

import torch
import torch.nn.functional as F

from .dataset import DatasetManifest, LoadedDataset, PreprocessConfig, batch_stream, load_dataset
from .errors import ConfigError, DivergedTrainingError, EmptyDatasetError, InvalidSchemeError
from .metrics import CCCReport, ccc, evaluate, predict
from .model import FaceChannelModel, FreezeScheme, ModelConfig, apply_freeze_policy, build_model, save_weights

logger = logging.getLogger(__name__)

LR_BOUNDS = (0.0005, 0.9)
OPTIMIZERS = ("sgd", "adam")
LOSSES = ("mse", "ccc")

DataRef = Union[DatasetManifest, LoadedDataset]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.0
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    loss: str = "mse"
    seed: int = 0
    max_steps: int | None = None
    eval_batch_size: int = 128
    # stop once both validation heads reach this CCC
    target_ccc: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "optimizer", self.optimizer.lower())
        object.__setattr__(self, "loss", self.loss.lower())
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be finite and >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ccc_arousal: float
    val_ccc_valence: float
    wall_time: float

    @property
    def val_ccc_mean(self) -> float:
        return 0.5 * (self.val_ccc_arousal + self.val_ccc_valence)


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        values = (record.train_loss, record.val_ccc_arousal, record.val_ccc_valence, record.wall_time)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite value in epoch record {record}")
        self.records.append(record)

    @property
    def best_val_ccc(self) -> float | None:
        if not self.records:
            return None
        return max(r.val_ccc_mean for r in self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    params = list(params)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.learning_rate)


def ccc_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    mp, mt = pred.mean(), target.mean()
    vp = ((pred - mp) ** 2).mean()
    vt = ((target - mt) ** 2).mean()
    cov = ((pred - mp) * (target - mt)).mean()
    return 1.0 - 2.0 * cov / (vp + vt + (mp - mt) ** 2 + 1e-8)


def affect_loss(pa, pv, ta, tv, kind: str = "mse") -> torch.Tensor:
    """Sum of the per-head losses."""
    if kind == "mse":
        return F.mse_loss(pa, ta) + F.mse_loss(pv, tv)
    return ccc_loss(pa, ta) + ccc_loss(pv, tv)


def _as_loaded(data: DataRef, model: FaceChannelModel, jobs: int = 1) -> LoadedDataset:
    if isinstance(data, LoadedDataset):
        return data
    if isinstance(data, DatasetManifest):
        cfg = model.config
        return load_dataset(data, PreprocessConfig(cfg.input_size, cfg.input_channels), jobs=jobs)
    raise TypeError(f"unsupported dataset type {type(data).__name__}")


def train(
    model: FaceChannelModel,
    train_data: DataRef,
    val_data: DataRef | None = None,
    config: TrainConfig = TrainConfig(),
    history_path: str | os.PathLike | None = None,
    jobs: int = 1,
) -> tuple[FaceChannelModel, TrainingHistory]:
    """Mini-batch training of the parameters that currently require grad.

    After every epoch the model is scored on ``val_data`` (the training set
    when omitted); the state with the best mean validation CCC is restored
    at the end. Stops early after ``early_stop_patience`` epochs without
    improvement, after ``max_steps`` optimiser steps, or once both heads
    reach ``target_ccc``.
    """
    train_set = _as_loaded(train_data, model, jobs)
    val_set = train_set if val_data is None else _as_loaded(val_data, model, jobs)
    if len(train_set) == 0:
        raise EmptyDatasetError("training set is empty")

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(trainable, config)
    history = TrainingHistory()
    best_state = None
    best_score = -math.inf
    stale = 0
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        Path(history_path).write_text("")

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, seen = 0.0, 0
        for b, idx in enumerate(batch_stream(len(train_set), config.batch_size, config.seed, epoch), start=1):
            idx = torch.from_numpy(idx)
            pa, pv = model(train_set.images[idx])
            loss = affect_loss(pa, pv, train_set.arousal[idx], train_set.valence[idx], config.loss)
            if not torch.isfinite(loss):
                raise DivergedTrainingError(epoch, b)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
            history.steps += 1
            if config.max_steps is not None and history.steps >= config.max_steps:
                break

        pa, pv = predict(model, val_set.images, config.eval_batch_size)
        if not (torch.isfinite(torch.from_numpy(pa)).all() and torch.isfinite(torch.from_numpy(pv)).all()):
            raise DivergedTrainingError(epoch, b)
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / seen,
            val_ccc_arousal=ccc(pa, val_set.arousal.numpy()),
            val_ccc_valence=ccc(pv, val_set.valence.numpy()),
            wall_time=time.perf_counter() - t0,
        )
        history.append(record)
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
        logger.info(
            "epoch %d loss %.4f val CCC a=%.3f v=%.3f",
            epoch, record.train_loss, record.val_ccc_arousal, record.val_ccc_valence,
        )

        if record.val_ccc_mean > best_score:
            best_score = record.val_ccc_mean
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if stale >= config.early_stop_patience:
            logger.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
        if config.max_steps is not None and history.steps >= config.max_steps:
            break
        if config.target_ccc is not None and min(record.val_ccc_arousal, record.val_ccc_valence) >= config.target_ccc:
            logger.info("target CCC %.3f reached at epoch %d", config.target_ccc, epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def finetune(
    model: FaceChannelModel,
    scheme: FreezeScheme | str,
    train_data: DataRef,
    val_data: DataRef | None = None,
    config: TrainConfig = TrainConfig(),
    history_path: str | os.PathLike | None = None,
    jobs: int = 1,
) -> tuple[FaceChannelModel, TrainingHistory]:
    """Continue training pretrained weights with part (``last-conv``) or all
    (``all-layers``) of the network unfrozen."""
    scheme = FreezeScheme.parse(scheme)
    if scheme is FreezeScheme.SCRATCH:
        raise InvalidSchemeError("fine-tuning needs last-conv or all-layers; use train() for scratch")
    apply_freeze_policy(model, scheme)
    try:
        return train(model, train_data, val_data, config, history_path, jobs)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)


@dataclass
class ExperimentPlan:
    """One row of the experiment matrix.

    ``pretrained`` may be a weights directory or an in-memory model; it is
    copied, never modified.
    """

    name: str
    train_dataset: DataRef | None
    eval_datasets: Mapping[str, DataRef]
    scheme: FreezeScheme = FreezeScheme.SCRATCH
    finetune_dataset: DataRef | None = None
    val_dataset: DataRef | None = None
    finetune_val_dataset: DataRef | None = None
    pretrained: str | os.PathLike | FaceChannelModel | None = None

    def __post_init__(self):
        self.scheme = FreezeScheme.parse(self.scheme)
        self.validate()

    def validate(self):
        if self.scheme is FreezeScheme.SCRATCH:
            if self.train_dataset is None:
                raise ConfigError(f"{self.name}: scratch training needs a train dataset")
        else:
            if self.finetune_dataset is None or self.pretrained is None:
                raise ConfigError(f"{self.name}: {self.scheme.value} needs a fine-tune dataset and pretrained weights")
        if not self.eval_datasets:
            raise ConfigError(f"{self.name}: no evaluation datasets")


def _resolve_pretrained(pretrained) -> FaceChannelModel:
    from .model import load_weights

    if isinstance(pretrained, FaceChannelModel):
        model = copy.deepcopy(pretrained)
        if model.pretrained_source is None:
            model.pretrained_source = "<in-memory>"
        return model
    return load_weights(pretrained)


def execute_plan(
    plan: ExperimentPlan,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    finetune_config: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> tuple[FaceChannelModel, TrainingHistory]:
    plan.validate()
    history_path = Path(out_dir) / "history.jsonl" if out_dir is not None else None
    if plan.scheme is FreezeScheme.SCRATCH:
        model = build_model(model_config, seed=config.seed)
        model, history = train(model, plan.train_dataset, plan.val_dataset, config, history_path, jobs)
    else:
        model = _resolve_pretrained(plan.pretrained)
        model, history = finetune(
            model, plan.scheme, plan.finetune_dataset, plan.finetune_val_dataset,
            finetune_config or config, history_path, jobs,
        )
    if out_dir is not None:
        save_weights(model, Path(out_dir) / "weights")
    return model, history


def run_experiment(
    plan: ExperimentPlan,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    finetune_config: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> list[CCCReport]:
    """Train or fine-tune per the plan, then score the retained checkpoint on
    every evaluation dataset (one report each, in the plan's order)."""
    model, _ = execute_plan(plan, config, model_config, finetune_config, out_dir, jobs)
    return evaluate_on(model, plan.name, plan.eval_datasets, config.eval_batch_size, jobs)


def evaluate_on(model, experiment: str, datasets: Mapping[str, DataRef], batch_size: int = 128, jobs: int = 1):
    return [
        evaluate(model, data, experiment=experiment, dataset=name, batch_size=batch_size, jobs=jobs)
        for name, data in datasets.items()
    ]


def table_plans(
    unmasked: DataRef,
    masked: DataRef,
    eval_datasets: Mapping[str, DataRef],
    pretrained=None,
    unmasked_val: DataRef | None = None,
    masked_val: DataRef | None = None,
    unmasked_name: str = "AffectNet",
    masked_name: str = "MaskedAffectNet",
) -> list[ExperimentPlan]:
    """The four train/fine-tune rows: unmasked scratch, masked scratch, and
    the two fine-tunes of the unmasked model on masked data.

    ``pretrained`` defaults to a placeholder resolved by :func:`run_table`.
    """
    pre = pretrained if pretrained is not None else _PENDING
    return [
        ExperimentPlan(f"{unmasked_name} / Scratch", unmasked, eval_datasets, val_dataset=unmasked_val),
        ExperimentPlan(f"{masked_name} / Scratch", masked, eval_datasets, val_dataset=masked_val),
        ExperimentPlan(
            f"{unmasked_name} -> {masked_name} / Last Conv", unmasked, eval_datasets, FreezeScheme.LAST_CONV,
            finetune_dataset=masked, val_dataset=unmasked_val, finetune_val_dataset=masked_val, pretrained=pre,
        ),
        ExperimentPlan(
            f"{unmasked_name} -> {masked_name} / All Layers", unmasked, eval_datasets, FreezeScheme.ALL_LAYERS,
            finetune_dataset=masked, val_dataset=unmasked_val, finetune_val_dataset=masked_val, pretrained=pre,
        ),
    ]


class _Pending:
    def __repr__(self):
        return "<pretrained from first plan>"


_PENDING = _Pending()


def run_table(
    plans: list[ExperimentPlan],
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    finetune_config: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> tuple[list[CCCReport], dict[str, FaceChannelModel]]:
    """Run several plans in order. Fine-tune plans whose ``pretrained`` is the
    placeholder from :func:`table_plans` start from the first scratch plan's
    model."""
    reports: list[CCCReport] = []
    models: dict[str, FaceChannelModel] = {}
    first_scratch = None
    for i, plan in enumerate(plans):
        if plan.pretrained is _PENDING:
            if first_scratch is None:
                raise ConfigError(f"{plan.name}: no earlier scratch model to fine-tune")
            plan = copy.copy(plan)
            plan.pretrained = first_scratch
        sub = Path(out_dir) / f"exp{i + 1}" if out_dir is not None else None
        model, _ = execute_plan(plan, config, model_config, finetune_config, sub, jobs)
        if plan.scheme is FreezeScheme.SCRATCH and first_scratch is None:
            first_scratch = model
        models[plan.name] = model
        reports.extend(evaluate_on(model, plan.name, plan.eval_datasets, config.eval_batch_size, jobs))
    return reports, models
