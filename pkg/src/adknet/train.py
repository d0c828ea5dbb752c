"""Supervised training: L1 objective, Adam, plateau learning-rate halving,
checkpointing and validation.

All randomness in an epoch is derived from ``(seed, epoch, step)``, so a run
restored from a checkpoint continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentOp, PairedSample, augment, crop_pair, split_validation
from .metrics import psnr
from .model import ModelConfig, ModelParams, build, forward
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    epochs: int = 100
    batch: int = 4
    patch: int = 192
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 1
    augment: bool = True

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.lr0 > self.min_lr:
            raise ValueError("lr0 must exceed min_lr")
        if self.batch < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch and eval_every must be positive, epochs non-negative")


def l1_loss(pred, target) -> T.Tensor:
    """Mean absolute error over every pixel, channel and batch element."""
    target = target if isinstance(target, T.Tensor) else T.tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return T.mean(T.abs(pred - target))


@dataclass
class PlateauSchedule:
    """Halve (by ``factor``) after ``patience`` evaluations without a strict improvement."""

    lr: float
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    best: float = math.inf
    since_improvement: int = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.since_improvement = 0
        return self.lr


def plateau_lr(history: Sequence[float], lr0: float, patience=10, factor=0.5, min_lr=1e-6) -> float:
    """Learning rate after a sequence of validation losses."""
    sched = PlateauSchedule(lr0, patience, factor, min_lr)
    for v in history:
        sched.update(v)
    return sched.lr


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    lr: float
    best_val: float = math.inf
    since_improvement: int = 0
    step: int = 0
    epoch: int = 0
    epoch_step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def counters(self) -> dict:
        return {
            "lr": self.lr,
            "best_val": self.best_val,
            "since_improvement": self.since_improvement,
            "step": self.step,
            "epoch": self.epoch,
            "epoch_step": self.epoch_step,
            "seed": self.seed,
        }


class Trainer:
    def __init__(
        self,
        model_config: ModelConfig,
        train_set: Sequence[PairedSample],
        val_set: Sequence[PairedSample],
        config: TrainConfig,
        state: TrainState | None = None,
    ):
        if not train_set:
            raise ValueError("training set is empty")
        for s in list(train_set) + list(val_set):
            if s.scale != model_config.scale:
                raise ValueError(f"{s.id} has scale {s.scale}, model expects {model_config.scale}")
        self.model_config = model_config
        self.train_set = list(train_set)
        self.val_set = list(val_set)
        self.config = config
        if state is None:
            state = TrainState(build(model_config), AdamState(), config.lr0, seed=config.seed)
        self.state = state
        self.schedule = PlateauSchedule(
            state.lr, config.plateau_patience, config.plateau_factor, config.min_lr,
            state.best_val, state.since_improvement,
        )
        self._order: tuple[int, np.ndarray] | None = None

    @property
    def params(self) -> ModelParams:
        return self.state.params

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.config.batch)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if self._order is None or self._order[0] != epoch:
            rng = np.random.default_rng([self.state.seed, epoch, 0])
            self._order = (epoch, rng.permutation(len(self.train_set)))
        return self._order[1]

    def make_batch(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        order = self._epoch_order(epoch)
        picks = order[index * self.config.batch : (index + 1) * self.config.batch]
        rng = np.random.default_rng([self.state.seed, epoch, index + 1])
        hrs, lrs = [], []
        for i in picks:
            sample = self.train_set[i]
            patch = min(self.config.patch, *sample.hr.shape[:2])
            patch -= patch % sample.scale
            sample = crop_pair(sample, patch, rng)
            if self.config.augment:
                sample = augment(sample, AugmentOp.random(rng))
            hrs.append(sample.hr)
            lrs.append(sample.lr)
        return np.stack(hrs), np.stack(lrs)

    def step(self) -> float:
        """One optimization step on the next batch of the current epoch."""
        st = self.state
        hr, lr = self.make_batch(st.epoch, st.epoch_step)
        for p in st.params.values():
            p.zero_grad()
        try:
            pred, _ = forward(hr, st.params, self.model_config)
            loss = l1_loss(pred, lr)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite forward at step {st.step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {st.step}")
        T.backward(loss)
        grads = {n: p.grad for n, p in st.params.items() if p.grad is not None}
        for n, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient for {n} at step {st.step}")
        adam_step(st.params, grads, st.adam, st.lr)
        st.step += 1
        st.epoch_step += 1
        return value

    def validate(self) -> dict:
        """Mean L1 and PSNR of full-size validation images (training pairs if none held out)."""
        samples = self.val_set or self.train_set
        losses, psnrs = [], []
        with T.no_grad():
            for s in samples:
                pred, _ = forward(s.hr, self.state.params, self.model_config)
                losses.append(float(np.mean(np.abs(pred.data.astype(np.float64) - s.lr))))
                psnrs.append(psnr(pred.data, s.lr))
        return {"val_loss": float(np.mean(losses)), "val_psnr": float(np.mean(psnrs))}

    def _end_epoch(self, train_losses: list[float]) -> dict:
        st = self.state
        record = {
            "epoch": st.epoch,
            "step": st.step,
            "train_loss": float(np.mean(train_losses)) if train_losses else None,
            "val_loss": None,
            "lr": st.lr,
        }
        if (st.epoch + 1) % self.config.eval_every == 0:
            val = self.validate()
            record.update(val)
            improved = val["val_loss"] < self.schedule.best
            st.lr = self.schedule.update(val["val_loss"])
            st.best_val = self.schedule.best
            st.since_improvement = self.schedule.since_improvement
            if improved and self.config.checkpoint_dir:
                self.save(Path(self.config.checkpoint_dir) / "best.adkn")
        st.epoch += 1
        st.epoch_step = 0
        st.history.append(record)
        if self.config.checkpoint_dir:
            self.save(Path(self.config.checkpoint_dir) / "last.adkn")
            with open(Path(self.config.checkpoint_dir) / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        logger.info("epoch %d: %s", record["epoch"], record)
        return record

    def fit(
        self,
        epochs: int | None = None,
        max_steps: int | None = None,
        callback: Callable[["Trainer", dict], bool] | None = None,
    ) -> TrainState:
        """Train until ``epochs`` epochs or ``max_steps`` total steps, whichever comes first.

        ``callback`` runs after every epoch with the log record; returning
        ``True`` stops training.
        """
        epochs = self.config.epochs if epochs is None else epochs
        if self.config.checkpoint_dir:
            Path(self.config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        st = self.state
        losses: list[float] = []
        while st.epoch < epochs:
            if st.epoch_step >= self.steps_per_epoch:
                record = self._end_epoch(losses)
                losses = []
                if callback is not None and callback(self, record):
                    break
                continue
            if max_steps is not None and st.step >= max_steps:
                break
            losses.append(self.step())
        return st

    def checkpoint(self) -> Checkpoint:
        # the output location is not part of the training state; leaving it out
        # keeps checkpoints from identical runs byte-identical wherever they land
        run = {k: v for k, v in asdict(self.config).items() if k != "checkpoint_dir"}
        meta = {"train": self.state.counters(), "train_config": run}
        return Checkpoint(self.model_config, self.state.params, self.state.adam, meta)

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, path, train_set, val_set, config: TrainConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        counters = ckpt.meta.get("train", {})
        if config is None:
            config = TrainConfig(**ckpt.meta.get("train_config", {}))
        state = TrainState(
            params=ckpt.params,
            adam=ckpt.adam or AdamState(),
            lr=counters.get("lr", config.lr0),
            best_val=counters.get("best_val", math.inf),
            since_improvement=counters.get("since_improvement", 0),
            step=counters.get("step", 0),
            epoch=counters.get("epoch", 0),
            epoch_step=counters.get("epoch_step", 0),
            seed=counters.get("seed", config.seed),
        )
        return cls(ckpt.config, train_set, val_set, config, state)


def train(
    model_config: ModelConfig,
    dataset: Sequence[PairedSample],
    config: TrainConfig,
    val_set: Sequence[PairedSample] | None = None,
    max_steps: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train from scratch; holds out a hashed 10% validation split unless ``val_set`` is given."""
    if not dataset:
        raise ValueError("dataset is empty")
    if val_set is None:
        dataset, val_set = split_validation(list(dataset))
    trainer = Trainer(model_config, dataset, val_set, config)
    state = trainer.fit(max_steps=max_steps)
    return state, state.history
