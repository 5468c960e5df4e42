"""Dataset splitting, perceptual pretraining and the main training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gridmath as gm
from .checkpoint import Checkpoint
from .errors import ConfigurationError, DataError, TrainingError
from .fieldgen import Dataset
from .gridmath import Adam, Tensor
from .losses import LossWeights, content_loss, geometric_loss, perceptual_loss, total_loss
from .smnet import ModelConfig, PerceptualExtractor, SuperMeshingNet, geometric_target

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "split", "content", "perceptual", "geometric", "total", "mae")


@dataclass
class TrainConfig:
    epochs: int = 50
    early_stop_patience: int = 50
    batch_size: int = 8
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"
    perceptual_epochs: int = 50
    perceptual_channels: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigurationError(f"fractions must be three non-negative numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.epochs < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("epochs and early_stop_patience must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


@dataclass
class EpochRecord:
    epoch: int
    split: str
    content: float
    perceptual: float
    geometric: float
    total: float
    mae: float


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf
    train_seconds: float = 0.0
    pretrain_seconds: float = 0.0
    perceptual_history: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def curve(self, split: str, key: str = "total") -> list[float]:
        return [getattr(e, key) for e in self.epochs if e.split == split]

    def to_dict(self) -> dict:
        return asdict(self)

    def write_log_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for e in self.epochs:
                writer.writerow([e.epoch, e.split] + [repr(getattr(e, k)) for k in LOG_FIELDS[2:]])


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_dataset(count: int, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into disjoint, exhaustive train/val/test index lists."""
    if count < 10:
        raise DataError(f"need at least 10 pairs to split, got {count}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    if n_train < 1 or n_val < 1 or count - n_train - n_val < 1:
        raise DataError(f"fractions {fractions} leave an empty split for {count} pairs")
    train = sorted(int(i) for i in order[:n_train])
    val = sorted(int(i) for i in order[n_train:n_train + n_val])
    test = sorted(int(i) for i in order[n_train + n_val:])
    return train, val, test


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Per-epoch Adam step size; cosine decays from the base rate towards zero."""
    if config.lr_schedule == "constant":
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


# ---------------------------------------------------------------------------
# perceptual pretraining
# ---------------------------------------------------------------------------

def pretrain_perceptual(hr: np.ndarray, epochs: int = 50, seed: int = 0, channels: int = 8,
                        batch_size: int = 8, lr: float = 1e-3):
    """Train the extractor as an autoencoder on ``hr`` fields, then freeze it.

    Returns ``(extractor, per-epoch reconstruction MSE)``.
    """
    if len(hr) == 0:
        raise DataError("perceptual pretraining needs a non-empty training split")
    extractor = PerceptualExtractor(channels=channels, seed=seed)
    opt = Adam(extractor.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(hr))
        total = 0.0
        for batch in _batches(order, batch_size):
            x = Tensor(hr[batch])
            recon = extractor.reconstruct(x)
            loss = gm.mean_all(gm.square(recon - x))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"perceptual pretraining diverged at epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch)
        history.append(total / len(hr))
    extractor.freeze()
    return extractor, history


def reconstruction_mse(extractor: PerceptualExtractor, hr: np.ndarray) -> float:
    with gm.no_grad():
        recon = extractor.reconstruct(Tensor(hr))
    return float(np.mean((recon.data.astype(np.float64) - hr) ** 2))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def predict_batched(model: SuperMeshingNet, lr: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with gm.no_grad():
        for start in range(0, len(lr), batch_size):
            outs.append(model.forward(lr[start:start + batch_size]).data)
    return np.concatenate(outs)


class Trainer:
    """Owns one model, its optimiser and (optionally) a frozen perceptual extractor."""

    def __init__(self, config: TrainConfig, dataset: Dataset, progress=None):
        if dataset.scale != config.model.scale:
            raise ConfigurationError(
                f"dataset scale {dataset.scale} does not match model scale {config.model.scale}")
        self.config = config
        self.dataset = dataset
        self.progress = progress
        self.split = dict(zip(("train", "val", "test"),
                              split_dataset(len(dataset), config.fractions, config.seed)))
        self.lr_all = dataset.lr_array()
        self.hr_all = dataset.hr_array()
        self.model = SuperMeshingNet(config.model)
        self.extractor = None
        self.final_state = None
        self.geo_targets = None
        if config.model.use_geometric:
            self.geo_targets = np.exp(geometric_target(self.hr_all))

    def _checkpoint(self, state=None) -> Checkpoint:
        ckpt = Checkpoint.from_model(self.model, (self.dataset.norm_min, self.dataset.norm_max),
                                     self.config.seed, self.split)
        if state is not None:
            ckpt.state = {k: v.copy() for k, v in state.items()}
        return ckpt

    def _losses(self, batch, extractor):
        cfg = self.config.model
        hr = self.hr_all[batch]
        out, geo = self.model.forward(self.lr_all[batch], return_aux=True)
        c = content_loss(out, hr)
        p = perceptual_loss(out, hr, extractor) if cfg.use_perceptual else None
        g = geometric_loss(geo, self.geo_targets[batch]) if cfg.use_geometric else None
        return total_loss(c, p, g, self.config.loss_weights, cfg.use_perceptual, cfg.use_geometric)

    def _evaluate(self, indices, extractor) -> tuple[list[float], float]:
        sums = np.zeros(4)
        abs_err = 0.0
        with gm.no_grad():
            for batch in _batches(indices, self.config.batch_size):
                bd = self._losses(batch, extractor)
                sums += len(batch) * np.array([bd.content, bd.perceptual, bd.geometric, bd.total])
                abs_err += bd.content * len(batch)
        n = len(indices)
        return list(sums / n), abs_err / n

    def run(self) -> tuple[Checkpoint, RunRecord]:
        cfg = self.config
        record = RunRecord()
        start = time.perf_counter()
        train_idx = self.split["train"]
        val_idx = self.split["val"]
        if not train_idx or not val_idx:
            raise DataError("training and validation splits must be non-empty")

        extractor = None
        if cfg.model.use_perceptual:
            t0 = time.perf_counter()
            extractor, record.perceptual_history = pretrain_perceptual(
                self.hr_all[train_idx], cfg.perceptual_epochs, cfg.seed, cfg.perceptual_channels,
                cfg.batch_size, cfg.learning_rate)
            record.pretrain_seconds = time.perf_counter() - t0
        self.extractor = extractor

        model = self.model
        opt = Adam(model.parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)
        best_state = model.state_dict()

        for epoch in range(1, cfg.epochs + 1):
            opt.state.lr = learning_rate_at(cfg, epoch)
            order = rng.permutation(train_idx).tolist()
            sums = np.zeros(4)
            for batch in _batches(order, cfg.batch_size):
                bd = self._losses(batch, extractor)
                if not math.isfinite(bd.total):
                    record.train_seconds = time.perf_counter() - start
                    raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch,
                                        checkpoint=self._checkpoint(best_state), record=record)
                opt.zero_grad()
                bd.total_tensor.backward()
                opt.step()
                sums += len(batch) * np.array([bd.content, bd.perceptual, bd.geometric, bd.total])
            tr = sums / len(order)
            record.epochs.append(EpochRecord(epoch, "train", *tr, mae=tr[0]))
            val_terms, val_mae = self._evaluate(val_idx, extractor)
            record.epochs.append(EpochRecord(epoch, "val", *val_terms, mae=val_mae))
            if not math.isfinite(val_mae):
                record.train_seconds = time.perf_counter() - start
                raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch,
                                    checkpoint=self._checkpoint(best_state), record=record)
            if val_mae < record.best_val_mae:
                record.best_val_mae = val_mae
                record.best_epoch = epoch
                best_state = model.state_dict()
            if self.progress is not None:
                self.progress(epoch, tr, val_mae)
            log.info("epoch %d train %.4e val mae %.4e", epoch, tr[3], val_mae)
            if epoch - record.best_epoch >= cfg.early_stop_patience:
                record.stopped_early = True
                break

        self.final_state = model.state_dict()
        model.load_state_dict(best_state)
        record.train_seconds = time.perf_counter() - start
        return self._checkpoint(best_state), record


def train(config: TrainConfig, dataset: Dataset, progress=None) -> tuple[Checkpoint, RunRecord]:
    return Trainer(config, dataset, progress).run()
