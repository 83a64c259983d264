"""SGD training loop, step-decay schedule, evaluation and resumable runs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import checkpoint as ckpt_io
from .data import AugmentConfig, DataError, batch_iter
from .loss import LossConfig, compute_loss
from .metrics import CSV_HEADER, MetricsAccumulator, MetricsReport
from .model import init_weights
from .tensor import NumericError, Tensor, no_grad

VELOCITY_PREFIX = "velocity/"


class MissingGradientError(RuntimeError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_decay_factor: float = 0.2
    lr_decay_every_epochs: int = 5
    epochs: int = 20
    batch_size: int = 8
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def make3d(cls, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 100)
        kw.setdefault("lr_decay_every_epochs", 40)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


def sgd_step(model, lr: float, momentum: float, velocity: Dict[str, np.ndarray]) -> None:
    """v <- momentum * v + g;  w <- w - lr * v  for every learnable tensor."""
    params = list(model.named_parameters())
    for name, p in params:
        if p.grad is None:
            raise MissingGradientError(f"no gradient for learnable tensor {name!r}")
    for name, p in params:
        mom, rate = p.dtype.type(momentum), p.dtype.type(lr)
        v = velocity.get(name)
        v = p.grad.astype(p.dtype) if v is None else mom * v + p.grad
        velocity[name] = v
        p.data -= rate * v
        if not np.isfinite(p.data).all():
            raise NumericError(f"weight {name!r} became non-finite")


# -- evaluation -----------------------------------------------------------------------

def predict(model, rgb: np.ndarray) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        with no_grad():
            return model(Tensor(rgb)).data
    finally:
        model.train(was)


def evaluate(model, dataset, cap_m: Optional[float] = None, batch_size: int = 8,
             rel_denominator: str = "groundtruth") -> MetricsReport:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    acc = MetricsAccumulator(cap_m=cap_m, rel_denominator=rel_denominator)
    for rgb, depth, mask in batch_iter(dataset, batch_size, shuffle=False):
        acc.accumulate(predict(model, rgb), depth, mask)
    return acc.finalize()


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: List[Tuple[int, int, float, float]] = field(default_factory=list)
    epochs: List[Tuple[int, MetricsReport]] = field(default_factory=list)

    def step_csv(self) -> str:
        rows = ["epoch,step,lr,loss"]
        rows += [f"{e},{s},{lr!r},{loss!r}" for e, s, lr, loss in self.steps]
        return "\n".join(rows) + "\n"

    def metrics_csv(self) -> str:
        rows = [CSV_HEADER] + [r.to_csv_row(f"epoch{e}") for e, r in self.epochs]
        return "\n".join(rows) + "\n"

    def epoch_losses(self, epoch: int) -> List[float]:
        return [loss for e, _, _, loss in self.steps if e == epoch]


def _velocity_tensors(velocity):
    return {VELOCITY_PREFIX + n: v for n, v in velocity.items()}


def train(model, dataset, cfg: TrainConfig, out_dir=None,
          augment_cfg: Optional[AugmentConfig] = None, resume=None,
          eval_dataset=None, initialize: bool = True) -> TrainLog:
    """Run SGD for ``cfg.epochs`` epochs.

    After each epoch the model is scored (eval mode) on ``eval_dataset``,
    defaulting to the training set, and ``last.mxnt`` / ``best.mxnt`` are
    written to ``out_dir`` together with ``train_log.csv`` and
    ``metrics.csv``. ``resume`` is a checkpoint path written by this function;
    training continues at the epoch after the one it records.
    """
    if len(dataset) == 0:
        raise DataError("empty dataset")
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    log = TrainLog()
    velocity: Dict[str, np.ndarray] = {}
    start, step, best = 0, 0, math.inf
    if resume is not None:
        ck = ckpt_io.load_checkpoint(resume)
        ckpt_io.apply_weights(model, ck)
        velocity = {n[len(VELOCITY_PREFIX):]: a.copy() for n, a in ck.tensors.items()
                    if n.startswith(VELOCITY_PREFIX)}
        start = int(ck.metadata["epoch"]) + 1
        step = int(ck.metadata.get("step", 0))
        best = float(ck.metadata.get("best_rmse", math.inf))
    elif initialize:
        init_weights(model, cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        model.train()
        batches = batch_iter(dataset, cfg.batch_size, cfg.seed, epoch, augment_cfg)
        for bi, (rgb, depth, mask) in enumerate(batches):
            model.zero_grad()
            pred = model(Tensor(rgb))
            loss = compute_loss(cfg.loss, pred, depth, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, bi, value)
            loss.backward()
            sgd_step(model, lr, cfg.momentum, velocity)
            log.steps.append((epoch, step, lr, value))
            step += 1
        report = evaluate(model, eval_dataset, batch_size=cfg.batch_size)
        log.epochs.append((epoch, report))
        if out is not None:
            meta = {"epoch": epoch, "step": step, "train_config": cfg.to_dict(),
                    "metrics": {"rmse": report.rmse, "rel": report.rel, "delta1": report.delta1}}
            improved = report.rmse < best
            best = min(best, report.rmse)
            meta["best_rmse"] = best
            ck = ckpt_io.model_checkpoint(model, meta, _velocity_tensors(velocity))
            ckpt_io.save_checkpoint(ck, out / "last.mxnt")
            if improved:
                ckpt_io.save_checkpoint(ck, out / "best.mxnt")
            (out / "train_log.csv").write_text(log.step_csv())
            (out / "metrics.csv").write_text(log.metrics_csv())
    return log
