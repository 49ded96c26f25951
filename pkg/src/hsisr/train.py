"""L1 training with Adam and a cosine learning-rate decay, evaluation
against the bicubic baseline, and bit-exact checkpoint resume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import HsiCube, PairSet, bicubic_resize
from .metrics import MetricReport, evaluate_metrics, mean_report
from .model import ModelConfig, ParamStore, forward, forward_features, load_checkpoint, save_checkpoint
from .tensor import Param, Tensor, backward

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDivergedError",
    "lr_at",
    "train",
    "evaluate",
    "save_train_checkpoint",
    "load_train_checkpoint",
]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message names the offending step."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 2
    lr_init: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 0
    checkpoint_interval: int = 0   # 0 disables periodic checkpoints
    eval_interval: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr_min > self.lr_init:
            raise ValueError(f"lr_min {self.lr_min} > lr_init {self.lr_init}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine decay; lr(0) = lr_init, lr(steps-1) = lr_min."""
    if cfg.steps == 1:
        return cfg.lr_init
    t = step / (cfg.steps - 1)
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: list[Param], lr: float) -> None:
        self.step += 1
        t = self.step
        for p in params:
            g = p.grad
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value.data)
                self.v[p.name] = np.zeros_like(p.value.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.value.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    # stateless per-step stream so resumed runs replay identical batches
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n, size=batch)


def _step_loss(store: ParamStore, cfg: ModelConfig,
               batch: list[tuple[HsiCube, HsiCube]]) -> Tensor:
    total = None
    for lr_cube, hr_cube in batch:
        pred = forward_features(lr_cube.tensor(store.dtype), store, cfg)
        target = hr_cube.tensor(store.dtype)
        item = pred.sub(target).abs().mean()
        total = item if total is None else total.add(item)
    return total.mul(1.0 / len(batch))


def _clip_gradients(params: list[Param], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.value.grad is not None:
                p.value.grad *= scale


def train(store: ParamStore, cfg: ModelConfig, pairs: PairSet, tcfg: TrainConfig,
          adam: AdamState | None = None, start_step: int = 0,
          history: list[tuple[int, float, float]] | None = None,
          checkpoint_path=None) -> list[tuple[int, float, float]]:
    """Run Adam steps on mean per-batch L1 loss.

    Returns the loss history as (step, lr, loss) rows; deterministic given
    configs, seed, and data. Pass ``adam``/``start_step``/``history`` from a
    loaded training checkpoint to resume bit-exactly.
    """
    if not pairs.train:
        raise ValueError("train: empty training pair set")
    adam = adam or AdamState()
    history = history if history is not None else []
    data = pairs.train
    params = store.parameters()
    for step in range(start_step, tcfg.steps):
        idx = _batch_indices(tcfg.seed, step, len(data), tcfg.batch_size)
        batch = [data[i] for i in idx]
        store.zero_grad()
        loss = _step_loss(store, cfg, batch)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(f"non-finite loss {loss_val} at step {step}")
        backward(loss)
        if tcfg.clip_norm is not None:
            _clip_gradients(params, tcfg.clip_norm)
        lr = lr_at(step, tcfg)
        adam.update(params, lr)
        history.append((step, lr, loss_val))
        if checkpoint_path and tcfg.checkpoint_interval and \
                (step + 1) % tcfg.checkpoint_interval == 0:
            save_train_checkpoint(checkpoint_path, store, cfg, adam, step + 1, history)
    if checkpoint_path:
        save_train_checkpoint(checkpoint_path, store, cfg, adam, tcfg.steps, history)
    return history


def evaluate(store: ParamStore, cfg: ModelConfig, pairs: PairSet,
             split: str = "test") -> tuple[MetricReport, MetricReport]:
    """Mean metrics of the model and of the bicubic baseline on one split."""
    items = pairs.test if split == "test" else pairs.train
    if not items:
        raise ValueError(f"evaluate: empty {split} set")
    model_reports, bicubic_reports = [], []
    for lr_cube, hr_cube in items:
        pred = forward(lr_cube, store, cfg, clamp=True)
        model_reports.append(evaluate_metrics(pred, hr_cube, pairs.scale))
        base = bicubic_resize(lr_cube, pairs.scale)
        bicubic_reports.append(evaluate_metrics(base, hr_cube, pairs.scale))
    return mean_report(model_reports), mean_report(bicubic_reports)


# -- training checkpoints ------------------------------------------------------


def save_train_checkpoint(path, store: ParamStore, cfg: ModelConfig,
                          adam: AdamState, next_step: int,
                          history: list[tuple[int, float, float]]) -> None:
    extra: dict[str, Tensor] = {}
    for name in adam.m:
        extra[f"adam.m.{name}"] = Tensor(adam.m[name], adam.m[name].dtype)
        extra[f"adam.v.{name}"] = Tensor(adam.v[name], adam.v[name].dtype)
    extra["adam.step"] = Tensor(np.array([float(adam.step)]), np.float64)
    extra["train.next_step"] = Tensor(np.array([float(next_step)]), np.float64)
    hist = np.array(history, dtype=np.float64).reshape(len(history), 3)
    extra["train.history"] = Tensor(hist, np.float64)
    save_checkpoint(path, store, cfg, extra)


def load_train_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Returns (cfg, store, adam, next_step, history)."""
    cfg, store, extra = load_checkpoint(path, expect_cfg)
    adam = AdamState()
    for name, t in extra.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = t.data.astype(store.dtype)
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = t.data.astype(store.dtype)
    adam.step = int(extra["adam.step"].data[0]) if "adam.step" in extra else 0
    next_step = int(extra["train.next_step"].data[0]) if "train.next_step" in extra else 0
    history = [(int(s), float(l), float(v))
               for s, l, v in extra["train.history"].data.reshape(-1, 3)] \
        if "train.history" in extra else []
    return cfg, store, adam, next_step, history


def history_csv(history: list[tuple[int, float, float]]) -> str:
    lines = ["step,lr,loss"]
    lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in history]
    return "\n".join(lines) + "\n"
