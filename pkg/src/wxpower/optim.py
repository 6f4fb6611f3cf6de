"""ADAM optimizer, staged learning-rate schedule, loss, and the train loop.

The loss is the root mean squared error pooled over both outputs of the
batch, plus an L2 penalty on every parameter. The penalty's gradient
(2*lambda*p) is added directly to parameter gradients after backward, so
the recorded graph stays small. Training runs a fixed number of epochs
through exactly four learning-rate stages; optionally a stage can end
early once validation RMSE has stopped improving (patience 2).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import iter_batches
from .layers import Rng
from .metrics import compute_report
from .models import Model, model_forward, param_count, save_checkpoint


class NumericError(RuntimeError):
    """Training produced a non-finite quantity."""


# ---------------------------------------------------------------------------
# loss

def rmse_loss(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """sqrt(mean((pred - target)^2)) over all entries; 1-element tensor."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"rmse_loss: {pred.shape} vs {target.shape}")
    if pred.dtype != target.dtype:
        raise T.ShapeError("rmse_loss: dtype mismatch")
    diff = pred.data - target.data
    n = diff.size
    value = float(np.sqrt(np.mean(diff.astype(np.float64) ** 2)))
    out = np.array([value], dtype=pred.data.dtype)

    def rule(g):
        # d rmse / d pred = diff / (n * rmse); zero diff means zero grad,
        # so guard the denominator rather than divide by 0
        denom = n * max(value, 1e-30)
        gp = (g[0] / denom) * diff
        return (gp, -gp)

    return T.record("rmse_loss", (pred, target), out, rule)


def l2_penalty(params: dict, lam: float) -> float:
    """lambda * sum of squared parameter entries (float64 accumulation)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    return float(lam * sum(float(np.sum(p.data.astype(np.float64) ** 2))
                           for p in params.values()))


def add_l2_gradients(params: dict, lam: float) -> None:
    """Add the penalty gradient 2*lambda*p to each parameter's .grad."""
    if lam == 0:
        return
    for p in params.values():
        contrib = (2.0 * lam) * p.data
        # .grad may alias another tensor's grad: replace, never mutate
        p.grad = contrib.astype(p.data.dtype) if p.grad is None else p.grad + contrib.astype(p.data.dtype)


def loss_with_l2(pred, target, params: dict, lam: float) -> float:
    """Scalar training objective: pooled RMSE plus the L2 penalty."""
    p = pred.data if isinstance(pred, T.Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise T.ShapeError(f"loss_with_l2: {p.shape} vs {t.shape}")
    rmse = float(np.sqrt(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2)))
    return rmse + l2_penalty(params, lam)


# ---------------------------------------------------------------------------
# ADAM

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict, **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   **kw)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """One in-place ADAM update. Missing grads count as zeros (moments decay)."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"grads for unknown parameters {sorted(unknown)[:4]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        g = grads.get(name)
        m *= b1
        v *= b2
        if g is not None:
            if g.shape != p.data.shape:
                raise T.ShapeError(f"grad shape {g.shape} != param {name} {p.data.shape}")
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class StageSchedule:
    """Exactly four stages of equal length with strictly decaying rates."""

    stage_length: int = 5
    stage_lrs: tuple = (1e-3, 3e-4, 1e-4, 3e-5)

    def __post_init__(self):
        if self.stage_length < 1:
            raise ValueError(f"stage_length must be >= 1, got {self.stage_length}")
        if len(self.stage_lrs) != 4:
            raise ValueError(f"exactly 4 stage rates required, got {len(self.stage_lrs)}")
        if any(lr <= 0 for lr in self.stage_lrs):
            raise ValueError("stage rates must be positive")
        if any(later >= earlier
               for earlier, later in zip(self.stage_lrs, self.stage_lrs[1:])):
            raise ValueError("stage rates must strictly decrease")

    @property
    def span(self) -> int:
        return self.stage_length * len(self.stage_lrs)


def lr_for_epoch(schedule: StageSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.span:
        raise ValueError(f"epoch {epoch} outside schedule span [0, {schedule.span})")
    return schedule.stage_lrs[epoch // schedule.stage_length]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    l2_lambda: float = 0.0
    seed: int = 0
    schedule: StageSchedule = field(default_factory=StageSchedule)
    adaptive_stages: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.epochs > self.schedule.span:
            raise ValueError(
                f"epochs {self.epochs} exceed the schedule span {self.schedule.span}")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    stage: int
    lr: float
    train_rmse: float
    val_rmse: float
    train_solar_acc: float
    train_wind_acc: float
    val_solar_acc: float
    val_wind_acc: float


@dataclass
class EvalResult:
    n: int
    rmse: float
    solar_acc: float
    wind_acc: float
    pred: np.ndarray      # (N, 2) float64
    target: np.ndarray


@dataclass
class TrainRun:
    history: list
    train_mean_solar: float
    train_mean_wind: float
    final_train: EvalResult
    final_val: EvalResult
    checkpoints: dict     # label -> path (empty when out_dir is None)


def evaluate(model: Model, dataset, ids, stack: int, train_means,
             batch_size: int = 16) -> EvalResult:
    """Forward the given samples in eval mode and score them.

    train_means must be the TRAINING split's (solar, wind) production
    means so accuracy stays comparable across splits. The model's mode is
    restored afterwards.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("evaluate needs at least one sample id")
    prior = model.mode
    model.eval()
    try:
        preds = []
        for lo in range(0, len(ids), batch_size):
            chunk = ids[lo:lo + batch_size]
            x, _ = dataset.make_batch(chunk, stack)
            preds.append(model_forward(model, x).data.astype(np.float64))
        pred = np.concatenate(preds, axis=0)
    finally:
        model.mode = prior
    target = dataset.targets(ids).astype(np.float64)
    rep = compute_report(pred, target, train_means)
    return EvalResult(len(ids), rep.rmse, rep.solar_accuracy, rep.wind_accuracy,
                      pred, target)


def _history_csv(history) -> str:
    head = ("epoch,stage,lr,train_rmse,val_rmse,"
            "train_solar_acc,train_wind_acc,val_solar_acc,val_wind_acc")
    rows = [head]
    for h in history:
        rows.append(f"{h.epoch},{h.stage},{h.lr:.9g},{h.train_rmse:.9g},{h.val_rmse:.9g},"
                    f"{h.train_solar_acc:.9g},{h.train_wind_acc:.9g},"
                    f"{h.val_solar_acc:.9g},{h.val_wind_acc:.9g}")
    return "\n".join(rows) + "\n"


def train(model: Model, dataset, split, config: TrainConfig,
          out_dir=None, log=None) -> TrainRun:
    """Run the staged ADAM loop over the split's train ids.

    `split` needs .train, .val and .stack. Per epoch: shuffled batches
    (keyed by config.seed and the epoch), forward in train mode, pooled
    RMSE backward, L2 gradient, ADAM step; then a full eval-mode pass over
    the train and val splits for the history row. Stage checkpoints and
    history land in out_dir when given. Raises NumericError on the first
    non-finite loss.
    """
    train_ids, val_ids, stack = list(split.train), list(split.val), split.stack
    if not train_ids or not val_ids:
        raise ValueError("split must provide nonempty train and val id lists")
    want_c = dataset.input_channels(stack)
    if want_c != model.spec.input_channels:
        raise ValueError(f"model wants {model.spec.input_channels} channels, "
                         f"stack {stack} provides {want_c}")

    train_means = dataset.targets(train_ids).mean(axis=0)
    if (train_means <= 0).any():
        raise ValueError(f"training split has nonpositive mean production {train_means}")

    state = AdamState.init(model.params)
    drop_rng = Rng(config.seed)
    sched = config.schedule
    history: list[EpochStats] = []
    checkpoints: dict[str, str] = {}
    stage = 0
    best_val = np.inf
    stall = 0

    def say(msg):
        if log:
            log(msg)

    say(f"training {model.spec.family}: {param_count(model)} params, "
        f"{len(train_ids)} train / {len(val_ids)} val samples, stack {stack}")

    for epoch in range(config.epochs):
        if config.adaptive_stages:
            if stall >= 2 and stage < len(sched.stage_lrs) - 1:
                stage += 1
                stall = 0
                say(f"epoch {epoch}: validation stalled, advancing to stage {stage + 1}")
            lr = sched.stage_lrs[stage]
        else:
            lr = lr_for_epoch(sched, epoch)
            stage = epoch // sched.stage_length

        model.train()
        for batch_ids in iter_batches(train_ids, config.batch_size, config.seed, epoch):
            x, y = dataset.make_batch(batch_ids, stack)
            with T.Tape() as tape:
                pred = model_forward(model, x, rng=drop_rng)
                loss = rmse_loss(pred, y)
                if not np.isfinite(loss.data[0]):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, first id {batch_ids[0]}")
                T.backward(tape, T.create([1], 1.0, dtype=loss.data.dtype))
            add_l2_gradients(model.params, config.l2_lambda)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adam_step(state, model.params, grads, lr)
            T.clear_grads(model.params.values())

        tr = evaluate(model, dataset, train_ids, stack, train_means, config.batch_size)
        va = evaluate(model, dataset, val_ids, stack, train_means, config.batch_size)
        history.append(EpochStats(epoch, stage, lr, tr.rmse, va.rmse,
                                  tr.solar_acc, tr.wind_acc, va.solar_acc, va.wind_acc))
        say(f"epoch {epoch:3d} stage {stage + 1} lr {lr:.1e} "
            f"train_rmse {tr.rmse:.4f} val_rmse {va.rmse:.4f}")

        if va.rmse < best_val:
            best_val = va.rmse
            stall = 0
        else:
            stall += 1

        boundary = (not config.adaptive_stages
                    and (epoch + 1) % sched.stage_length == 0)
        if out_dir is not None and boundary:
            path = os.path.join(out_dir, f"stage{stage + 1}.wxpm")
            save_checkpoint(model, path)
            checkpoints[f"stage{stage + 1}"] = path

    model.eval()
    if out_dir is not None:
        path = os.path.join(out_dir, "final.wxpm")
        save_checkpoint(model, path)
        checkpoints["final"] = path
        with open(os.path.join(out_dir, "history.csv"), "w") as fh:
            fh.write(_history_csv(history))

    return TrainRun(history, float(train_means[0]), float(train_means[1]),
                    tr, va, checkpoints)
