"""Loss, AdamW, gradients, the training loop and MAPE evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cycledata import truncate_to_first_n
from .errors import ConfigError, EmptyBatch, InvalidLabel, NonFiniteGradient, NonFiniteLoss, TooFewCells
from .model import Batch, ModelState, batch_of, net_for, predict_prepared, to_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-5
    batch_size: int = 256
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    max_epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0
    eval_every: int = 50
    cycles: int = 100  # usable cycles fed per cell during training
    selection: str = "val_mape"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.eval_every < 1 or self.max_epochs < 1:
            raise ConfigError("eval_every and max_epochs must be >= 1")
        if not 1 <= self.cycles <= 100:
            raise ConfigError("cycles must be in [1, 100]")
        if self.selection != "val_mape":
            raise ConfigError("only val_mape selection is supported")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- loss

def mse_loss(pred, target):
    """Mean squared error over the batch. Accepts Tensors or arrays."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.data.size == 0:
        raise EmptyBatch("empty batch")
    return ag.mean(ag.square(pred - Tensor(target)))


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place AdamW update of the parameters named in ``grads``.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    All gradients are checked before any parameter moves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p
        p -= (lr * update).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- gradients

def compute_gradients(model: ModelState, batch: Batch, trainable=None, train=False, rng=None, loss_scale=1.0):
    """(loss, grads) of the mean squared error over ``batch`` in label-transform space.

    Every name in ``trainable`` (default: all non-frozen parameters) gets a
    gradient array; parameters outside the computation get exact zeros.
    """
    if batch.labels is None or batch.size == 0:
        raise EmptyBatch("batch has no labels")
    names = model.trainable_names() if trainable is None else list(trainable)
    wanted = set(names)
    tensors = {k: Tensor(v, requires_grad=k in wanted) for k, v in model.params.items()}
    net = net_for(model, tensors, train=train, rng=rng)
    pred = net.forward(batch)
    loss = mse_loss(pred, to_target(batch.labels, model.config.label_transform))
    if loss_scale != 1.0:
        loss = ag.mul(loss, loss_scale)
    loss.backward()
    grads = {k: tensors[k].grad if tensors[k].grad is not None else np.zeros_like(model.params[k]) for k in names}
    return float(loss.data), grads


def loss_value(model: ModelState, batch: Batch, params=None) -> float:
    pred = net_for(model, params).forward(batch)
    return float(mse_loss(pred, to_target(batch.labels, model.config.label_transform)).data)


# ---------------------------------------------------------------- metrics

def mape(predictions, labels) -> float:
    """Mean over cells of |prediction - label| / label."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise EmptyBatch("predictions and labels must be non-empty and equally shaped")
    if np.any(y <= 0):
        raise InvalidLabel("labels must be > 0")
    return float(np.mean(np.abs(p - y) / y))


@dataclass
class EvalReport:
    overall_mape: float
    n_cells: int
    per_dataset: dict
    seen_mape: Optional[float]
    unseen_mape: Optional[float]
    seen_count: int
    unseen_count: int
    mape_by_cycles: dict

    def to_dict(self):
        d = asdict(self)
        d["mape_by_cycles"] = {str(k): v for k, v in self.mape_by_cycles.items()}
        return d


def evaluate(model: ModelState, prepared, train_condition_keys, cycles: Sequence[int] = (), n_cycles=None) -> EvalReport:
    """MAPE overall, per dataset, seen/unseen, and per usable-cycle count.

    A cell is "seen" when its condition key belongs to ``train_condition_keys``
    (the training and validation conditions).
    """
    if not prepared:
        raise EmptyBatch("nothing to evaluate")
    labels = np.array([p.label for p in prepared])
    pred = predict_prepared(model, prepared, n_cycles)
    rel = np.abs(pred - labels) / labels
    if np.any(labels <= 0):
        raise InvalidLabel("labels must be > 0")
    keys = set(train_condition_keys)
    seen = np.array([p.condition_key in keys for p in prepared])
    per = {}
    for name in sorted({p.dataset_name for p in prepared}):
        sel = np.array([p.dataset_name == name for p in prepared])
        per[name] = float(rel[sel].mean())
    by_cycles = {}
    for n in cycles:
        sub = [_truncated(p, n) for p in prepared]
        by_cycles[int(n)] = mape(predict_prepared(model, sub), labels)
    return EvalReport(
        overall_mape=float(rel.mean()),
        n_cells=len(prepared),
        per_dataset=per,
        seen_mape=float(rel[seen].mean()) if seen.any() else None,
        unseen_mape=float(rel[~seen].mean()) if (~seen).any() else None,
        seen_count=int(seen.sum()),
        unseen_count=int((~seen).sum()),
        mape_by_cycles=by_cycles,
    )


def _truncated(p, n):
    from dataclasses import replace

    from .errors import InvalidN

    if n < 1 or n > min(100, p.cycles.shape[0]):
        raise InvalidN(f"N={n} out of range for cell {p.cell_id} with {p.cycles.shape[0]} cycles")
    return replace(p, cycles=p.cycles[:n])


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    best: ModelState
    final: ModelState
    best_step: int
    best_val_mape: float
    log: list
    losses: list  # per-step training loss


def _eval_mape(model, prepared, n_cycles):
    return mape(predict_prepared(model, prepared, n_cycles), [p.label for p in prepared])


def train_loop(model: ModelState, train_cells, val_cells, config: TrainConfig, trainable=None, log_path=None) -> TrainResult:
    """Mini-batch AdamW on the MSE; keeps the parameters with the lowest validation MAPE.

    ``train_cells`` / ``val_cells`` are prepared cells (embeddings and routing
    masks cached). Deterministic for a fixed seed.
    """
    if not train_cells:
        raise TooFewCells("empty training split")
    if not val_cells:
        raise TooFewCells("empty validation split")
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    work = model.copy()
    names = work.trainable_names() if trainable is None else list(trainable)
    state = OptimizerState()
    n_cyc = config.cycles
    best, best_step, best_val = work.copy(), 0, float("inf")
    records, losses, window = [], [], []
    t0 = time.perf_counter()
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    limit = config.max_steps if config.max_steps is not None else config.max_epochs * -(-len(train_cells) // config.batch_size)
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(train_cells))
            for s in range(0, len(order), config.batch_size):
                if step >= limit:
                    break
                chunk = [train_cells[k] for k in order[s : s + config.batch_size]]
                batch = batch_of(chunk, work, n_cyc)
                loss, grads = compute_gradients(work, batch, names, train=True, rng=drop_rng)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(step + 1)
                adamw_step(work.params, grads, state, config.learning_rate, config.betas, config.epsilon, config.weight_decay)
                step += 1
                losses.append(loss)
                window.append(loss)
                if step % config.eval_every == 0 or step == limit:
                    val = _eval_mape(work, val_cells, n_cyc)
                    rec = {"step": step, "train_loss": float(np.mean(window)), "val_mape": val, "wall_seconds": round(time.perf_counter() - t0, 3)}
                    window = []
                    records.append(rec)
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
                    log.info("step %d loss %.5g val_mape %.4f", step, rec["train_loss"], val)
                    if val < best_val:
                        best, best_step, best_val = work.copy(), step, val
            if step >= limit:
                break
    except NonFiniteLoss as exc:
        exc.result = TrainResult(best, work, best_step, best_val, records, losses)
        raise
    finally:
        if fh:
            fh.close()
    if best_step == 0:
        best_val = _eval_mape(best, val_cells, n_cyc)
    return TrainResult(best, work, best_step, best_val, records, losses)
