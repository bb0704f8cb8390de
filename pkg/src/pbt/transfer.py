"""Transfer learning: full fine-tuning and adapter tuning.

Adapters are bottlenecks inserted after the first ``N_adapt`` encoder layers,
counted in pipeline order (intra-cycle layers, then inter-cycle layers):

    x_hat = W2 GELU(W1 LN(x) + b1) + b2        (+ x when residual is on)

with W1 projecting d -> d_a and W2 projecting d_a -> d. In adapter mode every
pre-existing parameter is frozen and stays bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .battmoe import ExpertRegistry, missing_tags
from .errors import InvalidConfig
from .model import AdapterSpec, ModelState, moe_layer_prefixes
from .train import TrainConfig, TrainResult, train_loop

MODES = ("fine_tune", "adapter")
FINE_TUNE_LR = (1e-5, 1e-4)
ADAPTER_LR = (5e-6, 1e-3)
BATCH_SIZES = (4, 8, 16, 32, 64, 128, 256)
WEIGHT_DECAY = (0.0, 10.0)
DROPOUTS = (0.0, 0.05, 0.15, 0.25)
N_ADAPT = (1, 12)
D_A = (1, 128)


def _in(name, value, lo, hi):
    if not lo <= value <= hi:
        raise InvalidConfig(f"{name}={value} outside the allowed range [{lo}, {hi}]")


def _one_of(name, value, choices):
    if value not in choices:
        raise InvalidConfig(f"{name}={value} not in the allowed set {list(choices)}")


@dataclass(frozen=True)
class TransferConfig:
    mode: str = "adapter"
    n_adapt: int = 1
    d_a: int = 16
    learning_rate: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 0.0
    dropout: float = 0.0
    residual_adapter: bool = False
    zero_init_up: bool = False
    max_epochs: int = 100
    max_steps: Optional[int] = None
    eval_every: int = 10
    cycles: int = 100
    seed: int = 0

    def __post_init__(self):
        _one_of("mode", self.mode, MODES)
        lo, hi = FINE_TUNE_LR if self.mode == "fine_tune" else ADAPTER_LR
        _in(f"learning_rate ({self.mode})", self.learning_rate, lo, hi)
        _one_of("batch_size", self.batch_size, BATCH_SIZES)
        _in("weight_decay", self.weight_decay, *WEIGHT_DECAY)
        _one_of("dropout", self.dropout, DROPOUTS)
        _in("n_adapt", self.n_adapt, *N_ADAPT)
        _in("d_a", self.d_a, *D_A)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown transfer keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            eval_every=self.eval_every,
            cycles=self.cycles,
            seed=self.seed,
        )


@dataclass
class AdapterParams:
    gamma: np.ndarray
    beta: np.ndarray
    w1: np.ndarray  # (d, d_a)
    b1: np.ndarray
    w2: np.ndarray  # (d_a, d)
    b2: np.ndarray
    residual: bool = False
    eps: float = 1e-5

    @classmethod
    def from_model(cls, model: ModelState, k: int):
        p = model.params
        pre = f"adapter.{k}"
        return cls(
            p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"], p[f"{pre}.down.w"], p[f"{pre}.down.b"],
            p[f"{pre}.up.w"], p[f"{pre}.up.b"], model.adapter.residual, model.config.ln_eps,
        )


def adapter_forward(x, adapter: AdapterParams) -> np.ndarray:
    """Apply one adapter to a vector or to rows of shape (..., d)."""
    x = np.asarray(x)
    dt = np.result_type(x.dtype, adapter.w1.dtype)
    t = Tensor(np.atleast_2d(x).astype(dt))
    h = ag.layer_norm(t, Tensor(adapter.gamma.astype(dt)), Tensor(adapter.beta.astype(dt)), adapter.eps)
    h = ag.gelu(ag.linear(h, Tensor(adapter.w1.astype(dt)), Tensor(adapter.b1.astype(dt))))
    y = ag.linear(h, Tensor(adapter.w2.astype(dt)), Tensor(adapter.b2.astype(dt))).data
    if adapter.residual:
        y = y + np.atleast_2d(x)
    return y.reshape(x.shape)


def insert_adapters(model: ModelState, n_adapt: int, d_a: int, residual: bool = False, zero_init_up: bool = False, seed: int = 0) -> ModelState:
    """Copy of ``model`` with adapters after the first ``n_adapt`` encoder layers; base frozen."""
    cfg = model.config
    if not 1 <= n_adapt <= cfg.n_layers:
        raise InvalidConfig(f"n_adapt={n_adapt} outside the allowed range [1, {cfg.n_layers}]")
    _in("d_a", d_a, *D_A)
    if model.adapter is not None:
        raise InvalidConfig("model already has adapters")
    rng = np.random.default_rng(seed)
    dt = model.dtype
    d = cfg.d
    params = {k: v.copy() for k, v in model.params.items()}
    new = {}
    for k in range(n_adapt):
        pre = f"adapter.{k}"
        new[f"{pre}.norm.gamma"] = np.ones(d, dtype=dt)
        new[f"{pre}.norm.beta"] = np.zeros(d, dtype=dt)
        bd, bu = 1.0 / math.sqrt(d), 1.0 / math.sqrt(d_a)
        new[f"{pre}.down.w"] = rng.uniform(-bd, bd, (d, d_a)).astype(dt)
        new[f"{pre}.down.b"] = rng.uniform(-bd, bd, d_a).astype(dt)
        if zero_init_up:
            new[f"{pre}.up.w"] = np.zeros((d_a, d), dtype=dt)
            new[f"{pre}.up.b"] = np.zeros(d, dtype=dt)
        else:
            new[f"{pre}.up.w"] = rng.uniform(-bu, bu, (d_a, d)).astype(dt)
            new[f"{pre}.up.b"] = rng.uniform(-bu, bu, d).astype(dt)
    frozen = frozenset(params)
    params.update(new)
    return replace(model, params=params, frozen=frozen, adapter=AdapterSpec(n_adapt, d_a, residual), meta=dict(model.meta))


def adapter_names(model: ModelState):
    return [k for k in model.params if k.startswith("adapter.")]


# ---------------------------------------------------------------- registry extension

def _mean_of(arrs):
    return np.mean(np.stack(arrs), axis=0).astype(arrs[0].dtype)


def extend_registry(model: ModelState, conditions) -> ModelState:
    """Add one specialized expert per category value in ``conditions`` the registry cannot route.

    Every new expert, and its gate column, starts as the mean of the existing
    experts of the same kind (or of all specialized experts if that kind has
    none). Returns the model unchanged when nothing is missing.
    """
    reg = model.registry
    added = []
    for c in conditions:
        probe = ExpertRegistry(reg.specialized + tuple(added), reg.general_count)
        for tag in missing_tags(probe, c):
            if tag not in added:
                added.append(tag)
    if not added:
        return model
    k_s = reg.n_specialized
    if k_s == 0:
        raise InvalidConfig("cannot extend a registry without specialized experts")
    params = dict(model.params)
    for i, tag in enumerate(added):
        j_new = k_s + i
        src = reg.indices_of_kind(tag.kind) or list(range(k_s))
        for prefix in moe_layer_prefixes(model.config):
            ex = f"{prefix}.expert."
            for leaf in sorted({n[len(f"{ex}0.") :] for n in params if n.startswith(f"{ex}0.")}):
                params[f"{ex}{j_new}.{leaf}"] = _mean_of([params[f"{ex}{j}.{leaf}"] for j in src])
            w, b = params[f"{prefix}.gate.w"], params[f"{prefix}.gate.b"]
            params[f"{prefix}.gate.w"] = np.concatenate([w, w[:, src].mean(axis=1, keepdims=True).astype(w.dtype)], axis=1)
            params[f"{prefix}.gate.b"] = np.concatenate([b, b[src].mean(keepdims=True).astype(b.dtype)])
    registry = ExpertRegistry(reg.specialized + tuple(added), reg.general_count)
    return replace(model, registry=registry, params=params, meta=dict(model.meta))


def added_tags(before: ExpertRegistry, after: ExpertRegistry) -> list:
    return list(after.specialized[before.n_specialized :])


# ---------------------------------------------------------------- tuning

def _with_dropout(model, dropout):
    return replace(model, config=replace(model.config, dropout=dropout))


def fine_tune(model: ModelState, train_cells, val_cells, config: Union[TransferConfig, TrainConfig], log_path=None) -> TrainResult:
    """Update every parameter on the target domain; best checkpoint by validation MAPE.

    A plain ``TrainConfig`` skips the transfer range checks (used for
    degenerate runs such as a zero learning rate).
    """
    if isinstance(config, TransferConfig):
        model = _with_dropout(model, config.dropout)
        tc = config.train_config()
    else:
        tc = config
    model = replace(model, frozen=frozenset())
    return train_loop(model, train_cells, val_cells, tc, trainable=list(model.params), log_path=log_path)


def adapter_tune(model: ModelState, train_cells, val_cells, config: TransferConfig, log_path=None) -> TrainResult:
    """Insert adapters (unless present) and train only them."""
    if config.mode != "adapter":
        raise InvalidConfig("adapter_tune needs mode='adapter'")
    if model.adapter is None:
        model = insert_adapters(model, config.n_adapt, config.d_a, config.residual_adapter, config.zero_init_up, config.seed)
    model = _with_dropout(model, config.dropout)
    return train_loop(model, train_cells, val_cells, config.train_config(), trainable=adapter_names(model), log_path=log_path)


def tensor_digest(model: ModelState, names=None) -> str:
    """SHA-256 over name, dtype, shape and bytes of the selected tensors (sorted by name)."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(model.params if names is None else names):
        v = model.params[k]
        h.update(f"{k}|{v.dtype.str}|{v.shape}|".encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()
