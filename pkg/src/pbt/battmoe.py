"""BatteryMoE: expert registry, soft gate, hard routing mask and gated aggregation.

Each specialized expert carries one routing tag (cathode, anode, format or a
temperature centre). A cell's condition selects experts by exact match on the
categorical kinds and by a +/-5 degC window on temperature; the gate weights
of all other experts are dropped and those experts are never evaluated.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionMismatch, InputError, UnknownCategory

KINDS = ("cathode", "anode", "format", "temperature")
TEMPERATURE_WINDOW = 5.0
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class RoutingTag:
    kind: str
    value: object  # str for categorical kinds, float centre for temperature

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown routing kind {self.kind!r}")
        if self.kind == "temperature":
            v = float(self.value)
            if v % 5.0 != 0.0:
                raise InputError(f"temperature centre {v} is not a multiple of 5")
            object.__setattr__(self, "value", v)

    def matches(self, condition) -> bool:
        if self.kind == "temperature":
            return abs(self.value - condition.temperature) <= TEMPERATURE_WINDOW
        return getattr(condition, self.kind) == self.value


@dataclass(frozen=True)
class ExpertRegistry:
    specialized: tuple  # RoutingTag per expert; position is the expert index
    general_count: int = 1

    @property
    def n_specialized(self):
        return len(self.specialized)

    def to_json(self):
        return {
            "general_count": self.general_count,
            "specialized": [{"kind": t.kind, "value": t.value, "expert_index": k} for k, t in enumerate(self.specialized)],
        }

    @classmethod
    def from_json(cls, d):
        items = sorted(d["specialized"], key=lambda e: e["expert_index"])
        if [e["expert_index"] for e in items] != list(range(len(items))):
            raise InputError("registry expert indices must be 0..K_s-1")
        return cls(tuple(RoutingTag(e["kind"], e["value"]) for e in items), int(d["general_count"]))

    def values(self, kind):
        return {t.value for t in self.specialized if t.kind == kind}

    def indices_of_kind(self, kind):
        return [k for k, t in enumerate(self.specialized) if t.kind == kind]


def temperature_center(t: float) -> float:
    """Nearest multiple of 5 degC, halves rounding up."""
    return float(np.floor(t / 5.0 + 0.5) * 5.0)


def allocate_expert_counts(batteries_per_value: dict) -> dict:
    """Experts per category value: one per started hundred, rounded to nearest (half up), at least one."""
    out = {}
    for v, n in batteries_per_value.items():
        if n < 1:
            raise InputError(f"category {v!r} has no batteries")
        out[v] = max(1, (int(n) + 50) // 100)
    return out


def build_registry(conditions: Sequence, general_count: int = 1) -> ExpertRegistry:
    """Registry covering every category value present in ``conditions`` (training cells)."""
    tags = []
    for kind in KINDS:
        if kind == "temperature":
            counts = Counter(temperature_center(c.temperature) for c in conditions)
        else:
            counts = Counter(getattr(c, kind) for c in conditions)
        alloc = allocate_expert_counts(counts)
        for value in sorted(alloc):
            tags += [RoutingTag(kind, value)] * alloc[value]
    return ExpertRegistry(tuple(tags), general_count)


def missing_tags(registry: ExpertRegistry, condition) -> list:
    """Tags a registry would need so that ``condition`` routes without UnknownCategory."""
    out = []
    for kind in ("cathode", "anode", "format"):
        if getattr(condition, kind) not in registry.values(kind):
            out.append(RoutingTag(kind, getattr(condition, kind)))
    temps = registry.values("temperature")
    if not any(abs(c - condition.temperature) <= TEMPERATURE_WINDOW for c in temps):
        out.append(RoutingTag("temperature", temperature_center(condition.temperature)))
    return out


def hard_mask(condition, registry: ExpertRegistry) -> np.ndarray:
    """Boolean selection vector over the registry's specialized experts."""
    bits = np.array([t.matches(condition) for t in registry.specialized], dtype=bool)
    for kind in KINDS:
        idx = registry.indices_of_kind(kind)
        if idx and not bits[idx].any():
            value = condition.temperature if kind == "temperature" else getattr(condition, kind)
            raise UnknownCategory(kind, value)
    return bits


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def distill_embedding(e, w, b):
    """LeakyReLU(e @ w + b): the distilled condition vector shared by all layers.

    ``w`` is stored (d_embed, d_ff). Accepts a single vector or a batch of rows.
    """
    e, w, b = _t(e), _t(w), _t(b)
    if e.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
        raise DimensionMismatch(f"embedding {e.shape} vs distill weights {w.shape}/{b.shape}")
    single = e.ndim == 1
    x = ag.reshape(e, (1, -1)) if single else e
    out = ag.leaky_relu(ag.linear(x, w, b), LEAKY_SLOPE)
    return ag.reshape(out, (-1,)) if single else out


def gate_weights(e_hat, w2, b2):
    """Unnormalized per-expert weights e_hat @ w2 + b2, w2 stored (d_ff, K_s)."""
    e_hat, w2, b2 = _t(e_hat), _t(w2), _t(b2)
    if e_hat.shape[-1] != w2.shape[0] or w2.shape[1] != b2.shape[-1]:
        raise DimensionMismatch(f"distilled vector {e_hat.shape} vs gate weights {w2.shape}/{b2.shape}")
    single = e_hat.ndim == 1
    x = ag.reshape(e_hat, (1, -1)) if single else e_hat
    out = ag.linear(x, w2, b2)
    return ag.reshape(out, (-1,)) if single else out


def moe_forward(x, gbar, general: Sequence[Callable], specialized: Sequence[Callable], mask=None):
    """Sum of general expert outputs plus gated specialized outputs.

    ``gbar`` holds the masked gate weights (length K_s). Experts whose mask bit
    is off (default: ``gbar == 0``) are skipped entirely.
    """
    x = _t(x)
    gbar = _t(gbar)
    if gbar.shape != (len(specialized),):
        raise DimensionMismatch(f"gate length {gbar.shape} vs {len(specialized)} specialized experts")
    if mask is None:
        mask = gbar.data != 0
    out = None

    def acc(out, y):
        if out is not None and y.shape != out.shape:
            raise DimensionMismatch(f"expert output shapes disagree: {out.shape} vs {y.shape}")
        return y if out is None else out + y

    for f in general:
        out = acc(out, f(x))
    for j, f in enumerate(specialized):
        if not mask[j]:
            continue
        wj = ag.reshape(ag.take(gbar, [j]), ())
        out = acc(out, f(x) * wj)
    if out is None:
        return Tensor(np.zeros_like(x.data))
    return out


def moe_rows(x, gates, row_cell, cell_mask, general: Sequence[Callable], specialized: Sequence[Callable], d_out: int):
    """Batched BatteryMoE over rows that belong to cells.

    ``x`` (n_rows, d_in); ``gates`` (n_cells, K_s) gate weights; ``row_cell``
    maps each row to its cell; ``cell_mask`` (n_cells, K_s) routing bits.
    Specialized expert j only sees rows of cells whose bit j is set.
    """
    n = x.shape[0]
    row_cell = np.asarray(row_cell)
    out = None
    for f in general:
        y = f(x)
        out = y if out is None else out + y
    row_bits = cell_mask[row_cell]
    for j, f in enumerate(specialized):
        idx = np.flatnonzero(row_bits[:, j])
        if idx.size == 0:
            continue
        w = ag.take(ag.cols(gates, j, j + 1), row_cell[idx])  # (m, 1)
        y = ag.scatter(f(ag.take(x, idx)) * w, idx, n)
        out = y if out is None else out + y
    if out is None:
        return Tensor(np.zeros((n, d_out), dtype=x.dtype))
    return out
