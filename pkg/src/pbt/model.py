"""The Pretrained Battery Transformer.

Pipeline per cell: prompt -> aging embedding -> distilled vector (once) and
hard routing mask (once) -> BatteryMoE CyclePatch (one token per cycle) ->
L1 intra-cycle BatteryMoE FFN layers -> sinusoidal positions -> L2
inter-cycle layers (masked self-attention + BatteryMoE FFN, post-norm) ->
last valid token -> mixture-of-linear projection head.

Internally valid cycle rows are kept packed as (n_rows, d) and scattered into
a zero-padded (B, 100, d) tensor only for attention, so row-wise layers never
touch padding. All linear weights are stored (fan_in, fan_out).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .battmoe import ExpertRegistry, distill_embedding, gate_weights, hard_mask, moe_rows
from .cycledata import MAX_CYCLES, POINTS_PER_CYCLE
from .errors import ConfigError, DimensionMismatch, InvalidN

CYCLE_FEATURES = POINTS_PER_CYCLE * 3
HEAD_GENERAL = 5
HEAD_GATED = 5
LABEL_TRANSFORMS = ("identity", "log")


@dataclass(frozen=True)
class PBTConfig:
    d: int = 128
    d_ff: int = 512
    d_ffn: Optional[int] = None  # hidden width of FFN experts; None -> d_ff
    L1: int = 2
    L2: int = 10
    heads: int = 8
    dropout: float = 0.05
    K_g: int = 1
    d_embed: int = 256
    max_cycles: int = MAX_CYCLES
    label_transform: str = "identity"
    dtype: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.d_ff < 1 or (self.d_ffn is not None and self.d_ffn < 1):
            raise ConfigError("model widths must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.L1 < 1 or self.L2 < 1:
            raise ConfigError("L1 and L2 must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.K_g < 0:
            raise ConfigError("K_g must be >= 0")
        if self.label_transform not in LABEL_TRANSFORMS:
            raise ConfigError(f"label_transform must be one of {LABEL_TRANSFORMS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 1 <= self.max_cycles <= MAX_CYCLES:
            raise ConfigError(f"max_cycles must be in [1, {MAX_CYCLES}]")

    @property
    def ffn_hidden(self):
        return self.d_ff if self.d_ffn is None else self.d_ffn

    @property
    def n_layers(self):
        return self.L1 + self.L2

    @classmethod
    def reference(cls, **overrides):
        """Selected pretraining hyperparameters: d=128, d_ff=512, FFN width 128, 2+10 layers, 8 heads."""
        base = dict(d=128, d_ff=512, d_ffn=128, L1=2, L2=10, heads=8, dropout=0.05)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AdapterSpec:
    n_adapt: int
    d_a: int
    residual: bool = False


@dataclass
class ModelState:
    config: PBTConfig
    registry: ExpertRegistry
    params: dict
    frozen: frozenset = frozenset()
    adapter: Optional[AdapterSpec] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_specialized(self):
        return self.registry.n_specialized

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def trainable_names(self):
        return [k for k in self.params if k not in self.frozen]

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, meta=dict(self.meta))

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------- init

def moe_layer_prefixes(config: PBTConfig):
    return ["cyclepatch"] + [f"intra.{l}" for l in range(config.L1)] + [f"inter.{l}" for l in range(config.L2)]


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_params(rng, prefix, fan_in, fan_out, dtype, out):
    out[f"{prefix}.w"] = _uniform(rng, fan_in, (fan_in, fan_out), dtype)
    out[f"{prefix}.b"] = _uniform(rng, fan_in, (fan_out,), dtype)


def ffn_params(rng, prefix, d, hidden, dtype, out):
    out[f"{prefix}.w1"] = _uniform(rng, d, (d, hidden), dtype)
    out[f"{prefix}.b1"] = _uniform(rng, d, (hidden,), dtype)
    out[f"{prefix}.w2"] = _uniform(rng, hidden, (hidden, d), dtype)
    out[f"{prefix}.b2"] = _uniform(rng, hidden, (d,), dtype)


def norm_params(prefix, d, dtype, out):
    out[f"{prefix}.gamma"] = np.ones(d, dtype=dtype)
    out[f"{prefix}.beta"] = np.zeros(d, dtype=dtype)


def _moe_params(rng, prefix, cfg, k_s, dtype, out, expert):
    linear_params(rng, f"{prefix}.gate", cfg.d_ff, k_s, dtype, out)
    for i in range(cfg.K_g):
        expert(rng, f"{prefix}.general.{i}", out)
    for j in range(k_s):
        expert(rng, f"{prefix}.expert.{j}", out)


def init_params(config: PBTConfig, registry: ExpertRegistry, seed: int = 0) -> dict:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) for linear maps, unit/zero layer norms."""
    cfg = config
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    k_s = registry.n_specialized
    p = {}
    linear_params(rng, "gate.distill", cfg.d_embed, cfg.d_ff, dt, p)

    def lin_expert(r, prefix, out):
        linear_params(r, prefix, CYCLE_FEATURES, cfg.d, dt, out)

    def ffn_expert(r, prefix, out):
        ffn_params(r, prefix, cfg.d, cfg.ffn_hidden, dt, out)

    _moe_params(rng, "cyclepatch", cfg, k_s, dt, p, lin_expert)
    for l in range(cfg.L1):
        _moe_params(rng, f"intra.{l}", cfg, k_s, dt, p, ffn_expert)
        norm_params(f"intra.{l}.norm", cfg.d, dt, p)
    for l in range(cfg.L2):
        for name in ("q", "k", "v", "o"):
            linear_params(rng, f"inter.{l}.attn.{name}", cfg.d, cfg.d, dt, p)
        norm_params(f"inter.{l}.norm1", cfg.d, dt, p)
        _moe_params(rng, f"inter.{l}", cfg, k_s, dt, p, ffn_expert)
        norm_params(f"inter.{l}.norm2", cfg.d, dt, p)
    linear_params(rng, "head.gate", cfg.d, HEAD_GATED, dt, p)
    linear_params(rng, "head.experts", cfg.d, HEAD_GENERAL + HEAD_GATED, dt, p)
    return p


def init_model(config: PBTConfig, registry: ExpertRegistry, seed: int = 0) -> ModelState:
    if registry.general_count != config.K_g:
        registry = ExpertRegistry(registry.specialized, config.K_g)
    return ModelState(config, registry, init_params(config, registry, seed))


def positional_table(n_pos: int, d: int) -> np.ndarray:
    """Sinusoidal positions: sin(pos / 10000^(2i/d)) on even, cos on odd columns."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d)
    pe = np.zeros((n_pos, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


# ---------------------------------------------------------------- labels

def to_target(y, transform):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) if transform == "log" else y


def from_target(t, transform):
    t = np.asarray(t, dtype=np.float64)
    return np.exp(t) if transform == "log" else t


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    x: np.ndarray  # (n_rows, 900) valid cycles, cell-major
    lengths: np.ndarray  # (B,)
    embeddings: np.ndarray  # (B, d_embed)
    masks: np.ndarray  # (B, K_s) bool
    labels: Optional[np.ndarray] = None  # (B,) raw cycle-life labels
    n_pos: int = MAX_CYCLES

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        b = len(self.lengths)
        if np.any(self.lengths < 1) or np.any(self.lengths > self.n_pos):
            raise InvalidN(f"cycle counts must be in [1, {self.n_pos}]")
        self.row_cell = np.repeat(np.arange(b), self.lengths)
        starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        self.row_pos = np.arange(len(self.row_cell)) - starts[self.row_cell]
        self.flat_idx = self.row_cell * self.n_pos + self.row_pos
        self.last_idx = np.arange(b) * self.n_pos + self.lengths - 1
        self.valid = np.zeros((b, self.n_pos), dtype=bool)
        self.valid.reshape(-1)[self.flat_idx] = True
        if self.x.shape != (len(self.row_cell), CYCLE_FEATURES):
            raise DimensionMismatch(f"packed cycles {self.x.shape} vs {len(self.row_cell)} rows")

    @property
    def size(self):
        return len(self.lengths)


def make_batch(cycles: Sequence[np.ndarray], embeddings, masks, labels=None, dtype="float32", n_pos=MAX_CYCLES) -> Batch:
    """Pack per-cell (S_i, 300, 3) arrays; only the first S_i cycles of each are read."""
    lengths = [c.shape[0] for c in cycles]
    for c in cycles:
        if c.ndim != 3 or c.shape[1:] != (POINTS_PER_CYCLE, 3):
            raise DimensionMismatch(f"cycle array must be (S, 300, 3), got {c.shape}")
    x = np.concatenate([c.reshape(c.shape[0], -1) for c in cycles]).astype(dtype)
    return Batch(
        x,
        np.array(lengths),
        np.asarray(embeddings, dtype=dtype),
        np.asarray(masks, dtype=bool),
        None if labels is None else np.asarray(labels, dtype=np.float64),
        n_pos,
    )


# ---------------------------------------------------------------- network

class PBTNet:
    """Forward evaluation of a parameter set; params may be Tensors (for gradients) or arrays."""

    def __init__(self, params: dict, config: PBTConfig, n_specialized: int, adapter: Optional[AdapterSpec] = None, train=False, rng=None):
        self.P = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        self.cfg = config
        self.k_s = n_specialized
        self.adapter_spec = adapter
        self.train = train
        self.rng = rng
        self.dt = np.dtype(config.dtype)
        self._pe = positional_table(config.max_cycles, config.d).astype(self.dt)

    # -- building blocks
    def _drop(self, t):
        return ag.dropout(t, self.cfg.dropout, self.rng) if self.train else t

    def _linear_fn(self, prefix):
        w, b = self.P[f"{prefix}.w"], self.P[f"{prefix}.b"]
        return lambda x: ag.linear(x, w, b)

    def _ffn_fn(self, prefix):
        # dropout sits on each expert's output, before the gated sum
        w1, b1, w2, b2 = (self.P[f"{prefix}.{n}"] for n in ("w1", "b1", "w2", "b2"))
        return lambda x: self._drop(ag.linear(ag.gelu(ag.linear(x, w1, b1)), w2, b2))

    def _ln(self, prefix, x):
        return ag.layer_norm(x, self.P[f"{prefix}.gamma"], self.P[f"{prefix}.beta"], self.cfg.ln_eps)

    def distill(self, embeddings):
        return distill_embedding(Tensor(np.asarray(embeddings, dtype=self.dt)), self.P["gate.distill.w"], self.P["gate.distill.b"])

    def gates(self, prefix, e_hat):
        return gate_weights(e_hat, self.P[f"{prefix}.gate.w"], self.P[f"{prefix}.gate.b"])

    def moe(self, prefix, x, row_cell, e_hat, cell_mask, make_expert, d_out):
        general = [make_expert(f"{prefix}.general.{i}") for i in range(self.cfg.K_g)]
        specialized = [make_expert(f"{prefix}.expert.{j}") for j in range(self.k_s)]
        return moe_rows(x, self.gates(prefix, e_hat), row_cell, cell_mask, general, specialized, d_out)

    # -- layers over packed rows
    def cyclepatch(self, x_rows, row_cell, e_hat, cell_mask):
        x = x_rows if isinstance(x_rows, Tensor) else Tensor(np.asarray(x_rows, dtype=self.dt))
        return self.moe("cyclepatch", x, row_cell, e_hat, cell_mask, self._linear_fn, self.cfg.d)

    def intra_layer(self, l, h, row_cell, e_hat, cell_mask):
        f = self.moe(f"intra.{l}", h, row_cell, e_hat, cell_mask, self._ffn_fn, self.cfg.d)
        return self._ln(f"intra.{l}.norm", f + h)

    def adapter(self, k, x):
        p = f"adapter.{k}"
        y = ag.linear(ag.gelu(ag.linear(self._ln(f"{p}.norm", x), self.P[f"{p}.down.w"], self.P[f"{p}.down.b"])), self.P[f"{p}.up.w"], self.P[f"{p}.up.b"])
        return y + x if self.adapter_spec.residual else y

    def _maybe_adapt(self, k, rows):
        spec = self.adapter_spec
        return self.adapter(k, rows) if spec is not None and k < spec.n_adapt else rows

    # -- layers over padded (B, T, d)
    def pad(self, rows, flat_idx, b):
        t = self.cfg.max_cycles
        return ag.reshape(ag.scatter(rows, flat_idx, b * t), (b, t, rows.shape[1]))

    def unpad(self, padded, flat_idx):
        b, t, d = padded.shape
        return ag.take(ag.reshape(padded, (b * t, d)), flat_idx)

    def attention(self, l, p, valid):
        """Multi-head self-attention; padded keys get zero weight, padded query rows are zeroed."""
        b, t, d = p.shape
        h = self.cfg.heads
        dh = d // h
        x = ag.reshape(p, (b * t, d))

        def proj(name):
            y = ag.linear(x, self.P[f"inter.{l}.attn.{name}.w"], self.P[f"inter.{l}.attn.{name}.b"])
            return ag.swapaxes(ag.reshape(y, (b, t, h, dh)), 1, 2)  # (b, h, t, dh)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ag.mul(ag.matmul(q, ag.swapaxes(k, 2, 3)), self.dt.type(1.0 / math.sqrt(dh)))
        a = ag.masked_softmax(scores, valid[:, None, None, :])
        o = ag.reshape(ag.swapaxes(ag.matmul(a, v), 1, 2), (b * t, d))
        o = ag.linear(o, self.P[f"inter.{l}.attn.o.w"], self.P[f"inter.{l}.attn.o.b"])
        return ag.mask_fill(ag.reshape(o, (b, t, d)), valid[:, :, None])

    def inter_layer(self, l, p, valid, flat_idx, row_cell, e_hat, cell_mask):
        """One post-norm encoder layer; returns (padded output, packed valid rows)."""
        a = self._drop(self.attention(l, p, valid))
        rows = self._ln(f"inter.{l}.norm1", self.unpad(a + p, flat_idx))
        f = self.moe(f"inter.{l}", rows, row_cell, e_hat, cell_mask, self._ffn_fn, self.cfg.d)
        rows = self._ln(f"inter.{l}.norm2", f + rows)
        return self.pad(rows, flat_idx, p.shape[0]), rows

    def head(self, z):
        f = ag.linear(z, self.P["head.experts.w"], self.P["head.experts.b"])
        g = ag.linear(z, self.P["head.gate.w"], self.P["head.gate.b"])
        return ag.sum(ag.cols(f, 0, HEAD_GENERAL), axis=1) + ag.sum(g * ag.cols(f, HEAD_GENERAL, HEAD_GENERAL + HEAD_GATED), axis=1)

    # -- whole model
    def forward(self, batch: Batch):
        """Predictions in label-transform space, shape (B,)."""
        if batch.masks.shape[1] != self.k_s:
            raise DimensionMismatch(f"routing masks have {batch.masks.shape[1]} bits, registry has {self.k_s}")
        b = batch.size
        rc = batch.row_cell
        e_hat = self.distill(batch.embeddings)
        h = self.cyclepatch(batch.x, rc, e_hat, batch.masks)
        k = 0
        for l in range(self.cfg.L1):
            h = self._maybe_adapt(k, self.intra_layer(l, h, rc, e_hat, batch.masks))
            k += 1
        h = h + Tensor(self._pe[batch.row_pos])
        p = self.pad(h, batch.flat_idx, b)
        for l in range(self.cfg.L2):
            p, rows = self.inter_layer(l, p, batch.valid, batch.flat_idx, rc, e_hat, batch.masks)
            if self.adapter_spec is not None and k < self.adapter_spec.n_adapt:
                p = self.pad(self.adapter(k, rows), batch.flat_idx, b)
            k += 1
        z = ag.take(ag.reshape(p, (b * self.cfg.max_cycles, self.cfg.d)), batch.last_idx)
        return self.head(z)


def net_for(model: ModelState, params=None, train=False, rng=None) -> PBTNet:
    return PBTNet(model.params if params is None else params, model.config, model.n_specialized, model.adapter, train, rng)


# ------------------------------------------------- single-cell operations

def _routing(model, e, mask):
    net = net_for(model)
    e = np.atleast_2d(np.asarray(e, dtype=model.dtype))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    return net, e, mask


def cyclepatch_forward(model: ModelState, cycles: np.ndarray, embedding, mask):
    """Tokens for one cell: ((max_cycles, d) zero-padded array, validity flags)."""
    s = cycles.shape[0]
    if not 1 <= s <= model.config.max_cycles:
        raise InvalidN(f"S must be in [1, {model.config.max_cycles}], got {s}")
    net, e, mask = _routing(model, embedding, mask)
    batch = make_batch([cycles], e, mask, dtype=model.config.dtype, n_pos=model.config.max_cycles)
    rows = net.cyclepatch(batch.x, batch.row_cell, net.distill(e), mask)
    return net.pad(rows, batch.flat_idx, 1).data[0], batch.valid[0]


def intra_cycle_layer(model: ModelState, tokens, valid, l, embedding, mask):
    net, e, mask = _routing(model, embedding, mask)
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    rows = Tensor(np.asarray(tokens, dtype=model.dtype)[idx])
    out = net.intra_layer(l, rows, np.zeros(len(idx), dtype=np.int64), net.distill(e), mask)
    res = np.zeros_like(np.asarray(tokens, dtype=model.dtype))
    res[idx] = out.data
    return res


def positional_encode(tokens, valid):
    """Add sinusoidal positions to valid rows of a (T, d) token matrix."""
    tokens = np.asarray(tokens)
    valid = np.asarray(valid, dtype=bool)
    pe = positional_table(tokens.shape[0], tokens.shape[1]).astype(tokens.dtype)
    return np.where(valid[:, None], tokens + pe, tokens)


def attention(model: ModelState, tokens, valid, l=0):
    net = net_for(model)
    p = Tensor(np.asarray(tokens, dtype=model.dtype)[None])
    v = np.asarray(valid, dtype=bool)[None]
    if not v.any():
        raise InvalidN("all positions are padded")
    return net.attention(l, p, v).data[0]


def inter_cycle_layer(model: ModelState, tokens, valid, l, embedding, mask):
    net, e, mask = _routing(model, embedding, mask)
    v = np.asarray(valid, dtype=bool)[None]
    if not v.any():
        raise InvalidN("all positions are padded")
    flat = np.flatnonzero(v[0])
    p = Tensor(np.asarray(tokens, dtype=model.dtype)[None])
    out, _ = net.inter_layer(l, p, v, flat, np.zeros(len(flat), dtype=np.int64), net.distill(e), mask)
    return out.data[0]


def projection_head(model: ModelState, z) -> float:
    net = net_for(model)
    return float(net.head(Tensor(np.atleast_2d(np.asarray(z, dtype=model.dtype)))).data[0])


# ---------------------------------------------------------------- inference

@dataclass
class PreparedCell:
    cell_id: str
    cycles: np.ndarray
    embedding: np.ndarray
    mask: np.ndarray
    label: Optional[float]
    condition_key: str
    dataset_name: str


def prepare_cells(cells, model: ModelState, embed_cache) -> list:
    """Attach cached embeddings and routing masks; raises UnknownCategory for unroutable cells."""
    from .aging import condition_key

    out = []
    for c in cells:
        thr = c.label.threshold_fraction if c.label is not None else 0.8
        out.append(
            PreparedCell(
                c.cell_id,
                c.cycles,
                embed_cache(c.condition, thr),
                hard_mask(c.condition, model.registry),
                None if c.label is None else float(c.label.cycles_to_threshold),
                condition_key(c.condition),
                c.dataset_name,
            )
        )
    return out


def batch_of(prepared: Sequence[PreparedCell], model: ModelState, n_cycles: Optional[int] = None) -> Batch:
    cyc = [p.cycles if n_cycles is None else p.cycles[:n_cycles] for p in prepared]
    labels = None if any(p.label is None for p in prepared) else [p.label for p in prepared]
    return make_batch(
        cyc,
        np.stack([p.embedding for p in prepared]),
        np.stack([p.mask for p in prepared]),
        labels,
        dtype=model.config.dtype,
        n_pos=model.config.max_cycles,
    )


def predict_batch(model: ModelState, batch: Batch) -> np.ndarray:
    """Cycle-life predictions (label transform inverted), dropout off."""
    t = net_for(model).forward(batch).data.astype(np.float64)
    return from_target(t, model.config.label_transform)


def predict_prepared(model: ModelState, prepared: Sequence[PreparedCell], n_cycles=None, batch_size=64) -> np.ndarray:
    out = []
    for k in range(0, len(prepared), batch_size):
        out.append(predict_batch(model, batch_of(prepared[k : k + batch_size], model, n_cycles)))
    return np.concatenate(out) if out else np.zeros(0)


def predict(cell, model: ModelState, embedder) -> float:
    """Predicted cycle life of one cell."""
    from .aging import EmbeddingCache

    cache = embedder if isinstance(embedder, EmbeddingCache) else EmbeddingCache(embedder)
    (p,) = prepare_cells([cell], model, cache)
    return float(predict_prepared(model, [p])[0])


def predict_padded(model: ModelState, padded, n_valid: int, embedding, mask) -> float:
    """Prediction from a (max_cycles, 300, 3) zero-padded array whose first ``n_valid`` rows are real.

    Rows at or after ``n_valid`` are never read.
    """
    padded = np.asarray(padded)
    if not 1 <= n_valid <= min(model.config.max_cycles, padded.shape[0]):
        raise InvalidN(f"n_valid must be in [1, {model.config.max_cycles}], got {n_valid}")
    e = np.atleast_2d(np.asarray(embedding, dtype=model.dtype))
    m = np.atleast_2d(np.asarray(mask, dtype=bool))
    batch = make_batch([padded[:n_valid]], e, m, dtype=model.config.dtype, n_pos=model.config.max_cycles)
    return float(predict_batch(model, batch)[0])


def count_parameters(model: ModelState) -> int:
    return model.n_parameters()
