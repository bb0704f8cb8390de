"""Aging conditions, the unified prompt, and aging embedders.

An aging condition is rendered into a fixed English template and turned into
a vector by an embedder. Two embedders ship: a deterministic feature-hashing
embedder (64-bit FNV-1a, no model weights) and a client for a remote service
speaking the ``POST /embed`` protocol documented in FORMATS.md.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _accel
from .errors import (
    DimensionMismatch,
    EmbedderUnavailable,
    EmptyPrompt,
    InputError,
    NoValidToken,
    ProtocolError,
)

DEFAULT_D_EMBED = 256

_ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]
_COUNTS = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


@dataclass(frozen=True)
class Stage:
    c_rate: float
    soc_target: Optional[float] = None  # percent
    cutoff_v: Optional[float] = None

    @classmethod
    def from_obj(cls, obj):
        if isinstance(obj, Stage):
            return obj
        if isinstance(obj, dict):
            return cls(float(obj["c_rate"]), _opt_float(obj.get("soc_target")), _opt_float(obj.get("cutoff_v")))
        c, soc, v = (list(obj) + [None, None])[:3]
        return cls(float(c), _opt_float(soc), _opt_float(v))


def _opt_float(x):
    return None if x is None else float(x)


@dataclass(frozen=True)
class AgingCondition:
    """The aging factors of one cell.

    Specifications: chemistry_family, format, cathode, anode, electrolyte,
    manufacturer, nominal_capacity. Formation: formation_protocol.
    Operation: charge_stages, discharge_stages, temperature (and soc_range).
    """

    cathode: str
    anode: str
    format: str
    temperature: float
    nominal_capacity: float
    chemistry_family: str = "lithium-ion"
    electrolyte: Optional[str] = None
    manufacturer: Optional[str] = None
    formation_protocol: Optional[str] = None
    charge_stages: tuple = ()
    discharge_stages: tuple = ()
    soc_range: tuple = (0.0, 100.0)

    def __post_init__(self):
        for name in ("cathode", "anode", "format"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name).strip():
                raise InputError(f"condition.{name} must be a non-empty string")
        if not math.isfinite(self.temperature):
            raise InputError("condition.temperature must be finite")
        if not (self.nominal_capacity > 0 and math.isfinite(self.nominal_capacity)):
            raise InputError("condition.nominal_capacity must be positive")
        lo, hi = self.soc_range
        if not lo < hi:
            raise InputError("condition.soc_range must satisfy low < high")
        # normalize containers so equality and hashing are structural
        object.__setattr__(self, "charge_stages", tuple(Stage.from_obj(s) for s in self.charge_stages))
        object.__setattr__(self, "discharge_stages", tuple(Stage.from_obj(s) for s in self.discharge_stages))
        object.__setattr__(self, "soc_range", (float(lo), float(hi)))
        object.__setattr__(self, "temperature", float(self.temperature))
        object.__setattr__(self, "nominal_capacity", float(self.nominal_capacity))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["charge_stages"] = [asdict(s) for s in self.charge_stages]
        d["discharge_stages"] = [asdict(s) for s in self.discharge_stages]
        d["soc_range"] = list(self.soc_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgingCondition":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown condition fields: {sorted(extra)}")
        missing = {"cathode", "anode", "format", "temperature", "nominal_capacity"} - set(d)
        if missing:
            raise InputError(f"missing condition fields: {sorted(missing)}")
        kw = dict(d)
        kw["charge_stages"] = tuple(Stage.from_obj(s) for s in d.get("charge_stages", ()))
        kw["discharge_stages"] = tuple(Stage.from_obj(s) for s in d.get("discharge_stages", ()))
        if "soc_range" in d:
            kw["soc_range"] = tuple(d["soc_range"])
        return cls(**kw)


def condition_key(condition: AgingCondition) -> str:
    """Canonical string identity of a condition: equal keys iff all factors are equal."""

    def norm(x):
        if isinstance(x, float):
            return x + 0.0  # folds -0.0 into 0.0
        if isinstance(x, dict):
            return {k: norm(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [norm(v) for v in x]
        return x

    return json.dumps(norm(condition.to_dict()), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ------------------------------------------------------------------ prompt

def fmt_num(x: float) -> str:
    """Shortest round-trip text for a number, without a trailing '.0'."""
    x = float(x) + 0.0
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _count_word(n):
    return _COUNTS[n - 1] if n <= len(_COUNTS) else str(n)


def _ordinal(n):
    if n <= len(_ORDINALS):
        return _ORDINALS[n - 1]
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


class _SocWording:
    # first SOC mention is spelled out, later ones use the abbreviation
    def __init__(self):
        self.used = False

    def __call__(self):
        if self.used:
            return "SOC"
        self.used = True
        return "state-of-charge (SOC)"


def _stage_clause(verb, stage: Stage, soc: _SocWording):
    s = f"{verb} at a constant current of {fmt_num(stage.c_rate)} C"
    if stage.soc_target is not None:
        s += f" to {fmt_num(stage.soc_target)}% {soc()}"
    if stage.cutoff_v is not None:
        s += f" until reaching {fmt_num(stage.cutoff_v)} V"
    return s


def _protocol_text(stages, phase, soc):
    verb = "charged" if phase == "charge" else "discharged"
    if not stages:
        return f"The {'charging' if phase == 'charge' else 'discharging'} protocol is unknown."
    if len(stages) == 1:
        lead = "In the cycling, the battery was" if phase == "charge" else "The battery was then"
        return f"{lead} {_stage_clause(verb, stages[0], soc)}."
    if phase == "charge":
        head = f"The cycling consists of {_count_word(len(stages))} charging stages."
    else:
        head = f"The discharging consists of {_count_word(len(stages))} stages."
    parts = [head]
    for k, st in enumerate(stages, 1):
        parts.append(f"In the {_ordinal(k)} stage, the battery was {_stage_clause(verb, st, soc)}.")
    return " ".join(parts)


def render_prompt(condition: AgingCondition, threshold: float = 0.8) -> str:
    """Fill the unified three-section prompt template for ``condition``."""
    c = condition
    soc = _SocWording()
    task = (
        "Task description: The target the number of cycles until the battery’s discharge capacity "
        f"reaches {fmt_num(round(threshold * 100, 6))}% of its nominal capacity. The discharge capacity is "
        "calculated under the described operating condition. Please directly output the target of the "
        "battery based on the provided data."
    )
    spec = (
        f"Battery specifications: The data comes from a {c.chemistry_family or 'unknown'} battery in a format "
        f"of {c.format}. Its positive electrode is {c.cathode}. Its negative electrode is {c.anode}. "
        f"The electrolyte formula is {c.electrolyte or 'unknown'}. "
        f"The battery manufacturer is {c.manufacturer or 'unknown'}. "
        f"The nominal capacity is {fmt_num(c.nominal_capacity)} Ah."
    )
    if c.formation_protocol:
        formation = c.formation_protocol.strip()
        if not formation.endswith("."):
            formation += "."
    else:
        formation = "The working history of this battery is just after formation."
    lo, hi = c.soc_range
    operation = " ".join(
        [
            "Operating condition:",
            formation,
            f"The working ambient temperature of this battery is {fmt_num(c.temperature)} degrees Celsius.",
            _protocol_text(c.charge_stages, "charge", soc),
            _protocol_text(c.discharge_stages, "discharge", soc),
            f"The cycling state-of-charge of this battery ranges from {fmt_num(lo)}% to {fmt_num(hi)}%.",
        ]
    )
    return "\n\n".join([task, spec, operation])


# --------------------------------------------------------------- embedders

_TOKEN_RE = re.compile(r"[0-9]+(?:\.[0-9]+)?|\w+")


def tokenize(text: str) -> list:
    """Lowercased word and number tokens; punctuation and whitespace separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def embed_hash(prompt: str, d_embed: int = DEFAULT_D_EMBED) -> np.ndarray:
    """Signed feature-hashing embedding, L2-normalized.

    Bucket = FNV-1a(token) mod d_embed; sign = top bit of FNV-1a over the
    token with a 0x01 salt byte mixed in first.
    """
    if d_embed < 8:
        raise ValueError("d_embed must be >= 8")
    tokens = tokenize(prompt or "")
    if not tokens:
        raise EmptyPrompt("prompt has no tokens")
    raw = [t.encode("utf-8") for t in tokens]
    h1 = _accel.fnv1a_many(raw)
    h2 = _accel.fnv1a_many(raw, salt=1)
    buckets = (h1 % np.uint64(d_embed)).astype(np.int64)
    signs = np.where((h2 >> np.uint64(63)) == 0, 1.0, -1.0)
    v = np.zeros(d_embed, dtype=np.float64)
    np.add.at(v, buckets, signs)
    norm = np.sqrt(v @ v)
    if norm == 0.0:
        # every token cancelled out; fall back to the first bucket
        v[buckets[0]] = 1.0
        norm = 1.0
    return v / norm


def last_valid_pool(tokens, mask) -> np.ndarray:
    """Row of ``tokens`` at the largest index whose mask entry is set."""
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if tokens.ndim != 2 or mask.shape != (tokens.shape[0],):
        raise DimensionMismatch(f"tokens {tokens.shape} vs mask {mask.shape}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise NoValidToken("no valid token to pool")
    return tokens[idx[-1]].copy()


def _embed_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/embed") else endpoint + "/embed"


def parse_embed_response(body, d_embed: int) -> np.ndarray:
    """Validate a decoded ``/embed`` response and pool its last valid token."""
    if not isinstance(body, dict) or not {"dim", "tokens", "mask"} <= set(body):
        raise ProtocolError("response must be an object with dim, tokens and mask")
    dim, tokens, mask = body["dim"], body["tokens"], body["mask"]
    if not isinstance(dim, int) or not isinstance(tokens, list) or not isinstance(mask, list):
        raise ProtocolError("dim must be int, tokens and mask must be lists")
    if len(tokens) != len(mask) or not tokens:
        raise ProtocolError("tokens and mask must be non-empty and of equal length")
    if any(not isinstance(r, list) or len(r) != dim for r in tokens):
        raise ProtocolError("every token row must have length dim")
    if any(m not in (0, 1) or isinstance(m, bool) for m in mask):
        raise ProtocolError("mask entries must be 0 or 1")
    try:
        mat = np.array(tokens, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"non-numeric token values: {exc}") from exc
    if not np.all(np.isfinite(mat)):
        raise ProtocolError("token values must be finite")
    if dim != d_embed:
        raise DimensionMismatch(f"service returned dim {dim}, expected {d_embed}")
    return last_valid_pool(mat, mask)


def embed_remote(prompt: str, endpoint: str, d_embed: int, timeout: float = 10.0) -> np.ndarray:
    import httpx

    if not prompt:
        raise EmptyPrompt("prompt is empty")
    try:
        resp = httpx.post(_embed_url(endpoint), json={"prompt": prompt}, timeout=timeout)
    except httpx.HTTPError as exc:
        raise EmbedderUnavailable(f"{endpoint}: {exc}") from exc
    if resp.status_code >= 500:
        raise EmbedderUnavailable(f"{endpoint}: HTTP {resp.status_code}")
    if resp.status_code != 200:
        raise ProtocolError(f"{endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"response is not JSON: {exc}") from exc
    return parse_embed_response(body, d_embed)


@dataclass(frozen=True)
class HashEmbedder:
    d_embed: int = DEFAULT_D_EMBED

    def __call__(self, prompt: str) -> np.ndarray:
        return embed_hash(prompt, self.d_embed)

    def describe(self):
        return {"kind": "hash", "d_embed": self.d_embed}


@dataclass(frozen=True)
class RemoteEmbedder:
    endpoint: str
    d_embed: int = DEFAULT_D_EMBED
    timeout: float = 10.0

    def __call__(self, prompt: str) -> np.ndarray:
        return embed_remote(prompt, self.endpoint, self.d_embed, self.timeout)

    def describe(self):
        return {"kind": "remote", "endpoint": self.endpoint, "d_embed": self.d_embed}


def make_embedder(spec: Optional[dict], d_embed: int):
    spec = dict(spec or {"kind": "hash"})
    kind = spec.pop("kind", "hash")
    if kind == "hash":
        return HashEmbedder(d_embed)
    if kind == "remote":
        return RemoteEmbedder(spec["endpoint"], d_embed, float(spec.get("timeout_s", 10.0)))
    raise InputError(f"unknown embedder kind {kind!r}")


@dataclass
class EmbeddingCache:
    """Memoizes embeddings per (condition, threshold)."""

    embedder: object
    _store: dict = field(default_factory=dict)

    def __call__(self, condition: AgingCondition, threshold: float = 0.8) -> np.ndarray:
        key = (condition_key(condition), float(threshold))
        if key not in self._store:
            self._store[key] = np.asarray(self.embedder(render_prompt(condition, threshold)), dtype=np.float64)
        return self._store[key]

    def __len__(self):
        return len(self._store)
