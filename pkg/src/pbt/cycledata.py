"""Cycling data: ingest, segment, integrate, resample, label, split, synthesize.

Raw currents are signed, charge positive. Each cycle becomes a (300, 3)
array: rows 0-149 are the charge phase, rows 150-299 the discharge phase,
columns are (voltage V, current C-rate, capacity Ah).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _accel
from .aging import AgingCondition, condition_key
from .errors import (
    IncompleteCycle,
    InputError,
    InvalidCapacity,
    InvalidConfig,
    InvalidN,
    InvalidSeries,
    MalformedCellFile,
    NotDegraded,
    TooFewCells,
)

POINTS_PER_PHASE = 150
POINTS_PER_CYCLE = 2 * POINTS_PER_PHASE
MAX_CYCLES = 100


@dataclass
class RawCycle:
    samples: np.ndarray  # (n, 3): t [s], v [V], i [A]

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3:
            raise InvalidSeries(f"samples must have shape (n, 3), got {s.shape}")
        if len(s) < 2:
            raise InvalidSeries("a cycle needs at least 2 samples")
        if not np.all(np.isfinite(s)):
            raise InvalidSeries("samples must be finite")
        if np.any(np.diff(s[:, 0]) <= 0):
            raise InvalidSeries("timestamps must be strictly increasing")
        self.samples = s


@dataclass
class RawCellRecord:
    cell_id: str
    nominal_capacity: float
    condition: AgingCondition
    cycles: list
    dataset_name: str = "unknown"


@dataclass(frozen=True)
class LifeLabel:
    cycles_to_threshold: int
    threshold_fraction: float = 0.8


@dataclass
class CellSample:
    cell_id: str
    cycles: np.ndarray  # (S, 300, 3)
    label: LifeLabel
    condition: AgingCondition
    dataset_name: str = "unknown"

    @property
    def n_cycles(self):
        return self.cycles.shape[0]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


# ------------------------------------------------------------ operations

def coulomb_count(samples) -> np.ndarray:
    """Capacity (Ah) accumulated from the first sample, by trapezoidal integration of |i|.

    ``samples`` is an (n, 2) array of (t seconds, i amperes).
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 2:
        raise InvalidSeries(f"expected (n, 2) samples of (t, i), got {s.shape}")
    if len(s) < 2:
        raise InvalidSeries("need at least 2 samples")
    if np.any(np.diff(s[:, 0]) <= 0):
        raise InvalidSeries("timestamps must be strictly increasing")
    return _accel.cumtrapz_abs(s[:, 0], s[:, 1])


def segment_cycle(raw: RawCycle):
    """Split a cycle into (charge, discharge) sample arrays.

    Charge is the maximal run of i >= 0 around the first positive sample;
    discharge is the maximal run of i <= 0 containing the first negative
    sample after it. Zero-current samples on the boundary belong to both.
    """
    s = raw.samples if isinstance(raw, RawCycle) else np.asarray(raw, dtype=np.float64)
    c0, c1, d0, d1 = _accel.phase_bounds(s[:, 2])
    if c0 < 0:
        raise IncompleteCycle("cycle has no positive-current (charge) sample")
    if d0 < 0:
        raise IncompleteCycle("cycle has no negative-current (discharge) sample after the charge")
    return s[c0 : c1 + 1], s[d0 : d1 + 1]


def _resample_phase(seg, nominal_capacity):
    if len(seg) < 2:
        raise InvalidSeries("a phase needs at least 2 samples to resample")
    t = seg[:, 0]
    q = coulomb_count(seg[:, [0, 2]])
    grid = np.linspace(t[0], t[-1], POINTS_PER_PHASE)
    out = np.empty((POINTS_PER_PHASE, 3))
    out[:, 0] = np.interp(grid, t, seg[:, 1])
    out[:, 1] = np.interp(grid, t, seg[:, 2]) / nominal_capacity
    out[:, 2] = np.interp(grid, t, q)
    return out


def resample_cycle(charge, discharge, nominal_capacity: float) -> np.ndarray:
    """Resample both phases onto 150 uniform time points each, giving a (300, 3) array."""
    if not nominal_capacity > 0:
        raise InvalidCapacity(f"nominal capacity must be > 0, got {nominal_capacity}")
    charge = np.asarray(charge, dtype=np.float64)
    discharge = np.asarray(discharge, dtype=np.float64)
    return np.vstack([_resample_phase(charge, nominal_capacity), _resample_phase(discharge, nominal_capacity)])


def discharge_capacity(raw: RawCycle) -> float:
    _, dis = segment_cycle(raw)
    return float(coulomb_count(dis[:, [0, 2]])[-1])


def compute_life_label(discharge_capacity_per_cycle: Sequence[float], nominal: float, threshold: float = 0.8) -> LifeLabel:
    """First cycle (1-based) whose discharge capacity is at or below threshold * nominal."""
    caps = np.asarray(discharge_capacity_per_cycle, dtype=np.float64)
    if caps.size == 0:
        raise InputError("capacity list is empty")
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must be in (0, 1)")
    hit = np.flatnonzero(caps <= threshold * nominal)
    if hit.size == 0:
        raise NotDegraded(f"capacity never falls to {threshold:.0%} of nominal")
    return LifeLabel(int(hit[0]) + 1, float(threshold))


def split_dataset(cells, seed: int) -> DatasetSplit:
    """Shuffle by ``seed`` and cut 6:2:2 as floor(0.6n) / floor(0.2n) / rest."""
    ids = [c if isinstance(c, str) else c.cell_id for c in cells]
    n = len(ids)
    if n < 5:
        raise TooFewCells(f"need at least 5 cells to split, got {n}")
    if len(set(ids)) != n:
        raise InputError("cell ids must be unique")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[k] for k in order]
    n_train = (6 * n) // 10
    n_val = (2 * n) // 10
    return DatasetSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train : n_train + n_val]),
        tuple(shuffled[n_train + n_val :]),
        int(seed),
    )


def split_by_dataset(cells, seed: int) -> DatasetSplit:
    """Split each dataset_name group separately and take the union."""
    groups = {}
    for c in cells:
        groups.setdefault(c.dataset_name, []).append(c.cell_id)
    train, val, test = [], [], []
    for name in sorted(groups):
        sp = split_dataset(groups[name], seed)
        train += sp.train
        val += sp.val
        test += sp.test
    return DatasetSplit(tuple(train), tuple(val), tuple(test), int(seed))


def truncate_to_first_n(cell: CellSample, n: int) -> CellSample:
    if not isinstance(n, (int, np.integer)) or n < 1 or n > min(MAX_CYCLES, cell.n_cycles):
        raise InvalidN(f"N must be in [1, {min(MAX_CYCLES, cell.n_cycles)}], got {n}")
    return replace(cell, cycles=cell.cycles[:n])


def preprocess_cell(record: RawCellRecord, threshold: float = 0.8, max_cycles: int = MAX_CYCLES) -> CellSample:
    """Resample the first ``max_cycles`` cycles and label the cell from all of its cycles."""
    caps = [discharge_capacity(c) for c in record.cycles]
    label = compute_life_label(caps, record.nominal_capacity, threshold)
    keep = record.cycles[: min(max_cycles, MAX_CYCLES)]
    arr = np.stack([resample_cycle(*segment_cycle(c), record.nominal_capacity) for c in keep])
    return CellSample(record.cell_id, arr, label, record.condition, record.dataset_name)


# ------------------------------------------------------------- synthetic

_DEFAULT_CATHODES = {"LFP": (2.0, 3.6), "NCM": (3.0, 4.2), "NCA": (2.7, 4.2)}


@dataclass
class SynthConfig:
    n_cells: int = 32
    life_min: int = 150
    life_max: int = 1500
    betas: tuple = (0.5, 1.0, 2.0)
    life_scale: float = 1.0
    samples_per_phase: int = 40
    detail_cycles: int = MAX_CYCLES
    tail_cycles: int = 2
    dataset_name: str = "SYNTH"
    id_prefix: str = "cell"
    cathodes: tuple = ("LFP", "NCM", "NCA")
    anodes: tuple = ("graphite", "silicon-graphite")
    formats: tuple = ("18650 cylindrical battery", "pouch battery")
    temperatures: tuple = (15.0, 25.0, 35.0, 45.0)
    capacities: tuple = (1.1, 2.0, 3.0)
    manufacturers: tuple = ("A123 system", "LISHEN", "Panasonic")
    charge_rates: tuple = (0.5, 1.0, 2.0, 3.0)
    discharge_rates: tuple = (0.5, 1.0, 2.0)
    resistance: float = 0.04  # V per C-rate at beginning of life

    def validate(self):
        if self.life_min < 2 or self.life_max > 10000 or self.life_min > self.life_max:
            raise InvalidConfig(f"lifetime range must satisfy 2 <= L_min <= L_max <= 10000, got [{self.life_min}, {self.life_max}]")
        if self.n_cells < 1:
            raise InvalidConfig("n_cells must be >= 1")
        if not self.life_scale > 0:
            raise InvalidConfig("life_scale must be > 0")
        if self.samples_per_phase < 2:
            raise InvalidConfig("samples_per_phase must be >= 2")
        if not self.betas or any(b <= 0 for b in self.betas):
            raise InvalidConfig("betas must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw).validate()


def fade_curve(q0: float, life: int, beta: float, n_cycles: int) -> np.ndarray:
    """Discharge capacity per cycle, Q_k = Q0 (1 - 0.2 (k/L)^beta) for k = 1..n."""
    k = np.arange(1, n_cycles + 1, dtype=np.float64)
    q = q0 * (1.0 - 0.2 * (k / life) ** beta)
    # integration round-off must not delay the crossing at k = L
    q[k >= life] *= 1.0 - 1e-9
    return q


def _ocv(soc, v_lo, v_hi):
    soc = np.clip(soc, 0.0, 1.0)
    shape = 0.08 + 0.8 * soc + 0.12 * np.tanh(8.0 * (soc - 0.9)) - 0.08 * np.exp(-12.0 * soc)
    return v_lo + (v_hi - v_lo) * shape


def _synth_cycle(qk, q0, charge_stages, dis_rate, window, r_ohm, n):
    v_lo, v_hi = window
    # charge: piecewise-constant current, stage boundaries at soc targets of the charged amount
    bounds = [0.0]
    rates = []
    for st in charge_stages:
        frac = 1.0 if st.soc_target is None else min(st.soc_target / 100.0, 1.0)
        if frac > bounds[-1]:
            bounds.append(frac)
            rates.append(st.c_rate)
    if bounds[-1] < 1.0:
        bounds.append(1.0)
        rates.append(charge_stages[-1].c_rate)
    t_parts, i_parts, q_parts = [], [], []
    t0 = 0.0
    m = max(2, n // len(rates))
    for s, rate in enumerate(rates):
        dq = (bounds[s + 1] - bounds[s]) * qk
        dur = 3600.0 * dq / (rate * q0)
        last = s == len(rates) - 1
        tt = np.linspace(t0, t0 + dur, m, endpoint=last)
        t_parts.append(tt)
        i_parts.append(np.full(m, rate * q0))
        q_parts.append(bounds[s] * qk + (tt - t0) * rate * q0 / 3600.0)
        t0 += dur
    tc = np.concatenate(t_parts)
    ic = np.concatenate(i_parts)
    soc_c = np.concatenate(q_parts) / q0
    vc = _ocv(soc_c, v_lo, v_hi) + r_ohm * ic / q0
    # discharge at constant current, starting after a fixed gap
    t_start = tc[-1] + 60.0
    dur = 3600.0 * qk / (dis_rate * q0)
    td = np.linspace(t_start, t_start + dur, n)
    soc_d = (qk - (td - t_start) * dis_rate * q0 / 3600.0) / q0
    vd = _ocv(soc_d, v_lo, v_hi) - r_ohm * dis_rate
    idis = np.full(n, -dis_rate * q0)
    return np.column_stack([np.concatenate([tc, td]), np.concatenate([vc, vd]), np.concatenate([ic, idis])])


def generate_synthetic(config: SynthConfig, seed: int):
    """Synthetic cells whose 80% life equals the sampled lifetime L exactly."""
    from .aging import Stage

    config.validate()
    rng = np.random.default_rng(seed)
    records = []
    log_lo, log_hi = math.log(config.life_min), math.log(config.life_max)
    for k in range(config.n_cells):
        life = int(round(math.exp(rng.uniform(log_lo, log_hi)) * config.life_scale))
        life = int(min(max(life, 2), 10000))
        beta = float(config.betas[rng.integers(len(config.betas))])
        cathode = config.cathodes[rng.integers(len(config.cathodes))]
        q0 = float(config.capacities[rng.integers(len(config.capacities))])
        n_stages = int(rng.integers(1, 3))
        rates = sorted((float(config.charge_rates[rng.integers(len(config.charge_rates))]) for _ in range(n_stages)), reverse=True)
        window = _DEFAULT_CATHODES.get(cathode, (3.0, 4.2))
        charge = tuple(
            Stage(r, 100.0 if s == n_stages - 1 else float(50 * (s + 1)), window[1] if s == n_stages - 1 else None)
            for s, r in enumerate(rates)
        )
        dis_rate = float(config.discharge_rates[rng.integers(len(config.discharge_rates))])
        cond = AgingCondition(
            cathode=cathode,
            anode=config.anodes[rng.integers(len(config.anodes))],
            format=config.formats[rng.integers(len(config.formats))],
            temperature=float(config.temperatures[rng.integers(len(config.temperatures))]),
            nominal_capacity=q0,
            manufacturer=config.manufacturers[rng.integers(len(config.manufacturers))],
            charge_stages=charge,
            discharge_stages=(Stage(dis_rate, None, window[0]),),
        )
        n_total = life + config.tail_cycles
        caps = fade_curve(q0, life, beta, n_total)
        cycles = []
        for c in range(n_total):
            frac = (c + 1) / life
            r_ohm = config.resistance * (1.0 + 0.5 * frac**beta)
            n = config.samples_per_phase if c < config.detail_cycles else 2
            cycles.append(RawCycle(_synth_cycle(caps[c], q0, charge, dis_rate, window, r_ohm, n)))
        records.append(RawCellRecord(f"{config.id_prefix}-{k:04d}", q0, cond, cycles, config.dataset_name))
    return records


# --------------------------------------------------------------- file I/O

def _reject_constant(name):
    raise ValueError(f"non-finite JSON constant {name}")


def cell_to_json(record: RawCellRecord) -> dict:
    return {
        "cell_id": record.cell_id,
        "dataset_name": record.dataset_name,
        "nominal_capacity_ah": record.nominal_capacity,
        "condition": record.condition.to_dict(),
        "cycles": [{"samples": c.samples.tolist()} for c in record.cycles],
    }


def write_cell_file(record: RawCellRecord, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cell_to_json(record), fh, allow_nan=False, separators=(",", ":"))


def read_cell_file(path) -> RawCellRecord:
    """Parse one unified cell JSON file; errors carry the JSON path of the bad field."""
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh, parse_constant=_reject_constant)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedCellFile(path, "$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedCellFile(path, "$", "top level must be an object")
    for key, typ in (("cell_id", str), ("dataset_name", str), ("nominal_capacity_ah", (int, float)), ("condition", dict), ("cycles", list)):
        if key not in doc:
            raise MalformedCellFile(path, f"$.{key}", "missing")
        if not isinstance(doc[key], typ) or isinstance(doc[key], bool):
            raise MalformedCellFile(path, f"$.{key}", f"wrong type {type(doc[key]).__name__}")
    if not doc["nominal_capacity_ah"] > 0:
        raise MalformedCellFile(path, "$.nominal_capacity_ah", "must be > 0")
    try:
        cond = AgingCondition.from_dict(doc["condition"])
    except (InputError, KeyError, TypeError, ValueError) as exc:
        raise MalformedCellFile(path, "$.condition", str(exc)) from exc
    if not doc["cycles"]:
        raise MalformedCellFile(path, "$.cycles", "no cycles")
    cycles = []
    for k, c in enumerate(doc["cycles"]):
        where = f"$.cycles[{k}].samples"
        if not isinstance(c, dict) or "samples" not in c:
            raise MalformedCellFile(path, where, "missing")
        try:
            arr = np.asarray(c["samples"], dtype=np.float64)
            cycles.append(RawCycle(arr))
        except (InputError, ValueError, TypeError) as exc:
            raise MalformedCellFile(path, where, str(exc)) from exc
    return RawCellRecord(doc["cell_id"], float(doc["nominal_capacity_ah"]), cond, cycles, doc["dataset_name"])


def write_dataset(samples: Sequence[CellSample], out_dir) -> Path:
    """Write manifest.json, labels.json and one raw <f4 [S, 300, 3] file per cell."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    entries, labels = [], {}
    for k, s in enumerate(samples):
        rel = f"cells/{k:05d}.f32"
        arr = np.ascontiguousarray(s.cycles, dtype="<f4")
        (out / rel).write_bytes(arr.tobytes(order="C"))
        entries.append(
            {
                "cell_id": s.cell_id,
                "dataset_name": s.dataset_name,
                "file": rel,
                "shape": list(arr.shape),
                "dtype": "<f4",
                "threshold": s.label.threshold_fraction,
                "condition": s.condition.to_dict(),
            }
        )
        labels[s.cell_id] = s.label.cycles_to_threshold
    manifest = {"format": "pbt-resampled", "version": 1, "cells": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, allow_nan=False), encoding="utf-8")
    (out / "labels.json").write_text(json.dumps(labels, indent=1), encoding="utf-8")
    return out


def read_dataset(in_dir) -> list:
    d = Path(in_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        labels = json.loads((d / "labels.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read dataset at {d}: {exc}") from exc
    out = []
    for e in manifest["cells"]:
        raw = (d / e["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=e.get("dtype", "<f4")).reshape(e["shape"]).astype(np.float64)
        out.append(
            CellSample(
                e["cell_id"],
                arr,
                LifeLabel(int(labels[e["cell_id"]]), float(e.get("threshold", 0.8))),
                AgingCondition.from_dict(e["condition"]),
                e["dataset_name"],
            )
        )
    return out
