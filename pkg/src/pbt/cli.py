"""Command-line entry point: ``pbt <subcommand> ...``.

Configuration is one JSON document with sections ``cycledata``, ``embedder``,
``model``, ``train``, ``transfer``, ``eval`` and ``paths`` plus a top-level
``seed``. Unknown keys are rejected. Paths may be overridden from the
environment (``PBT_DATA``, ``PBT_TARGET_DATA``, ``PBT_BASE_CHECKPOINT``,
``PBT_OUT``); command-line flags override both.

Exit codes: 0 success, 2 input error, 3 routing or configuration error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import cycledata as cd
from .aging import AgingCondition, EmbeddingCache, make_embedder, render_prompt
from .battmoe import build_registry
from .checkpoint import load_checkpoint, save_checkpoint, save_delta_checkpoint
from .errors import ConfigError, EmbedderUnavailable, InputError, InvalidConfig, NotDegraded, NumericError, RoutingError
from .model import PBTConfig, init_model, prepare_cells
from .train import TrainConfig, evaluate, train_loop
from .transfer import TransferConfig, adapter_tune, extend_registry, fine_tune

log = logging.getLogger("pbt")

PATH_KEYS = ("data", "target_data", "base_checkpoint", "out")
ENV_PATHS = {k: f"PBT_{k.upper()}" for k in PATH_KEYS}
SECTIONS = ("seed", "paths", "cycledata", "embedder", "model", "train", "transfer", "eval")


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    threshold: float = 0.8
    max_cycles: int = cd.MAX_CYCLES
    synth: cd.SynthConfig = field(default_factory=cd.SynthConfig)
    embedder: dict = field(default_factory=lambda: {"kind": "hash"})
    model: PBTConfig = field(default_factory=PBTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: Optional[dict] = None
    eval_cycles: tuple = ()

    @classmethod
    def from_dict(cls, doc: dict, environ=None):
        environ = os.environ if environ is None else environ
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        paths = dict(doc.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise InvalidConfig(f"unknown paths keys: {sorted(bad)}")
        for k, var in ENV_PATHS.items():
            if environ.get(var):
                paths[k] = environ[var]
        data = dict(doc.get("cycledata", {}))
        bad = set(data) - {"threshold", "max_cycles", "synth"}
        if bad:
            raise InvalidConfig(f"unknown cycledata keys: {sorted(bad)}")
        threshold = float(data.get("threshold", 0.8))
        if not 0.0 < threshold < 1.0:
            raise InvalidConfig("cycledata.threshold must be in (0, 1)")
        max_cycles = int(data.get("max_cycles", cd.MAX_CYCLES))
        if not 1 <= max_cycles <= cd.MAX_CYCLES:
            raise InvalidConfig(f"cycledata.max_cycles must be in [1, {cd.MAX_CYCLES}]")
        emb = dict(doc.get("embedder", {"kind": "hash"}))
        bad = set(emb) - {"kind", "endpoint", "timeout_s"}
        if bad or emb.get("kind", "hash") not in ("hash", "remote"):
            raise InvalidConfig(f"invalid embedder section: {emb}")
        if emb.get("kind") == "remote" and not emb.get("endpoint"):
            raise InvalidConfig("embedder.endpoint is required for kind=remote")
        ev = dict(doc.get("eval", {}))
        if set(ev) - {"cycles"}:
            raise InvalidConfig(f"unknown eval keys: {sorted(set(ev) - {'cycles'})}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        transfer = doc.get("transfer")
        if transfer is not None:
            TransferConfig.from_dict(transfer)  # validate ranges at load time
        try:
            model = PBTConfig.from_dict(doc.get("model", {}))
            train = TrainConfig.from_dict(doc.get("train", {}))
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc
        return cls(
            seed=seed,
            paths=paths,
            threshold=threshold,
            max_cycles=max_cycles,
            synth=cd.SynthConfig.from_dict(data.get("synth", {})),
            embedder=emb,
            model=model,
            train=train,
            transfer=transfer,
            eval_cycles=tuple(parse_cycles(ev["cycles"]) if "cycles" in ev else ()),
        )

    @classmethod
    def load(cls, path: Optional[str], environ=None):
        if path is None:
            return cls.from_dict({}, environ)
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config must be a JSON object")
        return cls.from_dict(doc, environ)

    def path(self, key, override=None):
        p = override or self.paths.get(key)
        if not p:
            raise InputError(f"no {key} path given (flag, config paths.{key} or ${ENV_PATHS[key]})")
        return Path(p)

    def embed_cache(self, timeout=None):
        spec = dict(self.embedder)
        if timeout is not None:
            spec["timeout_s"] = timeout
        return EmbeddingCache(make_embedder(spec, self.model.d_embed))


def parse_cycles(value):
    if isinstance(value, str):
        items = [v for v in value.replace(" ", "").split(",") if v]
    else:
        items = list(value)
    try:
        out = [int(v) for v in items]
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid cycle list {value!r}") from exc
    for n in out:
        if not 1 <= n <= cd.MAX_CYCLES:
            raise InputError(f"cycle count {n} outside [1, {cd.MAX_CYCLES}]")
    return out


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")


def _by_id(cells):
    return {c.cell_id: c for c in cells}


def _prepare_split(cells, split):
    idx = _by_id(cells)
    return [idx[i] for i in split.train], [idx[i] for i in split.val], [idx[i] for i in split.test]


# ---------------------------------------------------------------- subcommands

def cmd_preprocess(in_dir, out_dir, cfg: RunConfig):
    files = sorted(Path(in_dir).glob("*.json"))
    if not files:
        raise InputError(f"no cell JSON files in {in_dir}")
    samples = []
    for f in files:
        rec = cd.read_cell_file(f)
        try:
            s = cd.preprocess_cell(rec, cfg.threshold, cfg.max_cycles)
        except NotDegraded as exc:
            log.warning("skipping %s: %s", f.name, exc)
            continue
        samples.append(s)
        print(f"{s.cell_id}\tcycles={s.cycles.shape[0]}\tlife={s.label.cycles_to_threshold}")
    if not samples:
        raise InputError("no usable cells")
    cd.write_dataset(samples, out_dir)
    return samples


def cmd_synth(cfg: RunConfig, seed, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = cd.generate_synthetic(cfg.synth, seed)
    for r in records:
        cd.write_cell_file(r, out / f"{r.cell_id}.json")
    print(f"wrote {len(records)} cells to {out}")
    return records


def cmd_pretrain(cfg: RunConfig, data_dir, out_dir, timeout=None):
    cells = cd.read_dataset(data_dir)
    split = cd.split_dataset(cells, cfg.seed)
    train, val, test = _prepare_split(cells, split)
    registry = build_registry([c.condition for c in cells], cfg.model.K_g)
    model = init_model(cfg.model, registry, cfg.seed)
    cache = cfg.embed_cache(timeout)
    p_train = prepare_cells(train, model, cache)
    p_val = prepare_cells(val, model, cache)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(**{**cfg.train.to_dict(), "seed": cfg.seed})
    res = train_loop(model, p_train, p_val, tc, log_path=out / "train_log.jsonl")
    best = res.best
    best.meta = {
        "split": split.to_dict(),
        "train_condition_keys": sorted({p.condition_key for p in p_train + p_val}),
        "train": tc.to_dict(),
        "embedder": cfg.embedder,
        "threshold": cfg.threshold,
        "best_step": res.best_step,
        "best_val_mape": res.best_val_mape,
    }
    save_checkpoint(best, out / "checkpoint")
    print(f"best step {res.best_step} val MAPE {res.best_val_mape:.4f}; checkpoint at {out / 'checkpoint'}")
    return best


def cmd_transfer(cfg: RunConfig, base_dir, data_dir, out_dir, timeout=None):
    if cfg.transfer is None:
        raise InvalidConfig("config has no transfer section")
    tcfg = TransferConfig.from_dict({**cfg.transfer, "seed": cfg.seed})
    base = load_checkpoint(base_dir)
    cells = cd.read_dataset(data_dir)
    split = cd.split_dataset(cells, cfg.seed)
    train, val, test = _prepare_split(cells, split)
    model = extend_registry(base, [c.condition for c in cells])
    cache = cfg.embed_cache(timeout)
    p_train = prepare_cells(train, model, cache)
    p_val = prepare_cells(val, model, cache)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tune = fine_tune if tcfg.mode == "fine_tune" else adapter_tune
    res = tune(model, p_train, p_val, tcfg, log_path=out / "train_log.jsonl")
    best = res.best
    best.meta = {
        "split": split.to_dict(),
        "train_condition_keys": sorted({p.condition_key for p in p_train + p_val}),
        "transfer": tcfg.to_dict(),
        "embedder": cfg.embedder,
        "threshold": cfg.threshold,
        "best_step": res.best_step,
        "best_val_mape": res.best_val_mape,
    }
    save_delta_checkpoint(best, out / "checkpoint", base_dir)
    print(f"best step {res.best_step} val MAPE {res.best_val_mape:.4f}; checkpoint at {out / 'checkpoint'}")
    return best


def cmd_eval(cfg: RunConfig, ckpt_dir, data_dir, cycles=(), split="test", timeout=None):
    model = load_checkpoint(ckpt_dir)
    cells = cd.read_dataset(data_dir)
    if split == "test" and "split" in model.meta:
        ids = set(model.meta["split"]["test"])
        chosen = [c for c in cells if c.cell_id in ids]
        if not chosen:
            raise InputError("none of the checkpoint's test cells are in this dataset; use --split all")
        cells = chosen
    emb = model.meta.get("embedder", cfg.embedder)
    spec = dict(emb)
    if timeout is not None:
        spec["timeout_s"] = timeout
    cache = EmbeddingCache(make_embedder(spec, model.config.d_embed))
    prepared = prepare_cells(cells, model, cache)
    report = evaluate(model, prepared, model.meta.get("train_condition_keys", []), cycles)
    return report


def cmd_embed(cfg: RunConfig, condition_file, timeout=None):
    try:
        doc = json.loads(Path(condition_file).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read condition file {condition_file}: {exc}") from exc
    cond = AgingCondition.from_dict(doc.get("condition", doc))
    prompt = render_prompt(cond, cfg.threshold)
    vec = cfg.embed_cache(timeout)(cond, cfg.threshold)
    return {"prompt": prompt, "d_embed": int(vec.shape[0]), "embedding": [float(x) for x in vec]}


def cmd_embed_stub(cfg: RunConfig, host, port):
    from .embed_server import StubServer

    server = StubServer(host, port, d_embed=cfg.model.d_embed)
    print(f"serving stub embeddings at {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# ---------------------------------------------------------------- argparse

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--timeout-s", type=float, dest="timeout_s", help="embedding service timeout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pbt", description="Battery cycle-life prediction with a knowledge-routed MoE transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="resample unified cell JSON files")
    s.add_argument("in_dir")
    s = sub.add_parser("synth", parents=[common], help="generate synthetic cell JSON files")
    s = sub.add_parser("pretrain", parents=[common], help="train from scratch on a resampled dataset")
    s.add_argument("--data", help="resampled dataset directory")
    s = sub.add_parser("transfer", parents=[common], help="fine-tune or adapter-tune a checkpoint")
    s.add_argument("--base", help="base checkpoint directory")
    s.add_argument("--data", help="target resampled dataset directory")
    s = sub.add_parser("eval", parents=[common], help="MAPE report for a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", help="resampled dataset directory")
    s.add_argument("--cycles", help="comma-separated usable-cycle counts, e.g. 1,5,10,50,100")
    s.add_argument("--split", choices=("test", "all"), default="test")
    s = sub.add_parser("embed", parents=[common], help="embed the prompt of one aging condition")
    s.add_argument("condition_file")
    s = sub.add_parser("embed-stub", parents=[common], help="serve the stub embedding endpoint")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        cfg.seed = args.seed
    t = args.timeout_s
    cmd = args.command
    if cmd == "preprocess":
        cmd_preprocess(args.in_dir, cfg.path("out", args.out), cfg)
    elif cmd == "synth":
        cmd_synth(cfg, cfg.seed, cfg.path("out", args.out))
    elif cmd == "pretrain":
        cmd_pretrain(cfg, cfg.path("data", args.data), cfg.path("out", args.out), t)
    elif cmd == "transfer":
        cmd_transfer(cfg, cfg.path("base_checkpoint", args.base), cfg.path("target_data", args.data), cfg.path("out", args.out), t)
    elif cmd == "eval":
        cycles = parse_cycles(args.cycles) if args.cycles else list(cfg.eval_cycles)
        report = cmd_eval(cfg, args.checkpoint, cfg.path("data", args.data), cycles, args.split, t)
        _dump(report.to_dict(), args.out)
    elif cmd == "embed":
        _dump(cmd_embed(cfg, args.condition_file, t), args.out)
    elif cmd == "embed-stub":
        cmd_embed_stub(cfg, args.host, args.port)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (RoutingError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (InputError, EmbedderUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
