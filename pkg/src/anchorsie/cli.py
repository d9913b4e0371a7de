"""Command-line entry point: ``anchorsie {synth,pretrain,train,eval,parse}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .codec import AnchorConfig, AnchorError, ParseResult
from .core import serialize
from .data import ReaderError, SynthConfig, load_corpus, load_document, save_document, synth_generate
from .losses import LossWeights
from .metrics import dumps_reports
from .model import (CheckpointError, DocTr, ModelConfig, load_into, read_checkpoint, save_checkpoint,
                    trunk_state)
from .pretrain import MaskingConfig, pretrain
from .train import HEADS, MetricsLog, OptimConfig, config_hash, evaluate, fit, model_class_count, predict, prepare

log = logging.getLogger("anchorsie")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
ORDERS = {"raster": "raster_scan", "oracle": "oracle"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    head: str = "anchor"
    order: str = "raster"
    kv_mode: str = "pair"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {sorted(ORDERS)}")
        if self.kv_mode not in ("pair", "fields"):
            raise ConfigError("kv_mode must be 'pair' or 'fields'")
        if self.optim.steps < 0 or self.optim.batch_size <= 0 or self.optim.lr <= 0:
            raise ConfigError("optimizer needs steps >= 0, batch_size > 0 and lr > 0")
        return self

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


_SECTIONS = {"model": ModelConfig, "anchor": AnchorConfig, "losses": LossWeights,
             "masking": MaskingConfig, "optim": OptimConfig, "synth": SynthConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg}, line {exc.lineno})") from None
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    raw = {k: v for k, v in raw.items() if k != "schema_version"}
    unknown = sorted(set(raw) - set(_SECTIONS) - {"head", "order", "kv_mode", "seed"})
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    sections = {name: dict(raw.get(name, {})) for name in _SECTIONS}
    top = {k: raw[k] for k in ("head", "order", "kv_mode", "seed") if k in raw}

    # flags override file values
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
    if getattr(args, "head", None):
        top["head"] = args.head
    if getattr(args, "order", None):
        top["order"] = args.order
    if getattr(args, "mask_mode", None):
        sections["masking"]["mode"] = args.mask_mode
    if "seed" in top:
        for name in ("model", "masking", "optim", "synth"):
            sections[name].setdefault("seed", top["seed"])

    built = {name: _build(cls, sections[name], name) for name, cls in _SECTIONS.items()}
    head = top.get("head", "anchor")
    anchor = built["anchor"]
    built["model"] = dataclasses.replace(built["model"], class_count=model_class_count(anchor, head)) \
        if head in HEADS else built["model"]
    try:
        return RunConfig(**built, **top).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands

def _metrics(args, cfg: RunConfig, command: str) -> MetricsLog:
    path = args.metrics or (f"{args.out}.metrics.jsonl" if args.out else None)
    return MetricsLog(path, command=command, seed=cfg.seed, config_hash=config_hash(cfg.to_json()))


def _corpus(path: str):
    p = Path(path)
    if not p.exists():
        raise ReaderError(f"corpus {path} does not exist")
    docs = load_corpus(p) if p.is_dir() else [load_document(p)]
    if not docs:
        raise ReaderError(f"corpus {path} contains no documents")
    return docs


def _model_for(cfg: RunConfig, checkpoint: str | None, strict_heads: bool = True,
               fresh_heads_after_pretrain: bool = False) -> DocTr:
    model = DocTr(cfg.model)
    if checkpoint:
        ck_cfg, state, extra = read_checkpoint(checkpoint)
        if ck_cfg.class_count != cfg.model.class_count and strict_heads:
            raise CheckpointError(f"checkpoint has {ck_cfg.class_count} classes, "
                                  f"configuration expects {cfg.model.class_count}")
        model = DocTr(dataclasses.replace(ck_cfg, class_count=cfg.model.class_count))
        if fresh_heads_after_pretrain and extra.get("stage") == "pretrain":
            state = trunk_state(state)
            log.info("fine-tuning from a pre-trained trunk; output heads start fresh")
        load_into(model, state, strict_heads=strict_heads)
    return model


def _check_out(path: str | None) -> None:
    if path is None:
        raise ConfigError("--out is required")
    parent = Path(path).resolve().parent
    if not parent.exists():
        raise ConfigError(f"output directory {parent} does not exist")


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out}: {exc}") from None
    docs = synth_generate(cfg.synth)
    entries = []
    for i, doc in enumerate(docs):
        name = f"doc_{i:05d}.json"
        save_document(doc, out / name)
        entries.append({"file": name, "doc_id": doc.doc_id,
                        "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest()})
    manifest = {"schema_version": SCHEMA_VERSION, "generator": "synth",
                "config_hash": config_hash(asdict(cfg.synth)), "synth": asdict(cfg.synth),
                "documents": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d documents to %s", len(docs), out)
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    _check_out(args.out)
    docs = _corpus(args.corpus)
    model = _model_for(cfg, args.init, strict_heads=False)
    metrics = _metrics(args, cfg, "pretrain")
    try:
        pretrain(model, docs, cfg.masking, cfg.optim, cfg.losses, metrics)
    finally:
        metrics.close()
    save_checkpoint(model, args.out, {"stage": "pretrain", "masking": asdict(cfg.masking)})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _check_out(args.out)
    docs = _corpus(args.corpus)
    model = _model_for(cfg, args.init, strict_heads=False, fresh_heads_after_pretrain=True)
    examples = prepare(docs, cfg.model, cfg.anchor, ORDERS[cfg.order], cfg.head)
    metrics = _metrics(args, cfg, "train")
    try:
        fit(model, examples, cfg.optim, cfg.losses, cfg.head, metrics)
        reports = evaluate(model, examples, cfg.anchor, cfg.head, cfg.kv_mode)
        metrics.write(step=cfg.optim.steps, split="train",
                      **{f"{k}_f1": round(v.f1, 6) for k, v in reports.items()})
    finally:
        metrics.close()
    save_checkpoint(model, args.out, {"stage": "train", "head": cfg.head, "order": cfg.order,
                                      "anchor": asdict(cfg.anchor)})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _model_for(cfg, args.checkpoint)
    examples = prepare(_corpus(args.corpus), model.cfg, cfg.anchor, ORDERS[cfg.order], cfg.head)
    reports = evaluate(model, examples, cfg.anchor, cfg.head, cfg.kv_mode)
    text = dumps_reports(reports)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    for name, rep in reports.items():
        log.info("%s\n%s", name, rep.table())
    return EXIT_OK


def cmd_parse(args, cfg: RunConfig) -> int:
    doc = load_document(args.document)
    if len(doc.ocr) == 0:
        result = ParseResult(diagnostics={"words": 0})
    else:
        model = _model_for(cfg, args.checkpoint)
        ex = prepare([serialize(doc, ORDERS[cfg.order])], model.cfg, None, ORDERS[cfg.order])
        result = predict(model, ex, cfg.anchor, cfg.head)[0]
    text = result.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "parse": cmd_parse}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorsie", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--metrics", help="JSONL metrics path (default: <out>.metrics.jsonl)")
        sp.add_argument("--head", choices=HEADS)
        sp.add_argument("--order", choices=sorted(ORDERS))
        sp.add_argument("--mask-mode", choices=("mlm", "mvlm", "mdm"))
        return sp

    common(sub.add_parser("synth", help="generate a synthetic receipt corpus"))
    sp = common(sub.add_parser("pretrain", help="masked pre-training"))
    sp.add_argument("corpus")
    sp.add_argument("--init", help="checkpoint to start from")
    sp = common(sub.add_parser("train", help="supervised fine-tuning"))
    sp.add_argument("corpus")
    sp.add_argument("--init", help="checkpoint to start from (e.g. pre-trained)")
    sp = common(sub.add_parser("eval", help="score a checkpoint on a corpus"))
    sp.add_argument("checkpoint")
    sp.add_argument("corpus")
    sp = common(sub.add_parser("parse", help="parse one document to JSON"))
    sp.add_argument("checkpoint")
    sp.add_argument("document")
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ANCHORSIE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReaderError, AnchorError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
