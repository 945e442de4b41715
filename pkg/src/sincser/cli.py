"""Command line driver: synth | train | eval | decode | inspect-filters.

One JSON config file (sections ``model``, ``chunk``, ``optimizer``, ``ded``,
``synth``, ``eval``, ``paths`` plus top-level ``seed`` and ``epochs``) feeds
every command; ``--set section.key=value`` overrides single entries.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io, ded, dsp_core, models, training

log = logging.getLogger("sincser")


class ConfigError(ValueError):
    pass


SECTIONS = {
    "model": models.ModelConfig,
    "chunk": training.ChunkPolicy,
    "optimizer": training.OptimizerConfig,
    "ded": ded.DedConfig,
    "synth": data_io.SynthSpec,
}
EXTRA_KEYS = {
    "synth": {"num_utterances": 2000, "num_dialogs": None},
    "eval": {"split": "val"},
    "paths": {"data_dir": "data", "out_dir": "runs"},
}
TOP_LEVEL = {"seed": 0, "epochs": 10}


def default_config() -> dict:
    cfg = {k: v for k, v in TOP_LEVEL.items()}
    for name, cls in SECTIONS.items():
        cfg[name] = json.loads(json.dumps(dataclasses.asdict(cls())))
    for name, extra in EXTRA_KEYS.items():
        cfg.setdefault(name, {}).update(extra)
    return cfg


def _merge(base: dict, override: dict, where=""):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be a table")
            _merge(base[key], value, where + key + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path=None, overrides=(), seed=None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            _merge(cfg, json.load(fh))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        nested = value = _parse_value(value)
        for part in reversed(parts):
            nested = {part: nested}
        _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    # the top-level seed drives every component
    for section in ("model", "chunk", "optimizer", "synth"):
        cfg[section]["seed"] = cfg["seed"]
    _validate(cfg)
    return cfg


def _validate(cfg):
    try:
        build_sections(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["chunk"]["chunk_ms"] != cfg["model"]["chunk_ms"]:
        raise ConfigError("chunk.chunk_ms and model.chunk_ms must agree")
    if cfg["eval"]["split"] not in ("val", "train", "all"):
        raise ConfigError("eval.split must be one of val, train, all")


def _tupled(d: dict, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    out = {k: v for k, v in d.items() if k in names}
    for f in dataclasses.fields(cls):
        if isinstance(f.default, tuple) and isinstance(out.get(f.name), list):
            out[f.name] = tuple(tuple(v) if isinstance(v, list) else v for v in out[f.name])
    return out


def build_sections(cfg):
    out = {name: cls(**_tupled(cfg[name], cls)) for name, cls in SECTIONS.items()}
    out["synth"].validate()
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _out_dir(cfg, args) -> Path:
    out = Path(args.out or cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg) -> Path:
    return Path(cfg["paths"]["data_dir"])


def _record_provenance(out: Path, cfg, files):
    h = config_hash(cfg)
    _write_json(out / "resolved_config.json", {"config": cfg, "config_hash": h})
    prov_path = out / "provenance.json"
    prov = json.loads(prov_path.read_text()) if prov_path.exists() else {"files": {}}
    for f in files:
        prov["files"][str(Path(f).relative_to(out)) if Path(f).is_relative_to(out) else str(f)] = h
    _write_json(prov_path, prov)


def _split_indices(dataset, cfg, which):
    labels = [u.label for u in dataset]
    tr, va = training.stratified_split(labels, 0.2, cfg["optimizer"]["seed"])
    if which == "train":
        return tr
    if which == "val":
        return va
    return np.arange(len(dataset))


# -- commands -------------------------------------------------------------------------------

def cmd_synth(cfg, args) -> int:
    sec = build_sections(cfg)
    extra = cfg["synth"]
    dataset = data_io.generate_synthetic(sec["synth"], num_dialogs=extra["num_dialogs"],
                                         num_utterances=extra["num_utterances"])
    out = Path(args.out) if args.out else _data_dir(cfg)
    manifest = data_io.write_dataset(dataset, out)
    _record_provenance(out, cfg, [manifest])
    log.info("wrote %d utterances to %s", len(dataset), manifest)
    return 0


def cmd_train(cfg, args) -> int:
    sec = build_sections(cfg)
    dataset = data_io.load_dataset(_data_dir(cfg) / "manifest.csv")
    model = models.build_model(sec["model"])
    tr, va = training.stratified_split([u.label for u in dataset], 0.2, sec["optimizer"].seed)
    history = training.train(model, dataset, sec["optimizer"], cfg["epochs"], sec["chunk"], tr, va)
    out = _out_dir(cfg, args)
    h = config_hash(cfg)
    ckpt = out / "model.npz"
    models.save_checkpoint(model, ckpt, extra={"config_hash": h, "run_config": cfg})
    log_path = out / "train_log.jsonl"
    log_path.write_text(history.to_jsonl({"config_hash": h}), encoding="utf-8")
    _record_provenance(out, cfg, [ckpt, log_path])
    return 0


def _checkpoint_path(cfg, args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else _out_dir(cfg, args) / "model.npz"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_eval(cfg, args) -> int:
    sec = build_sections(cfg)
    model = models.load_checkpoint(_checkpoint_path(cfg, args))
    dataset = data_io.load_dataset(_data_dir(cfg) / "manifest.csv")
    idx = _split_indices(dataset, cfg, cfg["eval"]["split"])
    loss, cm, post = training.evaluate(model, dataset, idx, sec["chunk"])
    out = _out_dir(cfg, args)
    h = config_hash(cfg)
    m = training.metrics(cm)
    metrics_path = out / "metrics.json"
    _write_json(metrics_path, {**m, "loss": loss, "confusion": cm.to_list(),
                               "split": cfg["eval"]["split"], "count": len(idx), "config_hash": h})
    post_path = out / "posteriors.jsonl"
    lines = []
    for i, p in zip(idx, post):
        u = dataset[i]
        lines.append(json.dumps({"dialog_id": u.dialog_id, "utterance_id": u.utterance_id,
                                 "posterior": [float(x) for x in p], "gold": u.label,
                                 "config_hash": h}, sort_keys=True))
    post_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _record_provenance(out, cfg, [metrics_path, post_path])
    return 0


def cmd_decode(cfg, args) -> int:
    sec = build_sections(cfg)
    out = _out_dir(cfg, args)
    src = Path(args.posteriors) if args.posteriors else out / "posteriors.jsonl"
    if not src.exists():
        raise FileNotFoundError(f"posterior stream not found: {src}")
    h = config_hash(cfg)
    with open(src, encoding="utf-8") as fh:
        dialogs = ded.read_posteriors_jsonl(fh)
    lines, gold, raw, dec = [], [], [], []
    for dp in dialogs:
        result = ded.decode(dp, sec["ded"])
        for rec, lab, s in zip(dp.extra, result.labels, result.per_step_scores):
            rec = dict(rec, decoded_label=int(lab), score=float(s), config_hash=h)
            lines.append(json.dumps(rec, sort_keys=True))
        if dp.gold is not None:
            gold.extend(dp.gold)
            raw.extend(int(np.argmax(r)) for r in dp.probs)
            dec.extend(result.labels)
    dest = Path(args.decoded) if args.decoded else out / "decoded.jsonl"
    dest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    files = [dest]
    if gold:
        mpath = out / "decode_metrics.json"
        _write_json(mpath, {
            "raw": training.metrics(training.ConfusionMatrix.from_labels(gold, raw)),
            "decoded": training.metrics(training.ConfusionMatrix.from_labels(gold, dec)),
            "config_hash": h})
        files.append(mpath)
    _record_provenance(out, cfg, [f for f in files if f.is_relative_to(out)])
    return 0


def export_filters(model: models.Model, out_dir, num_bins=1024):
    """cutoffs.csv plus one magnitude-response CSV per first-layer filter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fs = model.config.sample_rate
    kernels = model.first_layer_kernels()
    files = []
    if model.is_sinc:
        path = out_dir / "cutoffs.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("filter_index,f1_hz,f2_hz\n")
            for i, (f1, f2) in enumerate(model.sinc_bank().cutoffs()):
                fh.write(f"{i},{float(f1)!r},{float(f2)!r}\n")
        files.append(path)
    for i, k in enumerate(kernels):
        freqs, mag = dsp_core.kernel_response(k, fs, num_bins)
        path = out_dir / f"response_{i:03d}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("freq_hz,magnitude\n")
            for f, m in zip(freqs, mag):
                fh.write(f"{float(f)!r},{float(m)!r}\n")
        files.append(path)
    return files


def cmd_inspect_filters(cfg, args) -> int:
    model = models.load_checkpoint(_checkpoint_path(cfg, args))
    out = _out_dir(cfg, args) / "filters"
    files = export_filters(model, out)
    _record_provenance(out, cfg, files)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "inspect-filters": cmd_inspect_filters,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sincser", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry, e.g. model.num_filters=16")
        p.add_argument("--out", help="output directory (default paths.out_dir)")
        if name in ("eval", "inspect-filters"):
            p.add_argument("--checkpoint")
        if name == "decode":
            p.add_argument("--posteriors", help="input JSON-lines stream")
            p.add_argument("--decoded", help="output JSON-lines stream")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(os.environ.get("SINCSER_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        log.info("resolved config %s: %s", config_hash(cfg), json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, training.NonFiniteLoss) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command,
                          "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
