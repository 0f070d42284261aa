"""Command-line pipeline: preprocess recordings into token caches, then
pretrain / train / evaluate / predict / inspect.

One flat key=value config file drives everything; flags override config
values, config values override defaults.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import glob
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import training
from . import transformer as tf
from .beat_tokenizer import build_sequence, fuse_rms, load_tokens, save_tokens
from .dsp import DETECTORS, apply_filter, design_highpass
from .ecg_io import (
    filter_labels,
    load_label_map,
    load_record,
    rescale_peaks,
    resample_record,
)
from .errors import BeatformerError, CheckpointMismatchError, ConfigError, NoBeatsError


@dataclass
class PipelineConfig:
    model: tf.ModelConfig = field(default_factory=tf.ModelConfig)
    optim: training.OptimizerConfig = field(default_factory=training.OptimizerConfig)
    detector: str = "two_average"
    lead: str = ""          # detection lead name; empty means first lead
    leads: list | None = None
    label_map: str | None = None
    manifest: str | None = None
    val_manifest: str | None = None
    out_dir: str = "out"
    seed: int = 0
    workers: int = 1
    target_fs: float = 500.0
    highpass_hz: float = 0.5


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_optional_int(raw: str):
    return None if raw.strip().lower() == "none" else int(raw)


def _parse_leads(raw: str) -> list:
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


_MODEL_KEYS = {
    "d_model": int, "n_encoders": int, "n_heads": int, "dff": int,
    "d_qkv": _parse_optional_int, "max_pos": int, "d_class": int,
    "dropout_rate": float, "head": str, "causal": _parse_bool,
}
_OPTIM_KEYS = {
    "beta1": float, "beta2": float, "epsilon": float, "warmup_steps": int,
    "d_model": int, "batch_size": int, "epochs": int, "threshold": float,
}
_DATA_KEYS = {
    "detector": str, "lead": str, "leads": _parse_leads, "label_map": str,
    "manifest": str, "val_manifest": str, "out_dir": str, "seed": int,
    "workers": int, "target_fs": float, "highpass_hz": float,
}


def read_config_file(path: str) -> dict:
    """Flat key=value lines; # starts a comment; keys carry their section prefix."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
            values[key] = value.strip()
    return values


def build_config(file_values: dict | None = None,
                 overrides: dict | None = None) -> PipelineConfig:
    """Defaults, overlaid with config-file values, overlaid with flag overrides.

    Unknown or malformed keys raise ConfigError. optim.d_model follows
    model.d_model unless set explicitly.
    """
    model_kwargs, optim_kwargs, data_kwargs = {}, {}, {}
    for key, raw in (file_values or {}).items():
        section, _, name = key.partition(".")
        table = {"model": _MODEL_KEYS, "optim": _OPTIM_KEYS, "data": _DATA_KEYS}.get(section)
        if table is None or name not in table:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed = table[name](raw)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc
        {"model": model_kwargs, "optim": optim_kwargs, "data": data_kwargs}[section][name] = parsed

    if "d_model" in model_kwargs and "d_model" not in optim_kwargs:
        optim_kwargs["d_model"] = model_kwargs["d_model"]
    try:
        model = tf.ModelConfig(**model_kwargs)
        optim = training.OptimizerConfig(**optim_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = PipelineConfig(model=model, optim=optim, **data_kwargs)

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        cfg = replace(cfg, **{name: value})
    if cfg.detector not in DETECTORS:
        raise ConfigError(
            f"unknown detector {cfg.detector!r}; choose from {sorted(DETECTORS)}")
    return cfg


def _config_from_args(args) -> PipelineConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for name in ("seed", "out_dir", "detector", "leads", "label_map",
                 "manifest", "workers"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    return build_config(file_values, overrides)


def _preprocess_one(record_path: str, cfg: PipelineConfig, out_dir: str):
    """Returns ("ok", cache_name, indices|None) or ("skip", reason)."""
    rec = load_record(record_path)
    if cfg.leads:
        rec = rec.select_leads(cfg.leads)

    label_indices = None
    if cfg.label_map:
        lmap = load_label_map(cfg.label_map)
        label_indices = filter_labels(rec, lmap)
        if label_indices is None:
            return ("skip", "no scored labels")

    hp = design_highpass(cfg.highpass_hz, rec.fs)
    filtered = np.stack([apply_filter(hp, lead, step_init=True)
                         for lead in rec.leads])
    rec = replace(rec, leads=filtered)

    det_idx = 0
    if cfg.lead:
        if cfg.lead not in rec.lead_names:
            return ("skip", f"no lead named {cfg.lead!r}")
        det_idx = rec.lead_names.index(cfg.lead)
    peaks = DETECTORS[cfg.detector](rec.leads[det_idx], rec.fs)

    rec = resample_record(rec, cfg.target_fs)
    indices = rescale_peaks(peaks.indices, peaks.fs, cfg.target_fs)
    indices = indices[indices < rec.num_samples]
    fused = fuse_rms(rec)
    try:
        seq = build_sequence(fused, indices)
    except NoBeatsError:
        return ("skip", "no beats detected")

    cache_name = f"{rec.source_id}.tokens"
    save_tokens(os.path.join(out_dir, cache_name), seq)
    return ("ok", cache_name, label_indices)


def cmd_preprocess(args) -> int:
    cfg = _config_from_args(args)
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    records = sorted(
        glob.glob(os.path.join(args.input_dir, "*.csv"))
        + glob.glob(os.path.join(args.input_dir, "*.hea")))
    if not records:
        print(f"no .csv or .hea records in {args.input_dir}", file=sys.stderr)
        return 1

    results = {}
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(cfg.workers) as pool:
            futures = {pool.submit(_preprocess_one, p, cfg, out_dir): p
                       for p in records}
            for fut in concurrent.futures.as_completed(futures):
                path = futures[fut]
                try:
                    results[path] = fut.result()
                except BeatformerError as exc:
                    results[path] = ("error", str(exc))
    else:
        for path in records:
            try:
                results[path] = _preprocess_one(path, cfg, out_dir)
            except BeatformerError as exc:
                results[path] = ("error", str(exc))

    manifest_lines = []
    skip_lines = []
    for path in records:
        res = results[path]
        if res[0] == "ok":
            _, cache_name, indices = res
            label_field = ",".join(str(i) for i in sorted(indices)) if indices else ""
            manifest_lines.append(f"{cache_name}\t{label_field}")
        else:
            skip_lines.append(f"{path}\t{res[1]}")

    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines) + ("\n" if manifest_lines else ""))
    skip_path = os.path.join(out_dir, "skip_report.txt")
    with open(skip_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(skip_lines) + ("\n" if skip_lines else ""))

    print(f"preprocessed {len(manifest_lines)} of {len(records)} records "
          f"-> {manifest_path} ({len(skip_lines)} skipped, see {skip_path})")
    return 0 if manifest_lines else 1


def _require_manifest(cfg: PipelineConfig) -> str:
    if not cfg.manifest:
        raise ConfigError("no dataset manifest given (data.manifest or --manifest)")
    return cfg.manifest


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    summary = training.train(
        _require_manifest(cfg), cfg.model, cfg.optim, training.PRETRAIN,
        cfg.seed, cfg.out_dir, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if cfg.label_map:
        lmap = load_label_map(cfg.label_map)
        if lmap.num_classes != cfg.model.d_class:
            raise ConfigError(
                f"label map has {lmap.num_classes} classes but model.d_class "
                f"is {cfg.model.d_class}")
    summary = training.train(
        _require_manifest(cfg), cfg.model, cfg.optim, training.CLASSIFY,
        cfg.seed, cfg.out_dir, resume=args.resume,
        init_checkpoint=args.init_checkpoint, freeze_trunk=args.freeze_trunk,
        max_steps=args.max_steps)
    print(json.dumps(summary))
    return 0


def _load_for_inference(checkpoint: str):
    mcfg, ocfg, arrays, _, _ = training.load_training_checkpoint(checkpoint)
    params = tf.params_from_arrays(arrays, mcfg)
    return mcfg, ocfg, params


def _check_cache_width(dataset, mcfg, checkpoint):
    width = dataset[0][0].d_model
    if width != mcfg.d_model:
        raise CheckpointMismatchError(
            f"token caches have d_model={width} but checkpoint {checkpoint} "
            f"was trained with d_model={mcfg.d_model}")


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    mcfg, ocfg, params = _load_for_inference(args.checkpoint)
    if mcfg.head != tf.CLASSIFIER:
        raise CheckpointMismatchError(
            f"evaluate needs a classifier checkpoint, got head={mcfg.head!r}")
    dataset = training.load_dataset(_require_manifest(cfg), mcfg.d_class,
                                    require_labels=True)
    _check_cache_width(dataset, mcfg, args.checkpoint)
    metrics = training.evaluate(params, mcfg, dataset, threshold=ocfg.threshold)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_predict(args) -> int:
    cfg = _config_from_args(args)
    mcfg, ocfg, params = _load_for_inference(args.checkpoint)
    if mcfg.head != tf.CLASSIFIER:
        raise CheckpointMismatchError(
            f"predict needs a classifier checkpoint, got head={mcfg.head!r}")
    manifest = _require_manifest(cfg)
    entries = training.load_manifest(manifest)
    dataset = training.load_dataset(manifest, mcfg.d_class)
    _check_cache_width(dataset, mcfg, args.checkpoint)

    names = None
    if cfg.label_map:
        names = load_label_map(cfg.label_map).reverse()
    probs = training.forward_batches(params, mcfg, [s for s, _ in dataset])
    lines = []
    for (cache, _), row in zip(entries, probs):
        positive = np.flatnonzero(row > ocfg.threshold)
        codes = [names[int(c)] if names else str(int(c)) for c in positive]
        lines.append(f"{os.path.basename(cache)}\t{','.join(codes)}")
    text = "\n".join(lines)
    print(text)
    if args.predictions_out:
        with open(args.predictions_out, "w", encoding="utf-8") as fh:
            fh.write(text + ("\n" if text else ""))
    return 0


def cmd_inspect(args) -> int:
    seq = load_tokens(args.cache)
    anchor = seq.d_model // 3
    print(f"{args.cache}: {seq.n_real} real beats of {seq.tokens.shape[0]} positions, "
          f"d_model={seq.d_model}")
    for k in range(seq.n_real):
        tok = seq.tokens[k]
        nz = np.flatnonzero(tok)
        span = f"[{nz[0]}, {nz[-1]}]" if nz.size else "(all zero)"
        print(f"  beat {k:2d}: support {span}  min {tok.min():+.4f}  "
              f"max {tok.max():+.4f}  r {tok[anchor]:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beatformer",
        description="ECG heartbeats-as-words pipeline: tokenize recordings and "
                    "train a masked transformer encoder on them.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--out", dest="out_dir", default=None, help="output directory")
        if manifest:
            p.add_argument("--manifest", default=None, help="dataset manifest path")

    p = sub.add_parser("preprocess", help="tokenize a directory of recordings")
    p.add_argument("input_dir")
    common(p)
    p.add_argument("--detector", choices=sorted(DETECTORS), default=None)
    p.add_argument("--leads", type=_parse_leads, default=None,
                   help="comma-separated lead names to keep")
    p.add_argument("--label-map", dest="label_map", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="generative next-beat pre-training")
    common(p, manifest=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised multi-label training")
    common(p, manifest=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--init-checkpoint", dest="init_checkpoint", default=None,
                   help="pre-trained checkpoint whose trunk seeds this run")
    p.add_argument("--freeze-trunk", dest="freeze_trunk", action="store_true",
                   help="train only the output head (linear probe)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--label-map", dest="label_map", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on a labeled manifest")
    common(p, manifest=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="emit predicted class codes per record")
    common(p, manifest=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label-map", dest="label_map", default=None)
    p.add_argument("--predictions-out", default=None,
                   help="also write predictions to this file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="print token-cache statistics")
    p.add_argument("cache")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BeatformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
