"""Losses, Adam with warmup schedule, metrics, and the two training loops:
generative next-beat pre-training and supervised multi-label fine-tuning."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Parameter, Tensor
from .beat_tokenizer import BeatSequence, load_tokens
from .errors import CheckpointMismatchError, FormatError

PROB_CLAMP = 1e-7

PRETRAIN = "pretrain"
CLASSIFY = "classify"


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    warmup_steps: int = 4000
    d_model: int = 1000
    batch_size: int = 128
    epochs: int = 50
    threshold: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie strictly in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_num: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            step_num=0,
        )


def lr_schedule(step_num: int, d_model: int = 1000, warmup_steps: int = 4000) -> float:
    """1/sqrt(d_model) * min(1/sqrt(step), step / warmup^1.5).

    The first branch is computed as 1/sqrt(d_model*step) so that round
    powers come out exact in floating point.
    """
    if step_num < 1:
        raise ValueError(f"step_num must be >= 1, got {step_num}")
    decay = 1.0 / math.sqrt(d_model * step_num)
    warm = step_num / (math.sqrt(d_model) * warmup_steps ** 1.5)
    return min(decay, warm)


def adam_step(params: dict, grads: dict | None, state: AdamState,
              cfg: OptimizerConfig) -> float:
    """One Adam update with bias correction; returns the learning rate used.

    grads=None reads each parameter's accumulated .grad. Only the
    parameters present in `params` are updated (frozen ones are simply
    not passed in).
    """
    t = state.step_num + 1
    lr = lr_schedule(t, cfg.d_model, cfg.warmup_steps)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter {name}")
        g = np.asarray(g, dtype=p.data.dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    state.step_num = t
    return lr


def mse_loss(pred: Tensor, target, target_mask) -> Tensor:
    """Mean squared error over unmasked positions, all dims pooled.

    target_mask is true at supervised positions ([S] or [B, S]).
    """
    mask = np.asarray(target_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("target_mask leaves no supervised positions")
    d = pred.shape[-1]
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    diff = ad.sub(pred, tgt)
    masked = ad.mul(ad.mul(diff, diff),
                    mask.astype(pred.data.dtype)[..., None])
    return ad.mul(ad.sum_(masked), 1.0 / (count * d))


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Binary cross entropy, mean over classes (and batch when batched)."""
    y = np.asarray(labels, dtype=probs.data.dtype)
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} != probs shape {probs.shape}")
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(ad.log(p), y)
    neg = ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y)
    return ad.mul(ad.mean(ad.add(pos, neg)), -1.0)


def make_pretrain_pairs(seq: BeatSequence):
    """Teacher-forced next-beat pair for one sequence.

    Returns (inputs, targets, target_mask) where inputs hold tokens
    0..n_real-2 (rest zero), targets[i] = token i+1 on the supervised
    prefix, and target_mask marks exactly those n_real-1 positions.
    Sequences with fewer than two real beats cannot supervise anything;
    returns None as the skip signal.
    """
    n = seq.n_real
    if n < 2:
        return None
    inputs = seq.tokens.copy()
    inputs[n - 1 :] = 0.0
    targets = np.zeros_like(seq.tokens)
    targets[: n - 1] = seq.tokens[1:n]
    target_mask = np.zeros(seq.tokens.shape[0], dtype=bool)
    target_mask[: n - 1] = True
    return inputs, targets, target_mask


def threshold_predict(probs, threshold: float = 0.5) -> np.ndarray:
    """Multi-hot vector: class positive iff probability strictly exceeds threshold."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (arr > threshold).astype(np.int8)


def forward_batches(params: dict, config: tf.ModelConfig, sequences: list,
                    batch_size: int = 32) -> np.ndarray:
    """Inference-mode forward over a list of BeatSequences, stacked outputs."""
    outs = []
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo : lo + batch_size]
        tokens = np.stack([s.tokens for s in chunk])
        n_real = np.array([s.n_real for s in chunk])
        outs.append(tf.forward(tokens, n_real, config, params, training=False).data)
    return np.concatenate(outs, axis=0)


def evaluate(params: dict, config: tf.ModelConfig, dataset: list,
             threshold: float = 0.5, batch_size: int = 32) -> dict:
    """Classification metrics over (BeatSequence, multi-hot labels) pairs.

    Macro-F1 averages only classes that appear in predictions or labels;
    with no such class it is reported as 0.0.
    """
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    sequences = [s for s, _ in dataset]
    labels = np.stack([np.asarray(y, dtype=np.int8) for _, y in dataset])
    probs = forward_batches(params, config, sequences, batch_size)
    preds = (probs > threshold).astype(np.int8)

    tp = ((preds == 1) & (labels == 1)).sum(axis=0).astype(np.float64)
    fp = ((preds == 1) & (labels == 0)).sum(axis=0).astype(np.float64)
    fn = ((preds == 0) & (labels == 1)).sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    seen = (tp + fp + fn) > 0
    macro_f1 = float(f1[seen].mean()) if seen.any() else 0.0
    tp_all, fp_all, fn_all = tp.sum(), fp.sum(), fn.sum()
    micro_p = tp_all / (tp_all + fp_all) if tp_all + fp_all > 0 else 0.0
    micro_r = tp_all / (tp_all + fn_all) if tp_all + fn_all > 0 else 0.0
    micro_f1 = (2 * micro_p * micro_r / (micro_p + micro_r)
                if micro_p + micro_r > 0 else 0.0)
    exact = float(np.all(preds == labels, axis=1).mean())
    mean_bce = float(bce_loss(Tensor(probs.astype(np.float64)),
                              labels.astype(np.float64)).item())
    return {
        "per_class": [
            {"class": int(c), "precision": float(precision[c]),
             "recall": float(recall[c]), "f1": float(f1[c]),
             "support": int(tp[c] + fn[c])}
            for c in range(labels.shape[1])
        ],
        "macro_f1": macro_f1,
        "micro_f1": float(micro_f1),
        "exact_match": exact,
        "mean_bce": mean_bce,
        "n_samples": len(dataset),
        "threshold": threshold,
    }


def load_manifest(path: str) -> list:
    """Manifest lines: cache path, tab, comma-separated class indices.

    Paths are taken relative to the manifest's directory. The index field
    may be empty (unlabeled record).
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cache, _, idx_field = line.partition("\t")
            cache = cache.strip()
            if not cache:
                raise FormatError(f"{path}:{lineno}: empty cache path")
            try:
                indices = ({int(tok) for tok in idx_field.split(",") if tok.strip()}
                           if idx_field.strip() else None)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad class index list "
                                  f"{idx_field!r}") from exc
            full = cache if os.path.isabs(cache) else os.path.join(base, cache)
            entries.append((full, indices))
    return entries


def multi_hot(indices, d_class: int) -> np.ndarray:
    out = np.zeros(d_class, dtype=np.int8)
    for i in indices:
        if not 0 <= i < d_class:
            raise ValueError(f"class index {i} outside 0..{d_class - 1}")
        out[i] = 1
    return out


def load_dataset(manifest_path: str, d_class: int | None = None,
                 require_labels: bool = False) -> list:
    """List of (BeatSequence, multi-hot or None) from a manifest file."""
    out = []
    for cache, indices in load_manifest(manifest_path):
        seq = load_tokens(cache)
        if indices is None:
            if require_labels:
                raise FormatError(f"{cache}: record has no labels but labels are required")
            out.append((seq, None))
        else:
            out.append((seq, multi_hot(indices, d_class)))
    if not out:
        raise FormatError(f"{manifest_path}: empty manifest")
    return out


def _config_text(mcfg: tf.ModelConfig, ocfg: OptimizerConfig) -> str:
    lines = [f"model.{f.name}={getattr(mcfg, f.name)!r}" for f in fields(mcfg)]
    lines += [f"optim.{f.name}={getattr(ocfg, f.name)!r}" for f in fields(ocfg)]
    return "\n".join(sorted(lines))


def _config_from_text(text: str):
    import ast

    model_kwargs, optim_kwargs = {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        section, _, name = key.strip().partition(".")
        parsed = ast.literal_eval(value.strip())
        if section == "model":
            model_kwargs[name] = parsed
        elif section == "optim":
            optim_kwargs[name] = parsed
        else:
            raise FormatError(f"unknown config section in checkpoint: {key!r}")
    return tf.ModelConfig(**model_kwargs), OptimizerConfig(**optim_kwargs)


def save_training_checkpoint(path: str, params: dict, state: AdamState,
                             mcfg: tf.ModelConfig, ocfg: OptimizerConfig,
                             epoch: int):
    entries = {name: p.data for name, p in params.items()}
    for name in state.m:
        entries[f"opt.m.{name}"] = state.m[name]
        entries[f"opt.v.{name}"] = state.v[name]
    entries["opt.step"] = np.array([state.step_num], dtype=np.float32)
    entries["meta.epoch"] = np.array([epoch], dtype=np.float32)
    ad.save_checkpoint(path, entries, _config_text(mcfg, ocfg))


def load_training_checkpoint(path: str):
    """Returns (model cfg, optim cfg, param arrays, AdamState, epoch)."""
    config_text, entries = ad.load_checkpoint(path)
    mcfg, ocfg = _config_from_text(config_text)
    params = {}
    state = AdamState()
    epoch = 0
    for name, arr in entries.items():
        if name.startswith("opt.m."):
            state.m[name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            state.v[name[len("opt.v.") :]] = arr
        elif name == "opt.step":
            state.step_num = int(arr[0])
        elif name == "meta.epoch":
            epoch = int(arr[0])
        else:
            params[name] = arr
    return mcfg, ocfg, params, state, epoch


def _batch_iter(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        yield order[lo : lo + batch_size]


def train(manifest, model_config: tf.ModelConfig, optim_config: OptimizerConfig,
          mode: str, seed: int, out_dir: str,
          resume: str | None = None,
          init_checkpoint: str | None = None,
          freeze_trunk: bool = False,
          max_steps: int | None = None,
          checkpoint_name: str = "model.ckpt",
          log_name: str = "train_log.ndjson") -> dict:
    """Run one training job and leave a checkpoint plus an ndjson log.

    manifest: path to a manifest file, or a preloaded list of
    (BeatSequence, multi-hot/None) pairs. mode selects the head:
    "pretrain" trains the generative next-beat objective with masked MSE,
    "classify" trains the sigmoid multi-label head with BCE.
    resume continues an interrupted run (configs must match exactly);
    init_checkpoint transfers a pre-trained trunk under a fresh head.
    max_steps stops mid-run after that many optimizer steps (checkpoint
    still written).
    """
    if mode not in (PRETRAIN, CLASSIFY):
        raise ValueError(f"unknown training mode {mode!r}")
    if resume and init_checkpoint:
        raise ValueError("resume and init_checkpoint are mutually exclusive")
    config = model_config.with_head(
        tf.GENERATIVE if mode == PRETRAIN else tf.CLASSIFIER)

    if isinstance(manifest, str):
        dataset = load_dataset(manifest, config.d_class,
                               require_labels=(mode == CLASSIFY))
    else:
        dataset = list(manifest)
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    width = dataset[0][0].d_model
    if width != config.d_model:
        raise CheckpointMismatchError(
            f"token caches have d_model={width} but the model is configured "
            f"with d_model={config.d_model}")

    if mode == PRETRAIN:
        samples = []
        skipped = 0
        for seq, _ in dataset:
            pair = make_pretrain_pairs(seq)
            if pair is None:
                skipped += 1
                continue
            samples.append(pair)
        if not samples:
            raise ValueError("no sequence has >= 2 beats; nothing to pre-train on")
    else:
        samples = [(seq.tokens, seq.n_real, y) for seq, y in dataset]
        skipped = 0

    start_epoch = 1
    if resume:
        ck_m, ck_o, arrays, state, epoch_done = load_training_checkpoint(resume)
        diff = tf.config_diff(ck_m, config) + _optim_diff(ck_o, optim_config)
        if diff:
            raise CheckpointMismatchError(
                "checkpoint does not match the requested configuration:\n  "
                + "\n  ".join(diff))
        params = tf.params_from_arrays(arrays, config)
        start_epoch = epoch_done + 1
    elif init_checkpoint:
        ck_m, _, arrays, _, _ = load_training_checkpoint(init_checkpoint)
        diff = tf.trunk_compatible(ck_m, config)
        if diff:
            raise CheckpointMismatchError(
                "checkpoint trunk does not match the requested configuration:\n  "
                + "\n  ".join(diff))
        params = tf.init_params(config, seed)
        for name, p in params.items():
            if not name.startswith("head."):
                if name not in arrays:
                    raise CheckpointMismatchError(f"checkpoint is missing {name}")
                p.data = np.asarray(arrays[name], dtype=p.data.dtype).copy()
        state = AdamState.for_params(_trainable(params, freeze_trunk))
    else:
        params = tf.init_params(config, seed)
        state = AdamState.for_params(_trainable(params, freeze_trunk))

    trainable = _trainable(params, freeze_trunk)
    if freeze_trunk:
        for name, p in params.items():
            if name not in trainable:
                p.requires_grad = False
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, checkpoint_name)
    log_path = os.path.join(out_dir, log_name)
    log_mode = "a" if resume else "w"

    last_loss = None
    stop = False
    with open(log_path, log_mode, encoding="utf-8") as log:
        if optim_config.epochs == 0 or start_epoch > optim_config.epochs:
            save_training_checkpoint(ckpt_path, params, state, config,
                                     optim_config, start_epoch - 1)
        for epoch in range(start_epoch, optim_config.epochs + 1):
            order = ad.seeded_rng(seed, "shuffle", epoch).permutation(len(samples))
            for batch_idx in _batch_iter(order, optim_config.batch_size):
                t0 = time.monotonic()
                step = state.step_num + 1
                rng = ad.RngStream(seed, "dropout", step)
                loss = _batch_loss(samples, batch_idx, mode, config, params,
                                   rng)
                ad.zero_grads(trainable.values())
                loss.backward()
                lr = adam_step(trainable, None, state, optim_config)
                last_loss = float(loss.item())
                log.write(json.dumps({
                    "epoch": epoch, "step": state.step_num, "lr": lr,
                    "loss": last_loss, "mode": mode, "seed": seed,
                    "wall_ms": round(1000 * (time.monotonic() - t0), 3),
                }) + "\n")
                if max_steps is not None and state.step_num >= max_steps:
                    stop = True
                    break
            save_training_checkpoint(ckpt_path, params, state, config,
                                     optim_config, epoch)
            if stop:
                break

    return {
        "checkpoint": ckpt_path,
        "log": log_path,
        "steps": state.step_num,
        "final_loss": last_loss,
        "mode": mode,
        "skipped_sequences": skipped,
    }


def _trainable(params: dict, freeze_trunk: bool) -> dict:
    if not freeze_trunk:
        return params
    head = {n: p for n, p in params.items() if n.startswith("head.")}
    if not head:
        raise ValueError("freeze_trunk leaves nothing to train")
    return head


def _optim_diff(a: OptimizerConfig, b: OptimizerConfig) -> list:
    # epochs is the run-length target, not a trajectory parameter; a resumed
    # run may extend it
    return [f"optim.{f.name}: {getattr(a, f.name)!r} != {getattr(b, f.name)!r}"
            for f in fields(OptimizerConfig)
            if f.name != "epochs" and getattr(a, f.name) != getattr(b, f.name)]


def _batch_loss(samples: list, batch_idx: np.ndarray, mode: str,
                config: tf.ModelConfig, params: dict,
                rng: ad.RngStream) -> Tensor:
    if mode == PRETRAIN:
        inputs = np.stack([samples[i][0] for i in batch_idx])
        targets = np.stack([samples[i][1] for i in batch_idx])
        masks = np.stack([samples[i][2] for i in batch_idx])
        n_real = masks.sum(axis=1).astype(np.int64)
        out = tf.forward(inputs, n_real, config, params, training=True, rng=rng)
        return mse_loss(out, targets.astype(inputs.dtype), masks)
    tokens = np.stack([samples[i][0] for i in batch_idx])
    n_real = np.array([samples[i][1] for i in batch_idx], dtype=np.int64)
    labels = np.stack([samples[i][2] for i in batch_idx])
    probs = tf.forward(tokens, n_real, config, params, training=True, rng=rng)
    return bce_loss(probs, labels.astype(tokens.dtype))
