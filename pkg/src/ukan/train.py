"""Training, evaluation, and generation drivers.

Determinism contract: a fixed (config, seed) pair reproduces bit-identical
metric logs and checkpoints in single-threaded mode. Randomness is derived
from the seed: model init uses one stream, each epoch derives its own stream
(seed, epoch), so resuming from a checkpoint at epoch k replays exactly the
same remaining epochs as an uninterrupted run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import (
    CheckpointError, load_checkpoint, rng_state_to_meta, save_checkpoint,
)
from .config import TrainConfig, config_from_meta, config_to_meta, render_config
from .data import (
    DatasetManifest, SegDataset, augment, build_manifest, epoch_batches,
    load_manifest, save_image,
)
from .diffusion import ddpm_sample, diffusion_loss, linear_schedule
from .losses import seg_loss
from .metrics import SegMetrics, binarize
from .model import DiffusionUkan, Ukan
from .optim import Adam, cosine_lr
from .tensor import Tensor, clear_graph, count_flops, no_grad


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message records the offending epoch/step."""


@dataclass
class TrainResult:
    epochs_run: int
    log_rows: list
    best_metric: float
    best_path: str
    last_path: str


def _model_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([101, seed])


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([202, seed, epoch])


def build_model(cfg: TrainConfig, rng=None):
    rng = rng if rng is not None else _model_rng(cfg.seed)
    mc = cfg.model_config()
    return Ukan(mc, rng=rng) if cfg.task == "segment" else DiffusionUkan(mc, rng=rng)


def resolve_manifest(cfg: TrainConfig) -> DatasetManifest:
    """Use an existing `manifest.tsv` under the data dir, else build one
    deterministically from (data_dir, split_ratio, seed)."""
    if not cfg.data_dir:
        raise ValueError("data_dir is not set")
    existing = Path(cfg.data_dir) / "manifest.tsv"
    if existing.exists():
        return load_manifest(existing)
    return build_manifest(cfg.data_dir, split_ratio=cfg.split_ratio, seed=cfg.seed)


def _stack_batch(ds: SegDataset, idxs, cfg: TrainConfig, rng, training: bool):
    images, masks = [], []
    for i in idxs:
        s = ds[int(i)]
        if training and cfg.augment:
            s = augment(s, rng, rotate=cfg.rotation_enabled(),
                        rotation_mode=cfg.rotation_mode)
        images.append(s.image)
        if s.mask is not None:
            masks.append(s.mask)
    x = np.stack(images)
    if cfg.task == "diffuse":
        x = 2.0 * x - 1.0
    mask = np.stack(masks) if len(masks) == len(images) else None
    return x, mask


def evaluate_model(model, ds: SegDataset, batch_size: int = 8) -> SegMetrics:
    """Eval-mode forward over a split; per-image IoU/F1 at threshold 0.5."""
    was_training = model.training
    model.eval()
    metrics = SegMetrics()
    try:
        with no_grad():
            for start in range(0, len(ds), batch_size):
                idxs = range(start, min(start + batch_size, len(ds)))
                samples = [ds[i] for i in idxs]
                x = np.stack([s.image for s in samples])
                logits = model(Tensor(x)).data
                for s, lg in zip(samples, logits):
                    if s.mask is None:
                        raise ValueError(f"sample {s.id} has no mask to score")
                    metrics.add(binarize(lg[0]), s.mask[0].astype(bool))
    finally:
        model.train(was_training)
    return metrics


_LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_iou", "val_f1")


def _write_log(path, rows) -> None:
    lines = ["\t".join(_LOG_COLUMNS)]
    for row in rows:
        lines.append("\t".join(
            repr(row[c]) if isinstance(row[c], float) else str(row[c])
            for c in _LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_log(path) -> list:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        cells = line.split("\t")
        row = dict(zip(_LOG_COLUMNS, cells))
        row["epoch"] = int(row["epoch"])
        for key in ("lr", "train_loss", "val_iou", "val_f1"):
            row[key] = float(row[key]) if row[key] != "None" else None
        rows.append(row)
    return rows


def _save_state(path, model, optimizer, cfg, epoch, best_metric, rng) -> None:
    arrays = model.state_arrays()
    arrays.update(optimizer.state_arrays())
    meta = {
        "kind": "ukan-checkpoint",
        "config": config_to_meta(cfg),
        "epoch": epoch,
        "best_metric": best_metric,
        "adam_t": optimizer.t,
        "rng_state": rng_state_to_meta(rng),
    }
    save_checkpoint(path, arrays, meta)


def _load_state(path, model, optimizer, cfg):
    meta, arrays = load_checkpoint(path)
    saved = meta.get("config", {})
    current = config_to_meta(cfg)
    skip = {"out_dir", "data_dir"}
    diffs = [k for k in current
             if k not in skip and saved.get(k) != current[k]]
    if diffs:
        raise CheckpointError(f"checkpoint/config mismatch on keys: {diffs}")
    model_keys = set(model.state_arrays())
    model.load_state_arrays({k: v for k, v in arrays.items() if k in model_keys})
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, meta["adam_t"])
    return meta


def train(cfg: TrainConfig, resume=None, stop_after=None) -> TrainResult:
    """Run the full training loop; returns paths of best/last checkpoints.

    Training batches that would hit a single image are skipped (batch norm
    needs two); `resume` continues bit-exactly from a saved checkpoint, and
    `stop_after` interrupts the run after that many epochs (the learning-rate
    schedule still spans the configured total, so a resumed run replays the
    uninterrupted trajectory exactly).
    """
    cfg.validate()
    T.set_default_dtype(cfg.precision)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")

    manifest = resolve_manifest(cfg)
    manifest.save(out / "manifest.tsv")
    train_ds = SegDataset(manifest, "train", cfg.image_size, cfg.in_channels)
    val_ds = SegDataset(manifest, "val", cfg.image_size, cfg.in_channels)
    if not len(train_ds):
        raise ValueError("training split is empty")

    model = build_model(cfg)
    optimizer = Adam(model.named_parameters(), lr=cfg.lr,
                     betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    schedule = (linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
                if cfg.task == "diffuse" else None)

    start_epoch = 0
    best_metric = -math.inf
    log_rows = []
    if resume is not None:
        meta = _load_state(resume, model, optimizer, cfg)
        start_epoch = meta["epoch"] + 1
        best_metric = meta["best_metric"]
        old_log = out / "metrics.tsv"
        if old_log.exists():
            log_rows = [r for r in _read_log(old_log) if r["epoch"] < start_epoch]

    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    total = cfg.resolved_epochs()
    stop_at = total if stop_after is None else min(total, start_epoch + stop_after)
    epoch = start_epoch - 1
    for epoch in range(start_epoch, stop_at):
        lr = cosine_lr(epoch, total, cfg.lr, cfg.lr_min)
        erng = _epoch_rng(cfg.seed, epoch)
        model.train()
        losses = []
        for step, idxs in enumerate(
                epoch_batches(len(train_ds), cfg.batch_size, erng)):
            if len(idxs) == 1:
                continue
            x, mask = _stack_batch(train_ds, idxs, cfg, erng, training=True)
            if cfg.task == "segment":
                if mask is None:
                    raise ValueError("segmentation training needs masks")
                loss = seg_loss(model(Tensor(x)), Tensor(mask),
                                bce_weight=cfg.bce_weight,
                                dice_weight=cfg.dice_weight, mode=cfg.loss_mode)
            else:
                loss = diffusion_loss(model, x, schedule, erng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value!r} at epoch {epoch} step {step}")
            loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad()
            clear_graph()
            losses.append(value)
        if not losses:
            raise ValueError(
                f"epoch {epoch} processed no batches: {len(train_ds)} training "
                f"images at batch_size {cfg.batch_size} leave only singleton "
                f"batches (batch norm needs >= 2 images)")
        train_loss = float(np.mean(losses))

        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
               "val_iou": None, "val_f1": None}
        metric = -train_loss
        if (cfg.task == "segment" and len(val_ds)
                and (epoch % cfg.eval_every == 0 or epoch == total - 1)):
            m = evaluate_model(model, val_ds, batch_size=cfg.batch_size)
            row["val_iou"], row["val_f1"] = m.iou, m.f1
            metric = m.iou
        log_rows.append(row)

        _save_state(last_path, model, optimizer, cfg, epoch, best_metric, erng)
        if metric > best_metric:
            best_metric = metric
            _save_state(best_path, model, optimizer, cfg, epoch, best_metric, erng)
        _write_log(out / "metrics.tsv", log_rows)

    return TrainResult(epochs_run=max(epoch - start_epoch + 1, 0),
                       log_rows=log_rows, best_metric=best_metric,
                       best_path=str(best_path), last_path=str(last_path))


def load_model_for_inference(ckpt_path, data_dir=None):
    """Rebuild the architecture recorded in a checkpoint and load its state."""
    meta, arrays = load_checkpoint(ckpt_path)
    cfg = config_from_meta(meta["config"])
    if data_dir:
        from dataclasses import replace
        cfg = replace(cfg, data_dir=str(data_dir))
    T.set_default_dtype(cfg.precision)
    model = build_model(cfg)
    model_keys = set(model.state_arrays())
    missing = model_keys - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint is missing model tensors: "
                              f"{sorted(missing)[:4]}...")
    model.load_state_arrays({k: v for k, v in arrays.items() if k in model_keys})
    return model, cfg


def evaluate(ckpt_path, split: str = "val", data_dir=None) -> SegMetrics:
    model, cfg = load_model_for_inference(ckpt_path, data_dir)
    if cfg.task != "segment":
        raise ValueError("evaluate needs a segmentation checkpoint")
    manifest = resolve_manifest(cfg)
    ds = SegDataset(manifest, split, cfg.image_size, cfg.in_channels)
    if not len(ds):
        raise ValueError(f"split {split!r} is empty")
    return evaluate_model(model, ds, batch_size=cfg.batch_size)


def generate(ckpt_path, n: int, seed: int, out_dir, batch_size: int = 256) -> list:
    """Sample n images from a diffusion checkpoint; writes zero-padded
    `00000.png`-style files and returns their paths."""
    model, cfg = load_model_for_inference(ckpt_path)
    if cfg.task != "diffuse":
        raise ValueError("generate needs a diffusion checkpoint")
    schedule = linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    samples = ddpm_sample(model, schedule, n, shape, seed, batch_size=batch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(samples):
        path = out / f"{i:05d}.png"
        save_image(path, (img + 1.0) / 2.0)
        paths.append(str(path))
    return paths


def inspect(cfg: TrainConfig) -> dict:
    """Parameter count and one-forward FLOPs at the configured image size."""
    cfg.validate()
    T.set_default_dtype(cfg.precision)
    model = build_model(cfg)
    model.eval()
    x = Tensor(np.zeros((1, cfg.in_channels, cfg.image_size, cfg.image_size)))
    with no_grad(), count_flops() as counter:
        if cfg.task == "diffuse":
            model(x, np.array([1]))
        else:
            model(x)
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], 0)
        groups[name.split(".")[0]] += p.size
    return {"params": model.param_count(), "flops": counter.total,
            "input": (cfg.in_channels, cfg.image_size, cfg.image_size),
            "param_groups": groups}
