"""Training loop: records -> preprocessing -> patches -> mini-batches.

Everything is deterministic given the RunConfig (seeds included); the CLI
wraps these functions, and test harnesses call them directly.
"""

import dataclasses
import time

import numpy as np

from .tensor import Tensor, recording, backward
from .model import build_model, multiscale_targets, total_loss, LossConfig
from .optim import Adam
from .data import clahe, gamma_adjust, hu_normalize, augment, DataError, \
    sample_patches_2d, sample_patches_3d, SampleSet
from .metrics import roc_auc, threshold_metrics, EvalReport
from .storage import read_manifest, load_tensor, load_pgm, save_checkpoint


class NumericFailure(Exception):
    """Training produced a non-finite loss."""


def preprocess_pixels(pixels, cfg):
    mode = cfg.resolved_preprocess()
    if mode == "none":
        return pixels
    if mode == "hu":
        return hu_normalize(pixels)
    if mode == "clahe_gamma":
        out = clahe(pixels, (cfg.clahe_tiles, cfg.clahe_tiles), cfg.clahe_clip)
        return gamma_adjust(out, cfg.gamma)
    raise DataError(f"unknown preprocess mode {mode}")


def load_records(cfg, manifest_path):
    """Manifest rows -> preprocessed ImageRecords."""
    from .data import ImageRecord
    rows = read_manifest(manifest_path)
    records = []
    for rid, px_path, mask_path in rows:
        if str(px_path).endswith(".pgm"):
            pixels = load_pgm(px_path)
        else:
            pixels = load_tensor(px_path)
        if cfg.resolved_preprocess() != "hu" and (
                pixels.data.min() < 0 or pixels.data.max() > 1):
            raise DataError(f"record {rid}: pixels outside [0,1] and no HU "
                            "normalization configured")
        pixels = preprocess_pixels(pixels, cfg)
        mask = load_tensor(mask_path) if mask_path else None
        records.append(ImageRecord(rid, pixels, mask))
    return records


def augmented_records(cfg, records):
    if cfg.spatial_rank != 2 or cfg.augment_copies <= 0:
        return list(records)
    out = list(records)
    for k in range(cfg.augment_copies):
        for i, rec in enumerate(records):
            aug = augment(rec, np.random.default_rng((cfg.seed, 1000 + k, i))
                          .integers(2 ** 63))
            out.append(dataclasses.replace(aug, id=f"{rec.id}~a{k}"))
    return out


def prepare_samples(cfg, records):
    """Sample patches and split off the held-out fraction."""
    if cfg.spatial_rank == 2:
        samples = sample_patches_2d(records, cfg.patches, cfg.patch_size,
                                    seed=cfg.seed)
    else:
        samples = sample_patches_3d(records, cfg.vessel_per_scan,
                                    cfg.background_per_scan, cfg.patch_size,
                                    seed=cfg.seed)
    n = len(samples)
    n_hold = int(round(n * cfg.holdout_fraction))
    order = np.random.default_rng((cfg.seed, 7)).permutation(n)
    train = SampleSet(samples.patch_shape)
    hold = SampleSet(samples.patch_shape)
    for j, idx in enumerate(order):
        s = samples[int(idx)]
        (hold if j < n_hold else train).append(s.patch, s.label, s.source_id,
                                               s.corner)
    return train, hold


def _batch_tensors(samples, idxs, dtype=np.float32):
    x = np.stack([samples[int(i)].patch for i in idxs]).astype(dtype, copy=False)
    y = np.stack([samples[int(i)].label for i in idxs]).astype(dtype, copy=False)
    return Tensor(np.ascontiguousarray(x)), Tensor(np.ascontiguousarray(y))


def train_model(cfg, train_set, log=None, checkpoint_dir=None):
    """Mini-batch Adam training; returns (model, loss_rows).

    loss_rows: (step, main, weighted aux2, weighted aux3, total) floats.
    """
    model = build_model(cfg.variant, cfg.spatial_rank, cfg.base_channels,
                        seed=cfg.seed, levels=cfg.levels)
    params = model.parameters()
    opt = None  # built after the first backward, over loss-reachable params
    if model.deep_supervision:
        loss_cfg = LossConfig(cfg.lambda2, cfg.lambda3)
    else:
        loss_cfg = LossConfig(0.0, 0.0)
    rng = np.random.default_rng((cfg.seed, 11))
    rows = []
    step = 0
    n = len(train_set)
    if n == 0:
        raise DataError("no training samples")
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idxs = order[lo:lo + cfg.batch_size]
            x, y = _batch_tensors(train_set, idxs)
            targets = multiscale_targets(y)
            with recording() as tape:
                outputs = model.forward(x, train=True)
                loss, parts = total_loss(outputs, targets, loss_cfg)
            total = loss.item()
            if not np.isfinite(total):
                raise NumericFailure(f"non-finite loss at step {step}")
            backward(loss, tape)
            if opt is None:
                # without deep supervision the auxiliary heads never reach
                # the loss; optimize only the parameters it touches
                trained = {k: p for k, p in params.items() if p.grad is not None}
                opt = Adam(trained, cfg.learning_rate)
            opt.step()
            opt.zero_grad()
            step += 1
            rows.append((step, parts[0].item(),
                         parts[1].item() if parts[1] is not None else 0.0,
                         parts[2].item() if parts[2] is not None else 0.0,
                         total))
        if log:
            recent = [r[4] for r in rows[-max(1, n // cfg.batch_size):]]
            log(f"epoch {epoch + 1}/{cfg.epochs}: mean total loss "
                f"{np.mean(recent):.4f} ({time.time() - t0:.0f}s)")
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir / f"checkpoint_epoch{epoch + 1}.pckpt",
                            model.variant, model.spatial_rank,
                            model.base_channels, model.state_tensors())
    return model, rows


def predict_samples(model, sample_set, batch_size):
    """Main-head probabilities for every patch, batched, eval mode."""
    probs = np.empty((len(sample_set), 1) + sample_set.patch_shape,
                     dtype=np.float32)
    for lo in range(0, len(sample_set), batch_size):
        idxs = range(lo, min(lo + batch_size, len(sample_set)))
        x, _ = _batch_tensors(sample_set, idxs)
        probs[lo:lo + batch_size] = model.forward(x, train=False)[0].data
    return probs


def evaluate_samples(model, sample_set, cfg):
    """Pooled voxel-level report over a sample set."""
    probs = predict_samples(model, sample_set, cfg.batch_size)
    labels = np.stack([s.label for s in sample_set])
    tp, fp, tn, fn = threshold_metrics(probs, labels, cfg.threshold)
    try:
        auc = roc_auc(probs, labels)
    except ValueError:
        auc = None
    return EvalReport(tp, fp, tn, fn, auc, region="holdout")


def write_loss_log(rows, path):
    with open(path, "w") as f:
        f.write("step,main,aux2,aux3,total\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]:.6f},{r[2]:.6f},{r[3]:.6f},{r[4]:.6f}\n")
