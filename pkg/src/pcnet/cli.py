"""Command-line entry point.

Subcommands: synth | train | predict | evaluate | count.
Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numeric failure (non-finite loss).
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, ConfigError
from .data import synth_vessels, DataError
from .model import build_model, predict_full, VARIANTS
from .metrics import evaluate_region, remove_small_components, roc_points, CSV_FIELDS
from .storage import (FormatError, save_tensor, load_tensor, load_pgm,
                      write_manifest, read_manifest, save_checkpoint,
                      load_checkpoint)
from .train import (NumericFailure, load_records, augmented_records,
                    prepare_samples, train_model, evaluate_samples,
                    preprocess_pixels, write_loss_log)
from . import figures

LADDER = ("UNetNoDS", "UNet", "UNetSE", "UNetPSE", "UNetCF", "PCNet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="pcnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("synth", "generate a synthetic tubular dataset"),
            ("train", "train a model variant on a dataset manifest"),
            ("predict", "run whole-image inference from a checkpoint"),
            ("evaluate", "score predictions against ground truth"),
            ("count", "parameter/FLOP table over the ablation ladder")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run-config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--no-postfilter", action="store_true",
                        help="disable small-component removal in predict")
        sp.add_argument("--region", default=None,
                        help="region-mask manifest (id TAB pctn path)")
    return p


def _load_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------


def cmd_synth(cfg, out, log):
    rows = []
    fractions = []
    count = cfg.synth_images
    for i in range(count):
        seed = int(np.random.default_rng((cfg.seed, i)).integers(2 ** 63))
        rec = synth_vessels(cfg.spatial_rank, cfg.synth_extent,
                            n_branches=cfg.synth_branches,
                            width_range=(cfg.synth_width_min, cfg.synth_width_max),
                            noise_sigma=cfg.synth_noise, seed=seed,
                            n_trees=cfg.synth_trees,
                            record_id=f"rec{i:03d}")
        save_tensor(out / f"{rec.id}_pixels.pctn", rec.pixels)
        save_tensor(out / f"{rec.id}_mask.pctn", rec.mask)
        rows.append((rec.id, f"{rec.id}_pixels.pctn", f"{rec.id}_mask.pctn"))
        fractions.append(rec.mask.data.mean())
    write_manifest(out / "manifest.tsv", rows)
    if fractions:
        log(f"wrote {count} records to {out}; mean foreground fraction "
            f"{100 * float(np.mean(fractions)):.3f}%")
    else:
        log(f"wrote empty manifest to {out}")
    return 0


def cmd_train(cfg, out, log):
    if not cfg.manifest:
        raise ConfigError("manifest: path required for train")
    records = augmented_records(cfg, load_records(cfg, cfg.manifest))
    train_set, holdout = prepare_samples(cfg, records)
    log(f"training {cfg.variant} (rank {cfg.spatial_rank}, width "
        f"{cfg.base_channels}) on {len(train_set)} patches, "
        f"{len(holdout)} held out")
    model, rows = train_model(cfg, train_set, log=log, checkpoint_dir=out)
    save_checkpoint(out / "checkpoint.pckpt", model.variant, model.spatial_rank,
                    model.base_channels, model.state_tensors())
    write_loss_log(rows, out / "loss_log.csv")
    figures.plot_loss_curves(rows, out / "loss_curve.png",
                             title=f"{cfg.variant} training loss")
    if len(holdout):
        rep = evaluate_samples(model, holdout, cfg)
        (out / "train_summary.txt").write_text(rep.to_text())
        auc_txt = "undefined" if rep.auc is None else f"{rep.auc:.4f}"
        log(f"held-out dice {rep.dice:.4f} auc {auc_txt}")
    log(f"checkpoint written to {out / 'checkpoint.pckpt'}")
    return 0


def _load_image(path, cfg):
    path = str(path)
    pixels = load_pgm(path) if path.endswith(".pgm") else load_tensor(path)
    return preprocess_pixels(pixels, cfg)


def _restore_model(cfg):
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: path required for predict")
    meta, tensors = load_checkpoint(cfg.checkpoint)
    if meta["variant"] != cfg.variant:
        raise ConfigError(f"variant: checkpoint holds {meta['variant']}, "
                          f"config requests {cfg.variant}")
    if meta["spatial_rank"] != cfg.spatial_rank:
        raise ConfigError("spatial_rank: checkpoint/config mismatch")
    model = build_model(meta["variant"], meta["spatial_rank"],
                        meta["base_channels"], seed=cfg.seed, levels=cfg.levels)
    model.load_state(tensors)
    return model


def cmd_predict(cfg, out, log, no_postfilter=False):
    model = _restore_model(cfg)
    if cfg.image:
        targets = [(Path(cfg.image).stem, Path(cfg.image))]
    elif cfg.manifest:
        targets = [(rid, px) for rid, px, _ in read_manifest(cfg.manifest)]
    else:
        raise ConfigError("image: either image or manifest path required")
    postfilter = cfg.resolved_postfilter() and not no_postfilter
    for rid, path in targets:
        pixels = _load_image(path, cfg)
        prob = predict_full(model, pixels, patch=cfg.patch_size,
                            stride=cfg.stride, batch_size=cfg.batch_size)
        binary = (prob.data[0] >= cfg.threshold).astype(np.uint8)
        if postfilter:
            binary = remove_small_components(binary, cfg.min_component_size)
        save_tensor(out / f"{rid}_prob.pctn", prob)
        save_tensor(out / f"{rid}_mask.pctn", binary[None])
        log(f"{rid}: foreground {100 * binary.mean():.3f}%"
            + ("" if postfilter else " (postfilter off)"))
    return 0


def _read_region_manifest(path):
    regions = {}
    base = Path(path).parent
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{ln}: expected 'id<TAB>path'")
            rid, rpath = parts
            rp = Path(rpath)
            regions[rid] = rp if rp.is_absolute() else base / rp
    return regions


def cmd_evaluate(cfg, out, log, region_path=None):
    if not cfg.manifest:
        raise ConfigError("manifest: path required for evaluate")
    pred_dir = Path(cfg.predictions) if cfg.predictions else out
    rows = read_manifest(cfg.manifest)
    regions = _read_region_manifest(region_path) if region_path else {}
    reports = []
    curves = []
    for rid, _, mask_path in rows:
        if mask_path is None:
            raise DataError(f"record {rid}: no ground-truth mask in manifest")
        prob_path = pred_dir / f"{rid}_prob.pctn"
        if not prob_path.exists():
            raise DataError(f"record {rid}: missing prediction {prob_path}")
        prob = load_tensor(prob_path).data
        truth = load_tensor(mask_path).data
        rep = evaluate_region(prob, truth, threshold=cfg.threshold)
        reports.append((rid, rep))
        try:
            fpr, tpr = roc_points(prob, truth)
            curves.append((rid, fpr, tpr, rep.auc))
        except ValueError:
            pass
        if rid in regions:
            rmask = load_tensor(regions[rid]).data
            reports.append((rid, evaluate_region(prob, truth, rmask,
                                                 threshold=cfg.threshold,
                                                 region="subregion")))
    lines = [",".join(CSV_FIELDS)]
    text_blocks = []
    for region in ("all", "subregion"):
        group = [(rid, r) for rid, r in reports if r.region == region]
        if not group:
            continue
        for rid, r in group:
            lines.append(r.csv_row(rid))
            text_blocks.append(f"case: {rid}\n{r.to_text()}")
        means = []
        for field in ("auc", "acc", "sp", "se", "dice"):
            vals = [getattr(r, field) for _, r in group
                    if getattr(r, field) is not None]
            means.append(f"{np.mean(vals):.6f}" if vals else "undefined")
        lines.append(",".join(["mean", region] + means
                              + [str(sum(getattr(r, f) for _, r in group))
                                 for f in ("tp", "fp", "tn", "fn")]))
        log(f"[{region}] mean AUC {means[0]} Acc {means[1]} Sp {means[2]} "
            f"Se {means[3]} Dice {means[4]} over {len(group)} case(s)")
    (out / "reports.csv").write_text("\n".join(lines) + "\n")
    (out / "reports.txt").write_text("\n".join(text_blocks))
    if curves:
        figures.plot_roc_curves(curves, out / "roc_curves.png")
    return 0


def cmd_count(cfg, out, log):
    rows = []
    for variant in LADDER:
        model = build_model(variant, cfg.spatial_rank, cfg.base_channels,
                            seed=cfg.seed, levels=cfg.levels)
        rep = model.complexity((cfg.patch_size,) * cfg.spatial_rank)
        rows.append((variant, rep.parameter_count, rep.flops))
    lines = ["variant,parameters,flops,parameters_m,flops_g"]
    for name, params, flops in rows:
        lines.append(f"{name},{params},{flops},{params / 1e6:.3f},{flops / 1e9:.3f}")
        log(f"{name:<10} {params / 1e6:7.3f}M params  {flops / 1e9:8.3f} GFLOPs")
    (out / "complexity.csv").write_text("\n".join(lines) + "\n")
    figures.plot_complexity(rows, out / "complexity.png")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        out = _outdir(args)
        log = print
        if args.command == "synth":
            return cmd_synth(cfg, out, log)
        if args.command == "train":
            return cmd_train(cfg, out, log)
        if args.command == "predict":
            return cmd_predict(cfg, out, log, no_postfilter=args.no_postfilter)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, log, region_path=args.region)
        if args.command == "count":
            return cmd_count(cfg, out, log)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
