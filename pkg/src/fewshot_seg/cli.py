"""Command-line interface: ``fewshot-seg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .data import Episode, SyntheticDataset, sample_episodes
from .evaluation import compute_miou, render_overlay
from .io import read_json, read_mask, read_ppm, write_json, write_pgm
from .models import load_checkpoint
from .srofb import CLI_MODES, segment_episode
from .validation import ConfigError

log = logging.getLogger("fewshot_seg")


def _folds(args, config):
    return [args.fold] if args.fold is not None else list(config.folds)


def _train_overrides(train, args):
    sgd = train.sgd
    if args.lr is not None:
        sgd = replace(sgd, learning_rate=args.lr)
    changes = {"sgd": sgd}
    if args.iters is not None:
        changes["total_iterations"] = args.iters
    if args.batch_pairs is not None:
        changes["pairs_per_batch"] = args.batch_pairs
    if args.batch_extra is not None:
        changes["extra_images_per_batch"] = args.batch_extra
    if args.seed is not None:
        changes["seed"] = args.seed
    return replace(train, **changes)


def load_config(args):
    config = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
    if args.seed is not None:
        config.data = replace(config.data, seed=args.seed)
        config.eval = replace(config.eval, seed=args.seed)
    return config


def cmd_gen_data(args, config):
    index = pl.stage_gen_data(config, args.out_dir)
    print(f"wrote {len(index['test'])} test images and {sum(len(v) for v in index['train'].values())} "
          f"training images to {Path(args.out_dir) / 'data'}")


def cmd_train_baseline(args, config):
    config.baseline_train = _train_overrides(config.baseline_train, args)
    for f in _folds(args, config):
        res = pl.stage_train_baseline(config, args.out_dir, f)
        print(f"fold {f}: baseline loss {res.history[0]['total']:.4f} -> {res.history[-1]['total']:.4f} "
              f"({res.wall_clock:.1f}s)" if res.history else f"fold {f}: 0 iterations")


def cmd_segment_regions(args, config):
    if args.tau is not None:
        from .regions import SegConfig

        config.seg = SegConfig.from_contour_threshold(args.tau)
    for f in _folds(args, config):
        s = pl.stage_segment_regions(config, args.out_dir, f)
        print(f"fold {f}: {s['images']} images, {s['mean_regions']:.1f} background regions on average")


def cmd_build_prototypes(args, config):
    for f in _folds(args, config):
        hierarchies, corpus = pl.stage_build_prototypes(config, args.out_dir, f)
        sizes = {arm: h.level_sizes for arm, h in hierarchies.items()}
        print(f"fold {f}: {len(corpus.fg)} fg / {len(corpus.bg)} bg descriptors, levels {sizes}")


def cmd_pseudo_label(args, config):
    for f in _folds(args, config):
        out = pl.stage_pseudo_label(config, args.out_dir, f)
        print(f"fold {f}: pseudo labels for {len(next(iter(out.values())))} images, arms {sorted(out)}")


def cmd_train_spfl(args, config):
    config.spfl_train = _train_overrides(config.spfl_train, args)
    if args.gammas is not None:
        config.gamma = tuple(args.gammas)
    if args.seg_weight is not None:
        config.seg_weight = args.seg_weight
    arms = [args.arm] if args.arm else list(pl.SPFL_ARMS)
    for f in _folds(args, config):
        for arm in arms:
            res = pl.stage_train_spfl(config, args.out_dir, f, arm)
            print(f"fold {f} {arm}: loss {res.history[0]['total']:.4f} -> {res.history[-1]['total']:.4f} "
                  f"({res.wall_clock:.1f}s)" if res.history else f"fold {f} {arm}: 0 iterations")


def _refine_config(args, base):
    changes = {}
    for name, attr in (("tau_fg", "tau_fg"), ("tau_bg", "tau_bg")):
        if getattr(args, name, None) is not None:
            changes[attr] = getattr(args, name)
    if getattr(args, "iters", None) is not None:
        changes["iterations_1shot"] = changes["iterations_kshot"] = args.iters
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return replace(base, **changes)


def cmd_eval(args, config):
    ds = SyntheticDataset.load(Path(args.out_dir) / "data")
    mode = CLI_MODES[args.mode]
    refine = _refine_config(args, config.refine)
    t0 = time.perf_counter()
    reports = {}
    for f in _folds(args, config):
        ckpt = Path(args.checkpoint) if args.checkpoint else pl.fold_dir(args.out_dir, f) / args.arm
        if not (ckpt / "manifest.json").exists():
            raise ConfigError(f"missing checkpoint {ckpt}")
        encoder, _, manifest = load_checkpoint(ckpt)
        episodes = sample_episodes(ds, f, args.shots, args.episodes or config.eval.episodes_per_fold,
                                   config.eval.seed)
        cache = pl.FeatureCache(ds, f, {"arm": encoder})
        preds = cache.run("arm", episodes, mode, refine)
        rep = compute_miou(preds, [e.query_gt for e in episodes], [e.class_id for e in episodes],
                           ds.novel_classes(f), config_hash=manifest["config_hash"] + ":" + ds.config_hash,
                           seed=config.eval.seed)
        rep.extra = {"fold": f, "mode": mode, "k_shot": args.shots, "weights_hash": manifest["weights_hash"]}
        reports[f] = rep
        print(f"fold {f}: mIoU {100 * rep.mean_iou:.2f} over {rep.episodes} episodes ({mode})")
    mean = float(np.mean([r.mean_iou for r in reports.values()]))
    print(f"mean mIoU {100 * mean:.2f}")
    out = Path(args.out_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for f, rep in reports.items():
        rep.wall_clock = time.perf_counter() - t0
        write_json(out / f"eval_{args.arm}_{mode}_fold{f}.json", rep.to_dict())


def _load_episode(path):
    """Episode JSON: {"class_id", "supports": [{"image", "mask"}], "query": "<ppm>", "query_mask": optional}."""
    spec = read_json(path)
    root = Path(path).parent

    def p(x):
        return root / x

    sup_imgs = [read_ppm(p(s["image"])) for s in spec["supports"]]
    sup_masks = [read_mask(p(s["mask"])) for s in spec["supports"]]
    query = read_ppm(p(spec["query"]))
    gt = read_mask(p(spec["query_mask"])) if spec.get("query_mask") else np.zeros(query.shape[:2], bool)
    return Episode(int(spec.get("class_id", 0)), sup_imgs, sup_masks, query, gt), spec.get("query_mask")


def cmd_infer(args, config):
    encoder, _, _ = load_checkpoint(args.checkpoint)
    episode, has_gt = _load_episode(args.episode)
    refine = _refine_config(args, config.refine)
    mask = segment_episode(episode, encoder, refine, CLI_MODES[args.mode])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "prediction.pgm", mask.astype(np.uint8) * 255)
    if args.overlay:
        render_overlay(episode.query_image, mask, args.overlay)
    msg = f"foreground fraction {mask.mean():.3f}"
    if has_gt:
        rep = compute_miou([mask], [episode.query_gt], [episode.class_id])
        msg += f", IoU {rep.mean_iou:.4f}"
    print(msg)


def cmd_ablate(args, config):
    if args.episodes is not None:
        config.eval = replace(config.eval, episodes_per_fold=args.episodes)
    if args.fold is not None:
        config.folds = (args.fold,)
    if args.full:
        pl.run_pipeline(config, args.out_dir, args.threads)
    else:
        pl.run_ablation(config, args.out_dir, args.threads)
    print((Path(args.out_dir) / "reports" / "ablation.txt").read_text())


def build_parser():
    parser = argparse.ArgumentParser(prog="fewshot-seg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (partial; missing keys keep defaults)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default="runs/desk")
    common.add_argument("--threads", type=int, default=1, help="worker processes across folds")
    common.add_argument("--fold", type=int, default=None, help="restrict to one fold")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def train_flags(p):
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-pairs", type=int)
        p.add_argument("--batch-extra", type=int)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset").set_defaults(fn=cmd_gen_data)
    p = sub.add_parser("train-baseline", parents=[common], help="episodic segmentation training only")
    train_flags(p)
    p.set_defaults(fn=cmd_train_baseline)
    p = sub.add_parser("segment-regions", parents=[common], help="background region maps")
    p.add_argument("--tau", type=float, help="contour threshold (0.45 by default)")
    p.set_defaults(fn=cmd_segment_regions)
    sub.add_parser("build-prototypes", parents=[common]).set_defaults(fn=cmd_build_prototypes)
    sub.add_parser("pseudo-label", parents=[common]).set_defaults(fn=cmd_pseudo_label)
    p = sub.add_parser("train-spfl", parents=[common], help="joint training with pseudo-label losses")
    train_flags(p)
    p.add_argument("--gammas", type=float, nargs="+")
    p.add_argument("--seg-weight", type=float)
    p.add_argument("--arm", choices=pl.SPFL_ARMS)
    p.set_defaults(fn=cmd_train_spfl)

    def refine_flags(p):
        p.add_argument("--mode", choices=sorted(CLI_MODES), default="srofb-self")
        p.add_argument("--tau-fg", type=float)
        p.add_argument("--tau-bg", type=float)
        p.add_argument("--iters", type=int, help="classifier iterations")

    p = sub.add_parser("eval", parents=[common], help="mIoU of one encoder over seeded episodes")
    refine_flags(p)
    p.add_argument("--arm", choices=pl.ENCODER_ARMS, default="spfl_hierarchy")
    p.add_argument("--checkpoint")
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("infer", parents=[common], help="segment one episode described by JSON")
    refine_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--overlay", metavar="PATH", help="also write a PPM overlay of the prediction")
    p.set_defaults(fn=cmd_infer)
    p = sub.add_parser("ablate", parents=[common], help="arm x mode matrix, shots sweep and threshold grid")
    p.add_argument("--episodes", type=int, help="episodes per fold")
    p.add_argument("--full", action="store_true", help="run every stage first")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        args.fn(args, config)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
