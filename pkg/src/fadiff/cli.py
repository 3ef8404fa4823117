"""Command-line entry point: make-data, train-expert, train-diffusion,
generate, evaluate and sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .checkpoint import Checkpoint, CheckpointError
from .data import (DatasetError, ImageDataset, export_dataset, load_image_folder,
                   synth_dataset)
from .evaluation import (EvalReport, EvaluationError, confusion, evaluate_images,
                         per_seed_csv, ssim_diversity)
from .experiment import evaluation_classes, markdown_report, seed_sweep, sweep_summary
from .expert import ExpertError, expert_checkpoint, load_expert, train_expert
from .fileio import atomic_write_text, sha256_file, write_json
from .sampler import SamplingError, initial_noise, read_generations, sample, write_generations
from .schedule import ScheduleError
from .ssim import SSIMError, to_unit_range
from .trainer import TrainingError, load_diffusion, train_diffusion
from .unet import UNetError

log = logging.getLogger("fadiff")

EXPECTED_ERRORS = (config_mod.ConfigError, CheckpointError, DatasetError, EvaluationError,
                   ExpertError, SamplingError, ScheduleError, SSIMError, TrainingError,
                   UNetError, FileNotFoundError, NotADirectoryError, PermissionError)

ARMS = {
    "baseline": ("baseline", "noisy"),
    "aligned-noisy": ("aligned", "noisy"),
    "aligned-clean": ("aligned", "clean"),
}


class CLIError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def _resolve_config(args) -> config_mod.RunConfig:
    path = getattr(args, "config", None)
    if path is not None and Path(path).suffix == ".json":
        # A run.json from an earlier command embeds the resolved config.
        raw = json.loads(Path(path).read_text())
        cfg = config_mod.from_dict(raw.get("config", raw))
    else:
        cfg = config_mod.load(path)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    return cfg


def _prepare_out(out: Optional[str]) -> Path:
    if out is None:
        raise CLIError("--out is required")
    out = Path(out)
    if not out.parent.exists():
        raise CLIError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _write_run(out: Path, command: str, cfg: config_mod.RunConfig, started: float,
               artifacts: Sequence[Path], extra: Optional[dict] = None) -> None:
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": {str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p):
                      sha256_file(p) for p in artifacts if Path(p).is_file()},
    }
    if extra:
        record.update(extra)
    write_json(out / "run.json", record)


def _load_dataset(data: Optional[str], cfg: config_mod.RunConfig) -> ImageDataset:
    if data:
        return load_image_folder(Path(data))
    return synth_dataset(cfg.dataset_spec())


def _parse_classes(values: Optional[List[str]], class_names: Sequence[str],
                   exclude: Sequence[str]) -> List[int]:
    if not values:
        return evaluation_classes(class_names, exclude)
    ids = []
    for v in values:
        if v in class_names:
            ids.append(class_names.index(v))
        elif v.lstrip("-").isdigit():
            c = int(v)
            if not 0 <= c < len(class_names):
                raise CLIError(f"class id {c} out of range [0, {len(class_names)})")
            ids.append(c)
        else:
            raise CLIError(f"unknown class {v!r}; known: {', '.join(class_names)}")
    return ids


def _seed_list(args, cfg: config_mod.RunConfig) -> List[int]:
    if getattr(args, "seed_list", None):
        return [int(s) for s in args.seed_list.split(",")]
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise CLIError("--seeds must be >= 1")
        return list(range(args.seeds))
    return list(cfg.eval.seeds)


# -- commands ------------------------------------------------------------------

def cmd_make_data(args) -> int:
    started = time.time()
    cfg = _resolve_config(args).validate()
    out = _prepare_out(args.out)
    spec = cfg.dataset_spec()
    ds = synth_dataset(spec)
    export_dataset(ds, out, spec)
    _write_run(out, "make-data", cfg, started, [out / "dataset.json"])
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {out}")
    return 0


def cmd_train_expert(args) -> int:
    started = time.time()
    cfg = _resolve_config(args).validate()
    out = _prepare_out(args.out)
    ds = _load_dataset(args.data, cfg)
    train_cfg = cfg.expert_train_config()
    expert, metrics = train_expert(ds, cfg.expert_config(ds.num_classes, ds.image_size),
                                   train_cfg, seed=cfg.seed)
    ckpt_path = out / "expert.ckpt"
    expert_checkpoint(expert, ds.class_names, train_cfg, metrics).save(ckpt_path)
    write_json(out / "metrics.json", {"train_loss": metrics.train_loss,
                                      "val_accuracy": metrics.val_accuracy})
    _write_run(out, "train-expert", cfg, started, [ckpt_path, out / "metrics.json"])
    print(f"expert validation accuracy {metrics.final_val_accuracy:.4f}; wrote {ckpt_path}")
    return 0


def cmd_train_diffusion(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    if args.mode:
        cfg.diffusion.mode = args.mode
    if args.align_target:
        cfg.align.target = args.align_target
    if args.w1 is not None:
        cfg.loss.w1 = args.w1
    if args.w2 is not None:
        cfg.loss.w2 = args.w2
    cfg.validate()
    out = _prepare_out(args.out)
    ds = _load_dataset(args.data, cfg)
    expert = None
    if cfg.diffusion.mode == "aligned":
        if not args.expert:
            raise CLIError("--expert is required with --mode aligned")
        expert = load_expert(Checkpoint.load(Path(args.expert)))
    artifacts = train_diffusion(ds, cfg.train_config(),
                                cfg.unet_config(ds.num_classes, ds.image_size), expert,
                                progress=True)
    ckpt_path, loss_path = artifacts.write(out)
    _write_run(out, "train-diffusion", cfg, started, [ckpt_path, loss_path],
               {"timestep_sha256": artifacts.checkpoint.meta["timestep_sha256"]})
    print(f"wrote {ckpt_path} ({len(artifacts.losses)} steps)")
    return 0


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    if args.count is not None:
        cfg.sample.count = args.count
    if args.num_steps is not None:
        cfg.sample.num_steps = args.num_steps
    out = _prepare_out(args.out)
    ckpt = Checkpoint.load(Path(args.checkpoint), kind="diffusion")
    unet, schedule = load_diffusion(ckpt)
    class_names = ckpt.meta["class_names"]
    class_ids = _parse_classes(args.class_, class_names, cfg.eval.exclude_classes)
    if cfg.sample.count < 1:
        raise CLIError("--count must be >= 1")
    cids = [c for c in class_ids for _ in range(cfg.sample.count)]
    idx = [i for _ in class_ids for i in range(cfg.sample.count)]
    shape = (unet.config.in_channels, unet.config.image_size, unet.config.image_size)
    artifacts = []
    if args.dump_noise:
        noise_path = out / "initial_noise.npy"
        np.save(noise_path, initial_noise(cfg.seed, cids, idx, shape).numpy())
        artifacts.append(noise_path)
    images = sample(unet, schedule, cids, cfg.seed, idx, cfg.sample.num_steps,
                    cfg.sample.batch_size)
    manifest = write_generations(out, images, cids, cfg.seed, idx, class_names,
                                 {"checkpoint_sha256": sha256_file(Path(args.checkpoint)),
                                  "num_steps": cfg.sample.num_steps or schedule.T})
    artifacts.append(manifest)
    _write_run(out, "generate", cfg, started, artifacts)
    print(f"wrote {len(cids)} images to {out}")
    return 0


def _original_summary(expert, ds: ImageDataset, sample_per_class: int, exclude, params) -> dict:
    """Expert accuracy and SSIM of real data (validation split), for reference."""
    val = ds.subset("val")
    cm = confusion(expert, val.images, val.labels, ds.class_names)
    keep = evaluation_classes(ds.class_names, exclude)
    groups = {}
    for c in keep:
        imgs = ds.images[ds.labels == c][:sample_per_class]
        groups[ds.class_names[c]] = to_unit_range(imgs)
    div = ssim_diversity(groups, params)
    return {"accuracy": cm.accuracy, "confusion": cm.counts.tolist(),
            "class_names": ds.class_names, "ssim_per_class": div.per_class,
            "ssim_overall": div.overall, "sample_per_class": sample_per_class,
            "split_for_accuracy": "val"}


def cmd_evaluate(args) -> int:
    started = time.time()
    cfg = _resolve_config(args)
    if args.sample_per_class is not None:
        cfg.eval.sample_per_class = args.sample_per_class
    out = _prepare_out(args.out)
    expert = load_expert(Checkpoint.load(Path(args.expert), kind="expert"))
    images, labels, files, class_names = read_generations(Path(args.images))
    seeds = sorted({e["seed"] for e in files})
    params = cfg.ssim_params()
    results = []
    for seed in seeds:
        mask = np.array([e["seed"] == seed for e in files])
        results.append(evaluate_images(expert, images[mask], labels[mask], class_names, seed,
                                       params))
    report = EvalReport(args.name, results, {"images": str(args.images)}, params)
    body = report.to_dict()
    if args.original:
        body["original"] = _original_summary(expert, load_image_folder(Path(args.original)),
                                             cfg.eval.sample_per_class,
                                             cfg.eval.exclude_classes, params)
    write_json(out / "eval_report.json", body)
    atomic_write_text(out / "per_seed.csv", per_seed_csv([report]))
    atomic_write_text(out / "confusion.csv", report.confusion.to_csv())
    _write_run(out, "evaluate", cfg, started,
               [out / "eval_report.json", out / "per_seed.csv", out / "confusion.csv"])
    print(f"{args.name}: mean accuracy {report.mean_accuracy:.4f} over {len(seeds)} seed(s), "
          f"SSIM {report.ssim_overall:.4f}")
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _resolve_config(args).validate()
    out = _prepare_out(args.out)
    seeds = _seed_list(args, cfg)
    arms = args.arms.split(",")
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise CLIError(f"unknown arm(s) {unknown}; choose from {', '.join(ARMS)}")

    if args.data:
        ds = load_image_folder(Path(args.data))
    else:
        data_dir = out / "data"
        if (data_dir / "dataset.json").exists():
            ds = load_image_folder(data_dir)
        else:
            spec = cfg.dataset_spec()
            export_dataset(synth_dataset(spec), data_dir, spec)
            ds = load_image_folder(data_dir)
    log.info("dataset: %d images, classes %s", len(ds), ds.class_names)

    if args.expert:
        expert_ckpt = Checkpoint.load(Path(args.expert), kind="expert")
    else:
        (out / "expert").mkdir(exist_ok=True)
        path = out / "expert" / "expert.ckpt"
        if path.exists():
            expert_ckpt = Checkpoint.load(path, kind="expert")
        else:
            train_cfg = cfg.expert_train_config()
            expert, metrics = train_expert(ds, cfg.expert_config(ds.num_classes, ds.image_size),
                                           train_cfg, seed=cfg.seed)
            expert_ckpt = expert_checkpoint(expert, ds.class_names, train_cfg, metrics)
            expert_ckpt.save(path)
    expert = load_expert(expert_ckpt)
    metrics = (expert_ckpt.meta.get("metrics") or {}).get("val_accuracy") or [None]
    expert_val = metrics[-1]
    log.info("expert validation accuracy %s", expert_val)

    checkpoints: Dict[str, Checkpoint] = {}
    (out / "models").mkdir(exist_ok=True)
    for arm in arms:
        mode, target = ARMS[arm]
        arm_dir = out / "models" / arm
        arm_dir.mkdir(exist_ok=True)
        ckpt_path = arm_dir / "diffusion.ckpt"
        cfg.diffusion.mode = mode
        cfg.align.target = target
        train_cfg = cfg.train_config(mode)
        if ckpt_path.exists():
            ckpt = Checkpoint.load(ckpt_path, kind="diffusion")
            if ckpt.meta.get("train_config") != train_cfg.to_dict():
                raise CLIError(f"{ckpt_path} was trained with a different config; "
                               f"remove it or use a fresh --out")
            log.info("reusing %s", ckpt_path)
        else:
            log.info("training %s", arm)
            artifacts = train_diffusion(ds, train_cfg,
                                        cfg.unet_config(ds.num_classes, ds.image_size),
                                        expert if mode == "aligned" else None, progress=True)
            artifacts.write(arm_dir)
            ckpt = artifacts.checkpoint
        checkpoints[arm] = ckpt

    params = cfg.ssim_params()
    reports = seed_sweep(checkpoints, seeds, expert, cfg.sample.count,
                         cfg.eval.exclude_classes, cfg.sample.num_steps, out / "images",
                         params, cfg.sample.batch_size)
    n_eval = len(evaluation_classes(ds.class_names, cfg.eval.exclude_classes))
    summary = sweep_summary(reports, 1.0 / n_eval, expert_val)
    summary["original"] = _original_summary(expert, ds, cfg.eval.sample_per_class,
                                            cfg.eval.exclude_classes, params)
    summary["timestep_sha256"] = {a: c.meta["timestep_sha256"] for a, c in checkpoints.items()}
    write_json(out / "eval_report.json", summary)
    atomic_write_text(out / "per_seed.csv", per_seed_csv(list(reports.values())))
    for name, rep in reports.items():
        atomic_write_text(out / f"confusion_{name}.csv", rep.confusion.to_csv())
    atomic_write_text(out / "report.md", markdown_report(summary))
    _write_run(out, "sweep", cfg, started,
               [out / "eval_report.json", out / "per_seed.csv", out / "report.md"]
               + [out / "models" / a / "diffusion.ckpt" for a in arms],
               {"seeds": seeds, "arms": arms})
    print(markdown_report(summary))
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config (or a run.json to replay)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fadiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[common], help="write the procedural dataset")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-expert", parents=[common], help="train the expert classifier")
    s.add_argument("--data", help="dataset folder (default: synthesise from config)")
    s.set_defaults(func=cmd_train_expert)

    s = sub.add_parser("train-diffusion", parents=[common], help="train a diffusion model")
    s.add_argument("--data", help="dataset folder (default: synthesise from config)")
    s.add_argument("--expert", help="expert checkpoint (required for aligned mode)")
    s.add_argument("--mode", choices=["baseline", "aligned"])
    s.add_argument("--align-target", choices=["noisy", "clean"])
    s.add_argument("--w1", type=float)
    s.add_argument("--w2", type=float)
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("generate", parents=[common], help="sample images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="class_", action="append",
                   help="class name or id (repeatable; default: all non-empty classes)")
    s.add_argument("--count", type=int)
    s.add_argument("--num-steps", type=int)
    s.add_argument("--dump-noise", action="store_true", help="also save x_T as initial_noise.npy")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="score generated PNGs with the expert")
    s.add_argument("--images", required=True, help="directory with manifest.json")
    s.add_argument("--expert", required=True)
    s.add_argument("--name", default="model")
    s.add_argument("--original", help="dataset folder for reference accuracy/SSIM")
    s.add_argument("--sample-per-class", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common],
                       help="train baseline/aligned arms and compare them over seeds")
    s.add_argument("--data", help="dataset folder (default: synthesise into <out>/data)")
    s.add_argument("--expert", help="expert checkpoint (default: train into <out>/expert)")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    s.add_argument("--seed-list", help="comma-separated generation seeds")
    s.add_argument("--arms", default="baseline,aligned-noisy,aligned-clean")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
