"""Command line entry point: ``glimpse-iqa {train,eval,visualize,gradcheck,synth}``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import THREADS_ENV, ConfigError, RunConfig, load_config, with_seed
from .data import (DatasetError, DatasetIndex, load_index_csv, load_tid2008, make_synthetic_dataset,
                   read_image, split_by_reference, to_arrays, write_dataset)
from .evaluation import evaluate, predict
from .gradcheck import gradcheck
from .imgproc import local_contrast_normalize
from .net import CheckpointError, init_params, load_checkpoint, param_diff, save_checkpoint
from .train import METRIC_COLUMNS, TrainingError, fit, format_metrics_row
from .visualize import scanpath_svg

log = logging.getLogger("glimpse_iqa")


class CommandError(RuntimeError):
    pass


def load_dataset(cfg: RunConfig) -> DatasetIndex:
    d = cfg.data
    if d.source == "synthetic":
        return make_synthetic_dataset(d.n_refs, d.size, d.kinds, d.levels, d.synth_seed)
    if d.source == "tid2008":
        return load_tid2008(d.root)
    return load_index_csv(d.root)


def prepare_splits(cfg: RunConfig, index: DatasetIndex):
    parts = split_by_reference(index, cfg.data.split_ratios, cfg.data.split_seed)
    return tuple(to_arrays(p, cfg.data.lcn_window, cfg.data.lcn_eps) for p in parts)


def _atomic_checkpoint(path: Path, params, model_config, meta) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(tmp, params, model_config, meta)
    os.replace(tmp, path)


def cmd_train(config_path, out_dir=None, seed=None) -> Path:
    """Train, writing ``metrics.csv``, ``best.ckpt`` and ``last.ckpt``."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    index = load_dataset(cfg)
    train, val, test = prepare_splits(cfg, index)
    model_config = cfg.model_config(index.n_classes)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

        def on_epoch(row):
            writer.writerow(format_metrics_row(row))
            fh.flush()
            log.info("epoch %d loss %.4f reward %.3f acc %.3f val_srocc %s", row["epoch"],
                     row["mean_loss"], row["mean_reward"], row["train_acc"], row["val_srocc"])

        result = fit(train, val, model_config, cfg.train, on_epoch=on_epoch)
    meta = {"class_names": index.class_names, "split_seed": cfg.data.split_seed,
            "seed": cfg.train.seed}
    _atomic_checkpoint(out / "best.ckpt", result.best_params, model_config,
                       {**meta, "epoch": result.best_epoch})
    _atomic_checkpoint(out / "last.ckpt", result.last_params, model_config,
                       {**meta, "epoch": cfg.train.epochs - 1})
    return out


def cmd_eval(checkpoint, config_path, out_dir=None):
    """Evaluate a checkpoint on the configured test split and write reports."""
    cfg = load_config(config_path)
    params, ck_config, meta = load_checkpoint(checkpoint)
    index = load_dataset(cfg)
    model_config = cfg.model_config(index.n_classes)
    expected = init_params(model_config, np.random.default_rng(0))
    diff = param_diff(expected, params)
    if diff:
        raise CommandError("checkpoint does not match config:\n  " + "\n  ".join(diff))
    _, _, test = prepare_splits(cfg, index)
    report = evaluate(params, model_config, test, index.class_names)
    out = Path(out_dir or Path(checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    (out / "confusion.csv").write_text(report.confusion_csv())
    return report, out


def cmd_visualize(checkpoint, image_path, out_svg, config_path=None) -> np.ndarray:
    """Render the deterministic scanpath; returns the ``(T, 2)`` fixations."""
    params, model_config, meta = load_checkpoint(checkpoint)
    window, eps = 7, 1e-4
    if config_path is not None:
        cfg = load_config(config_path)
        window, eps = cfg.data.lcn_window, cfg.data.lcn_eps
    gray = read_image(image_path)
    _, _, locs = predict(params, model_config, local_contrast_normalize(gray, window, eps)[None])
    svg = scanpath_svg(gray, locs[0], model_config.scales, title=Path(image_path).name)
    Path(out_svg).write_text(svg)
    return locs[0]


def cmd_gradcheck(config_path=None):
    train_config = None
    if config_path is not None:
        from dataclasses import replace
        train_config = replace(load_config(config_path).train, alpha_rein=0.0)
    return gradcheck(train_config=train_config)


def cmd_synth(config_path, out_dir) -> Path:
    cfg = load_config(config_path)
    if cfg.data.source != "synthetic":
        raise CommandError("synth needs [data] source = synthetic")
    return write_dataset(load_dataset(cfg), out_dir)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glimpse-iqa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out")
    v = sub.add_parser("visualize", help="render a scanpath as SVG")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config")
    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--config")
    s = sub.add_parser("synth", help="write the synthetic dataset to disk")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    return p


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            if args.command == "train":
                out = cmd_train(args.config, args.out, args.seed)
                print(f"wrote {out / 'metrics.csv'}, {out / 'best.ckpt'}, {out / 'last.ckpt'}")
            elif args.command == "eval":
                report, out = cmd_eval(args.checkpoint, args.config, args.out)
                print(report.summary(), end="")
            elif args.command == "visualize":
                cmd_visualize(args.checkpoint, args.image, args.out, args.config)
                print(f"wrote {args.out}")
            elif args.command == "gradcheck":
                report = cmd_gradcheck(args.config)
                print(report.table())
                return 0 if report.passed else 1
            elif args.command == "synth":
                print(f"wrote {cmd_synth(args.config, args.out)}")
    except (ConfigError, DatasetError, CheckpointError, CommandError, TrainingError, OSError) as exc:
        msg = str(exc).splitlines()
        print(f"error: {msg[0] if msg else type(exc).__name__}", file=sys.stderr)
        for line in msg[1:]:
            print(line, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
