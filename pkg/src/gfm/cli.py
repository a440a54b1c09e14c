"""Command-line pipeline: synth -> sample -> filter -> pack -> pretrain ->
finetune -> eval, plus sweep and plot.

Every stage reads its inputs from and writes its outputs under the run
directory (``--out`` or ``output_dir`` in the config), and records a result
manifest in ``<out>/manifests/<command>.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigError, GfmError, StageError
from .finetune import (REGIMES, SegHeadConfig, SegmentationModel, SegTrainConfig, infer_seg,
                       run_data_efficiency_sweep, train_segmentation, write_sweep_csv)
from .mae import (MaeConfig, MaskedAutoencoder, masked_mse_eval, pretrain, random_plans, token_pixel_mask,
                  unpatchify)
from .metrics import ConfusionMatrix, accumulate, masked_rmse_mae, ssim, summarize
from .nn import LrSchedule, load_checkpoint, save_checkpoint
from .plot import plot_csv
from .quality import FilterPolicy, filter_tiles, read_index, write_index
from .raster import (BandStats, compute_band_stats, generate_synthetic_tile, read_chip, read_quality_mask,
                     standardize_array, unstandardize, write_chip, write_label_map, write_quality_mask)
from .sampler import assign_groups, read_grid, read_sample, stratified_sample, synthetic_grid, write_grid
from .sampler import write_sample
from .store import BatchLoader, ChunkStore, LoaderConfig, pack
from .synthetic import vegetation_labels

logger = logging.getLogger("gfm")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

# artifact name -> (relative path, stage that produces it)
ARTIFACTS = {
    "grid": ("grid.csv", "synth"),
    "tiles": ("tiles", "synth"),
    "sample": ("sample.txt", "sample"),
    "index": ("index.jsonl", "filter"),
    "stats": ("stats.json", "pack"),
    "store": ("store", "pack"),
    "pretrain": ("pretrain", "pretrain"),
    "finetune": ("finetune", "finetune"),
    "metrics": ("eval/metrics.json", "eval"),
}


# ---------------------------------------------------------------------------
# logging

class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec, sort_keys=True)


def setup_logging(stream=None):
    level = os.environ.get("GFM_LOG", "INFO").upper()
    if level.isdigit():
        level = int(level)
    elif not isinstance(logging.getLevelName(level), int):
        level = "INFO"
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("gfm")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


# ---------------------------------------------------------------------------
# run context

class Run:
    """Resolved config plus helpers for locating and hashing artifacts."""

    def __init__(self, cfg: dict, workers: int, command: str):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.workers = workers
        self.command = command
        self.seed = cfg["seed"]
        self.inputs = []
        self.outputs = []

    def path(self, name):
        return self.out / ARTIFACTS[name][0]

    def need(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            stage = ARTIFACTS[name][1]
            raise StageError(stage, f"'{self.command}' needs {p}, which the '{stage}' stage produces; "
                                    f"run `gfm {stage}` first")
        self.inputs.append(p)
        return p

    def produced(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def write_manifest(self, wall):
        doc = {
            "command": self.command,
            "config_hash": config_mod.run_hash(self.cfg),
            "seed": self.seed,
            "inputs": {str(p.relative_to(self.out)): _hash_path(p) for p in self.inputs},
            "inputs_hash": _hash_many(self.inputs),
            "outputs": sorted(str(p.relative_to(self.out)) for p in self.outputs),
            "wall_time_s": round(wall, 3),
        }
        d = self.out / "manifests"
        d.mkdir(parents=True, exist_ok=True)
        _dump(doc, d / f"{self.command}.json")


def _hash_path(p: Path) -> str:
    h = hashlib.sha256()
    files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _hash_many(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(_hash_path(p).encode())
    return h.hexdigest()


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _tile_files(run: Run, code: str):
    d = run.path("tiles")
    return d / f"{code}.chip", sorted(d.glob(f"{code}.t*.mask"))


# ---------------------------------------------------------------------------
# stages

def cmd_synth(run: Run):
    c = run.cfg["synth"]
    grid = synthetic_grid(c["n_tiles"], run.seed)
    tiles = run.path("tiles")
    tiles.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([run.seed, 11])
    fractions = rng.uniform(0.0, c["cloud_fraction_max"], c["n_tiles"])
    for s, frac in enumerate(fractions):
        chip, masks = generate_synthetic_tile(s, c["tile_size"], c["timesteps"], float(frac))
        code = chip.origin.tile.tile_code
        write_chip(chip, tiles / f"{code}.chip")
        for k, m in enumerate(masks):
            write_quality_mask(m, tiles / f"{code}.t{k}.mask")
    write_grid(grid, run.path("grid"))
    run.produced(run.path("grid"), tiles)
    logger.info("wrote %d synthetic tiles", c["n_tiles"])


def cmd_sample(run: Run):
    c = run.cfg["sampler"]
    grid = read_grid(run.need("grid"))
    assignment = assign_groups(grid, c["g1"], c["g2"])
    chosen = stratified_sample(assignment, c["budget"], run.seed)
    write_sample(chosen, run.path("sample"))
    run.produced(run.path("sample"))
    logger.info("sampled %d of %d tiles", len(chosen), len(grid.tiles))


def cmd_filter(run: Run):
    c = run.cfg["filter"]
    codes = read_sample(run.need("sample"))
    run.need("tiles")
    tile_masks = {}
    for code in codes:
        _, mask_files = _tile_files(run, code)
        if not mask_files:
            raise StageError("synth", f"no quality masks for tile {code}; rerun `gfm synth`")
        tile_masks[code] = [read_quality_mask(p) for p in mask_files]
    policy = FilterPolicy((c["window"], c["window"]), c["bad_fraction_threshold"],
                          timesteps_required=c["timesteps_required"])
    entries = filter_tiles(tile_masks, policy, workers=run.workers)
    write_index(entries, run.path("index"))
    run.produced(run.path("index"))
    logger.info("indexed %d clean windows from %d tiles", len(entries), len(codes))


def cmd_pack(run: Run):
    entries = read_index(run.need("index"))
    run.need("tiles")
    if not entries:
        raise GfmError("the quality filter kept no windows; relax /filter or add tiles")
    codes = sorted({e.tile_code for e in entries})
    chips = {}
    for code in codes:
        chip_file, mask_files = _tile_files(run, code)
        chips[code] = read_chip(chip_file)
    # statistics over every clear pixel of the sampled tiles
    stat_chips, stat_masks = [], []
    for code in codes:
        chip = chips[code]
        for t, mf in enumerate(_tile_files(run, code)[1]):
            stat_chips.append(chip.window(0, 0, chip.data.shape[3], chip.data.shape[2],
                                          timestamps=[chip.timestamps[t]]))
            stat_masks.append([read_quality_mask(mf)])
    stats = compute_band_stats(stat_chips, stat_masks)
    _dump(stats.to_dict(), run.path("stats"))
    pack(entries, chips, stats, run.path("store"), run.cfg["store"]["chunk_samples"])
    run.produced(run.path("stats"), run.path("store"))


def _mae_config(run: Run, store: ChunkStore) -> MaeConfig:
    m = run.cfg["model"]
    return MaeConfig(input_size=tuple(store.sample_shape), patch=tuple(m["patch"]), embed_dim=m["embed_dim"],
                     depth=m["depth"], num_heads=m["num_heads"], decoder_dim=m["decoder_dim"],
                     decoder_depth=m["decoder_depth"], decoder_heads=m["decoder_heads"],
                     mlp_ratio=m["mlp_ratio"], mask_ratio=m["mask_ratio"])


def cmd_pretrain(run: Run):
    c = run.cfg["train"]
    store = ChunkStore(run.need("store"))
    cfg = _mae_config(run, store)
    model = MaskedAutoencoder(cfg, seed=run.seed)
    bs = min(c["batch_size"], len(store))
    loader = BatchLoader(store, LoaderConfig(bs, workers=run.workers, seed=run.seed), standardize=True)
    schedule = LrSchedule(c["lr"], c["steps"], c["warmup_fraction"])
    losses = pretrain(model, lambda epoch: (b for b, _ in loader.batches(epoch)), schedule, seed=run.seed,
                      weight_decay=c["weight_decay"], log_every=max(1, schedule.total_steps // 10))
    out = run.path("pretrain")
    save_checkpoint(model.params, out, schedule=schedule.__dict__, extra={"model": cfg.to_dict()})
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    run.produced(out / "ckpt.json", out / "ckpt.bin", out / "loss.csv")
    logger.info("pretrained %d steps, loss %.4f -> %.4f", len(losses), losses[0], losses[-1])


def _seg_data(run: Run, store: ChunkStore):
    """Standardized samples, vegetation labels, and the train/test index split."""
    raw = np.stack([store.read_array(i) for i in range(len(store))])
    x = standardize_array(raw, store.manifest.stats)
    y = vegetation_labels(raw, threshold=run.cfg["finetune"]["ndvi_threshold"])
    n = len(store)
    n_test = max(1, int(round(run.cfg["finetune"]["test_fraction"] * n)))
    if n - n_test < 1:
        raise GfmError(f"{n} samples cannot be split into train and test sets")
    order = np.random.default_rng([run.seed, 23]).permutation(n)
    return raw, x, y, np.sort(order[n_test:]), np.sort(order[:n_test])


def _seg_model(run: Run, store: ChunkStore, seed: int, regime: str) -> SegmentationModel:
    f = run.cfg["finetune"]
    mae = MaskedAutoencoder(_mae_config(run, store), seed=seed)
    if REGIMES[regime].encoder_init == "pretrained":
        load_checkpoint(mae.params, run.need("pretrain"), prefix="encoder.")
    return SegmentationModel(mae, SegHeadConfig(2, tuple(f["neck_channels"]), f["loss"]), seed=seed)


def cmd_finetune(run: Run):
    f = run.cfg["finetune"]
    store = ChunkStore(run.need("store"))
    _, x, y, train, test = _seg_data(run, store)
    model = _seg_model(run, store, run.seed, f["regime"])
    tcfg = SegTrainConfig(f["epochs"], min(f["batch_size"], len(train)), f["lr"], f["weight_decay"], run.seed,
                          f["encoder_lr_scale"])
    history = train_segmentation(model, REGIMES[f["regime"]], x[train], y[train], tcfg, val=(x[test], y[test]),
                                 on_epoch=lambda r: logger.info("epoch %d loss %.4f miou %.4f",
                                                                r["epoch"], r["loss"], r["miou"]))
    out = run.path("finetune")
    save_checkpoint(model.params, out, extra={"regime": f["regime"], "model": model.mae.cfg.to_dict(),
                                              "train": train.tolist(), "test": test.tolist()})
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "miou"])
        for r in history:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["miou"])])
    run.produced(out / "ckpt.json", out / "ckpt.bin", out / "history.csv")


def cmd_eval(run: Run):
    store = ChunkStore(run.need("store"))
    ft_dir = run.need("finetune")
    pre_dir = run.need("pretrain")
    raw, x, y, _, test = _seg_data(run, store)
    model = _seg_model(run, store, run.seed, "random")
    load_checkpoint(model.params, ft_dir)
    pred = infer_seg(x[test], model, run.cfg["eval"]["batch_size"])
    cm = accumulate(ConfusionMatrix(2), pred, y[test])

    # masked reconstruction quality of the pretrained autoencoder on the same split
    mae = MaskedAutoencoder(model.mae.cfg, seed=run.seed)
    load_checkpoint(mae.params, pre_dir)
    cfg = mae.cfg
    stats = store.manifest.stats
    rng = np.random.default_rng([run.seed, 31])
    visible, mask = random_plans(len(test), cfg.n_tokens, cfg.mask_ratio, rng)
    recon, _ = mae.forward(x[test], visible)
    img = unstandardize(unpatchify(recon, cfg.patch, cfg.input_size), stats)
    pix = token_pixel_mask(mask, cfg.patch, cfg.input_size)
    target = raw[test].astype(np.float64)
    rmse, mae_err = masked_rmse_mae(img, target, pix)
    filled = np.where(pix, img, target)
    s = float(np.mean([ssim(a, b) for a, b in zip(filled, target)]))

    report = summarize(cm, rmse=rmse, mae=mae_err, ssim=s, sample_count=int(len(test)),
                       config_hash=config_mod.run_hash(run.cfg), class_names=["other", "vegetation"])
    d = run.out / "eval"
    (d / "pred").mkdir(parents=True, exist_ok=True)
    report.write_json(d / "metrics.json")
    report.write_csv(d / "metrics.csv")
    for i, p in zip(test.tolist(), pred):
        write_label_map(p.astype(np.uint8), d / "pred" / f"{i:05d}.labels", store.read_sample(i).origin)
    run.produced(d / "metrics.json", d / "metrics.csv", d / "pred")
    logger.info("mIoU %.4f, masked RMSE %.2f", report.miou, rmse)
    logger.debug("held-out masked MSE (standardized) %.5f", masked_mse_eval(mae, x[test], run.seed))


def cmd_sweep(run: Run):
    f = run.cfg["finetune"]
    sw = run.cfg["sweep"]
    store = ChunkStore(run.need("store"))
    _, x, y, train, test = _seg_data(run, store)

    def run_fn(idx, seed):
        model = _seg_model(run, store, seed, f["regime"])
        sel = train[idx]
        tcfg = SegTrainConfig(sw["epochs"], min(f["batch_size"], len(sel)), f["lr"], f["weight_decay"], seed,
                              f["encoder_lr_scale"])
        train_segmentation(model, REGIMES[f["regime"]], x[sel], y[sel], tcfg)
        pred = infer_seg(x[test], model)
        return {"miou": summarize(accumulate(ConfusionMatrix(2), pred, y[test])).miou}

    rows, summary = run_data_efficiency_sweep(len(train), sw["fractions"], sw["seeds"], run_fn, run.workers)
    d = run.out / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, d / "sweep.csv")
    _dump({f"{fr}/{m}": {"mean": v[0], "std": v[1]} for (fr, m), v in sorted(summary.items())},
          d / "summary.json")
    run.produced(d / "sweep.csv", d / "summary.json")


KNOWN_LOGS = (("pretrain/loss.csv", "pretrain_loss"), ("finetune/history.csv", "finetune_history"),
              ("sweep/sweep.csv", "sweep"))


def cmd_plot(run: Run, csv_files=(), svg=None):
    plots = run.out / "plots"
    jobs = []
    if csv_files:
        if svg and len(csv_files) != 1:
            raise ConfigError("--svg needs exactly one CSV input", "")
        for p in csv_files:
            p = Path(p)
            if not p.exists():
                raise GfmError(f"no such CSV file: {p}")
            jobs.append((p, Path(svg) if svg else plots / f"{p.stem}.svg"))
    else:
        for rel, name in KNOWN_LOGS:
            if (run.out / rel).exists():
                jobs.append((run.out / rel, plots / f"{name}.svg"))
        if not jobs:
            raise StageError("pretrain", f"no training logs under {run.out} to plot")
    for src, dst in jobs:
        run.inputs.append(src)
        run.produced(plot_csv(src, dst))


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic tiles, quality masks and a climate grid"),
    "sample": (cmd_sample, "stratified tile sample from the climate grid"),
    "filter": (cmd_filter, "index clean windows of the sampled tiles"),
    "pack": (cmd_pack, "compute band statistics and pack indexed windows into a chunk store"),
    "pretrain": (cmd_pretrain, "masked-autoencoder pretraining on the store"),
    "finetune": (cmd_finetune, "fine-tune a segmentation head on the store"),
    "eval": (cmd_eval, "evaluate segmentation and reconstruction on the held-out split"),
    "sweep": (cmd_sweep, "data-efficiency sweep over training fractions"),
    "plot": (cmd_plot, "render SVG charts from CSV logs"),
}
PIPELINE = ("synth", "sample", "filter", "pack", "pretrain", "finetune", "eval")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker pool size (default: available CPUs)")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    parser = argparse.ArgumentParser(prog="gfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "plot":
            p.add_argument("csv", nargs="*", help="CSV files (default: every known log in the run)")
            p.add_argument("--svg", help="output path when plotting a single CSV")
    p = sub.add_parser("all", parents=[common], help="run " + " -> ".join(PIPELINE))
    return parser


def run_command(name, cfg, workers, **kw):
    run = Run(cfg, workers, name)
    run.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    logger.info("stage %s start", name)
    COMMANDS[name][0](run, **kw)
    run.write_manifest(time.perf_counter() - t0)
    logger.info("stage %s done", name)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging()
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1", "")
        cfg = config_mod.load_config(args.config, args.seed, args.out)
        if args.command == "all":
            for name in PIPELINE:
                run_command(name, cfg, args.workers)
        elif args.command == "plot":
            run_command("plot", cfg, args.workers, csv_files=args.csv, svg=args.svg)
        else:
            run_command(args.command, cfg, args.workers)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        print(f"gfm {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GfmError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"gfm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
