"""Batch pipeline: synth -> train binary -> annotate -> train multiclass -> siamese.

Every command works inside one run directory (``--out``)::

    data/manifest.csv              sequence name, seed, split
    data/<seq>/                    frames, ground-truth labels and motion
    flows/<seq>/<t1>_<t2>.flo      cached flow, frame_t1(p) ~ frame_t2(p + u)
    annotations/<seq>/labels/      automatic three-class labels
    checkpoints/<name>.ckpt        binary, multiclass, siamese, siamese-ft, siamese-augm1/2
    reports/<name>.csv             per-epoch loss and validation Dice
    eval/table.csv                 one row per variant
    bench/bench.csv                latency and throughput

Each command also writes ``config.toml`` (the resolved configuration) and
``provenance.txt`` (version, seed, command) beside its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, nnet
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .core import (ImageFormatError, Sequence, load_frame, load_mask, load_sequence,
                   save_mask)
from .evalmetrics import EvalResult, evaluate_pipeline, write_table
from .labelgen import annotate_sequence
from .morphology import background_segmentation
from .nnet import NumericalError
from .optflow import estimate_flow, load_flow, save_flow
from .synth import generate_sequence, save_synthetic
from .train import (cc_postprocess, infer, infer_batch, sample_pairs, train_binary,
                    train_multiclass, train_siamese)

log = logging.getLogger("angioseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGES = ("binary", "multiclass", "siamese", "finetune")
FINETUNE_NAMES = {"none": "siamese-ft", "augm1": "siamese-augm1", "augm2": "siamese-augm2"}

# variant -> (checkpoint or None for top-hat, apply CC)
VARIANTS = {
    "tophat": (None, False),
    "tophat+cc": (None, True),
    "unet": ("binary", False),
    "unet+cc": ("binary", True),
    "unet-mc": ("multiclass", False),
    "unet-mc+cc": ("multiclass", True),
    "siamese": ("siamese", False),
    "siamese+cc": ("siamese", True),
    "siamese-ft": ("siamese-ft", False),
    "siamese-augm1": ("siamese-augm1", False),
    "siamese-augm2": ("siamese-augm2", False),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run directory

class Workspace:
    def __init__(self, root, data=None):
        self.root = Path(root)
        self.data = Path(data) if data is not None else self.root / "data"
        self.flows = self.root / "flows"
        self.annotations = self.root / "annotations"
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    def require_checkpoint(self, name: str, hint: str) -> Path:
        path = self.checkpoint(name)
        if not path.is_file():
            raise DataError(f"missing upstream artifact {path} ({hint})")
        return path

    def manifest(self) -> list[dict]:
        path = self.data / "manifest.csv"
        if not path.is_file():
            raise DataError(f"missing dataset manifest {path} (run `synth` first)")
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))

    def split(self, name: str) -> list[str]:
        return [row["name"] for row in self.manifest() if row["split"] == name]

    def sequence(self, name: str) -> Sequence:
        try:
            return load_sequence(self.data / name)
        except (OSError, KeyError, ImageFormatError) as e:
            raise DataError(f"cannot read sequence {self.data / name}: {e}") from None

    def annotation(self, name: str, n: int) -> np.ndarray:
        d = self.annotations / name / "labels"
        if not d.is_dir():
            raise DataError(f"missing upstream artifact {d} (run `annotate` first)")
        return np.stack([load_mask(d / f"{t:05d}.png") for t in range(n)])


def write_provenance(directory, cfg: PipelineConfig, command: str, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.toml").write_text(dump_config(cfg))
    lines = [f"version {__version__}", f"command {command}", f"seed {cfg.seed}",
             f"deterministic {str(cfg.deterministic).lower()}"]
    lines += [f"{k} {v}" for k, v in (extra or {}).items()]
    (directory / "provenance.txt").write_text("\n".join(lines) + "\n")


class FlowCache:
    """Estimated flows stored as ``.flo`` files, computed on first use.

    Flows are always returned at the float32 precision of the file so a
    cache hit and a fresh computation give identical downstream results.
    """

    def __init__(self, root, cfg):
        self.root = Path(root)
        self.cfg = cfg
        self.loaded = 0
        self.computed = 0

    def get(self, seq: Sequence, t1: int, t2: int) -> np.ndarray:
        path = self.root / seq.name / f"{t1:05d}_{t2:05d}.flo"
        if path.is_file():
            self.loaded += 1
            return load_flow(path)
        u = estimate_flow(seq.frames[t1], seq.frames[t2], self.cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_flow(u, path)
        self.computed += 1
        return u.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# commands

def split_names(count: int, test: int, finetune: int) -> list[str]:
    """Split label per sequence: the last ``test`` are test, the ``finetune`` before them
    are finetune, the rest train."""
    n_test = min(test, count)
    n_ft = min(finetune, count - n_test)
    n_train = count - n_test - n_ft
    return ["train"] * n_train + ["finetune"] * n_ft + ["test"] * n_test


def sequence_seeds(root_seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(root_seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def cmd_synth(cfg: PipelineConfig, out, count: int | None = None) -> list[dict]:
    ws = Workspace(out)
    count = cfg.data.count if count is None else count
    if count < 0:
        raise UsageError("count must be >= 0")
    try:
        ws.data.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {ws.data}: {e}") from None
    rows = []
    splits = split_names(count, cfg.data.test, cfg.data.finetune)
    for i, (seed, split) in enumerate(zip(sequence_seeds(cfg.seed, count), splits)):
        name = f"seq_{i:05d}"
        seq, gt = generate_sequence(cfg.synth.with_(seed=seed))
        save_synthetic(Sequence(seq.frames, seq.labels, seq.frame_period, name), gt,
                       ws.data / name)
        rows.append({"name": name, "seed": seed, "split": split})
    with open(ws.data / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["name", "seed", "split"])
        w.writeheader()
        w.writerows(rows)
    write_provenance(ws.data, cfg, "synth", {"count": count})
    log.info("wrote %d sequences to %s", count, ws.data)
    return rows


def _binary_masks(params, seq: Sequence, cfg: PipelineConfig) -> np.ndarray:
    """Binary U-Net masks with small components removed."""
    m = cfg.morphology
    return np.stack([infer(params, f, cc=True, min_area=m.min_area,
                           connectivity=m.connectivity)[0] > 0 for f in seq.frames])


def cmd_annotate(cfg: PipelineConfig, out, data=None) -> dict:
    """Automatic labels for every sequence of the dataset; flows are cached."""
    ws = Workspace(out, data)
    lcfg = cfg.label_config()
    params = None
    if lcfg.mask_source == "refined":
        path = ws.require_checkpoint(
            "binary", "train the binary stage first or set labelgen.mask_source = \"raw\"")
        params = nnet.load_params(path)
    cache = FlowCache(ws.flows, cfg.flow)
    refs = {}
    rows = ws.manifest()
    for row in rows:
        seq = ws.sequence(row["name"])
        masks = None if params is None else _binary_masks(params, seq, cfg)
        labels, ref, _ = annotate_sequence(
            seq, lcfg, binary_masks=masks, flow_fn=lambda a, b: cache.get(seq, a, b))
        d = ws.annotations / seq.name
        (d / "labels").mkdir(parents=True, exist_ok=True)
        for t, lab in enumerate(labels):
            save_mask(lab, d / "labels" / f"{t:05d}.png")
        refs[seq.name] = ref
    ws.annotations.mkdir(parents=True, exist_ok=True)
    with open(ws.annotations / "references.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "reference", "rationale"])
        for name, ref in refs.items():
            w.writerow([name, ref.index, ref.rationale])
    log.info("flow cache: %d loaded, %d computed", cache.loaded, cache.computed)
    write_provenance(ws.annotations, cfg, "annotate",
                     {"mask_source": lcfg.mask_source, "flows_loaded": cache.loaded,
                      "flows_computed": cache.computed})
    return refs


def _split_data(ws: Workspace, split: str, annotated: bool):
    seqs = [ws.sequence(n) for n in ws.split(split)]
    if annotated:
        labels = [ws.annotation(s.name, len(s)) for s in seqs]
    else:
        labels = [s.labels for s in seqs]
    return seqs, labels


def _validation(ws: Workspace):
    seqs, labels = _split_data(ws, "finetune", annotated=False)
    if not seqs:
        return None
    return np.concatenate([s.frames for s in seqs]), np.concatenate(labels)


def cmd_train(cfg: PipelineConfig, out, stage: str, data=None, augmentation: str = "none"):
    """Train one stage and write its checkpoint and report."""
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    ws = Workspace(out, data)
    tcfg = cfg.train.stage_config(stage, cfg.seed, augmentation)
    net_cfg = cfg.net.unet()
    val = _validation(ws)
    init = None
    if stage == "binary":
        seqs, _ = _split_data(ws, "train", annotated=False)
        _require(seqs, "train")
        frames = np.concatenate([s.frames for s in seqs])
        masks = np.stack([background_segmentation(f, cfg.morphology) for f in frames])
        params, report = train_binary(frames, masks, tcfg, net_cfg, val=val)
        name = "binary"
    elif stage == "multiclass":
        if tcfg.warm_start:
            init = nnet.load_params(ws.require_checkpoint(
                "binary", "the multiclass stage warm-starts from the binary stage"))
        seqs, labels = _split_data(ws, "train", annotated=True)
        _require(seqs, "train")
        params, report = train_multiclass(np.concatenate([s.frames for s in seqs]),
                                          np.concatenate(labels), tcfg, net_cfg, init, val)
        name = "multiclass"
    elif stage == "siamese":
        if tcfg.warm_start:
            init = nnet.load_params(ws.require_checkpoint(
                "multiclass", "the siamese stage warm-starts from the multiclass stage"))
        seqs, labels = _split_data(ws, "train", annotated=True)
        _require(seqs, "train")
        cache = FlowCache(ws.flows, cfg.flow)
        pairs = sample_pairs(seqs, labels, lambda k, a, b: cache.get(seqs[k], a, b), tcfg,
                             cfg.train.max_pairs)
        log.info("flow cache: %d loaded, %d computed", cache.loaded, cache.computed)
        params, report = train_siamese(pairs, tcfg, net_cfg, init, val)
        name = "siamese"
    else:
        if augmentation not in FINETUNE_NAMES:
            raise UsageError(f"unknown augmentation policy {augmentation!r}")
        init = nnet.load_params(ws.require_checkpoint(
            "siamese", "fine-tuning starts from the siamese stage"))
        seqs, labels = _split_data(ws, "finetune", annotated=False)
        _require(seqs, "finetune")
        params, report = train_multiclass(np.concatenate([s.frames for s in seqs]),
                                          np.concatenate(labels), tcfg, net_cfg, init, None)
        report.stage = "finetune"
        name = FINETUNE_NAMES[augmentation]
    ws.checkpoints.mkdir(parents=True, exist_ok=True)
    nnet.save_params(params, ws.checkpoint(name))
    ws.reports.mkdir(parents=True, exist_ok=True)
    report.write_csv(ws.reports / f"{name}.csv")
    (ws.reports / f"{name}.txt").write_text(report.config_echo())
    write_provenance(ws.checkpoints, cfg, f"train {name}")
    log.info("%s: loss %.4f -> %.4f in %.1fs", name, report.initial_loss, report.final_loss,
             report.wall_clock)
    return params, report


def _require(seqs, split):
    if not seqs:
        raise DataError(f"the dataset has no {split!r} sequences")


def _predict(variant: str, frames, ckpt_params, cfg: PipelineConfig):
    source, cc = VARIANTS[variant]
    m = cfg.eval
    if source is None:
        return [background_segmentation(f, cfg.morphology, apply_cc=cc) for f in frames]
    params = ckpt_params[source]
    labels = infer_batch(params, frames) if frames[0].shape == (params.cfg.input_size,) * 2 \
        else np.stack([infer(params, f)[0] for f in frames])
    if cc:
        labels = np.stack([cc_postprocess(x, m.min_area, m.connectivity) for x in labels])
    if params.cfg.out_classes == 1:
        return [x > 0 for x in labels]
    return list(labels)


def cmd_eval(cfg: PipelineConfig, out, data=None, variants=None) -> dict[str, EvalResult]:
    ws = Workspace(out, data)
    variants = list(variants or cfg.eval.variants)
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    if not variants:
        variants = [v for v, (src, _) in VARIANTS.items()
                    if src is None or ws.checkpoint(src).is_file()]
    params = {}
    for v in variants:
        src = VARIANTS[v][0]
        if src is not None and src not in params:
            params[src] = nnet.load_params(ws.require_checkpoint(src, f"needed by {v!r}"))
    seqs, truths = _split_data(ws, "test", annotated=False)
    frames = [f for s in seqs for f in s.frames]
    truth = [t for ts in truths for t in ts]
    preds = {v: (_predict(v, frames, params, cfg) if frames else []) for v in variants}
    table = evaluate_pipeline(truth, preds)
    d = ws.root / "eval"
    d.mkdir(parents=True, exist_ok=True)
    write_table(table, d / "table.csv")
    write_provenance(d, cfg, "eval", {"test_frames": len(frames)})
    return table


def cmd_infer(cfg: PipelineConfig, checkpoint, inputs, out, cc: bool = False) -> int:
    """Label every frame of a sequence directory or a list of image files."""
    try:
        params = nnet.load_params(checkpoint)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {checkpoint}") from None
    files = []
    for p in map(Path, inputs):
        if p.is_dir():
            files += sorted((p / "frames" if (p / "frames").is_dir() else p).glob("*.png"))
        else:
            files.append(p)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        try:
            frame = load_frame(f)
        except (FileNotFoundError, ImageFormatError) as e:
            raise DataError(str(e)) from None
        labels, _ = infer(params, frame, cc=cc, min_area=cfg.eval.min_area,
                          connectivity=cfg.eval.connectivity)
        save_mask(labels, out / f.name)
    write_provenance(out, cfg, "infer", {"checkpoint": checkpoint, "frames": len(files)})
    return len(files)


def _latencies(params, frames, repetitions, warmup):
    for f in frames[:warmup]:
        nnet.unet_forward(params, f)
    samples = []
    for r in range(repetitions):
        for i, f in enumerate(frames):
            t0 = time.perf_counter()
            nnet.unet_forward(params, f)
            samples.append((r, i, (time.perf_counter() - t0) * 1e3))
    return samples


def _stats(ms):
    ms = np.asarray(ms)
    mean = float(ms.mean())
    return {"mean_ms": mean, "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)), "fps": 1000.0 / mean}


def cmd_bench(cfg: PipelineConfig, out, checkpoint=None, preset: str | None = None,
              frames: int | None = None, repetitions: int | None = None) -> dict:
    """Per-frame inference latency, single-threaded and with the default thread pool."""
    b = cfg.bench
    frames = b.frames if frames is None else frames
    repetitions = b.repetitions if repetitions is None else repetitions
    if frames < 1 or repetitions < 1:
        raise UsageError("frames and repetitions must be >= 1")
    if checkpoint is not None:
        try:
            params = nnet.load_params(checkpoint)
        except FileNotFoundError:
            raise DataError(f"missing checkpoint {checkpoint}") from None
        label = str(checkpoint)
    else:
        net = cfg.net if preset is None else cfg.net.__class__(preset=preset)
        params = nnet.init_params(net.unet(), cfg.seed)
        label = f"{net.preset} (random weights)"
    size = params.cfg.input_size
    rng = np.random.default_rng(cfg.seed)
    batch = rng.random((frames, size, size))
    modes = [("single", 1)]
    if not cfg.deterministic:
        modes.append(("multi", b.threads or None))
    d = Path(out) / "bench"
    d.mkdir(parents=True, exist_ok=True)
    report = {}
    with open(d / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "repetition", "frame", "latency_ms"])
        for mode, threads in modes:
            with threadpool_limits(threads):
                samples = _latencies(params, batch, repetitions, b.warmup)
            for r, i, ms in samples:
                w.writerow([mode, r, i, f"{ms:.4f}"])
            report[mode] = _stats([s[2] for s in samples]) | {"samples": len(samples)}
    fields = ["mode", "samples", "mean_ms", "median_ms", "p95_ms", "fps"]
    with open(d / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for mode, s in report.items():
            w.writerow([mode, s["samples"]] + [f"{s[k]:.4f}" for k in fields[2:]])
    c = params.cfg
    lines = [f"network {label}: {c.input_size}x{c.input_size}, {c.levels} levels, "
             f"base {c.base_features}, {len(params)} parameters",
             f"{frames} frames x {repetitions} repetitions after {b.warmup} warm-up frames"]
    for mode, s in report.items():
        lines.append(f"{mode:>6}: mean {s['mean_ms']:.2f} ms, median {s['median_ms']:.2f} ms, "
                     f"p95 {s['p95_ms']:.2f} ms, {s['fps']:.1f} fps")
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    write_provenance(d, cfg, "bench", {"checkpoint": label})
    return report


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for byte-identical reruns")
    common.add_argument("--out", default="run", help="run directory (default: run)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="angioseg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"angioseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int, help="number of sequences")

    s = sub.add_parser("annotate", parents=[common], help="automatic three-class labels")
    s.add_argument("--data", help="dataset directory (default: <out>/data)")
    s.add_argument("--mask-source", choices=["refined", "raw"])

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", required=True, choices=STAGES)
    s.add_argument("--data")
    s.add_argument("--augmentation", default="none", choices=list(FINETUNE_NAMES))
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("infer", parents=[common], help="label frames with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cc", action="store_true", help="remove small components")
    s.add_argument("inputs", nargs="+", help="PNG files or sequence directories")

    s = sub.add_parser("eval", parents=[common], help="Dice table on the test split")
    s.add_argument("--data")
    s.add_argument("--variants", nargs="*", choices=list(VARIANTS))

    s = sub.add_parser("bench", parents=[common], help="inference latency and throughput")
    s.add_argument("--checkpoint")
    s.add_argument("--preset", choices=["desk", "paper"])
    s.add_argument("--frames", type=int)
    s.add_argument("--repetitions", type=int)
    return p


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.deterministic:
        over["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        over["train"] = cfg.train.__class__(**{**vars(cfg.train), "epochs": args.epochs})
    if getattr(args, "mask_source", None):
        over["labelgen"] = cfg.labelgen.__class__(
            **{**vars(cfg.labelgen), "mask_source": args.mask_source})
    return cfg.with_(**over)


def run(args, cfg: PipelineConfig):
    cmd = args.command
    if cmd == "synth":
        cmd_synth(cfg, args.out, args.count)
    elif cmd == "annotate":
        cmd_annotate(cfg, args.out, args.data)
    elif cmd == "train":
        cmd_train(cfg, args.out, args.stage, args.data, args.augmentation)
    elif cmd == "infer":
        n = cmd_infer(cfg, args.checkpoint, args.inputs, args.out, args.cc)
        print(f"labelled {n} frames into {args.out}")
    elif cmd == "eval":
        table = cmd_eval(cfg, args.out, args.data, args.variants)
        for name, r in table.items():
            print(f"{name:>14}  " + "  ".join(
                f"{k} {'-' if v is None else f'{v:.3f}'}" for k, v in r.as_row().items()))
    elif cmd == "bench":
        cmd_bench(cfg, args.out, args.checkpoint, args.preset, args.frames, args.repetitions)
        print((Path(args.out) / "bench" / "summary.txt").read_text(), end="")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"angioseg: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        limit = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
        with limit:
            run(args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"angioseg: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"angioseg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, nnet.ChecksumError, nnet.ConfigMismatchError, ImageFormatError,
            FileNotFoundError, ValueError, OSError) as e:
        print(f"angioseg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
