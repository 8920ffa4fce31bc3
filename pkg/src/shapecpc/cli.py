"""``shapecpc`` command line: gensynth, pretrain, finetune, probe, gridcheck, texcheck."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .imaging import (
    GridSpec,
    GridSpecError,
    default_texture_bank,
    edge_map,
    load_image,
    make_variants,
    resize,
    write_imgf,
    write_png,
)
from .sequencing import build_sequences, enumerate_anchors
from .synth import SyntheticShapesSpec, read_manifest, write_corpus
from .training import (
    classify,
    finetune,
    init_models,
    linear_probe,
    pretrain,
    restore_models,
)

GRIDCHECK_FORMAT = 1

log = logging.getLogger("shapecpc")


class CliError(Exception):
    """Reported as one JSON line on stderr with exit status 2."""

    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.payload = {"error": kind, "message": message, **extra}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat dotted keys or nested objects)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="master seed (same as --set seed=N)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads; falls back to $SCPC_THREADS, then 1")
    common.add_argument("--metrics", default=None, help="metrics JSONL path, or '-' for stdout")
    common.add_argument("--data", default=None, help="dataset manifest (CSV: path,label)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="shapecpc", description="Shape-biased contrastive patch pretraining.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gensynth", parents=[common], help="write the synthetic shapes corpus")
    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining of encoder + autoregressor")
    p = sub.add_parser("finetune", parents=[common], help="train a classifier head on a pretrained encoder")
    p.add_argument("--checkpoint", default=None, help="pretrained checkpoint (same as --set finetune.checkpoint=PATH)")
    p.add_argument("--force", action="store_true", help="load a checkpoint even if its config digest differs")
    p = sub.add_parser("probe", parents=[common], help="frozen-encoder linear probe with a held-out split")
    p.add_argument("--checkpoint", default=None, help="encoder checkpoint (same as --set probe.checkpoint=PATH)")
    p.add_argument("--force", action="store_true", help="load a checkpoint even if its config digest differs")
    p = sub.add_parser("gridcheck", parents=[common], help="print the patch grid and every anchor's sequences")
    p.add_argument("image", nargs="?", default=None, help="optional image to check against the grid")
    p = sub.add_parser("texcheck", parents=[common], help="dump texture variants of an image for inspection")
    p.add_argument("image", nargs="?", default=None, help="image file; defaults to the first manifest entry")
    return parser


def _resolve(args) -> dict:
    file_values = C.load_file(args.config) if args.config else {}
    overrides = C.parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    threads = args.threads if args.threads is not None else os.environ.get("SCPC_THREADS")
    if threads is not None:
        overrides["threads"] = str(threads)
    if getattr(args, "checkpoint", None) is not None:
        overrides[f"{args.command}.checkpoint"] = args.checkpoint
    resolved = C.resolve(file_values, overrides)
    if resolved["threads"] < 1:
        raise C.ConfigError([f"threads: must be >= 1, got {resolved['threads']}"])
    return resolved


def _out_dir(args, required: bool = True) -> Path | None:
    if args.out is None:
        if required:
            raise CliError("UsageError", f"{args.command} needs --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args) -> tuple[list[np.ndarray], list[str]]:
    if not args.data:
        raise CliError("UsageError", f"{args.command} needs --data MANIFEST")
    path = Path(args.data)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise CliError("FileNotFound", f"dataset manifest not found: {path}", path=str(path))
    images, labels = read_manifest(path)
    if not images:
        raise CliError("EmptyDataset", f"{path} lists no images", path=str(path))
    return images, labels


def _label_ids(labels: list[str], classes: int = 0) -> tuple[list[str], np.ndarray]:
    names = sorted(set(labels))
    if classes and classes != len(names):
        raise CliError("ClassCountMismatch", f"config asks for {classes} classes but the data has {len(names)}: {names}")
    lookup = {n: i for i, n in enumerate(names)}
    return names, np.array([lookup[x] for x in labels], dtype=np.int64)


def _load_ckpt(path: str, c: dict, force: bool):
    """Load ``path``; its model digest must match the resolved model config unless forced."""
    if not path:
        return None
    if not Path(path).exists():
        raise CliError("FileNotFound", f"checkpoint not found: {path}", path=path)
    expected = config_digest(C.model_config(c).to_dict())
    return load_checkpoint(path, expected_digest=expected, force=force)


@contextlib.contextmanager
def _metrics_sink(target: str | None, out: Path):
    if target == "-":
        yield sys.stdout
        return
    path = Path(target) if target else out / "metrics.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        yield fh


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# -- commands -------------------------------------------------------------------------------


def cmd_gensynth(args, c: dict) -> int:
    out = _out_dir(args)
    spec = SyntheticShapesSpec(
        classes=tuple(c["gensynth.classes"]),
        images_per_class=c["gensynth.images_per_class"],
        image_side=c["gensynth.image_side"],
        texture_randomization=c["gensynth.texture_randomization"],
        seed=c["seed"],
    )
    summary = write_corpus(spec, out)
    C.write_resolved(c, out)
    _emit({"command": "gensynth", "out": str(out), **summary})
    return 0


def cmd_pretrain(args, c: dict) -> int:
    out = _out_dir(args)
    images, _ = _dataset(args)
    cfg = C.pretrain_config(c)
    C.write_resolved(c, out)
    with _metrics_sink(args.metrics, out) as sink:
        def on_metrics(record):
            sink.write(record.to_json() + "\n")
            sink.flush()

        ckpt = pretrain(images, cfg, on_metrics=on_metrics)
    path = out / "pretrain.scpc"
    save_checkpoint(ckpt, path)
    _emit({"command": "pretrain", "checkpoint": str(path), "digest": ckpt.digest, "images": len(images)})
    return 0


def cmd_finetune(args, c: dict) -> int:
    out = _out_dir(args)
    images, labels = _dataset(args)
    names, y = _label_ids(labels, c["finetune.classes"])
    ckpt = _load_ckpt(c["finetune.checkpoint"], c, args.force)
    cfg = C.finetune_config(c, classes=len(names))
    if ckpt is not None:
        cfg = _with_checkpoint(cfg, ckpt)
    C.write_resolved(c, out)
    tuned = finetune(list(zip(images, y)), cfg)
    tuned.config["labels"] = names
    path = out / "finetune.scpc"
    save_checkpoint(tuned, path)
    accuracy = float((classify(tuned, images).argmax(1) == y).mean())
    _emit({"command": "finetune", "checkpoint": str(path), "train_accuracy": accuracy, "classes": names})
    return 0


def _with_checkpoint(cfg, ckpt):
    return dataclasses.replace(cfg, checkpoint=ckpt)


def split_indices(labels: np.ndarray, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class split: the last ``test_fraction`` of each class is held out."""
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n_test = max(1, int(round(len(idx) * test_fraction))) if len(idx) > 1 else 0
        train.extend(idx[: len(idx) - n_test])
        test.extend(idx[len(idx) - n_test:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def cmd_probe(args, c: dict) -> int:
    ckpt = _load_ckpt(c["probe.checkpoint"], c, args.force)
    out = _out_dir(args)
    images, labels = _dataset(args)
    names, y = _label_ids(labels)
    if len(names) < 2:
        raise CliError("EmptyDataset", "probing needs at least two classes")
    if ckpt is None:
        model_cfg = C.model_config(c)
        encoder, _ = init_models(model_cfg, c["seed"])
    else:
        model_cfg, encoder, _ = restore_models(ckpt)
    tr, te = split_indices(y, c["probe.test_fraction"])
    result = linear_probe(
        encoder,
        model_cfg.grid,
        [(images[i], y[i]) for i in tr],
        [(images[i], y[i]) for i in te],
        len(names),
        epochs=c["probe.epochs"],
        lr=c["probe.lr"],
        weight_decay=c["probe.weight_decay"],
        seed=c["seed"],
    )
    C.write_resolved(c, out)
    report = {"command": "probe", "checkpoint": c["probe.checkpoint"] or None, "classes": names,
              "train_size": int(len(tr)), "test_size": int(len(te)), **result}
    (out / "probe.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit(report)
    return 0


def gridcheck_lines(spec: GridSpec, k: int, direction: str) -> list[str]:
    s = spec.grid_side
    lines = [f"grid {s}x{s}", f"spec format={GRIDCHECK_FORMAT} S={spec.image_side} p={spec.patch_side} stride={spec.stride} k={k} direction={direction}"]
    anchors = enumerate_anchors(s, k, direction)
    lines.append(f"anchors {len(anchors)}")
    for a in anchors:
        train, target = build_sequences(a)
        lines.append("")
        lines.append(f"anchor {a.row} {a.col}")
        lines.append(f"train {len(train)} " + " ".join(f"{r},{q}" for r, q in train.coords))
        lines.append(f"target {len(target)} " + " ".join(f"{r},{q}" for r, q in target.coords))
    return lines


def cmd_gridcheck(args, c: dict) -> int:
    spec = C.model_config(c).grid
    if args.image:
        img = load_image(args.image)
        if img.shape[0] != img.shape[1]:
            log.info("non-square image %s is resized to %d", args.image, spec.image_side)
    k, direction = c["gridcheck.k"], c["gridcheck.direction"]
    text = "\n".join(gridcheck_lines(spec, k, direction)) + "\n"
    out = _out_dir(args, required=False)
    if out is not None:
        (out / "gridcheck.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_texcheck(args, c: dict) -> int:
    out = _out_dir(args)
    if args.image:
        if not Path(args.image).exists():
            raise CliError("FileNotFound", f"image not found: {args.image}", path=args.image)
        img = load_image(args.image)
    else:
        img = _dataset(args)[0][0]
    side = c["grid.image_side"]
    bank = default_texture_bank(c["pretrain.n_textures"], c["pretrain.texture_blend"], scale=side / 64.0)
    variants = make_variants(resize(img, side), bank)
    base_edges = edge_map(variants[0])
    files, overlaps = [], []
    for t, v in enumerate(variants):
        name = f"texture_{t}.{c['texcheck.format']}"
        (write_png if c["texcheck.format"] == "png" else write_imgf)(out / name, v)
        files.append(name)
        if t:
            edges = edge_map(v)
            overlaps.append(float((edges & base_edges).sum() / max(1, base_edges.sum())))
    C.write_resolved(c, out)
    _emit({"command": "texcheck", "out": str(out), "files": files, "edge_overlap": overlaps})
    return 0


COMMANDS = {
    "gensynth": cmd_gensynth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "gridcheck": cmd_gridcheck,
    "texcheck": cmd_texcheck,
}


def _fail(payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        c = _resolve(args)
        with threadpool_limits(limits=c["threads"]):
            return COMMANDS[args.command](args, c)
    except CliError as exc:
        return _fail(exc.payload)
    except C.ConfigError as exc:
        return _fail({"error": "ConfigError", "message": str(exc), "problems": exc.problems})
    except GridSpecError as exc:
        return _fail({"error": "GridSpecError", "message": str(exc)})
    except CheckpointError as exc:
        return _fail({"error": type(exc).__name__, "message": str(exc)})
    except (OSError, ValueError) as exc:
        return _fail({"error": type(exc).__name__, "message": str(exc)})


if __name__ == "__main__":
    sys.exit(main())
