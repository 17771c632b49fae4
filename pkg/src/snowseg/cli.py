"""Batch command-line interface: train, eval, predict and bench.

Exit codes are a stable scripting contract: 0 on success, 1 for runtime or
data errors, 2 for usage and configuration errors. The environment variable
SNOWSEG_THREADS caps internal parallelism (0 or unset means one worker per
CPU); evaluation fans out over images with one confusion matrix per worker,
merged at the end.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import ClassTable, load_dataset, load_manifest, load_sample, resize_nearest, resize_sample
from .errors import ConfigurationError, DataError, EvaluationError, ParseError, SnowsegError
from .fcn8 import ModelConfig, build_fcn8, forward, init_parameters, load_parameters, predict_labels, save_parameters
from .metrics import (
    ConfusionMatrix,
    average_seconds_per_image,
    bench_prediction,
    build_report,
    write_report,
    write_report_json,
)
from .trainer import TrainConfig, TrainLog, preset, run_training


@dataclass(frozen=True)
class Palette:
    """Class-ID to RGB mapping used to colorize prediction masks."""

    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not self.colors:
            raise ConfigurationError("palette must not be empty")
        for color in self.colors:
            if len(color) != 3 or any(not 0 <= v <= 255 for v in color):
                raise ConfigurationError(f"palette color {color} is not an RGB byte triple")

    def __len__(self) -> int:
        return len(self.colors)

    @staticmethod
    def default() -> "Palette":
        text = resources.files("snowseg").joinpath("data/palette.txt").read_text("utf-8")
        return Palette.parse(text, source="<default>")

    @staticmethod
    def load(path) -> "Palette":
        return Palette.parse(Path(path).read_text("utf-8"), source=str(path))

    @staticmethod
    def parse(text: str, source: str = "<string>") -> "Palette":
        colors: list[tuple[int, int, int]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{source}:{lineno}: expected 'id<TAB>r<TAB>g<TAB>b'")
            try:
                cid, r, g, b = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"{source}:{lineno}: non-integer palette entry")
            if cid != len(colors):
                raise ParseError(f"{source}:{lineno}: palette ids must run 0..C-1 in order")
            colors.append((r, g, b))
        return Palette(tuple(colors))

    def colorize(self, label: np.ndarray) -> np.ndarray:
        """(h, w) class IDs to (h, w, 3) uint8 RGB."""
        label = np.asarray(label)
        if label.size and (label.min() < 0 or label.max() >= len(self)):
            raise DataError(f"label map contains ids outside [0, {len(self)})")
        lut = np.array(self.colors, dtype=np.uint8)
        return lut[label]

    def invert(self, rgb: np.ndarray) -> np.ndarray:
        """Recover class IDs from a colorized mask; requires distinct colors."""
        lookup = {color: cid for cid, color in enumerate(self.colors)}
        if len(lookup) != len(self.colors):
            raise ConfigurationError("palette colors are not distinct; cannot invert")
        flat = rgb.reshape(-1, 3)
        out = np.empty(flat.shape[0], dtype=np.int64)
        for i, px in enumerate(map(tuple, flat)):
            if px not in lookup:
                raise DataError(f"color {px} is not in the palette")
            out[i] = lookup[px]
        return out.reshape(rgb.shape[:2])


def thread_budget() -> int:
    raw = os.environ.get("SNOWSEG_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"SNOWSEG_THREADS must be an integer, got {raw!r}")
    if value < 0:
        raise ConfigurationError(f"SNOWSEG_THREADS must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


# flat key = value config schema; one file drives model, data and trainer
_CONFIG_PARSERS = {
    "num_classes": int,
    "width_scale": Fraction,
    "input_h": int,
    "input_w": int,
    "seed": int,
    "learn_upsampling": None,  # bool, handled below
    "train_manifest": str,
    "val_manifest": str,
    "classes": str,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "momentum": float,
    "eval_every": int,
}


def parse_config(path) -> dict:
    """Parse 'key = value' lines; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_PARSERS:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"{path}:{lineno}: duplicate config key {key!r}")
        if key == "learn_upsampling":
            if value.lower() not in ("true", "false"):
                raise ConfigurationError(f"{path}:{lineno}: {key} must be true or false")
            values[key] = value.lower() == "true"
            continue
        try:
            values[key] = _CONFIG_PARSERS[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {exc}")
    # manifest and class-table paths resolve against the config file
    for key in ("train_manifest", "val_manifest", "classes"):
        if key in values:
            values[key] = path.parent / values[key]
    return values


def _model_config(values: dict, seed_override: int | None = None) -> ModelConfig:
    kwargs = {k: values[k] for k in
              ("num_classes", "width_scale", "input_h", "input_w", "seed", "learn_upsampling")
              if k in values}
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return ModelConfig(**kwargs)


def _train_config(values: dict, preset_name: str | None,
                  seed_override: int | None) -> TrainConfig:
    overrides = {k: values[k] for k in ("lr", "momentum", "eval_every") if k in values}
    seed = seed_override if seed_override is not None else values.get("seed", 0)
    overrides["seed"] = seed
    if preset_name is not None:
        return preset(preset_name, **overrides)
    for key in ("batch_size", "epochs"):
        if key not in values:
            raise ConfigurationError(f"config must set {key} (or pass --preset)")
    return TrainConfig(batch_size=values["batch_size"], epochs=values["epochs"], **overrides)


def _class_table(path_flag, config_values: dict | None = None) -> ClassTable:
    if path_flag:
        return ClassTable.load(path_flag)
    if config_values and "classes" in config_values:
        return ClassTable.load(config_values["classes"])
    return ClassTable.default()


def _load_model(args) -> tuple:
    values = parse_config(args.config) if args.config else {}
    graph, params = load_parameters(
        args.model,
        input_h=values.get("input_h", 224),
        input_w=values.get("input_w", 384),
        learn_upsampling=values.get("learn_upsampling", True),
    )
    return graph, params


def _graph_for_size(graph, h: int, w: int):
    """The same weights run at any legal size; rebuild the graph metadata."""
    if (graph.config.input_h, graph.config.input_w) == (h, w):
        return graph
    return build_fcn8(replace(graph.config, input_h=h, input_w=w))


def _predict_native(graph, params, image: np.ndarray) -> np.ndarray:
    """Predict a label map for one (1, 3, h, w) image at its own size."""
    h, w = image.shape[2:]
    sized = _graph_for_size(graph, h, w)
    return predict_labels(forward(sized, params, image))[0]


def cmd_train(args) -> int:
    values = parse_config(args.config)
    model_cfg = _model_config(values, args.seed)
    train_cfg = _train_config(values, args.preset, args.seed)
    table = _class_table(args.classes, values)

    for key in ("train_manifest", "val_manifest"):
        if key not in values:
            raise ConfigurationError(f"config must set {key}")
    train_manifest = load_manifest(values["train_manifest"], "train")
    val_manifest = load_manifest(values["val_manifest"], "val")
    if not train_manifest.entries or not val_manifest.entries:
        raise DataError("training and validation manifests must be non-empty")

    train_set = load_dataset(train_manifest, table, model_cfg.input_h, model_cfg.input_w)
    val_set = load_dataset(val_manifest, table, model_cfg.input_h, model_cfg.input_w)

    graph = build_fcn8(model_cfg)
    params = init_parameters(graph)
    params, log = run_training(graph, params, train_set, val_set, train_cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.snwseg"
    log_path = out_dir / "train_log.csv"
    save_parameters(graph, params, model_path)
    log.save(log_path)
    last = log.entries[-1]
    print(
        f"trained {train_cfg.epochs} epochs (batch {train_cfg.batch_size}): "
        f"train_loss={last.train_loss:.4f} train_acc={last.train_acc:.4f} "
        f"val_loss={last.val_loss:.4f} val_acc={last.val_acc:.4f} "
        f"model={model_path} log={log_path}"
    )
    return 0


def _eval_entry(entry, table, graph, params, oracle: bool) -> ConfusionMatrix:
    image, gt = load_sample(entry, table)
    cm = ConfusionMatrix(len(table))
    if oracle:
        return cm.accumulate(gt, gt)
    h, w = gt.shape
    if h % 32 == 0 and w % 32 == 0:
        pred = _predict_native(graph, params, image)
    else:
        cfg = graph.config
        small, _ = resize_sample(image, gt, cfg.input_h, cfg.input_w)
        pred_small = _predict_native(graph, params, small)
        pred = resize_nearest(pred_small, h, w)
    return cm.accumulate(gt, pred)


def cmd_eval(args) -> int:
    if bool(args.model) == bool(args.oracle):
        raise ConfigurationError("eval needs exactly one of --model or --oracle")
    table = _class_table(args.classes)
    manifest = load_manifest(args.manifest, "test")
    if not manifest.entries:
        raise EvaluationError(f"manifest {args.manifest} is empty; nothing to evaluate")
    graph = params = None
    if args.model:
        graph, params = _load_model(args)
        if graph.config.num_classes != len(table):
            raise ConfigurationError(
                f"model has {graph.config.num_classes} classes, table has {len(table)}")

    workers = thread_budget()
    if workers > 1 and len(manifest.entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(
                lambda e: _eval_entry(e, table, graph, params, args.oracle),
                manifest.entries))
    else:
        shards = [_eval_entry(e, table, graph, params, args.oracle)
                  for e in manifest.entries]
    total = shards[0]
    for shard in shards[1:]:
        total = total.merge(shard)

    report = build_report(total, table)
    out = Path(args.out)
    write_report(report, out)
    write_report_json(report, out.with_suffix(".json"))
    print(f"mean_iou={report.mean_iou!r} pixel_accuracy={report.pixel_accuracy!r} "
          f"report={out}")
    return 0


def cmd_predict(args) -> int:
    graph, params = _load_model(args)
    palette = Palette.load(args.palette) if args.palette else Palette.default()
    if len(palette) < graph.config.num_classes:
        raise ConfigurationError(
            f"palette has {len(palette)} colors for {graph.config.num_classes} classes")

    with Image.open(args.image) as img:
        if img.mode != "RGB":
            raise DataError(f"{args.image}: expected an 8-bit RGB image, got {img.mode!r}")
        rgb = np.asarray(img, dtype=np.float64) / 255.0
    image = np.ascontiguousarray(rgb.transpose(2, 0, 1)[None])
    h, w = image.shape[2:]
    if h % 32 != 0 or w % 32 != 0:
        cfg = graph.config
        print(
            f"note: input {w}x{h} is not a multiple of 32; resizing to "
            f"{cfg.input_w}x{cfg.input_h}",
            file=sys.stderr,
        )
        from .dataset import resize_bilinear

        image = resize_bilinear(image, cfg.input_h, cfg.input_w)
    pred = _predict_native(graph, params, image)

    Image.fromarray(palette.colorize(pred), mode="RGB").save(args.out)
    if args.raw:
        Image.fromarray(pred.astype(np.uint8), mode="L").save(args.raw)
    print(f"mask={args.out}" + (f" raw={args.raw}" if args.raw else ""))
    return 0


def cmd_bench(args) -> int:
    graph, params = _load_model(args)
    table = _class_table(args.classes)
    manifest = load_manifest(args.manifest, "test")
    if not manifest.entries:
        raise EvaluationError(f"manifest {args.manifest} is empty; nothing to benchmark")

    # everything but the forward pass happens outside the timed region
    images = []
    for entry in manifest.entries:
        image, gt = load_sample(entry, table)
        h, w = image.shape[2:]
        if h % 32 != 0 or w % 32 != 0:
            image, _ = resize_sample(image, gt, graph.config.input_h, graph.config.input_w)
        _graph_for_size(graph, *image.shape[2:])  # build outside timing
        images.append(image)

    times, mean = bench_prediction(lambda img: _predict_native(graph, params, img), images)
    for entry, t in zip(manifest.entries, times):
        print(f"{entry[0].name} {t:.6f}")
    print(f"mean_s_per_pic={mean!r}")

    if args.out:
        out = Path(args.out)
        lines = ["image,seconds"]
        lines += [f"{entry[0].name},{t!r}" for entry, t in zip(manifest.entries, times)]
        lines.append(f"mean_s_per_pic,{mean!r}")
        out.write_text("\n".join(lines) + "\n", "utf-8")
        import json

        doc = {
            "times": [
                {"image": entry[0].name, "seconds": t}
                for entry, t in zip(manifest.entries, times)
            ],
            "mean_s_per_pic": mean,
        }
        out.with_suffix(".json").write_text(json.dumps(doc, indent=2) + "\n", "utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snowseg",
        description="Semantic segmentation for snowy street scenes: "
                    "train, evaluate, predict and benchmark an FCN-8.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", required=True, help="key = value config file")
    train.add_argument("--out", default=".", help="output directory")
    train.add_argument("--preset", help="training regime preset (bs17e70, bs2e70, bs1e7)")
    train.add_argument("--seed", type=int, help="override init and shuffle seed")
    train.add_argument("--classes", help="class table file (default: shipped 20-class table)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a model over a manifest")
    ev.add_argument("--model", help="parameter file from train")
    ev.add_argument("--oracle", action="store_true",
                    help="score the ground truth against itself (metrics self-test)")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--classes")
    ev.add_argument("--out", required=True, help="report CSV path (JSON written alongside)")
    ev.add_argument("--config", help="config file supplying the model input size")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_eval)

    pred = sub.add_parser("predict", help="write a colorized mask for one image")
    pred.add_argument("--model", required=True)
    pred.add_argument("--image", required=True)
    pred.add_argument("--out", required=True, help="RGB mask PNG path")
    pred.add_argument("--raw", help="also write the raw class-ID PNG here")
    pred.add_argument("--palette", help="palette file (default: shipped palette)")
    pred.add_argument("--config", help="config file supplying the model input size")
    pred.add_argument("--seed", type=int)
    pred.set_defaults(func=cmd_predict)

    bench = sub.add_parser("bench", help="time single-image prediction over a manifest")
    bench.add_argument("--model", required=True)
    bench.add_argument("--manifest", required=True)
    bench.add_argument("--classes")
    bench.add_argument("--out", help="times CSV path (JSON written alongside)")
    bench.add_argument("--config", help="config file supplying the model input size")
    bench.add_argument("--seed", type=int)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"snowseg: configuration error: {exc}", file=sys.stderr)
        return 2
    except SnowsegError as exc:
        print(f"snowseg: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"snowseg: i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
