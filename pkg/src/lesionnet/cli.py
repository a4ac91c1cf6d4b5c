"""Command-line entry point: ``lesionnet <command> [flags]``.

Settings resolve in three layers: built-in defaults, a flat ``key=value``
file given with ``--config``, then command-line flags.  Every command writes
``run-meta.txt`` into its output directory; that file is itself a valid
``--config`` input and reproduces the run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import metrics as MT
from . import model as M
from . import training as TR
from .errors import ConfigError, LesionNetError, UsageError, ValidationError
from .gradcam import compute_gradcam, render_overlay

RUN_META = "run-meta.txt"

# key -> (default, parser).  Values stay strings until resolved.
DEFAULTS = {
    "seed": "0",
    "epochs": "10",
    "batch_size": "16",
    "lr": "0.05",
    "momentum": "0.9",
    "weight_decay": "0.0001",
    "class_weighting": "inverse-frequency",
    "augment": "true",
    "rotation_max": "0.25",
    "zoom_max": "0.25",
    "contrast": "0.9:1.1",
    "brightness": "0.9:1.1",
    "saturation": "0.9:1.1",
    "input_size": "3x32x32",
    "stages": M.format_stages(M.DESK_STAGES),
    "activation": "gelu",
    "test_per_group": "100",
    "val_fraction": "0.2",
    "split": "test",
    "map3": "false",
    "plots": "false",
    "count": "5",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def format_config(settings: dict) -> str:
    return "".join(f"{k}={settings[k]}\n" for k in sorted(settings))


def _bool(key: str, v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _num(key: str, v: str, kind=float):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from None


def _range(key: str, v: str) -> tuple:
    lo, sep, hi = v.partition(":")
    if not sep:
        raise ConfigError(f"{key}: expected lo:hi, got {v!r}")
    return (_num(key, lo), _num(key, hi))


def _size(v: str) -> tuple:
    parts = v.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"input_size: expected CxHxW, got {v!r}")
    return tuple(_num("input_size", p, int) for p in parts)


class Settings:
    """Resolved string settings with typed accessors."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def int(self, key):
        return _num(key, self.values[key], int)

    def float(self, key):
        return _num(key, self.values[key])

    def bool(self, key):
        return _bool(key, self.values[key])

    def path(self, key, must_exist=True) -> Path:
        v = self.values.get(key)
        if not v:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        p = Path(v)
        if must_exist and not p.exists():
            raise ValidationError(f"{key}: {p} does not exist")
        return p

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            input_size=_size(self["input_size"]),
            stages=M.parse_stages(self["stages"]),
            num_classes=len(MT.CLASSES_7),
            seed=self.int("seed"),
            activation=self["activation"],
        ).validate()

    def augment_config(self) -> Optional[D.AugmentationConfig]:
        if not self.bool("augment"):
            return None
        return D.AugmentationConfig(
            rotation_max=self.float("rotation_max"),
            contrast=_range("contrast", self["contrast"]),
            brightness=_range("brightness", self["brightness"]),
            zoom_max=self.float("zoom_max"),
            saturation=_range("saturation", self["saturation"]),
            seed=self.int("seed"),
        ).validate()

    def train_config(self, checkpoint_path=None) -> TR.TrainConfig:
        return TR.TrainConfig(
            epochs=self.int("epochs"),
            batch_size=self.int("batch_size"),
            learning_rate=self.float("lr"),
            momentum=self.float("momentum"),
            weight_decay=self.float("weight_decay"),
            seed=self.int("seed"),
            checkpoint_path=checkpoint_path,
            class_weighting=self["class_weighting"],
            augment=self.augment_config(),
        ).validate()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lesionnet", description="Hybrid conv/attention lesion classifier.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text, *flags):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        for f in flags:
            f(sp)
        return sp

    manifest = lambda sp: sp.add_argument("--manifest")
    checkpoint = lambda sp: sp.add_argument("--checkpoint")
    images = lambda sp: sp.add_argument("--image", action="append", help="image file (repeatable)")

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)

    def eval_flags(sp):
        sp.add_argument("--map3", action="store_const", const="true", help="fold into the 3-class grouping")
        sp.add_argument("--split", help="manifest split to evaluate (default test)")
        sp.add_argument("--plots", action="store_const", const="true", help="also write PNG plots")
        sp.add_argument("--batch-size", type=int)

    command("split", "assign test/train/val splits in place", manifest)
    command("train", "fit a model on the train split", manifest, checkpoint, train_flags)
    command("eval", "report metrics for a checkpoint", manifest, checkpoint, eval_flags)
    command("predict", "class probabilities per image", manifest, checkpoint, images)
    gc = command("gradcam", "Grad-CAM overlay per image", checkpoint, images)
    gc.add_argument("--target", help="class name or index (default: predicted class)")
    ap = command("augment-preview", "write augmented variants of one image", images)
    ap.add_argument("-n", dest="count", type=int, help="number of variants")
    return p


def resolve(args: argparse.Namespace) -> Settings:
    values = dict(DEFAULTS)
    if args.config:
        file_values = read_config(args.config)
        file_values.pop("command", None)
        unknown = sorted(set(file_values) - set(DEFAULTS) - {"manifest", "checkpoint", "out", "image", "target"})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values.update(file_values)
    for key, v in vars(args).items():
        if key in ("command", "config") or v is None:
            continue
        values[key] = ";".join(v) if isinstance(v, list) else str(v)
    values["command"] = args.command
    return Settings(values)


def _out_dir(s: Settings) -> Path:
    out = Path(s.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(s: Settings, out: Path, keys: Sequence[str]):
    """Record every setting the command consumed (paths stay as given)."""
    meta = {k: s[k] for k in keys if s.get(k) is not None}
    meta["command"] = s["command"]
    MT.write_text(out / RUN_META, format_config(meta))


def _images(s: Settings) -> list:
    raw = s.get("image")
    if not raw:
        raise UsageError("--image is required")
    paths = [Path(p) for p in raw.split(";")]
    for p in paths:
        if not p.exists():
            raise ValidationError(f"image {p} does not exist")
    return paths


def _load_split(s: Settings, config: M.ModelConfig, split: str) -> list:
    path = s.path("manifest")
    manifest = D.load_manifest(path)
    return D.load_samples(manifest.subset(split), MT.CLASSES_7, config.input_size, path.parent)


_MODEL_KEYS = ("input_size", "stages", "activation")
_AUG_KEYS = ("augment", "rotation_max", "zoom_max", "contrast", "brightness", "saturation")


def cmd_split(s: Settings) -> None:
    path = s.path("manifest")
    manifest = D.assign_splits(
        D.load_manifest(path), s.int("test_per_group"), s.float("val_fraction"), s.int("seed")
    )
    manifest.save(path)
    out = _out_dir(s)
    _write_meta(s, out, ("manifest", "out", "seed", "test_per_group", "val_fraction"))
    counts = {k: len(manifest.subset(k)) for k in ("train", "val", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(s: Settings) -> None:
    config = s.model_config()
    out = _out_dir(s)
    ckpt = Path(s.get("checkpoint") or out / "model.catn")
    tc = s.train_config(str(ckpt))
    train = _load_split(s, config, "train")
    val = _load_split(s, config, "val")
    if not train:
        raise ValidationError("manifest has no train records; run `split` first")
    model = M.build_model(config)
    result = TR.fit(model, train, val, tc)
    MT.write_text(out / "train-log.csv", result.log_csv())
    _write_meta(
        s, out,
        ("manifest", "out", "checkpoint", "seed", "epochs", "batch_size", "lr", "momentum",
         "weight_decay", "class_weighting", *_MODEL_KEYS, *_AUG_KEYS),
    )
    print(f"best epoch {result.best_epoch}, loss {result.best_loss:.6f} -> {ckpt}")


def cmd_eval(s: Settings) -> None:
    model = M.load_checkpoint(s.path("checkpoint"))
    split = s["split"]
    samples = _load_split(s, model.config, split)
    if not samples:
        raise ValidationError(f"manifest has no {split!r} records")
    ev = TR.evaluate(model, D.make_batches(samples, s.int("batch_size")), MT.CLASSES_7, s.bool("map3"))
    out = _out_dir(s)
    MT.write_text(out / "report.csv", ev.report.to_csv())
    MT.write_text(out / "confusion.csv", ev.confusion.to_csv())
    for name, curve in ev.curves.items():
        MT.write_text(out / f"pr-{name}.csv", curve.to_csv())
    if s.bool("plots"):
        MT.plot_confusion(ev.confusion, out / "confusion.png")
        for name, curve in ev.curves.items():
            MT.plot_pr_curve(curve, out / f"pr-{name}.png")
    _write_meta(s, out, ("manifest", "out", "checkpoint", "seed", "split", "map3", "plots", "batch_size"))
    w = ev.report.weighted
    print(f"weighted precision {w.precision:.4f} recall {w.recall:.4f} AP {w.ap:.4f}")


def cmd_predict(s: Settings) -> None:
    model = M.load_checkpoint(s.path("checkpoint"))
    if s.get("image"):
        paths = _images(s)
        imgs = [D.resize_bilinear(D.decode_image(p), *model.config.input_size[1:]) for p in paths]
        names = [str(p) for p in paths]
    else:
        manifest_path = s.path("manifest")
        manifest = D.load_manifest(manifest_path)
        samples = D.load_samples(manifest, MT.CLASSES_7, model.config.input_size, manifest_path.parent)
        imgs = [x.image for x in samples]
        names = [r.path for r in manifest.records]
    rows = ["path," + ",".join(MT.CLASSES_7) + ",predicted\n"]
    for name, img in zip(names, imgs):
        p = M.predict_proba(model, img)
        rows.append(",".join([name, *(repr(float(v)) for v in p), MT.CLASSES_7[int(np.argmax(p))]]) + "\n")
    out = _out_dir(s)
    MT.write_text(out / "predictions.csv", "".join(rows))
    _write_meta(s, out, ("manifest", "image", "out", "checkpoint", "seed"))


def cmd_gradcam(s: Settings) -> None:
    model = M.load_checkpoint(s.path("checkpoint"))
    out = _out_dir(s)
    target = s.get("target")
    for p in _images(s):
        img = D.resize_bilinear(D.decode_image(p), *model.config.input_size[1:])
        if target is None:
            k = int(np.argmax(M.predict_proba(model, img)))
        elif target in MT.CLASSES_7:
            k = MT.CLASSES_7.index(target)
        else:
            k = _num("target", target, int)
        cam = compute_gradcam(model, img, k)
        render_overlay(cam, img, out / f"{p.stem}-gradcam.png")
        MT.write_text(out / f"{p.stem}-gradcam.csv", cam.to_csv())
    _write_meta(s, out, ("image", "out", "checkpoint", "seed", "target"))


def cmd_augment_preview(s: Settings) -> None:
    paths = _images(s)
    if len(paths) != 1:
        raise UsageError("augment-preview takes exactly one --image")
    n = s.int("count")
    if n < 1:
        raise ConfigError("-n must be at least 1")
    cfg = s.augment_config() or D.AugmentationConfig.identity(s.int("seed"))
    img = D.decode_image(paths[0])
    out = _out_dir(s)
    for i in range(n):
        D.write_png(D.augment(img, cfg, i), out / f"{paths[0].stem}-aug{i}.png")
    _write_meta(s, out, ("image", "out", "seed", "count", *_AUG_KEYS))


COMMANDS = {
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcam": cmd_gradcam,
    "augment-preview": cmd_augment_preview,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command; returns 0, 1 (invalid input) or 2 (runtime failure)."""
    try:
        args = build_parser().parse_args(argv)
        settings = resolve(args)
        COMMANDS[args.command](settings)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (LesionNetError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
