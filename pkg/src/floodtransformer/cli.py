"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 missing file, 3 undecodable file,
4 checkpoint/config mismatch.

Every command accepts ``--config FILE`` holding flat ``key=value`` lines
(``#`` starts a comment, keys are flag names). Explicit flags override the
file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import data as D
from . import trainer as TR
from .errors import CheckpointError, DecodeError, DimensionMismatch, FloodTransformerError
from .metrics import BinaryMask, aggregate, binarize, flood_capacity, score
from .model import FloodTransformer, ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DECODE, EXIT_MISMATCH = 0, 1, 2, 3, 4

log = logging.getLogger("floodtransformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str):
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ValueError(f"bad size {text!r}")


def _flag_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# command name -> defaults and required flags
COMMAND_OPTIONS: Dict[str, dict] = {
    "synth": {
        "defaults": {"count": 8, "seed": 0, "size": "32", "max_blobs": 3, "ratio": 0.1},
        "required": ("out",),
    },
    "split": {
        "defaults": {"ratio": 0.1, "seed": 0},
        "required": ("out",),
    },
    "train": {
        "defaults": {
            "steps": None, "epochs": 1000, "batch_size": 4, "lr": 1e-3, "seed": 0,
            "eval_every": 50, "augment": True, "resume": False,
            "image_size": "32", "patch_size": 8, "depth": 2, "heads": 4, "embed_dim": 32,
        },
        "required": ("manifest", "checkpoint"),
    },
    "eval": {
        "defaults": {"threshold": 0.5, "split": "test", "oracle": False},
        "required": ("manifest", "report"),
    },
    "infer": {
        "defaults": {"threshold": 0.5},
        "required": ("checkpoint", "image", "out_mask"),
    },
    "fc": {"defaults": {}, "required": ("mask",)},
}

CONVERT: Dict[str, Callable] = {
    "count": int, "seed": int, "max_blobs": int, "ratio": float, "steps": int,
    "epochs": int, "batch_size": int, "lr": float, "eval_every": int,
    "augment": _flag_bool, "resume": _flag_bool, "oracle": _flag_bool,
    "patch_size": int, "depth": int, "heads": int, "embed_dim": int,
    "threshold": float, "mask": lambda v: v if isinstance(v, list) else str(v).split(),
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="floodtransformer", description="Flood segmentation and Flood Capacity toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_, argument_default=S)
        sp.add_argument("--config", help="flat key=value file of flag overrides")
        return sp

    sp = cmd("synth", "Generate synthetic flood scenes with masks and a manifest.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--count", type=int, help="number of scenes (default 8)")
    sp.add_argument("--seed", type=int, help="base seed (default 0)")
    sp.add_argument("--size", help="H or H,W in pixels (default 32)")
    sp.add_argument("--max-blobs", type=int, help="water regions per scene, 1..N (default 3)")
    sp.add_argument("--ratio", type=float, help="test fraction of the written manifest (default 0.1)")

    sp = cmd("split", "Assign a seeded train/test split and write a manifest.")
    sp.add_argument("--manifest", help="input manifest to re-split")
    sp.add_argument("--images", help="image directory (alternative to --manifest)")
    sp.add_argument("--masks", help="mask directory, files paired with images by name")
    sp.add_argument("--ratio", type=float, help="test fraction (default 0.1)")
    sp.add_argument("--seed", type=int, help="shuffle seed (default 0)")
    sp.add_argument("--out", help="output manifest path")

    sp = cmd("train", "Train on the manifest's train split.")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint", help="path of the best-mIoU checkpoint")
    sp.add_argument("--history", help="write the training history here")
    sp.add_argument("--figure", help="render loss/mIoU curves to this image file")
    sp.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eval-every", type=int)
    sp.add_argument("--augment", type=_flag_bool, help="random flips (default true)")
    sp.add_argument("--resume", action="store_const", const=True, help="continue from --checkpoint")
    sp.add_argument("--image-size")
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--embed-dim", type=int)

    sp = cmd("eval", "Score a checkpoint on a manifest split and write a report.")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint")
    sp.add_argument("--report", help="tab-separated per-image report")
    sp.add_argument("--figure", help="render image/truth/prediction panels here")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--split", choices=("train", "test"))
    sp.add_argument("--oracle", action="store_const", const=True,
                    help="predict the ground truth itself (pipeline sanity check)")

    sp = cmd("infer", "Predict a water mask for one image and print its Flood Capacity.")
    sp.add_argument("--checkpoint")
    sp.add_argument("--image")
    sp.add_argument("--out-mask")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--figure", help="render image and predicted mask here")

    sp = cmd("fc", "Print the Flood Capacity of one or more mask files.")
    sp.add_argument("--mask", nargs="+")
    return p


def read_config_file(path) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{p}:{lineno}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def resolve_options(command: str, given: Dict[str, object]) -> Dict[str, object]:
    table = COMMAND_OPTIONS[command]
    opts = dict(table["defaults"])
    if "config" in given:
        known = set(table["defaults"]) | set(table["required"]) | _optional_keys(command)
        for k, v in read_config_file(given["config"]).items():
            if k not in known:
                raise UsageError(f"unknown key {k!r} in config file (no flag --{k.replace('_', '-')})")
            try:
                opts[k] = CONVERT.get(k, str)(v)
            except ValueError as err:
                raise UsageError(f"bad value for --{k.replace('_', '-')}: {err}") from None
    opts.update({k: v for k, v in given.items() if k != "config"})
    for k in table["required"]:
        if opts.get(k) in (None, "", []):
            raise UsageError(f"{command}: missing required flag --{k.replace('_', '-')}")
    return opts


_OPTIONAL = {
    "split": {"manifest", "images", "masks"},
    "train": {"history", "figure"},
    "eval": {"checkpoint", "figure"},
    "infer": {"figure"},
}


def _optional_keys(command: str) -> set:
    return _OPTIONAL.get(command, set())


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


# --- commands --------------------------------------------------------------


def cmd_synth(o) -> int:
    out = Path(o["out"])
    size = _size(o["size"])
    if o["count"] <= 0 or o["max_blobs"] < 1:
        raise UsageError("synth: --count and --max-blobs must be positive")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(o["seed"])
    ids = []
    width = len(str(o["count"] - 1))
    for i in range(o["count"]):
        sid = f"scene{i:0{width}d}"
        n_blobs = int(rng.integers(1, o["max_blobs"] + 1))
        scene_seed = int(rng.integers(2**31))
        s = D.synthesize_scene(scene_seed, size, n_blobs=n_blobs, id=sid)
        D.save_image(out / "images" / f"{sid}.png", s.image)
        D.save_mask(out / "masks" / f"{sid}.png", s.mask)
        ids.append(sid)
    D.split(ids, o["ratio"], o["seed"]).write(out / "manifest.tsv")
    print(f"wrote {len(ids)} scenes to {out}")
    return EXIT_OK


def _rebase(path: Path, base: Path) -> str:
    try:
        return str(path.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(path.resolve())


def cmd_split(o) -> int:
    out = Path(o["out"])
    base = out.parent
    if o.get("manifest"):
        src = D.DatasetManifest.read(_require_file(o["manifest"]))
        entries = [
            D.ManifestEntry(e.id, _rebase(src.resolve(e.image_path), base), _rebase(src.resolve(e.mask_path), base))
            for e in src.entries
        ]
    elif o.get("images") and o.get("masks"):
        img_dir, mask_dir = Path(o["images"]), Path(o["masks"])
        for d in (img_dir, mask_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"no such directory: {d}")
        entries = []
        for img in sorted(img_dir.glob("*.png")):
            mask = mask_dir / img.name
            if not mask.exists():
                raise FileNotFoundError(f"no mask for {img.name} in {mask_dir}")
            entries.append(D.ManifestEntry(img.stem, _rebase(img, base), _rebase(mask, base)))
    else:
        raise UsageError("split: give --manifest, or both --images and --masks")
    if not entries:
        raise UsageError("split: no entries found")
    manifest = D.split(entries, o["ratio"], o["seed"])
    manifest.write(out)
    print(f"train={len(manifest.train)}\ttest={len(manifest.test)}")
    return EXIT_OK


def _load_manifest(path) -> D.DatasetManifest:
    return D.DatasetManifest.read(_require_file(path))


def _load_model(path):
    try:
        return TR.load_state(_require_file(path))
    except (CheckpointError, FileNotFoundError):
        raise
    except (ValueError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: {err}") from err


def cmd_train(o) -> int:
    manifest = _load_manifest(o["manifest"])
    ckpt = Path(o["checkpoint"])
    state, history = None, []
    if o["resume"]:
        model, state = _load_model(ckpt)
        if o.get("history") and Path(o["history"]).exists():
            step = state.step if state else 0
            # records after the retained checkpoint belong to an abandoned continuation
            history = [r for r in TR.read_history(o["history"]) if r["step"] <= step]
    else:
        try:
            config = ModelConfig(
                image_size=_size(o["image_size"]), patch_size=o["patch_size"], depth=o["depth"],
                heads=o["heads"], embed_dim=o["embed_dim"], seed=o["seed"],
            )
        except (FloodTransformerError, ValueError) as err:
            raise UsageError(f"train: invalid model config: {err}") from None
        model = FloodTransformer(config)
    cfg = TR.TrainConfig(
        epochs=o["epochs"], max_steps=o["steps"], batch_size=o["batch_size"], learning_rate=o["lr"],
        eval_every=o["eval_every"], checkpoint_path=str(ckpt), augment=o["augment"], seed=o["seed"],
    )
    result = TR.fit(model, manifest, cfg, state=state, history=history)
    if not ckpt.exists():
        TR.save_state(ckpt, model, result.state)
    if o.get("history"):
        TR.write_history(o["history"], result.history)
    if o.get("figure") and result.history:
        from .plotting import history_figure

        history_figure(result.history, o["figure"])
    last = result.history[-1] if result.history else None
    if last:
        print(f"step={last['step']}\tloss={last['loss']:.6f}\tmiou={last['miou']:.6f}\tpa={last['pa']:.6f}")
    return EXIT_OK


def cmd_eval(o) -> int:
    manifest = _load_manifest(o["manifest"])
    if o["oracle"]:
        size = None
        model = None
    else:
        if not o.get("checkpoint"):
            raise UsageError("eval: missing required flag --checkpoint (or pass --oracle)")
        model, _ = _load_model(o["checkpoint"])
        size = model.config.image_size
    entries = manifest.test if o["split"] == "test" else manifest.train
    if not entries:
        raise UsageError(f"eval: manifest has no {o['split']} entries")
    samples = []
    for e in entries:
        target = size
        if target is None:
            # oracle mode scores at native resolution
            target = D.read_mask(manifest.resolve(e.mask_path)).shape
        samples.append(D.load_sample(e, target, root=manifest.root))
    if model is None:
        model = TR.CopyTruth(samples)
    threshold = o["threshold"]
    preds = [binarize(model.predict_proba(s.image), threshold) for s in samples]
    scores = [score(s.id, p, s.mask) for s, p in zip(samples, preds)]
    report = aggregate(scores)
    report.write(o["report"])
    if o.get("figure"):
        from .plotting import report_figure

        report_figure(samples, preds, scores, o["figure"])
    print(
        f"AGGREGATE\tmiou_mean={report.miou_mean:.6f}\tmiou_std={report.miou_std:.6f}"
        f"\tpa_mean={report.pa_mean:.6f}\tpa_std={report.pa_std:.6f}"
    )
    return EXIT_OK


def cmd_infer(o) -> int:
    ckpt = _require_file(o["checkpoint"])
    image_path = _require_file(o["image"])
    model, _ = _load_model(ckpt)
    image = D.read_image(image_path)
    h, w = image.shape[1:]
    th, tw = model.config.image_size
    if (h, w) != (th, tw):
        from PIL import Image

        rgb = (np.round(image.transpose(1, 2, 0) * 255)).astype(np.uint8)
        small = np.asarray(Image.fromarray(rgb).resize((tw, th), Image.BILINEAR))
        net_in = small.transpose(2, 0, 1) / 255.0
    else:
        net_in = image
    pred = binarize(model.predict_proba(net_in), o["threshold"])
    if pred.shape != (h, w):
        pred = BinaryMask.from_array(D.resize_nearest(pred.to_array(), (h, w)))
    D.save_mask(o["out_mask"], pred)
    fc = flood_capacity(pred)
    if o.get("figure"):
        from .plotting import inference_figure

        inference_figure(image, pred, fc, o["figure"])
    print(f"FC={fc:.4f}")
    return EXIT_OK


def cmd_fc(o) -> int:
    masks = [_require_file(m) for m in o["mask"]]
    for m in masks:
        print(f"{m}\t{flood_capacity(D.read_mask(m)):.4f}")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "fc": cmd_fc,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
        opts = resolve_options(ns.command, given)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return HANDLERS[ns.command](opts)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (DecodeError, DimensionMismatch) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DECODE
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except FloodTransformerError as err:
        # remaining library errors are bad arguments (ratio out of range, empty split, ...)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
