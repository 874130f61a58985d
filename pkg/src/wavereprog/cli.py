"""Command-line entry point: toy data, synthesis, training, evaluation, restoration.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 training divergence.
"""
import argparse
import logging
import sys
from pathlib import Path

import torch

from . import config as rc
from .backbone import build_backbone, load_pretrained
from .checkpoint import read_checkpoint
from .degradations import (KINDS, load_manifest, parse_spec, parse_specs, read_image,
                           synth_dataset, write_image, write_toy_images)
from .errors import ConfigError, DivergenceError, ManifestError, WaveReprogError
from .evaluation import row_label, run_protocol
from .init import INIT_METHODS
from .model import WAVE_COMPONENTS, build_model, restore
from .training import load_model, train, train_backbone

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("wavereprog")


def _kinds(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise ConfigError(f"unknown degradation kind {unknown[0]!r}; valid kinds: {', '.join(KINDS)}")
    return kinds


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _set(tree, dotted, value):
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    node = tree
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _overrides(args, mapping):
    tree = {}
    for attr, dotted in mapping.items():
        _set(tree, dotted, getattr(args, attr, None))
    return tree


def _finish_config(args, mapping):
    cfg = rc.load_config(args.config, _overrides(args, mapping))
    if cfg["train"]["single_stream"]:
        torch.set_num_threads(1)
    return cfg


# ---------------------------------------------------------------- toy

def cmd_toy(args):
    paths = write_toy_images(args.out, args.n, args.size, args.seed)
    print(f"wrote {len(paths)} toy images to {args.out}")
    return args.out


# ---------------------------------------------------------------- synth

SYNTH_ARGS = {"clean": "synth.clean_dir", "specs": "synth.specs", "out": "out", "seed": "seed"}


def cmd_synth(args):
    if args.kinds is not None:
        args.specs = [s.strip() for s in args.kinds.split(",") if s.strip()]
    cfg = _finish_config(args, SYNTH_ARGS)
    syn = cfg["synth"]
    if not syn["clean_dir"]:
        raise ConfigError("synth needs a clean image directory (--clean)")
    if not syn["specs"]:
        raise ConfigError(f"synth needs at least one degradation (--kinds); valid kinds: "
                          f"{', '.join(KINDS)}")
    specs = parse_specs(",".join(syn["specs"]))
    manifest = synth_dataset(syn["clean_dir"], specs, cfg["out"], cfg["seed"])
    rc.write_resolved(cfg, cfg["out"])
    path = Path(cfg["out"]) / "manifest.tsv"
    # entries carry resolved (sampled) params, so group by the per-spec folder
    print(path)
    for si, spec in enumerate(specs):
        sub = f"{si:02d}_{spec.label}/"
        n = sum(1 for e in manifest if str(e.degraded).startswith(sub))
        print(f"  {spec.label}: {n} pairs")
    return path


# ---------------------------------------------------------------- train

TRAIN_ARGS = {
    "out": "out", "seed": "seed", "mode": "mode",
    "manifest": "data.manifest", "clean": "data.clean_dir", "protocol": "data.protocol",
    "kinds": "data.kinds", "toy_images": "data.toy_images", "toy_size": "data.toy_size",
    "epochs": "train.epochs", "patch": "train.patch", "batch_size": "train.batch_size",
    "lr": "train.lr0", "frozen": "train.frozen_backbone",
    "checkpoint_every": "train.checkpoint_every", "single_stream": "train.single_stream",
    "backbone": "backbone.checkpoint", "init": "backbone.init",
    "n_mlp": "model.n_mlp", "wave_components": "model.wave_components",
    "extractor": "loss.extractor_kind",
}


def _training_manifest(cfg):
    data, kinds, out = cfg["data"], cfg["data"]["kinds"], Path(cfg["out"])
    if data["manifest"]:
        manifest = load_manifest(data["manifest"])
        missing = [k for k in kinds if k not in manifest.kinds]
        if missing:
            raise ManifestError(f"{data['manifest']} has no pairs of kind(s): {', '.join(missing)}")
        return manifest.filter(kinds)
    clean_dir = data["clean_dir"]
    if not clean_dir:
        clean_dir = out / "data" / "clean-source"
        write_toy_images(clean_dir, data["toy_images"], data["toy_size"], cfg["seed"])
    return synth_dataset(clean_dir, [parse_spec(k) for k in kinds], out / "data", cfg["seed"])


def _backbone(cfg):
    b = cfg["backbone"]
    frozen = cfg["train"]["frozen_backbone"]
    if b["checkpoint"]:
        return load_pretrained(b["checkpoint"], frozen=frozen)
    return build_backbone(b["name"], rc.res12_config(cfg), b["init"], b["seed"], frozen)


def cmd_train(args):
    if args.kinds is not None:
        args.kinds = _kinds(args.kinds)
    cfg = _finish_config(args, TRAIN_ARGS)
    out = Path(cfg["out"])
    rc.write_resolved(cfg, out)
    tcfg, lcfg = rc.train_config(cfg), rc.loss_config(cfg)
    manifest = _training_manifest(cfg)
    backbone = _backbone(cfg)
    name = "-".join(cfg["data"]["kinds"])
    if cfg["mode"] == "backbone":
        result = train_backbone(backbone, manifest, tcfg, lcfg, out, f"backbone-{name}")
    else:
        model = build_model(backbone, frozen=tcfg.frozen_backbone, patch_size=tcfg.patch,
                            seed=cfg["seed"], **cfg["model"])
        result = train(model, manifest, tcfg, lcfg, out, f"reprog-{name}")
    last = result.history[-1]["mean_total"] if result.history else float("nan")
    print(result.checkpoint_path)
    print(result.loss_csv)
    print(f"epochs {result.epochs_run}, final mean loss {last:.6f}")
    return result.checkpoint_path


# ---------------------------------------------------------------- eval

EVAL_ARGS = {
    "out": "out", "checkpoints": "eval.checkpoints", "test_manifest": "eval.test_manifest",
    "train_kinds": "eval.train_kinds", "protocol": "eval.protocol",
    "per_image_log": "eval.per_image_log", "tests": "eval.tests", "tiling": "inference.tiling",
    "overlap": "inference.overlap", "metric_space": "inference.metric_space",
}


def _parse_tests(items):
    tests = {}
    for item in items or ():
        kind, sep, path = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"--test expects KIND=MANIFEST, got {item!r}")
        _kinds(kind)
        tests[kind] = path
    return tests


def _load_evaluable(path):
    """A reprogramming checkpoint becomes a model; a backbone checkpoint its handle."""
    meta, _ = read_checkpoint(path)
    if meta.get("kind") == "backbone":
        return load_pretrained(path), meta
    model = load_model(path)
    return model, model.metadata


def cmd_eval(args):
    if args.train_kinds is not None:
        args.train_kinds = _kinds(args.train_kinds)
    args.tests = _parse_tests(args.test) or None
    cfg = _finish_config(args, EVAL_ARGS)
    ev, inf = cfg["eval"], cfg["inference"]
    if not ev["checkpoints"]:
        raise ConfigError("eval needs at least one checkpoint (--checkpoint)")
    test_manifests = {}
    if ev["test_manifest"]:
        test_manifests.update(load_manifest(ev["test_manifest"]).by_kind())
    for kind, path in ev["tests"].items():
        test_manifests[kind] = load_manifest(path)
    missing = [k for k in KINDS if k not in test_manifests]
    if missing:
        raise ManifestError(f"no test manifest for kind(s): {', '.join(missing)}")

    runs, seen, protocol = [], set(), ev["protocol"]
    for path in ev["checkpoints"]:
        model, meta = _load_evaluable(path)
        kinds = ev["train_kinds"] or (meta.get("train_config") or {}).get("train_kinds")
        if not kinds:
            raise ConfigError(f"{path} records no train kinds; pass --train-kinds")
        protocol = protocol or len(kinds)
        label = row_label(kinds)
        if label in seen:
            label = f"{label} ({Path(path).stem})"
        seen.add(label)
        runs.append((tuple(kinds), model, label))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(cfg, out)
    report = run_protocol(protocol, runs, test_manifests, inf["tiling"], inf["overlap"],
                          inf["metric_space"],
                          out / "per_image.jsonl" if ev["per_image_log"] else None)
    report.metadata["checkpoints"] = list(ev["checkpoints"])
    csv_path, txt_path = report.write(out)
    print(report.to_text("psnr"), end="")
    print(csv_path)
    print(txt_path)
    return csv_path, txt_path


# ---------------------------------------------------------------- restore

RESTORE_ARGS = {"checkpoint": "restore.checkpoint", "inputs": "restore.inputs", "out": "out",
                "tiling": "inference.tiling", "overlap": "inference.overlap"}


def cmd_restore(args):
    cfg = _finish_config(args, RESTORE_ARGS)
    rs, inf = cfg["restore"], cfg["inference"]
    if not rs["checkpoint"] or not rs["inputs"]:
        raise ConfigError("restore needs --checkpoint and at least one --input")
    model, _ = _load_evaluable(rs["checkpoint"])
    out = Path(cfg["out"])
    single_file = out.suffix.lower() == ".png"
    if single_file and len(rs["inputs"]) > 1:
        raise ConfigError("--out names a single PNG but several inputs were given")
    out_dir = out.parent if single_file else out
    written = []
    for src in rs["inputs"]:
        image = read_image(src)
        restored = restore(model, image, tiling=inf["tiling"], overlap=inf["overlap"])
        dest = out if single_file else out_dir / f"{Path(src).stem}.png"
        write_image(dest, restored)
        written.append(dest)
        print(dest)
    rc.write_resolved(cfg, out_dir)
    return written


# ---------------------------------------------------------------- schema

def cmd_schema(args):
    print(rc.schema_json())


def build_parser():
    parser = argparse.ArgumentParser(
        prog="wavereprog",
        description="Reprogram a frozen restoration network with wave-function transforms.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 divergence",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="write synthetic clean images")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("synth", help="degrade clean images and write a pair manifest")
    p.add_argument("--config")
    p.add_argument("--clean", help="directory of clean images")
    p.add_argument("--kinds", help="comma list such as noise:25,blur:5,haze")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth, specs=None)

    p = sub.add_parser("train", help="train transforms (or a bare backbone)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("reprogram", "backbone"))
    p.add_argument("--manifest", help="pair manifest; toy data is synthesized when omitted")
    p.add_argument("--clean", help="clean image directory to degrade on the fly")
    p.add_argument("--protocol", type=int, choices=(1, 2))
    p.add_argument("--kinds", help="training degradation kind(s), comma separated")
    p.add_argument("--toy-images", type=int)
    p.add_argument("--toy-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--frozen", dest="frozen", action="store_true", default=None,
                       help="keep backbone weights fixed (default)")
    group.add_argument("--finetune", dest="frozen", action="store_false",
                       help="update the backbone together with the transforms")
    p.add_argument("--backbone", help="pretrained backbone or reprogramming checkpoint")
    p.add_argument("--init", choices=INIT_METHODS, help="initializer for an untrained backbone")
    p.add_argument("--n-mlp", type=int)
    p.add_argument("--wave-components", choices=WAVE_COMPONENTS)
    p.add_argument("--extractor", choices=("fixed-random", "pretrained-vgg16"))
    stream = p.add_mutually_exclusive_group()
    stream.add_argument("--single-stream", dest="single_stream", action="store_true",
                        default=None, help="single-threaded deterministic data path (default)")
    stream.add_argument("--multi-thread", dest="single_stream", action="store_false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation protocol over all five test kinds")
    p.add_argument("--config")
    p.add_argument("--checkpoint", dest="checkpoints", action="append")
    p.add_argument("--test", action="append", metavar="KIND=MANIFEST")
    p.add_argument("--test-manifest", help="one manifest holding every test kind")
    p.add_argument("--train-kinds", help="override the train kinds stored in checkpoints")
    p.add_argument("--protocol", type=int, choices=(1, 2))
    p.add_argument("--tiling", type=_on_off)
    p.add_argument("--overlap", type=int)
    p.add_argument("--metric-space", choices=("rgb", "y"))
    p.add_argument("--per-image-log", action="store_true", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("restore", help="restore images of any size with a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--input", dest="inputs", action="append")
    p.add_argument("--out")
    p.add_argument("--tiling", type=_on_off)
    p.add_argument("--overlap", type=int)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("schema", help="print the JSON schema of run configs")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"diagnostic checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except WaveReprogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
